//! Ancestral DDPM sampling. A debugging aid for eyeballing what a trained
//! model has learned; nothing in scoring depends on it.

use super::model::Denoiser;
use super::schedule::NoiseSchedule;
use super::text::Conditioning;
use crate::error::Result;
use crate::numerics::Tensor;
use crate::rng::rng_from_seed;
use crate::scenegen::{ImageTensor, CHANNELS, IMAGE_SIZE};

pub fn sample(model: &Denoiser, cond: &Conditioning, schedule: &NoiseSchedule, seed: u64) -> Result<ImageTensor> {
    let mut rng = rng_from_seed(seed);
    let shape = [IMAGE_SIZE, IMAGE_SIZE, CHANNELS];
    let mut x = Tensor::randn(&shape, 1.0, &mut rng).into_data();
    for t in (0..schedule.steps()).rev() {
        let eps = model.denoise(&x, t, cond)?;
        let beta = schedule.betas[t];
        let a = 1.0 / schedule.alphas[t].sqrt();
        let c = beta / (1.0 - schedule.alpha_bar[t]).sqrt();
        let z = if t > 0 { Tensor::randn(&shape, 1.0, &mut rng).into_data() } else { vec![0.0; x.len()] };
        for ((xi, ei), zi) in x.iter_mut().zip(&eps).zip(&z) {
            *xi = a * (*xi - c * ei) + beta.sqrt() * zi;
        }
    }
    Ok(ImageTensor::from_tensor(Tensor::new(shape.to_vec(), x)?).expect("image shape"))
}
