//! Linear-beta DDPM forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linear betas from `beta_start` to `beta_end` over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "schedule needs T > 0 and 0 < beta_start <= beta_end < 1, got T={steps}, {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bar,
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `(sqrt(alpha_bar[t]), sqrt(1 - alpha_bar[t]))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// `x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(Error::invalid(format!(
                "add_noise: x0 {:?} vs eps {:?}",
                x0.shape(),
                eps.shape()
            )));
        }
        if t >= self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [0, {})", self.steps())));
        }
        let mut out = vec![0.0; x0.len()];
        noise_into(x0.data(), eps.data(), self.coefficients(t), &mut out);
        Ok(Tensor::new(x0.shape().to_vec(), out).expect("same shape"))
    }
}

pub(crate) fn noise_into(x0: &[f64], eps: &[f64], (a, s): (f64, f64), out: &mut [f64]) {
    for ((o, x), e) in out.iter_mut().zip(x0).zip(eps) {
        *o = a * x + s * e;
    }
}

pub fn add_noise(x0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.add_noise(x0, eps, t)
}
