use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::derive_rng;
use crate::scenegen::{CHANNELS, IMAGE_SIZE};

/// One `(eps, t)` pair; `eps` is in `H x W x C` layout like images.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSample {
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Reproducible from `(n, seed)`. Entry `i` depends only on `(seed, i)`, so
/// the bank of size `m < n` with the same seed is a prefix of this one.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBank {
    pub seed: u64,
    pub samples: Vec<NoiseSample>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankSpec {
    pub n: usize,
    pub seed: u64,
}

impl BankSpec {
    pub fn id(&self) -> String {
        format!("bank-n{}-s{}", self.n, self.seed)
    }
}

pub fn make_bank(n: usize, seed: u64, schedule: &NoiseSchedule) -> Result<NoiseBank> {
    if n == 0 {
        return Err(Error::invalid("noise bank size must be at least 1"));
    }
    let samples = (0..n as u64)
        .map(|i| {
            use rand::Rng;
            let mut rng = derive_rng(seed, "noise-bank", i);
            let t = rng.random_range(0..schedule.steps());
            let eps = Tensor::randn(&[IMAGE_SIZE, IMAGE_SIZE, CHANNELS], 1.0, &mut rng).into_data();
            NoiseSample { t, eps }
        })
        .collect();
    Ok(NoiseBank { seed, samples })
}

impl NoiseBank {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn spec(&self) -> BankSpec {
        BankSpec {
            n: self.len(),
            seed: self.seed,
        }
    }

    pub fn id(&self) -> String {
        self.spec().id()
    }

    /// The nested bank of the first `n` entries.
    pub fn prefix(&self, n: usize) -> Result<NoiseBank> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!("prefix {n} of a bank of {}", self.len())));
        }
        Ok(NoiseBank {
            seed: self.seed,
            samples: self.samples[..n].to_vec(),
        })
    }
}
