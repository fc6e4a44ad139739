use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::bank::NoiseBank;
use crate::diffusion::schedule::noise_into;
use crate::diffusion::{Conditioning, Denoiser, Example, NoiseSchedule};
use crate::error::{Error, Result};
use crate::scenegen::ImageTensor;

/// Anything that yields one denoising error per bank entry for an
/// `(image, condition)` pair.
///
/// Implementations must be deterministic: the same inputs and bank give
/// bit-identical errors. `Sync` because scoring fans out across instances.
pub trait ErrorModel: Sync {
    fn entry_errors(&self, x0: &ImageTensor, cond: &Conditioning, bank: &NoiseBank) -> Result<Vec<f64>>;
}

/// A network-free noise predictor, for stubs and oracles.
pub trait NoisePredictor: Sync {
    fn predict(&self, x_t: &[f64], t: usize, cond: &Conditioning) -> Result<Vec<f64>>;
}

/// Adapts a [`NoisePredictor`] to [`ErrorModel`] by noising with the bank
/// and measuring mean squared error per entry.
pub struct ViaPredictor<P> {
    pub predictor: P,
    pub schedule: NoiseSchedule,
}

impl<P: NoisePredictor> ErrorModel for ViaPredictor<P> {
    fn entry_errors(&self, x0: &ImageTensor, cond: &Conditioning, bank: &NoiseBank) -> Result<Vec<f64>> {
        let x0 = x0.data();
        let mut x_t = vec![0.0; x0.len()];
        bank.samples
            .iter()
            .map(|s| {
                noise_into(x0, &s.eps, self.schedule.coefficients(s.t), &mut x_t);
                let pred = self.predictor.predict(&x_t, s.t, cond)?;
                Ok(mean_squared_diff(&pred, &s.eps))
            })
            .collect()
    }
}

pub fn mean_squared_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Bank entries per network batch when scoring.
pub const SCORE_CHUNK: usize = 50;

/// Scores a [`Denoiser`] under a fixed schedule.
pub struct DenoiserScorer<'a> {
    pub model: &'a Denoiser,
    pub schedule: NoiseSchedule,
}

impl<'a> DenoiserScorer<'a> {
    pub fn new(model: &'a Denoiser) -> Self {
        DenoiserScorer {
            model,
            schedule: NoiseSchedule::default(),
        }
    }
}

impl ErrorModel for DenoiserScorer<'_> {
    fn entry_errors(&self, x0: &ImageTensor, cond: &Conditioning, bank: &NoiseBank) -> Result<Vec<f64>> {
        let x0 = x0.data();
        let mut out = Vec::with_capacity(bank.len());
        for chunk in bank.samples.chunks(SCORE_CHUNK) {
            let noised: Vec<Vec<f64>> = chunk
                .iter()
                .map(|s| {
                    let mut x_t = vec![0.0; x0.len()];
                    noise_into(x0, &s.eps, self.schedule.coefficients(s.t), &mut x_t);
                    x_t
                })
                .collect();
            let examples: Vec<Example<'_>> = chunk
                .iter()
                .zip(&noised)
                .map(|(s, x_t)| Example {
                    x_t,
                    target: &s.eps,
                    t: s.t,
                    cond,
                })
                .collect();
            out.extend(self.model.errors(&examples)?);
        }
        Ok(out)
    }
}

/// Mean of the per-entry errors. Summation runs in bank order.
pub fn mean_error(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::invalid("empty noise bank"));
    }
    let m = errors.iter().sum::<f64>() / errors.len() as f64;
    if !m.is_finite() {
        return Err(Error::invalid("non-finite denoising error"));
    }
    Ok(m)
}

pub fn conditional_error(model: &dyn ErrorModel, x: &ImageTensor, w: &Conditioning, bank: &NoiseBank) -> Result<f64> {
    mean_error(&model.entry_errors(x, w, bank)?)
}

pub fn unconditional_error(model: &dyn ErrorModel, x: &ImageTensor, bank: &NoiseBank) -> Result<f64> {
    conditional_error(model, x, &Conditioning::Null, bank)
}

/// Conditional and unconditional error of one pair under one bank; lower
/// `normalized` means a better match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub conditional: f64,
    pub unconditional: f64,
    pub normalized: f64,
    pub bank_id: String,
}

impl ScoreRecord {
    pub fn new(conditional: f64, unconditional: f64, bank_id: String) -> ScoreRecord {
        ScoreRecord {
            conditional,
            unconditional,
            normalized: conditional - unconditional,
            bank_id,
        }
    }
}

pub fn score(model: &dyn ErrorModel, x: &ImageTensor, w: &Conditioning, bank: &NoiseBank) -> Result<ScoreRecord> {
    Ok(ScoreRecord::new(
        conditional_error(model, x, w, bank)?,
        unconditional_error(model, x, bank)?,
        bank.id(),
    ))
}

/// Candidate order by ascending score, ties broken by lower index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    /// Every candidate has the same score: the ranking carries no
    /// information and the first index wins by the tie rule.
    pub degenerate: bool,
}

impl Ranking {
    pub fn from_scores(scores: Vec<f64>) -> Ranking {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let degenerate = scores.windows(2).all(|w| w[0] == w[1]);
        Ranking {
            order,
            scores,
            degenerate,
        }
    }

    pub fn top(&self) -> usize {
        self.order[0]
    }

    /// 0-based position of candidate `i`.
    pub fn rank_of(&self, i: usize) -> usize {
        self.order.iter().position(|&c| c == i).expect("candidate in ranking")
    }
}

fn need_two(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid("retrieval needs at least two candidates"));
    }
    Ok(())
}

/// Rank captions for a query image by conditional error.
///
/// The unconditional error of the query is common to all captions, so this
/// order equals the order by normalized score.
pub fn text_retrieve(
    model: &dyn ErrorModel,
    x: &ImageTensor,
    captions: &[Conditioning],
    bank: &NoiseBank,
) -> Result<Ranking> {
    need_two(captions.len())?;
    let scores = captions
        .iter()
        .map(|w| conditional_error(model, x, w, bank))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ranking::from_scores(scores))
}

/// Rank images for a caption by raw conditional error.
pub fn image_retrieve_naive(
    model: &dyn ErrorModel,
    images: &[ImageTensor],
    w: &Conditioning,
    bank: &NoiseBank,
) -> Result<Ranking> {
    need_two(images.len())?;
    let scores = images
        .iter()
        .map(|x| conditional_error(model, x, w, bank))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ranking::from_scores(scores))
}

/// Rank images for a caption by conditional minus unconditional error,
/// both under the same bank.
pub fn image_retrieve_normalized(
    model: &dyn ErrorModel,
    images: &[ImageTensor],
    w: &Conditioning,
    bank: &NoiseBank,
) -> Result<Ranking> {
    need_two(images.len())?;
    let scores = images
        .iter()
        .map(|x| score(model, x, w, bank).map(|r| r.normalized))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ranking::from_scores(scores))
}

/// Posterior over candidates under a uniform prior: softmax of negated
/// errors.
pub fn class_posterior(errors: &[f64]) -> Vec<f64> {
    if errors.is_empty() {
        return Vec::new();
    }
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = errors.iter().map(|e| (-(e - min)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Conditional error of the mid-gray image per caption, per bank. The gray
/// term depends only on `(caption, bank)`, so it is computed once.
#[derive(Default)]
pub struct GrayCache {
    cache: Mutex<HashMap<(String, Conditioning), f64>>,
}

impl GrayCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn gray_error(&self, model: &dyn ErrorModel, w: &Conditioning, bank: &NoiseBank) -> Result<f64> {
        let key = (bank.id(), w.clone());
        if let Some(v) = self.cache.lock().expect("gray cache").get(&key) {
            return Ok(*v);
        }
        let v = conditional_error(model, &ImageTensor::gray(), w, bank)?;
        self.cache.lock().expect("gray cache").insert(key, v);
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.cache.lock().expect("gray cache").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rank captions by `err(x, w) - err(gray, w)`.
pub fn text_retrieve_graynorm(
    model: &dyn ErrorModel,
    x: &ImageTensor,
    captions: &[Conditioning],
    bank: &NoiseBank,
    cache: &GrayCache,
) -> Result<Ranking> {
    need_two(captions.len())?;
    let scores = captions
        .iter()
        .map(|w| Ok(conditional_error(model, x, w, bank)? - cache.gray_error(model, w, bank)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ranking::from_scores(scores))
}
