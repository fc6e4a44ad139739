//! Image-text matching by denoising error.
//!
//! Every comparison between candidates runs under one [`NoiseBank`]: the
//! same `(eps, t)` pairs for every candidate and for both the conditional
//! and the unconditional pass. Errors are mean squared error per element,
//! averaged over bank entries in bank order.

pub mod bank;
pub mod score;

pub use bank::{make_bank, BankSpec, NoiseBank, NoiseSample};
pub use score::{
    class_posterior, conditional_error, image_retrieve_naive, image_retrieve_normalized, mean_error, mean_squared_diff, score,
    text_retrieve,
    text_retrieve_graynorm, unconditional_error, DenoiserScorer, ErrorModel, GrayCache, NoisePredictor, Ranking,
    ScoreRecord, ViaPredictor,
};
