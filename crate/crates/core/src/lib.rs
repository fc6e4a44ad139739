//! Image-text matching with a text-conditioned denoising diffusion model.

pub mod bench;
pub mod bias;
pub mod diffusion;
pub mod error;
pub mod hardneg;
pub mod itm;
pub mod kv;
pub mod numerics;
pub mod rng;
pub mod scenegen;

pub use error::{Error, Result};

/// The guide, compiled so its examples run as doc-tests.
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod chapter0 {}
    #[doc = include_str!("../../../book/src/numerics.md")]
    pub mod chapter1 {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    pub mod chapter2 {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    pub mod chapter3 {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    pub mod chapter4 {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    pub mod chapter5 {}
    #[doc = include_str!("../../../book/src/hardneg.md")]
    pub mod chapter6 {}
    #[doc = include_str!("../../../book/src/bias.md")]
    pub mod chapter7 {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod chapter8 {}
}
