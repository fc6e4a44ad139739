//! DDPM forward process, the conditional denoiser and its training loop.

pub mod model;
pub mod sampler;
pub mod schedule;
pub mod text;
pub mod train;

pub use model::{in_adapter_scope, init_params, Denoiser, DenoiserConfig, Example, ADAPTER_PREFIXES};
pub use schedule::{add_noise, make_schedule, NoiseSchedule};
pub use text::Conditioning;
pub use train::{diffusion_loss, load_model, train, Draw, EpochLog, Noised, TrainConfig, TrainOutcome};
