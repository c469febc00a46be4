//! Toy end-to-end nowcaster: patch-token encoder regularized by the
//! stabilization loss, reconstruction decoders, and a pixel-space diffusion
//! predictor conditioned on the encoder output.

pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod model;
pub mod probe;
pub mod rollout;

#[cfg(test)]
mod tests;

pub use denoiser::{Denoiser, DenoiserConfig};
pub use diffusion::{
    ddim_sample, diffusion_loss, noise, DiffusionDraw, DiffusionLoss, DiffusionSchedule, NoisePredictor, OracleDenoiser,
    ZeroDenoiser,
};
pub use encoder::{depatchify, patchify, Decoder, Encoder, EncoderConfig, ModalityMode};
pub use model::{train, train_with, Batch, Forecaster, HareCast, LayerStats, LossWeights, ModelConfig, StepRecord, StepStats, TrainConfig};
pub use probe::{probe_variance, ProbeVariance};
pub use rollout::{rollout, ChunkPredictor};
