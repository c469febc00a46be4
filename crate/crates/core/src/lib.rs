//! Head-wise attention response energy (HARE) statistics and regularization,
//! variance-propagation bound checks, and a toy diffusion nowcaster.

pub mod archive;
pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod hare;
pub mod metrics;
pub mod nn;
pub mod nowcast;
pub mod synth;
pub mod tensor;
pub mod theory;
pub mod verify;

pub use attention::{AttentionConfig, HeadActivations, LinearHead, MultiHeadAttention};
pub use error::{Error, Result};
pub use hare::{EnergyBatch, Grouping, HareConfig, HeadPartition, MaskStrategy};
pub use metrics::{ContingencyCounts, ThresholdSet};
pub use nowcast::{HareCast, LossWeights, ModelConfig, TrainConfig};
pub use synth::{Event, EventConfig, EventSpec, FrameSequence, Modality};
pub use tensor::{SeededRng, Tensor};
