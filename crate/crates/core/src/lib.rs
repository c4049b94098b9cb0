//! Tumor-biased latent bridge matching at desk scale.
//!
//! A drift network is trained to carry non-contrast images to contrast-enhanced
//! ones along a latent Brownian bridge. Tumor masks bias the bottleneck
//! attention and weight a boundary-focused pixel loss during training only;
//! inference sees the non-contrast image alone.

pub mod autograd;
pub mod boundary;
pub mod bridge;
pub mod codec;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod phantoms;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod tubam;

pub use boundary::{BoundaryConfig, LossNorm, WeightMap};
pub use bridge::{BridgeConfig, BridgeSample};
pub use codec::{Codec, CodecConfig, CodecKind, Latent, PretrainConfig};
pub use denoiser::{DenoiserConfig, DenoiserParams};
pub use error::{Error, Result};
pub use metrics::{ImageMetrics, MetricsReport};
pub use optim::{AdamW, AdamWConfig};
pub use params::{GradTable, ParamTable};
pub use phantoms::{PhantomPair, PhantomSpec};
pub use preprocess::NormalizeConfig;
pub use tensor::{Image, Tensor, TumorMask};
pub use trainer::{Ablation, StepReport, TrainConfig, TrainState};
pub use tubam::{AttentionConfig, LatentMask};
