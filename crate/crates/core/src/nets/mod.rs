//! Networks: keypoint detector with named embedding taps, UNet-style
//! reconstruction decoder, and the fixed perceptual feature extractor.

pub mod checkpoint;
mod decoder;
mod detector;
mod features;
mod layers;
mod model;

pub use checkpoint::{Checkpoint, RngState};
pub use decoder::DecoderModel;
pub use detector::{DetectorModel, DetectorOutput, Tap};
pub use features::{FeatureExtractor, DEFAULT_FEATURE_SEED, DEFAULT_FEATURE_WIDTHS};
pub use layers::{BatchNorm, BnState, Conv, ConvT, Ctx, Mode, BN_MOMENTUM};
pub use model::{KeypointModel, ModelConfig, PipelineOutput};
