//! Self-supervised keypoint detection with depth-to-RGB embedding
//! distillation, built on a small reverse-mode autodiff engine.
//!
//! Pipeline per image: a detector produces `K` heatmaps, soft-argmax turns
//! them into keypoints, keypoint pairs are rendered into a Gaussian edge
//! map, and a decoder reconstructs the image from a heavily grid-masked
//! copy plus the edge map under a perceptual loss. A teacher trained this
//! way on depth maps is frozen and its detector embeddings guide an RGB
//! student through a negative-cosine loss.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod kpgraph;
pub mod losses;
pub mod nets;
pub mod params;
pub mod selfcheck;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
