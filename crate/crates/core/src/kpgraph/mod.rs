//! Differentiable keypoint-graph machinery: soft-argmax keypoints, Gaussian
//! edge-map rendering, grid masking and decoder-input composition.
//!
//! All spatial quantities share one coordinate convention: pixel `(i, j)`
//! (row, column) of an `H x W` map has normalized center
//! `x = (2j + 1) / W - 1`, `y = (2i + 1) / H - 1`, so keypoints produced by
//! [`soft_argmax`] feed [`render_edge_map`] without conversion.

mod edge;
mod mask;
mod softargmax;

pub use edge::{
    point_segment_distance, render_edge_map, render_edge_map_var, EdgeMap, EdgeWeights,
};
pub use mask::{compose_decoder_input, grid_mask, mask_batch, MaskPattern, GRID_CELLS, MASK_KEEP, MASK_REMOVED};
pub use softargmax::{keypoints_from_tensor, soft_argmax, soft_argmax_var, Keypoints};

/// Normalized center coordinate of pixel index `i` along an axis of `n`
/// pixels.
#[inline]
pub fn pixel_center(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}
