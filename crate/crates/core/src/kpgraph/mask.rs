use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of the masking grid.
pub const GRID_CELLS: usize = 16;
/// Removal fraction of grid cells.
pub const MASK_RATIO: f64 = 0.8;
/// `round(0.8 * 256)` with halves rounded up.
pub const MASK_REMOVED: usize = 205;
pub const MASK_KEEP: usize = GRID_CELLS * GRID_CELLS - MASK_REMOVED;

const _: () = assert!(MASK_REMOVED + MASK_KEEP == 256);

/// Which cells of the 16x16 grid survive masking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPattern {
    /// Row-major, `true` = kept.
    pub grid: Vec<bool>,
    pub seed: u64,
}

impl MaskPattern {
    /// Removes [`MASK_REMOVED`] cells chosen uniformly without replacement.
    pub fn from_seed(seed: u64) -> Self {
        let cells = GRID_CELLS * GRID_CELLS;
        debug_assert_eq!(MASK_REMOVED, (MASK_RATIO * cells as f64 + 0.5).floor() as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = vec![true; cells];
        for i in rand::seq::index::sample(&mut rng, cells, MASK_REMOVED) {
            grid[i] = false;
        }
        MaskPattern { grid, seed }
    }

    pub fn kept(&self) -> usize {
        self.grid.iter().filter(|&&k| k).count()
    }

    pub fn removed(&self) -> usize {
        self.grid.len() - self.kept()
    }

    /// 0/1 multiplier of shape `C x H x W`.
    pub fn pixel_mask(&self, channels: usize, height: usize, width: usize) -> Result<Vec<f64>> {
        check_divisible(height, width)?;
        let (ch, cw) = (height / GRID_CELLS, width / GRID_CELLS);
        let mut plane = vec![0.0; height * width];
        for i in 0..height {
            for j in 0..width {
                if self.grid[(i / ch) * GRID_CELLS + j / cw] {
                    plane[i * width + j] = 1.0;
                }
            }
        }
        Ok(plane.repeat(channels))
    }
}

fn check_divisible(height: usize, width: usize) -> Result<()> {
    for dim in [height, width] {
        if dim % GRID_CELLS != 0 || dim == 0 {
            return Err(Error::Indivisible {
                dim,
                divisor: GRID_CELLS,
                context: "grid mask",
            });
        }
    }
    Ok(())
}

/// Zeroes the removed grid cells of a `C x H x W` image.
pub fn grid_mask(image: &Tensor, seed: u64) -> Result<(Tensor, MaskPattern)> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::shape("grid-mask", format!("expected C x H x W, got {:?}", image.shape())));
    };
    let pattern = MaskPattern::from_seed(seed);
    let m = pattern.pixel_mask(c, h, w)?;
    let data = image.data().iter().zip(&m).map(|(v, k)| v * k).collect();
    Ok((Tensor::from_parts(vec![c, h, w], data), pattern))
}

/// Applies one pattern per sample to an `N x C x H x W` batch.
pub fn mask_batch(g: &mut Graph, images: Var, patterns: &[MaskPattern]) -> Result<Var> {
    let [n, c, h, w] = g.value(images).dims4("grid-mask")?;
    if patterns.len() != n {
        return Err(Error::shape("grid-mask", format!("{} patterns for batch of {n}", patterns.len())));
    }
    let mut m = Vec::with_capacity(n * c * h * w);
    for p in patterns {
        m.extend(p.pixel_mask(c, h, w)?);
    }
    let mv = g.constant(Tensor::from_parts(vec![n, c, h, w], m));
    g.mul(images, mv)
}

/// `[alpha * masked ; edge]` along channels.
pub fn compose_decoder_input(g: &mut Graph, masked: Var, alpha: Var, edge: Var) -> Result<Var> {
    let [n, _, h, w] = g.value(masked).dims4("compose")?;
    let [en, ec, eh, ew] = g.value(edge).dims4("compose")?;
    if (en, ec, eh, ew) != (n, 1, h, w) {
        return Err(Error::shape(
            "compose",
            format!("edge map {:?} vs image {:?}", g.value(edge).shape(), g.value(masked).shape()),
        ));
    }
    let scaled = g.scalar_mul(alpha, masked)?;
    g.concat_channels(&[scaled, edge])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removes_exactly_205_cells() {
        for seed in 0..50 {
            let p = MaskPattern::from_seed(seed);
            assert_eq!(p.removed(), 205);
            assert_eq!(p.kept(), 51);
        }
    }

    #[test]
    fn same_seed_same_pattern() {
        assert_eq!(MaskPattern::from_seed(9), MaskPattern::from_seed(9));
        assert_ne!(MaskPattern::from_seed(9).grid, MaskPattern::from_seed(10).grid);
    }

    #[test]
    fn masks_whole_cells() {
        let img = Tensor::full(&[2, 32, 32], 1.0);
        let (masked, pattern) = grid_mask(&img, 3).unwrap();
        let zeros = masked.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 2 * 205 * 4);
        for i in 0..32 {
            for j in 0..32 {
                let kept = pattern.grid[(i / 2) * 16 + j / 2];
                assert_eq!(masked.data()[i * 32 + j] == 1.0, kept);
            }
        }
    }

    #[test]
    fn zero_image_stays_zero() {
        let (masked, _) = grid_mask(&Tensor::zeros(&[3, 16, 16]), 77).unwrap();
        assert!(masked.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_dims_rejected() {
        assert!(matches!(
            grid_mask(&Tensor::zeros(&[1, 20, 16]), 0),
            Err(Error::Indivisible { dim: 20, .. })
        ));
    }

    fn compose_with(alpha: f64) -> Tensor {
        let mut g = Graph::new();
        let img = g.constant(Tensor::full(&[1, 3, 16, 16], 0.5));
        let a = g.constant(Tensor::scalar(alpha));
        let e = g.constant(Tensor::full(&[1, 1, 16, 16], 0.25));
        let out = compose_decoder_input(&mut g, img, a, e).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn compose_scales_image_channels_only() {
        for (alpha, want) in [(1.0, 0.5), (0.0, 0.0), (2.0, 1.0)] {
            let t = compose_with(alpha);
            assert_eq!(t.shape(), &[1, 4, 16, 16]);
            let plane = 256;
            assert!(t.data()[..3 * plane].iter().all(|&v| v == want));
            assert!(t.data()[3 * plane..].iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn compose_rejects_spatial_mismatch() {
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[1, 3, 16, 16]));
        let a = g.constant(Tensor::scalar(1.0));
        let e = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
        assert!(compose_decoder_input(&mut g, img, a, e).is_err());
    }
}
