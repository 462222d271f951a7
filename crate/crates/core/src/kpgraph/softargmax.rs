use super::pixel_center;
use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `K` keypoints in normalized `[-1, 1]^2` coordinates, `(x, y)` per point.
#[derive(Clone, Debug, PartialEq)]
pub struct Keypoints {
    pub coords: Vec<[f64; 2]>,
}

impl Keypoints {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Pixel coordinates (continuous, pixel centers at `k + 0.5`) at the
    /// given square resolution.
    pub fn to_pixels(&self, size: usize) -> Vec<[f64; 2]> {
        self.coords
            .iter()
            .map(|[x, y]| [(x + 1.0) * 0.5 * size as f64, (y + 1.0) * 0.5 * size as f64])
            .collect()
    }
}

/// Splits an `N x K x 2` tensor into per-image keypoint sets.
pub fn keypoints_from_tensor(t: &Tensor) -> Result<Vec<Keypoints>> {
    let [n, k, 2] = t.shape()[..] else {
        return Err(Error::shape("keypoints", format!("expected N x K x 2, got {:?}", t.shape())));
    };
    Ok((0..n)
        .map(|s| Keypoints {
            coords: (0..k)
                .map(|i| {
                    let base = (s * k + i) * 2;
                    [t.data()[base], t.data()[base + 1]]
                })
                .collect(),
        })
        .collect())
}

/// Expected pixel coordinate under per-channel probability maps.
struct PixelExpectation {
    h: usize,
    w: usize,
}

impl CustomOp for PixelExpectation {
    fn name(&self) -> &'static str {
        "pixel-expectation"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let (h, w) = (self.h, self.w);
        let planes = grad_out.len() / 2;
        let mut d = vec![0.0; planes * h * w];
        for (p, dp) in d.chunks_mut(h * w).enumerate() {
            let (gx, gy) = (grad_out.data()[2 * p], grad_out.data()[2 * p + 1]);
            for i in 0..h {
                let py = pixel_center(i, h);
                for j in 0..w {
                    dp[i * w + j] = gx * pixel_center(j, w) + gy * py;
                }
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), d))]
    }
}

/// Differentiable soft-argmax of `N x K x H x W` heatmaps into `N x K x 2`
/// keypoints: softmax over each heatmap's pixels, then the probability-
/// weighted mean of pixel-center coordinates.
pub fn soft_argmax_var(g: &mut Graph, heatmaps: Var) -> Result<Var> {
    let hm = g.value(heatmaps);
    let [n, k, h, w] = hm.dims4("soft-argmax")?;
    if let Some(i) = hm.first_non_finite() {
        return Err(Error::NonFinite {
            index: i,
            context: "soft-argmax heatmap".into(),
        });
    }
    let probs = g.softmax_pixels(heatmaps)?;
    let pv = g.value(probs).data();
    let xs: Vec<f64> = (0..w).map(|j| pixel_center(j, w)).collect();
    let ys: Vec<f64> = (0..h).map(|i| pixel_center(i, h)).collect();
    let mut out = Vec::with_capacity(n * k * 2);
    for plane in pv.chunks(h * w) {
        let (mut ex, mut ey) = (0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let p = plane[i * w + j];
                ex += p * xs[j];
                ey += p * ys[i];
            }
        }
        out.push(ex);
        out.push(ey);
    }
    Ok(g.custom(
        &[probs],
        Tensor::from_parts(vec![n, k, 2], out),
        Box::new(PixelExpectation { h, w }),
    ))
}

/// Soft-argmax of a `K x H x W` heatmap stack (no gradient tracking).
pub fn soft_argmax(heatmaps: &Tensor) -> Result<Keypoints> {
    let [k, h, w] = heatmaps.shape()[..] else {
        return Err(Error::shape("soft-argmax", format!("expected K x H x W, got {:?}", heatmaps.shape())));
    };
    let mut g = Graph::new();
    let hv = g.constant(heatmaps.clone().reshape(&[1, k, h, w])?);
    let kv = soft_argmax_var(&mut g, hv)?;
    Ok(keypoints_from_tensor(g.value(kv))?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_heatmap_gives_center() {
        for k in [1, 3] {
            let kp = soft_argmax(&Tensor::full(&[k, 4, 4], 2.5)).unwrap();
            for [x, y] in kp.coords {
                assert!(x.abs() < 1e-12 && y.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn peaked_two_by_two() {
        let hm = Tensor::new(vec![1, 2, 2], vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let [x, y] = soft_argmax(&hm).unwrap().coords[0];
        // Independent evaluation: weight e^10/(e^10+3) at (-0.5,-0.5), the
        // rest spread over the other three centers.
        let e = 10f64.exp();
        let p0 = e / (e + 3.0);
        let q = 1.0 / (e + 3.0);
        let want_x = -0.5 * p0 + 0.5 * q - 0.5 * q + 0.5 * q;
        let want_y = -0.5 * p0 - 0.5 * q + 0.5 * q + 0.5 * q;
        assert!((x - want_x).abs() < 1e-12 && (y - want_y).abs() < 1e-12);
        assert!((x + 0.5).abs() < 1e-3 && (y + 0.5).abs() < 1e-3);
    }

    #[test]
    fn opposite_corner_peaks_cancel() {
        let mut d = vec![0.0; 9];
        d[0] = 5.0;
        d[8] = 5.0;
        let [x, y] = soft_argmax(&Tensor::new(vec![1, 3, 3], d).unwrap()).unwrap().coords[0];
        assert!(x.abs() < 1e-6 && y.abs() < 1e-6);
    }

    #[test]
    fn non_finite_heatmap_rejected() {
        let mut d = vec![0.0; 4];
        d[2] = f64::NAN;
        let err = soft_argmax(&Tensor::new(vec![1, 2, 2], d).unwrap()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2, .. }));
    }
}
