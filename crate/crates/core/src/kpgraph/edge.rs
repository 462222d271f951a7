use std::hash::{DefaultHasher, Hash, Hasher};

use super::{pixel_center, Keypoints};
use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Euclidean distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    closest(p, a, b).dist2.sqrt()
}

struct Closest {
    dist2: f64,
    /// Projection parameter after clamping to `[0, 1]`.
    t: f64,
    /// -1 clamped at `a`, 0 interior, 1 clamped at `b`.
    clamp: i8,
    /// `p - c` where `c` is the closest point.
    diff: [f64; 2],
}

#[inline]
fn closest(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Closest {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let raw = if len2 > 0.0 {
        (ap[0] * ab[0] + ap[1] * ab[1]) / len2
    } else {
        0.0
    };
    let (t, clamp) = if raw <= 0.0 {
        (0.0, -1)
    } else if raw >= 1.0 {
        (1.0, 1)
    } else {
        (raw, 0)
    };
    let diff = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    Closest {
        dist2: diff[0] * diff[0] + diff[1] * diff[1],
        t,
        clamp,
        diff,
    }
}

/// Symmetric edge weights in `[0, 1]` with zero diagonal.
///
/// Trainable weights are stored as one logit per unordered pair `i < j`
/// (row-major over the upper triangle) and mapped through a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeights {
    k: usize,
    w: Vec<f64>,
}

impl EdgeWeights {
    pub fn num_pairs(k: usize) -> usize {
        k * k.saturating_sub(1) / 2
    }

    /// Pairs `(i, j)`, `i < j`, in logit order.
    pub fn pairs(k: usize) -> Vec<(usize, usize)> {
        (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect()
    }

    pub fn from_logits(k: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != Self::num_pairs(k) {
            return Err(Error::shape(
                "edge-weights",
                format!("{} logits for K={k} (need {})", logits.len(), Self::num_pairs(k)),
            ));
        }
        let pair_w: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        Self::from_pair_weights(k, &pair_w)
    }

    /// Weights given directly per pair, clamped to `[0, 1]`.
    pub fn from_pair_weights(k: usize, pair_w: &[f64]) -> Result<Self> {
        if pair_w.len() != Self::num_pairs(k) {
            return Err(Error::shape("edge-weights", format!("{} weights for K={k}", pair_w.len())));
        }
        let mut w = vec![0.0; k * k];
        for ((i, j), &v) in Self::pairs(k).into_iter().zip(pair_w) {
            let v = v.clamp(0.0, 1.0);
            w[i * k + j] = v;
            w[j * k + i] = v;
        }
        Ok(EdgeWeights { k, w })
    }

    pub fn uniform(k: usize, value: f64) -> Self {
        Self::from_pair_weights(k, &vec![value; Self::num_pairs(k)]).expect("pair count matches")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.k + j]
    }

    fn pair_values(&self) -> Vec<f64> {
        Self::pairs(self.k).into_iter().map(|(i, j)| self.get(i, j)).collect()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `H x W` map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl EdgeMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Winning pair and its geometry at one pixel.
struct PixelEdge {
    value: f64,
    pair: usize,
    s: f64,
    closest: Closest,
}

/// `max_{i<j} w_ij * exp(-d_ij(p)^2 / sigma2)` at pixel center `p`; the
/// first pair attaining the maximum wins. Pairs are ranked in log space
/// (`ln w - d^2 / sigma2`) so only the winner pays for an `exp`.
#[inline]
fn pixel_edge(p: [f64; 2], kps: &[[f64; 2]], pairs: &[(usize, usize)], pair_w: &[f64], log_w: &[f64], sigma2: f64) -> PixelEdge {
    let mut best: Option<(f64, usize, Closest)> = None;
    for (idx, (&(i, j), &lw)) in pairs.iter().zip(log_w).enumerate() {
        let c = closest(p, kps[i], kps[j]);
        let score = lw - c.dist2 / sigma2;
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, idx, c));
        }
    }
    let (_, pair, closest) = best.expect("at least one keypoint pair");
    let s = (-closest.dist2 / sigma2).exp();
    PixelEdge {
        value: pair_w[pair] * s,
        pair,
        s,
        closest,
    }
}

fn check_render_args(k: usize, sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("edge thickness sigma2 must be positive, got {sigma2}")));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("edge rendering needs at least 2 keypoints, got {k}")));
    }
    Ok(())
}

/// Renders one keypoint graph (no gradient tracking).
pub fn render_edge_map(kps: &Keypoints, weights: &EdgeWeights, sigma2: f64, height: usize, width: usize) -> Result<EdgeMap> {
    check_render_args(kps.len(), sigma2)?;
    if weights.k() != kps.len() {
        return Err(Error::shape("render-edge-map", format!("{} keypoints vs K={} weights", kps.len(), weights.k())));
    }
    let pairs = EdgeWeights::pairs(kps.len());
    let pair_w = weights.pair_values();
    let log_w: Vec<f64> = pair_w.iter().map(|w| w.ln()).collect();
    let mut values = Vec::with_capacity(height * width);
    for i in 0..height {
        let y = pixel_center(i, height);
        for j in 0..width {
            let e = pixel_edge([pixel_center(j, width), y], &kps.coords, &pairs, &pair_w, &log_w, sigma2);
            values.push(e.value);
        }
    }
    Ok(EdgeMap { height, width, values })
}

/// Backward state of a batched edge render.
struct EdgeRender {
    k: usize,
    sigma2: f64,
    pair_w: Vec<f64>,
    /// Winning pair per output pixel, reused by the backward pass.
    winners: Vec<PixelEdge>,
}

impl CustomOp for EdgeRender {
    fn name(&self) -> &'static str {
        "edge-render"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let kps = inputs[0];
        let n = kps.shape()[0];
        let k = self.k;
        let pairs = EdgeWeights::pairs(k);
        let mut dk = vec![0.0; kps.len()];
        let mut dlogit = vec![0.0; pairs.len()];
        let plane = self.winners.len() / n.max(1);
        for (idx, (e, &g)) in self.winners.iter().zip(grad_out.data()).enumerate() {
            if g == 0.0 {
                continue;
            }
            let s = idx / plane;
            let w = self.pair_w[e.pair];
            // d value / d logit = S * sigmoid'(logit) = S * w (1 - w)
            dlogit[e.pair] += g * e.s * w * (1.0 - w);
            // d value / d dist2 = -w S / sigma2; d dist2 / d a = -2 (1 - t) diff,
            // d dist2 / d b = -2 t diff (t is optimal, so its own variation drops out).
            let dd2 = -g * w * e.s / self.sigma2;
            let (i, j) = pairs[e.pair];
            let t = e.closest.t;
            for axis in 0..2 {
                let diff = e.closest.diff[axis];
                dk[(s * k + i) * 2 + axis] += dd2 * -2.0 * (1.0 - t) * diff;
                dk[(s * k + j) * 2 + axis] += dd2 * -2.0 * t * diff;
            }
        }
        vec![
            needs[0].then(|| Tensor::from_parts(kps.shape().to_vec(), dk)),
            needs[1].then(|| Tensor::from_parts(vec![pairs.len()], dlogit)),
        ]
    }
}

/// Differentiable edge map for `N x K x 2` keypoints and `K(K-1)/2` edge
/// logits, producing `N x 1 x H x W`.
pub fn render_edge_map_var(g: &mut Graph, kps: Var, logits: Var, sigma2: f64, height: usize, width: usize) -> Result<Var> {
    let kt = g.value(kps);
    let [n, k, 2] = kt.shape()[..] else {
        return Err(Error::shape("render-edge-map", format!("keypoints must be N x K x 2, got {:?}", kt.shape())));
    };
    check_render_args(k, sigma2)?;
    let lt = g.value(logits);
    if lt.shape() != [EdgeWeights::num_pairs(k)] {
        return Err(Error::shape(
            "render-edge-map",
            format!("edge logits {:?} for K={k}", lt.shape()),
        ));
    }
    let pairs = EdgeWeights::pairs(k);
    let pair_w: Vec<f64> = lt.data().iter().map(|&l| sigmoid(l)).collect();
    let log_w: Vec<f64> = pair_w.iter().map(|w| w.ln()).collect();
    let plane = height * width;
    let mut out = vec![0.0; n * plane];
    let mut winners = Vec::with_capacity(n * plane);
    let track = g.tracks_branches();
    let mut branch = DefaultHasher::new();
    for s in 0..n {
        let pts: Vec<[f64; 2]> = (0..k)
            .map(|i| [kt.data()[(s * k + i) * 2], kt.data()[(s * k + i) * 2 + 1]])
            .collect();
        for row in 0..height {
            let y = pixel_center(row, height);
            for col in 0..width {
                let e = pixel_edge([pixel_center(col, width), y], &pts, &pairs, &pair_w, &log_w, sigma2);
                out[s * plane + row * width + col] = e.value;
                if track {
                    (e.pair, e.closest.clamp).hash(&mut branch);
                }
                winners.push(e);
            }
        }
    }
    g.record_branch(("edge-render", branch.finish()));
    Ok(g.custom(
        &[kps, logits],
        Tensor::from_parts(vec![n, 1, height, width], out),
        Box::new(EdgeRender {
            k,
            sigma2,
            pair_w,
            winners,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_examples() {
        assert_eq!(point_segment_distance([0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]), 1.0);
        assert_eq!(point_segment_distance([2.0, 0.0], [-1.0, 0.0], [1.0, 0.0]), 1.0);
        assert_eq!(point_segment_distance([3.0, 4.0], [0.0, 0.0], [0.0, 0.0]), 5.0);
    }

    fn two_points(a: [f64; 2], b: [f64; 2]) -> Keypoints {
        Keypoints { coords: vec![a, b] }
    }

    #[test]
    fn on_segment_pixel_is_one() {
        // 4x4 map: centers at +-0.25, +-0.75. Segment through row y = -0.25.
        let kps = two_points([-1.0, -0.25], [1.0, -0.25]);
        let m = render_edge_map(&kps, &EdgeWeights::uniform(2, 1.0), 5e-5, 4, 4).unwrap();
        for col in 0..4 {
            assert_eq!(m.at(1, col), 1.0);
        }
        assert!(m.at(0, 0) < 1e-100);
    }

    #[test]
    fn unit_ratio_gives_inverse_e() {
        // Pixel (0,0) of 2x2 sits at (-0.5,-0.5); segment along y = 0 gives d = 0.5.
        let kps = two_points([-1.0, 0.0], [1.0, 0.0]);
        let sigma2 = 0.25;
        let m = render_edge_map(&kps, &EdgeWeights::uniform(2, 1.0), sigma2, 2, 2).unwrap();
        assert!((m.at(0, 0) - (-1f64).exp()).abs() < 1e-9);
        assert!((m.at(0, 0) - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn zero_weights_render_nothing() {
        let kps = Keypoints {
            coords: vec![[0.1, 0.2], [-0.3, 0.4], [0.5, -0.6]],
        };
        let m = render_edge_map(&kps, &EdgeWeights::uniform(3, 0.0), 1e-2, 8, 8).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_arguments() {
        let kps = two_points([0.0, 0.0], [1.0, 1.0]);
        assert!(render_edge_map(&kps, &EdgeWeights::uniform(2, 1.0), 0.0, 4, 4).is_err());
        let one = Keypoints { coords: vec![[0.0, 0.0]] };
        assert!(render_edge_map(&one, &EdgeWeights::uniform(1, 1.0), 1.0, 4, 4).is_err());
    }

    #[test]
    fn weights_are_symmetric_with_zero_diagonal() {
        let w = EdgeWeights::from_logits(4, &[0.0, 1.0, -1.0, 2.0, -2.0, 3.0]).unwrap();
        for i in 0..4 {
            assert_eq!(w.get(i, i), 0.0);
            for j in 0..4 {
                assert_eq!(w.get(i, j), w.get(j, i));
                assert!((0.0..=1.0).contains(&w.get(i, j)));
            }
        }
        assert_eq!(w.get(0, 1), 0.5);
    }
}
