//! Procedural stick figures over striped, boxy backgrounds, with an
//! analytic depth map and exact joint positions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kpgraph::{pixel_center, point_segment_distance};
use crate::tensor::Tensor;

mod dump;

pub use dump::{load_dataset, load_split_dir, read_keypoints_csv, read_manifest, write_split, ManifestRow};

pub const JOINT_NAMES: [&str; 8] = ["head", "neck", "chest", "pelvis", "l_hand", "r_hand", "l_foot", "r_foot"];
pub const NUM_JOINTS: usize = JOINT_NAMES.len();

const HEAD: usize = 0;
const NECK: usize = 1;
const CHEST: usize = 2;
const PELVIS: usize = 3;
const L_HAND: usize = 4;
const R_HAND: usize = 5;
const L_FOOT: usize = 6;
const R_FOOT: usize = 7;

/// Fixed bone graph shared by every scene.
pub const BONES: [(usize, usize); 7] = [
    (HEAD, NECK),
    (NECK, CHEST),
    (CHEST, PELVIS),
    (NECK, L_HAND),
    (NECK, R_HAND),
    (PELVIS, L_FOOT),
    (PELVIS, R_FOOT),
];

pub const BACKGROUND_DEPTH: (f64, f64) = (0.1, 0.3);
pub const FIGURE_DEPTH: (f64, f64) = (0.7, 0.9);
pub const RGB_NOISE: f64 = 0.01;

/// Joints never come closer than this to the border, so capsules stay
/// mostly inside the frame.
const BORDER: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    /// Side length; square images only.
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { size: 64 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(Error::Config(format!("image size must be a positive multiple of 16, got {}", self.size)));
        }
        Ok(())
    }
}

/// One sampled pose in normalized image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FigureSkeleton {
    pub joints: [[f64; 2]; NUM_JOINTS],
    /// Capsule radius per bone.
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub size: usize,
    /// `3 x H x W` in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// `H x W` in `[0, 1]`, larger is nearer.
    pub depth: Vec<f64>,
    /// `true` where the figure was drawn.
    pub figure: Vec<bool>,
    pub joints: [[f64; 2]; NUM_JOINTS],
    pub seed: u64,
}

impl Scene {
    pub fn rgb_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![3, self.size, self.size], self.rgb.clone())
    }

    /// Depth replicated to three channels.
    pub fn depth3_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![3, self.size, self.size], self.depth.repeat(3))
    }

    pub fn joints_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![NUM_JOINTS, 2], self.joints.iter().flatten().copied().collect())
    }
}

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn step(from: [f64; 2], angle: f64, len: f64) -> [f64; 2] {
    // Angle 0 points down the image (+y).
    [from[0] - len * angle.sin(), from[1] + len * angle.cos()]
}

impl FigureSkeleton {
    /// Random pose: overall scale, global orientation, bone lengths within ±20%,
    /// limb angles within fixed limits, then a uniform placement among all
    /// positions that keep every joint inside the frame.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let scale = rng.random_range(0.28..0.5);
        let mut len = |base: f64| base * scale * rng.random_range(0.8..1.2);
        let (head_len, neck_len, torso_len, arm_len, leg_len) = (len(0.3), len(0.3), len(0.55), len(0.8), len(0.95));

        // Mostly upright; one pose in four tumbles through any orientation so
        // every joint visits the whole frame.
        let lean = if rng.random_bool(0.25) {
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
        } else {
            rng.random_range(-0.5..0.5)
        };
        let up = std::f64::consts::PI + lean;
        let mut j = [[0.0; 2]; NUM_JOINTS];
        j[PELVIS] = [0.0, 0.0];
        j[CHEST] = step(j[PELVIS], up, torso_len);
        j[NECK] = step(j[CHEST], up + rng.random_range(-0.25..0.25), neck_len);
        j[HEAD] = step(j[NECK], up + rng.random_range(-0.5..0.5), head_len);
        j[L_HAND] = step(j[NECK], lean + rng.random_range(0.25..2.8), arm_len);
        j[R_HAND] = step(j[NECK], lean - rng.random_range(0.25..2.8), arm_len);
        j[L_FOOT] = step(j[PELVIS], lean + rng.random_range(0.05..0.9), leg_len);
        j[R_FOOT] = step(j[PELVIS], lean - rng.random_range(0.05..0.9), leg_len);

        // Small extra spin so the figure is not always symmetric about its lean.
        let spin = rng.random_range(-0.15..0.15);
        for p in &mut j {
            *p = rotate(*p, spin);
        }

        let lim = 1.0 - BORDER;
        let mut shift = [0.0; 2];
        for (axis, s) in shift.iter_mut().enumerate() {
            let lo = j.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
            let hi = j.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
            let (a, b) = (-lim - lo, lim - hi);
            *s = if a < b { rng.random_range(a..b) } else { -(lo + hi) / 2.0 };
        }
        for p in &mut j {
            for axis in 0..2 {
                p[axis] = (p[axis] + shift[axis]).clamp(-lim, lim);
            }
        }
        FigureSkeleton {
            joints: j,
            radius: scale * rng.random_range(0.12..0.18),
        }
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Background layers, drawn in order; later ones cover earlier ones.
enum Layer {
    Stripes {
        vertical: bool,
        period: f64,
        phase: f64,
        colors: [[f64; 3]; 2],
        depths: [f64; 2],
    },
    Rect {
        x0: f64,
        x1: f64,
        y0: f64,
        y1: f64,
        color: [f64; 3],
        depth: f64,
    },
}

fn sample_background(rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let depth = |rng: &mut ChaCha8Rng| rng.random_range(BACKGROUND_DEPTH.0..=BACKGROUND_DEPTH.1);
    let mut layers = vec![Layer::Stripes {
        vertical: rng.random(),
        period: rng.random_range(0.15..0.6),
        phase: rng.random_range(0.0..1.0),
        colors: [random_color(rng), random_color(rng)],
        depths: [depth(rng), depth(rng)],
    }];
    for _ in 0..rng.random_range(2..=5) {
        let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let (c, d) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        layers.push(Layer::Rect {
            x0: f64::min(a, b),
            x1: f64::max(a, b),
            y0: f64::min(c, d),
            y1: f64::max(c, d),
            color: random_color(rng),
            depth: depth(rng),
        });
    }
    layers
}

/// Deterministic scene for `seed`.
pub fn sample_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = sample_background(&mut rng);
    let skeleton = FigureSkeleton::sample(&mut rng);
    let bone_color: Vec<[f64; 3]> = BONES.iter().map(|_| random_color(&mut rng)).collect();
    let bone_depth: Vec<f64> = BONES
        .iter()
        .map(|_| rng.random_range(FIGURE_DEPTH.0..FIGURE_DEPTH.1 - 0.05))
        .collect();
    let head_color = random_color(&mut rng);
    let noise = Normal::new(0.0, RGB_NOISE).expect("finite std");

    let plane = n * n;
    let mut rgb = vec![0.0; 3 * plane];
    let mut depth = vec![0.0; plane];
    let mut figure = vec![false; plane];
    let r = skeleton.radius;
    let head_r = 1.5 * r;
    for i in 0..n {
        let y = pixel_center(i, n);
        for jx in 0..n {
            let x = pixel_center(jx, n);
            let mut color = [0.0; 3];
            let mut z = BACKGROUND_DEPTH.0;
            for layer in &background {
                match *layer {
                    Layer::Stripes {
                        vertical,
                        period,
                        phase,
                        colors,
                        depths,
                    } => {
                        let t = if vertical { x } else { y };
                        let band = (((t + 1.0) / period + phase).floor() as i64).rem_euclid(2) as usize;
                        color = colors[band];
                        z = depths[band];
                    }
                    Layer::Rect {
                        x0,
                        x1,
                        y0,
                        y1,
                        color: c,
                        depth: d,
                    } => {
                        if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
                            color = c;
                            z = d;
                        }
                    }
                }
            }
            // Nearest figure part wins; each part bulges toward the viewer.
            let p = [x, y];
            let mut best: Option<(f64, [f64; 3])> = None;
            let mut consider = |dist: f64, radius: f64, base: f64, c: [f64; 3]| {
                if dist <= radius {
                    let bulge = 0.05 * (1.0 - (dist / radius).powi(2)).sqrt();
                    let zz = (base + bulge).min(FIGURE_DEPTH.1);
                    if best.is_none_or(|(bz, _)| zz > bz) {
                        best = Some((zz, c));
                    }
                }
            };
            for (b, &(ja, jb)) in BONES.iter().enumerate() {
                let d = point_segment_distance(p, skeleton.joints[ja], skeleton.joints[jb]);
                consider(d, r, bone_depth[b], bone_color[b]);
            }
            let hd = ((x - skeleton.joints[HEAD][0]).powi(2) + (y - skeleton.joints[HEAD][1]).powi(2)).sqrt();
            consider(hd, head_r, FIGURE_DEPTH.1 - 0.05, head_color);
            let idx = i * n + jx;
            if let Some((zz, c)) = best {
                color = c;
                z = zz;
                figure[idx] = true;
            }
            depth[idx] = z;
            for ch in 0..3 {
                rgb[ch * plane + idx] = color[ch];
            }
        }
    }
    for v in &mut rgb {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(Scene {
        size: n,
        rgb,
        depth,
        figure,
        joints: skeleton.joints,
        seed,
    })
}

/// Scene seeds of a split: training seeds occupy the lower half of the
/// 32-bit block under `base_seed`, test seeds the upper half.
pub fn split_seeds(n_train: usize, n_test: usize, base_seed: u64) -> Result<(Vec<u64>, Vec<u64>)> {
    let half = 1usize << 31;
    if n_train == 0 || n_test == 0 || n_train > half || n_test > half {
        return Err(Error::Config(format!("split sizes must be in 1..=2^31, got {n_train}/{n_test}")));
    }
    let block = base_seed << 32;
    let train = (0..n_train as u64).map(|i| block | i).collect();
    let test = (0..n_test as u64).map(|i| block | (1 << 31) | i).collect();
    Ok((train, test))
}

pub fn generate(seeds: &[u64], cfg: &SynthConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    seeds.par_iter().map(|&s| sample_scene(s, cfg)).collect()
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

pub fn make_split(n_train: usize, n_test: usize, base_seed: u64, cfg: &SynthConfig) -> Result<Split> {
    let (a, b) = split_seeds(n_train, n_test, base_seed)?;
    Ok(Split {
        train: generate(&a, cfg)?,
        test: generate(&b, cfg)?,
    })
}

/// `N x 3 x H x W` RGB batch.
pub fn stack_rgb(scenes: &[&Scene]) -> Result<Tensor> {
    let items: Vec<Tensor> = scenes.iter().map(|s| s.rgb_tensor()).collect();
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}

/// `N x 3 x H x W` batch of depth replicated over channels.
pub fn stack_depth3(scenes: &[&Scene]) -> Result<Tensor> {
    let items: Vec<Tensor> = scenes.iter().map(|s| s.depth3_tensor()).collect();
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}

/// `N x J x 2` ground-truth joints.
pub fn stack_joints(scenes: &[&Scene]) -> Result<Tensor> {
    let items: Vec<Tensor> = scenes.iter().map(|s| s.joints_tensor()).collect();
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bones_connect_all_joints() {
        let mut seen = [false; NUM_JOINTS];
        seen[HEAD] = true;
        for _ in 0..NUM_JOINTS {
            for &(a, b) in &BONES {
                if seen[a] || seen[b] {
                    seen[a] = true;
                    seen[b] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn rejects_bad_size() {
        assert!(sample_scene(0, &SynthConfig { size: 40 }).is_err());
        assert!(split_seeds(0, 3, 1).is_err());
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let (a, b) = split_seeds(1000, 200, 7).unwrap();
        assert_eq!((a.len(), b.len()), (1000, 200));
        let set: std::collections::HashSet<_> = a.iter().collect();
        assert!(b.iter().all(|s| !set.contains(s)));
        assert_eq!(split_seeds(1000, 200, 7).unwrap(), (a, b));
    }
}
