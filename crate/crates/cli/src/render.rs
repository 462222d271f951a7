//! PNG panels for one scene: keypoint markers over an edge-map heat overlay,
//! the masked input, and the reconstruction.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use image::{imageops, Rgb, RgbImage};

use dkp_core::kpgraph::MaskPattern;
use dkp_core::nets::{KeypointModel, Mode};
use dkp_core::synthdata::Scene;
use dkp_core::Graph;

pub struct Panels {
    pub size: usize,
    /// `K` keypoints in normalized coordinates.
    pub keypoints: Vec<[f64; 2]>,
    /// `H x W` edge map.
    pub edge: Vec<f64>,
    /// `3 x H x W` planes.
    pub input: Vec<f64>,
    pub masked: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

/// Runs the full pipeline in eval mode. `depth_input` feeds the depth map
/// (teacher checkpoints) instead of RGB.
pub fn compute(model: &KeypointModel, scene: &Scene, mask_seed: u64, sigma2: f64, depth_input: bool) -> Result<Panels> {
    let image = if depth_input { scene.depth3_tensor() } else { scene.rgb_tensor() };
    let size = scene.size;
    let image = image.reshape(&[1, 3, size, size])?;
    let mut g = Graph::new();
    let mut cx = model.ctx(&mut g, Mode::Eval);
    let x = cx.g.constant(image.clone());
    let out = model.reconstruct(&mut cx, x, &[MaskPattern::from_seed(mask_seed)], sigma2)?;
    let kp = g.value(out.keypoints).data();
    Ok(Panels {
        size,
        keypoints: kp.chunks(2).map(|c| [c[0], c[1]]).collect(),
        edge: g.value(out.edge).data().to_vec(),
        input: image.into_data(),
        masked: g.value(out.masked).data().to_vec(),
        reconstruction: g.value(out.reconstruction).data().to_vec(),
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn planes_to_image(planes: &[f64], size: usize) -> RgbImage {
    let plane = size * size;
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        Rgb([to_u8(planes[i]), to_u8(planes[plane + i]), to_u8(planes[2 * plane + i])])
    })
}

fn upscale(img: &RgbImage, scale: u32) -> RgbImage {
    imageops::resize(img, img.width() * scale, img.height() * scale, imageops::FilterType::Nearest)
}

/// Marker pixel position of a normalized keypoint in an image `extent` wide.
pub fn marker_position(p: [f64; 2], extent: u32) -> (u32, u32) {
    let to_px = |v: f64| (((v + 1.0) / 2.0 * extent as f64).floor() as i64).clamp(0, extent as i64 - 1) as u32;
    (to_px(p[0]), to_px(p[1]))
}

fn draw_marker(img: &mut RgbImage, p: [f64; 2]) {
    let (cx, cy) = marker_position(p, img.width());
    let (w, h) = (img.width() as i64, img.height() as i64);
    for d in -3i64..=3 {
        for (x, y) in [(cx as i64 + d, cy as i64), (cx as i64, cy as i64 + d)] {
            if (0..w).contains(&x) && (0..h).contains(&y) {
                img.put_pixel(x as u32, y as u32, Rgb([0, 255, 0]));
            }
        }
    }
}

impl Panels {
    /// Input blended toward red by the edge map, with keypoint crosses.
    pub fn overlay(&self, scale: u32) -> RgbImage {
        let plane = self.size * self.size;
        let mut blended = self.input.clone();
        for (i, &e) in self.edge.iter().enumerate() {
            for c in 0..3 {
                let target = if c == 0 { 1.0 } else { 0.0 };
                let v = &mut blended[c * plane + i];
                *v = *v * (1.0 - e) + target * e;
            }
        }
        let mut img = upscale(&planes_to_image(&blended, self.size), scale);
        for &p in &self.keypoints {
            draw_marker(&mut img, p);
        }
        img
    }

    pub fn edge_image(&self, scale: u32) -> RgbImage {
        let gray: Vec<f64> = self.edge.iter().cycle().take(3 * self.edge.len()).copied().collect();
        upscale(&planes_to_image(&gray, self.size), scale)
    }

    /// Writes `overlay.png`, `edge.png`, `masked.png`, `reconstruction.png`
    /// and `keypoints.csv` into `dir`.
    pub fn write(&self, dir: &Path, scale: u32) -> Result<()> {
        ensure!(scale >= 1, "scale must be >= 1");
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let save = |name: &str, img: RgbImage| -> Result<()> {
            let path = dir.join(name);
            img.save(&path).with_context(|| format!("writing {}", path.display()))
        };
        save("overlay.png", self.overlay(scale))?;
        save("edge.png", self.edge_image(scale))?;
        save("masked.png", upscale(&planes_to_image(&self.masked, self.size), scale))?;
        save("reconstruction.png", upscale(&planes_to_image(&self.reconstruction, self.size), scale))?;
        let csv: String = std::iter::once("x,y\n".to_string())
            .chain(self.keypoints.iter().map(|[x, y]| format!("{x:?},{y:?}\n")))
            .collect();
        let path = dir.join("keypoints.csv");
        std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))
    }
}
