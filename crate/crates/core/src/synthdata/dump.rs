//! On-disk dataset layout: per-scene `NNNNNN_rgb.png`, `NNNNNN_depth.pgm`
//! (16-bit, big-endian), `NNNNNN_kp.csv`, and a `manifest.csv` of seeds.

use std::fmt::Write as _;
use std::path::Path;

use super::Scene;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub index: usize,
    pub seed: u64,
    pub size: usize,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_scene(dir: &Path, index: usize, scene: &Scene) -> Result<()> {
    let n = scene.size as u32;
    let plane = scene.size * scene.size;
    let img = image::RgbImage::from_fn(n, n, |x, y| {
        let idx = (y * n + x) as usize;
        image::Rgb([0, 1, 2].map(|c| to_u8(scene.rgb[c * plane + idx])))
    });
    let png = dir.join(format!("{index:06}_rgb.png"));
    img.save(&png)?;

    let mut pgm = format!("P5\n{n} {n}\n65535\n").into_bytes();
    for &d in &scene.depth {
        pgm.extend_from_slice(&((d.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes());
    }
    write(&dir.join(format!("{index:06}_depth.pgm")), &pgm)?;

    let mut kp = String::new();
    for [x, y] in scene.joints {
        writeln!(kp, "{x},{y}").expect("string write");
    }
    write(&dir.join(format!("{index:06}_kp.csv")), kp.as_bytes())
}

/// Writes every scene plus `manifest.csv`, creating `dir` if needed.
pub fn write_split(dir: &Path, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("index,seed,size\n");
    for (i, s) in scenes.iter().enumerate() {
        write_scene(dir, i, s)?;
        writeln!(manifest, "{i},{},{}", s.seed, s.size).expect("string write");
    }
    write(&dir.join("manifest.csv"), manifest.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |line: usize| Error::Config(format!("{}: malformed line {line}", path.display()));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "index,seed,size")) => {}
        _ => return Err(bad(1)),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let [index, seed, size] = f[..] else { return Err(bad(i + 1)) };
            Ok(ManifestRow {
                index: index.parse().map_err(|_| bad(i + 1))?,
                seed: seed.parse().map_err(|_| bad(i + 1))?,
                size: size.parse().map_err(|_| bad(i + 1))?,
            })
        })
        .collect()
}

/// Rows of `x,y` in normalized coordinates.
pub fn read_keypoints_csv(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (x, y) = l
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("{}: expected `x,y`, got `{l}`", path.display())))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("{}: bad number `{s}`", path.display())))
            };
            Ok([parse(x)?, parse(y)?])
        })
        .collect()
}

/// Rebuilds the scenes of a dumped split from its manifest seeds, checking
/// each against its stored keypoints.
pub fn load_split_dir(dir: &Path) -> Result<Vec<Scene>> {
    let rows = read_manifest(dir)?;
    let scenes = rows
        .iter()
        .map(|r| super::sample_scene(r.seed, &super::SynthConfig { size: r.size }))
        .collect::<Result<Vec<_>>>()?;
    for (row, scene) in rows.iter().zip(&scenes) {
        let kp = read_keypoints_csv(&dir.join(format!("{:06}_kp.csv", row.index)))?;
        if kp[..] != scene.joints[..] {
            return Err(Error::Config(format!(
                "{}: scene {} does not match seed {}; the dataset was made by a different generator",
                dir.display(),
                row.index,
                row.seed
            )));
        }
    }
    Ok(scenes)
}

/// `train/` and `test/` under a dataset root.
pub fn load_dataset(root: &Path) -> Result<super::Split> {
    Ok(super::Split {
        train: load_split_dir(&root.join("train"))?,
        test: load_split_dir(&root.join("test"))?,
    })
}
