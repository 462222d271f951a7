use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{KdTap, LossConfig};
use crate::nets::{ModelConfig, Tap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Teacher,
    Student,
    StudentNoKd,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Teacher => "teacher",
            TrainMode::Student => "student",
            TrainMode::StudentNoKd => "student_no_kd",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TrainMode::Teacher, TrainMode::Student, TrainMode::StudentNoKd]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected teacher, student or student_no_kd)")))
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub kd_tap: KdTap,
    /// Cosine over flattened embeddings instead of per location.
    pub flatten_cosine: bool,
    /// Edge thickness `sigma^2` in normalized coordinates.
    pub sigma2: f64,
    pub keypoints: usize,
    pub widths: [usize; 4],
    pub seed: u64,
    /// Teacher detector sees the masked depth map instead of the full one.
    pub teacher_masked: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Student,
            iterations: 2000,
            batch_size: 16,
            lr: 1e-4,
            lambda: 1.0,
            gamma: 0.1,
            kd_tap: KdTap::Layer(Tap::Output),
            flatten_cosine: false,
            sigma2: 5e-5,
            keypoints: 8,
            widths: [32, 64, 128, 256],
            seed: 1,
            teacher_masked: false,
            log_every: 10,
        }
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub(crate) fn parse_widths(value: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = value
        .split(',')
        .map(|w| parse("widths", w))
        .collect::<Result<_>>()?;
    v.try_into()
        .map_err(|_| Error::Config(format!("`widths` needs four comma-separated entries, got `{value}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 14] = [
        "mode",
        "iterations",
        "batch_size",
        "lr",
        "lambda",
        "gamma",
        "kd_tap",
        "cosine",
        "sigma2",
        "keypoints",
        "widths",
        "seed",
        "teacher_input",
        "log_every",
    ];

    /// Sets one field from its textual form; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "mode" => self.mode = value.parse()?,
            "iterations" => self.iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "kd_tap" => self.kd_tap = value.parse()?,
            "cosine" => {
                self.flatten_cosine = match value {
                    "per_location" => false,
                    "flatten" => true,
                    _ => return Err(Error::Config(format!("`cosine` must be per_location or flatten, got `{value}`"))),
                }
            }
            "sigma2" => self.sigma2 = parse(key, value)?,
            "keypoints" => self.keypoints = parse(key, value)?,
            "widths" => self.widths = parse_widths(value)?,
            "seed" => self.seed = parse(key, value)?,
            "teacher_input" => {
                self.teacher_masked = match value {
                    "unmasked" => false,
                    "masked" => true,
                    _ => return Err(Error::Config(format!("`teacher_input` must be unmasked or masked, got `{value}`"))),
                }
            }
            "log_every" => self.log_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in [`Self::KEYS`] order; feeding these
    /// back through [`Self::set`] reproduces the config exactly.
    pub fn echo(&self) -> Vec<(String, String)> {
        let values = [
            self.mode.to_string(),
            self.iterations.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.lr),
            format!("{:?}", self.lambda),
            format!("{:?}", self.gamma),
            self.kd_tap.to_string(),
            if self.flatten_cosine { "flatten" } else { "per_location" }.to_string(),
            format!("{:?}", self.sigma2),
            self.keypoints.to_string(),
            self.widths.map(|w| w.to_string()).join(","),
            self.seed.to_string(),
            if self.teacher_masked { "masked" } else { "unmasked" }.to_string(),
            self.log_every.to_string(),
        ];
        Self::KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        self.loss_config().validate()
    }

    /// Loss weights in effect: teachers and `student_no_kd` runs carry no
    /// distillation term whatever `gamma` says.
    pub fn loss_config(&self) -> LossConfig {
        let kd = matches!(self.mode, TrainMode::Student);
        LossConfig {
            lambda: self.lambda,
            gamma: if kd { self.gamma } else { 0.0 },
            kd_tap: if kd { self.kd_tap } else { KdTap::None },
            flatten: self.flatten_cosine,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_channels: 3,
            keypoints: self.keypoints,
            widths: self.widths,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_roundtrips_through_set() {
        let mut cfg = TrainConfig {
            mode: TrainMode::Teacher,
            lr: 3e-4,
            gamma: 0.7,
            kd_tap: KdTap::None,
            flatten_cosine: true,
            sigma2: 1.0 / 3.0,
            widths: [4, 8, 16, 32],
            teacher_masked: true,
            ..Default::default()
        };
        cfg.seed = u64::MAX;
        let mut back = TrainConfig::default();
        for (k, v) in cfg.echo() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("gama", "0.1").is_err());
        assert!(cfg.set("gamma", "lots").is_err());
        assert!(cfg.set("widths", "1,2,3").is_err());
        assert!(cfg.set("mode", "tutor").is_err());
    }

    #[test]
    fn gamma_only_counts_for_distilled_students() {
        let mut cfg = TrainConfig {
            gamma: 0.4,
            ..Default::default()
        };
        assert_eq!(cfg.loss_config().active_tap(), Some(Tap::Output));
        for mode in [TrainMode::Teacher, TrainMode::StudentNoKd] {
            cfg.mode = mode;
            assert_eq!(cfg.loss_config().active_tap(), None);
        }
    }
}
