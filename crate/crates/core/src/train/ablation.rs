//! Tap x gamma sweeps over distilled students.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{evaluate_model, MetricReport, PredictionSource};
use crate::losses::KdTap;
use crate::nets::Tap;
use crate::synthdata::Split;

use super::{train_student, write_log, FrozenTeacher, TrainConfig, TrainMode};

pub const CSV_HEADER: &str = "seed,tap,gamma,regressed_l2,pck,mae";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    /// Shared settings; `mode`, `kd_tap` and `gamma` are overridden per cell.
    pub train: TrainConfig,
    pub taps: Vec<Tap>,
    pub gammas: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            train: TrainConfig::default(),
            taps: vec![Tap::Output, Tap::MidTc, Tap::Early],
            gammas: vec![0.1, 0.2, 0.4, 0.7, 1.0],
        }
    }
}

/// One grid cell. The `none` cell ignores gamma and is recorded with 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub tap: KdTap,
    pub gamma: f64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        match self.tap {
            KdTap::None => "none".into(),
            t => format!("{t}_g{:?}", self.gamma),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub cell: Cell,
    pub report: MetricReport,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() || self.gammas.is_empty() {
            return Err(Error::Config("ablation needs at least one tap and one gamma".into()));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return Err(Error::Config(format!("ablation gammas must be positive, got {g}")));
        }
        self.train.validate()
    }

    /// Every layer tap crossed with every gamma, then a single `none` cell.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells: Vec<Cell> = self
            .taps
            .iter()
            .flat_map(|&t| self.gammas.iter().map(move |&gamma| Cell { tap: KdTap::Layer(t), gamma }))
            .collect();
        cells.push(Cell {
            tap: KdTap::None,
            gamma: 0.0,
        });
        cells
    }

    pub fn cell_config(&self, cell: Cell) -> TrainConfig {
        TrainConfig {
            mode: TrainMode::Student,
            kd_tap: cell.tap,
            gamma: cell.gamma,
            ..self.train.clone()
        }
    }
}

fn cell_matches(report: &MetricReport, cfg: &TrainConfig) -> bool {
    cfg.echo().iter().all(|(k, v)| report.config.get(k) == Some(v))
}

/// Loads a finished cell, or `None` if it is missing, unreadable or was run
/// with different settings.
fn finished_cell(dir: &Path, cfg: &TrainConfig) -> Option<MetricReport> {
    let report = MetricReport::read(&dir.join("metrics.json")).ok()?;
    (cell_matches(&report, cfg) && dir.join("student.ckpt").is_file()).then_some(report)
}

/// Trains and evaluates every cell under `out/<cell>/`, skipping cells that
/// already finished with the same settings, and writes `out/ablation.csv`.
pub fn run_ablation(cfg: &AblationConfig, teacher: &FrozenTeacher, split: &Split, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::new();
    for cell in cfg.cells() {
        let tcfg = cfg.cell_config(cell);
        let dir: PathBuf = out.join(cell.dir_name());
        let report = match finished_cell(&dir, &tcfg) {
            Some(r) => {
                log::info!("ablation cell {} already done", cell.dir_name());
                r
            }
            None => {
                log::info!("ablation cell {}: training", cell.dir_name());
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let run = train_student(&split.train, Some(teacher), &tcfg)?;
                run.checkpoint.save(&dir.join("student.ckpt"))?;
                write_log(&dir.join("train_log.csv"), &run.log)?;
                let mut report = evaluate_model(&run.model, &split.train, &split.test, PredictionSource::Model)?;
                report.config.extend(tcfg.echo());
                // Written last: its presence marks the cell finished.
                report.write(&dir.join("metrics.json"))?;
                report
            }
        };
        rows.push(AblationRow {
            seed: tcfg.seed,
            cell,
            report,
        });
    }
    let path = out.join("ablation.csv");
    std::fs::write(&path, format_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn format_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?}",
            r.seed, r.cell.tap, r.cell.gamma, r.report.regressed_l2, r.report.pck, r.report.mae
        )
        .expect("string write");
    }
    out
}

/// Parsed `ablation.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub seed: u64,
    pub tap: KdTap,
    pub gamma: f64,
    pub regressed_l2: f64,
    pub pck: f64,
    pub mae: f64,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::InvalidArgument(format!("ablation CSV must start with `{CSV_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::InvalidArgument(format!("ablation CSV line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(CsvRow {
                seed: f[0].parse().map_err(|_| bad())?,
                tap: f[1].parse().map_err(|_| bad())?,
                gamma: num(f[2])?,
                regressed_l2: num(f[3])?,
                pck: num(f[4])?,
                mae: num(f[5])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_sixteen_cells() {
        let cells = AblationConfig::default().cells();
        assert_eq!(cells.len(), 16);
        assert_eq!(cells.iter().filter(|c| c.tap == KdTap::None).count(), 1);
        let mut names: Vec<String> = cells.iter().map(Cell::dir_name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 16);
    }

    #[test]
    fn csv_roundtrip() {
        let report = MetricReport {
            regressed_l2: 4.25,
            pck: 0.5,
            mae: 30.0,
            n_images: 3,
            config: Default::default(),
        };
        let rows: Vec<AblationRow> = AblationConfig::default()
            .cells()
            .into_iter()
            .map(|cell| AblationRow {
                seed: 9,
                cell,
                report: report.clone(),
            })
            .collect();
        let parsed = parse_csv(&format_csv(&rows)).unwrap();
        assert_eq!(parsed.len(), 16);
        assert!(parsed.iter().zip(&rows).all(|(p, r)| p.tap == r.cell.tap && p.gamma == r.cell.gamma && p.seed == 9));
        assert!(parse_csv("seed,tap\n").is_err());
    }
}
