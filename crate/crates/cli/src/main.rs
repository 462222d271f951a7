//! `dkp`: dataset generation, teacher and student training, evaluation,
//! tap x gamma ablation and overlay rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use dkp_core::eval::{evaluate_model, write_predictions, PredictionSource};
use dkp_core::nets::{Checkpoint, KeypointModel};
use dkp_core::synthdata::{load_dataset, make_split, sample_scene, write_split, SynthConfig};
use dkp_core::train::ablation::{run_ablation, AblationConfig};
use dkp_core::train::{freeze, train_student, train_teacher, write_log, TrainConfig, TrainMode};

mod render;
mod settings;

use settings::{write_config, Settings};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "dkp", version, about = "Depth-distilled unsupervised keypoint detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Training flags shared by `train` and `ablate`; each overrides the config file.
#[derive(clap::Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    keypoints: Option<usize>,
    /// Four comma-separated channel widths.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainFlags {
    fn apply(&self, s: &mut Settings) {
        s.flag("iterations", self.iters);
        s.flag("batch_size", self.batch_size);
        s.flag("lr", self.lr);
        s.flag("lambda", self.lambda);
        s.flag("sigma2", self.sigma2);
        s.flag("keypoints", self.keypoints);
        s.flag("widths", self.widths.as_ref());
        s.flag("seed", self.seed);
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/test dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a teacher (depth) or a student (RGB).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// teacher, student or student_no_kd.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint; required for distilled students.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        gamma: Option<f64>,
        /// output, mid_tc, early or none.
        #[arg(long)]
        kd_tap: Option<String>,
        #[command(flatten)]
        common: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the keypoint regressor on train and report metrics on test.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score the ground truth as if it were the predictions.
        #[arg(long)]
        inject_gt: bool,
    },
    /// Train and evaluate one student per (tap, gamma) cell.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated gamma list.
        #[arg(long)]
        gammas: Option<String>,
        /// Comma-separated layer taps.
        #[arg(long)]
        taps: Option<String>,
        #[command(flatten)]
        common: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write keypoint/edge overlays, masked input and reconstruction PNGs.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene seed.
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        mask_seed: u64,
        #[arg(long, default_value_t = 4)]
        scale: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| anyhow!("invalid entry `{v}` in `{key}`")))
        .collect()
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v) in s.iter() {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(config: Option<&Path>, flags: [Option<u64>; 4], out: &Path) -> Result<()> {
    const KEYS: [&str; 4] = ["n_train", "n_test", "seed", "size"];
    let mut s = Settings::load(config)?;
    s.check_keys(&KEYS, "gen")?;
    for (k, v) in KEYS.iter().zip(flags) {
        s.flag(k, v);
    }
    let get = |k: &str, default: u64| -> Result<u64> {
        s.get(k).map_or(Ok(default), |v| v.parse().map_err(|_| anyhow!("invalid value `{v}` for `{k}`")))
    };
    let (n_train, n_test, seed, size) = (get("n_train", 1000)?, get("n_test", 200)?, get("seed", 7)?, get("size", 64)?);
    let synth = SynthConfig { size: size as usize };
    let split = make_split(n_train as usize, n_test as usize, seed, &synth)?;
    write_split(&out.join("train"), &split.train)?;
    write_split(&out.join("test"), &split.test)?;
    let effective = [
        ("n_train", n_train.to_string()),
        ("n_test", n_test.to_string()),
        ("seed", seed.to_string()),
        ("size", size.to_string()),
    ];
    write_config(&out.join("config.txt"), effective.iter().map(|(k, v)| (*k, v.as_str())))?;
    log::info!("wrote {} train and {} test scenes to {}", n_train, n_test, out.display());
    Ok(())
}

fn checkpoint_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Teacher => "teacher.ckpt",
        _ => "student.ckpt",
    }
}

fn cmd_train(s: Settings, data: &Path, teacher: Option<&Path>, out: &Path) -> Result<()> {
    s.check_keys(&TrainConfig::KEYS, "train")?;
    let cfg = train_config(&s)?;
    let split = load_dataset(data)?;
    create_dir(out)?;
    let run = match cfg.mode {
        TrainMode::Teacher => train_teacher(&split.train, &cfg)?,
        TrainMode::Student => {
            let path = teacher.ok_or_else(|| anyhow!("--teacher is required for mode student"))?;
            let frozen = freeze(&Checkpoint::load(path)?)?;
            train_student(&split.train, Some(&frozen), &cfg)?
        }
        TrainMode::StudentNoKd => train_student(&split.train, None, &cfg)?,
    };
    let echo = cfg.echo();
    write_config(&out.join("config.txt"), echo.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    run.checkpoint.save(&out.join(checkpoint_name(cfg.mode)))?;
    write_log(&out.join("train_log.csv"), &run.log)?;
    if let Some(last) = run.log.last() {
        log::info!("{} done: total loss {:.6} at iteration {}", cfg.mode, last.total, last.iter);
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, KeypointModel)> {
    let ck = Checkpoint::load(path)?;
    let model = KeypointModel::from_checkpoint(&ck).with_context(|| format!("loading model from {}", path.display()))?;
    Ok((ck, model))
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, inject_gt: bool) -> Result<()> {
    let (_, model) = load_model(checkpoint)?;
    let split = load_dataset(data)?;
    let source = if inject_gt { PredictionSource::GroundTruth } else { PredictionSource::Model };
    if inject_gt && model.config.keypoints != dkp_core::synthdata::NUM_JOINTS {
        log::warn!("ground-truth injection scores J joints, not the model's K keypoints");
    }
    let mut report = evaluate_model(&model, &split.train, &split.test, source)?;
    report.config.insert("checkpoint".into(), checkpoint.display().to_string());
    report.config.insert("data".into(), data.display().to_string());
    create_dir(out)?;
    report.write(&out.join("metrics.json"))?;
    write_config(&out.join("config.txt"), report.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    if source == PredictionSource::Model {
        write_predictions(&out.join("predictions.csv"), &dkp_core::eval::predict(&model, &split.test)?)?;
    }
    println!(
        "regressed_l2 {:.4}  pck {:.4}  mae {:.3}  (n = {})",
        report.regressed_l2, report.pck, report.mae, report.n_images
    );
    Ok(())
}

fn cmd_ablate(mut s: Settings, teacher: &Path, data: &Path, out: &Path) -> Result<()> {
    let mut allowed = TrainConfig::KEYS.to_vec();
    allowed.extend(["gammas", "taps"]);
    s.check_keys(&allowed, "ablate")?;
    let mut cfg = AblationConfig::default();
    if let Some(v) = s.take("gammas") {
        cfg.gammas = parse_list("gammas", &v)?;
    }
    if let Some(v) = s.take("taps") {
        cfg.taps = parse_list("taps", &v)?;
    }
    for k in ["mode", "gamma", "kd_tap"] {
        if s.take(k).is_some() {
            log::warn!("`{k}` is set per ablation cell; ignoring the configured value");
        }
    }
    cfg.train = train_config(&s)?;
    cfg.validate()?;
    let split = load_dataset(data)?;
    let frozen = freeze(&Checkpoint::load(teacher)?)?;
    create_dir(out)?;
    let mut echo = cfg.train.echo();
    echo.retain(|(k, _)| !["mode", "gamma", "kd_tap"].contains(&k.as_str()));
    echo.push(("gammas".into(), cfg.gammas.iter().map(|g| format!("{g:?}")).collect::<Vec<_>>().join(",")));
    echo.push(("taps".into(), cfg.taps.iter().map(|t| t.name()).collect::<Vec<_>>().join(",")));
    write_config(&out.join("config.txt"), echo.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let rows = run_ablation(&cfg, &frozen, &split, out)?;
    for r in rows {
        println!("{:>8} gamma {:<4} regressed_l2 {:.4}", r.cell.tap.to_string(), r.cell.gamma, r.report.regressed_l2);
    }
    Ok(())
}

fn cmd_render(checkpoint: &Path, seed: u64, size: usize, mask_seed: u64, scale: u32, out: &Path) -> Result<()> {
    let (ck, model) = load_model(checkpoint)?;
    let mut train = TrainConfig::default();
    for k in ["mode", "sigma2"] {
        if let Some(v) = ck.config.get(k) {
            train.set(k, v)?;
        }
    }
    let scene = sample_scene(seed, &SynthConfig { size })?;
    let panels = render::compute(&model, &scene, mask_seed, train.sigma2, train.mode == TrainMode::Teacher)?;
    panels.write(out, scale)?;
    let effective = [
        ("checkpoint", checkpoint.display().to_string()),
        ("seed", seed.to_string()),
        ("size", size.to_string()),
        ("mask_seed", mask_seed.to_string()),
        ("scale", scale.to_string()),
        ("sigma2", format!("{:?}", train.sigma2)),
    ];
    write_config(&out.join("config.txt"), effective.iter().map(|(k, v)| (*k, v.as_str())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            config,
            n_train,
            n_test,
            seed,
            size,
            out,
        } => cmd_gen(
            config.as_deref(),
            [n_train.map(|v| v as u64), n_test.map(|v| v as u64), seed, size.map(|v| v as u64)],
            &out,
        ),
        Command::Train {
            config,
            mode,
            data,
            teacher,
            gamma,
            kd_tap,
            common,
            out,
        } => {
            let mut s = Settings::load(config.as_deref())?;
            s.flag("mode", mode);
            s.flag("gamma", gamma);
            s.flag("kd_tap", kd_tap);
            common.apply(&mut s);
            cmd_train(s, &data, teacher.as_deref(), &out)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            inject_gt,
        } => cmd_eval(&checkpoint, &data, &out, inject_gt),
        Command::Ablate {
            config,
            teacher,
            data,
            gammas,
            taps,
            common,
            out,
        } => {
            let mut s = Settings::load(config.as_deref())?;
            s.flag("gammas", gammas);
            s.flag("taps", taps);
            common.apply(&mut s);
            cmd_ablate(s, &teacher, &data, &out)
        }
        Command::Render {
            checkpoint,
            seed,
            size,
            mask_seed,
            scale,
            out,
        } => cmd_render(&checkpoint, seed, size, mask_seed, scale, &out),
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("DKP_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| anyhow!("DKP_THREADS must be a positive integer, got `{v}`"))?;
    if n == 0 {
        bail!("DKP_THREADS must be a positive integer, got 0");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn is_numeric_abort(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<dkp_core::Error>(),
            Some(dkp_core::Error::Diverged { .. } | dkp_core::Error::NonFinite { .. })
        )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_numeric_abort(&e) { EXIT_NUMERIC } else { EXIT_USAGE })
        }
    }
}
