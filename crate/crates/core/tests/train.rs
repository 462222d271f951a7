use dkp_core::losses::KdTap;
use dkp_core::nets::{Checkpoint, Tap};
use dkp_core::synthdata::{generate, split_seeds, Scene, SynthConfig};
use dkp_core::train::{freeze, format_log, train_student, train_teacher, FrozenTeacher, TrainConfig, TrainMode};

fn scenes(n: usize, size: usize) -> Vec<Scene> {
    let (seeds, _) = split_seeds(n, 1, 21).unwrap();
    generate(&seeds, &SynthConfig { size }).unwrap()
}

fn small(mode: TrainMode, iterations: usize) -> TrainConfig {
    TrainConfig {
        mode,
        iterations,
        batch_size: 2,
        lr: 1e-3,
        sigma2: 5e-4,
        widths: [4, 4, 8, 8],
        log_every: 10,
        ..Default::default()
    }
}

fn teacher(data: &[Scene]) -> (Checkpoint, FrozenTeacher) {
    let run = train_teacher(data, &small(TrainMode::Teacher, 20)).unwrap();
    let frozen = freeze(&run.checkpoint).unwrap();
    (run.checkpoint, frozen)
}

fn params(ck: &Checkpoint) -> Vec<(String, dkp_core::Tensor)> {
    ck.tensors.iter().filter(|(n, _)| !n.starts_with("adam.")).cloned().collect()
}

#[test]
fn teacher_loss_decreases() {
    let data = scenes(32, 32);
    let run = train_teacher(&data, &small(TrainMode::Teacher, 200)).unwrap();
    let first = run.log[0].total;
    let tail: Vec<f64> = run.log.iter().rev().take(5).map(|r| r.total).collect();
    let late = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(late < 0.8 * first, "first {first}, late mean {late}");
    assert_eq!(run.log.last().unwrap().iter, 200);
    assert!(run.log.iter().all(|r| r.lcos.is_none() && r.mean_cosine.is_none()));
}

#[test]
fn same_config_same_bits() {
    let data = scenes(8, 16);
    let (_, t) = teacher(&data);
    let cfg = small(TrainMode::Student, 15);
    let a = train_student(&data, Some(&t), &cfg).unwrap();
    let b = train_student(&data, Some(&t), &cfg).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(format_log(&a.log), format_log(&b.log));
    let c = train_student(&data, Some(&t), &TrainConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(params(&a.checkpoint), params(&c.checkpoint));
}

#[test]
fn zero_gamma_matches_plain_student() {
    let data = scenes(8, 16);
    let (_, t) = teacher(&data);
    let kd0 = train_student(&data, Some(&t), &TrainConfig { gamma: 0.0, ..small(TrainMode::Student, 10) }).unwrap();
    let none = train_student(&data, Some(&t), &TrainConfig { kd_tap: KdTap::None, ..small(TrainMode::Student, 10) }).unwrap();
    let plain = train_student(&data, None, &small(TrainMode::StudentNoKd, 10)).unwrap();
    assert_eq!(params(&kd0.checkpoint), params(&plain.checkpoint));
    assert_eq!(params(&none.checkpoint), params(&plain.checkpoint));
    assert!(plain.log.iter().all(|r| r.lcos.is_none()));
}

#[test]
fn teacher_untouched_by_student_training() {
    let data = scenes(8, 16);
    let (ck, t) = teacher(&data);
    let before = t.model().state_tensors(None);
    for tap in Tap::ALL {
        let cfg = TrainConfig {
            kd_tap: KdTap::Layer(tap),
            gamma: 1.0,
            ..small(TrainMode::Student, 5)
        };
        train_student(&data, Some(&t), &cfg).unwrap();
    }
    assert_eq!(t.model().state_tensors(None), before);
    let reloaded = freeze(&ck).unwrap();
    assert_eq!(reloaded.model().state_tensors(None), before);
}

#[test]
fn distillation_raises_cosine() {
    let data = scenes(16, 16);
    let (_, t) = teacher(&data);
    let cfg = TrainConfig {
        gamma: 1.0,
        ..small(TrainMode::Student, 300)
    };
    let run = train_student(&data, Some(&t), &cfg).unwrap();
    let cos: Vec<f64> = run.log.iter().map(|r| r.mean_cosine.unwrap()).collect();
    let early = cos[..3].iter().sum::<f64>() / 3.0;
    let late = cos[cos.len() - 3..].iter().sum::<f64>() / 3.0;
    assert!(late > early, "cosine {early} -> {late}");
    for r in &run.log {
        assert_eq!(r.mean_cosine, r.lcos.map(|c| -c));
    }
}

#[test]
fn stays_finite_across_seeds() {
    let data = scenes(8, 16);
    let (_, t) = teacher(&data);
    for seed in 0..10 {
        let cfg = TrainConfig {
            seed,
            log_every: 1,
            ..small(TrainMode::Student, 8)
        };
        let run = train_student(&data, Some(&t), &cfg).unwrap();
        assert!(run.log.iter().all(|r| r.total.is_finite() && r.lp.is_finite()), "seed {seed}");
        assert!(run.checkpoint.tensors.iter().all(|(_, t)| t.first_non_finite().is_none()));
    }
}

#[test]
fn gamma_is_ignored_for_teachers() {
    let data = scenes(8, 16);
    let a = train_teacher(&data, &TrainConfig { gamma: 0.1, ..small(TrainMode::Teacher, 6) }).unwrap();
    let b = train_teacher(&data, &TrainConfig { gamma: 0.9, kd_tap: KdTap::Layer(Tap::Early), ..small(TrainMode::Teacher, 6) }).unwrap();
    assert_eq!(params(&a.checkpoint), params(&b.checkpoint));
}

#[test]
fn protocol_misuse_is_rejected() {
    let data = scenes(4, 16);
    assert!(train_student(&data, None, &small(TrainMode::Student, 2)).is_err());
    assert!(train_teacher(&data, &small(TrainMode::Student, 2)).is_err());
    assert!(train_student(&data, None, &small(TrainMode::Teacher, 2)).is_err());
    let (_, t) = teacher(&data);
    let wider = TrainConfig {
        widths: [8, 8, 8, 8],
        ..small(TrainMode::Student, 2)
    };
    assert!(train_student(&data, Some(&t), &wider).is_err());
    assert!(train_student(&[], Some(&t), &small(TrainMode::Student, 2)).is_err());
}

#[test]
fn checkpoint_reloads_to_same_predictions() {
    let data = scenes(4, 16);
    let run = train_teacher(&data, &small(TrainMode::Teacher, 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    run.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, run.checkpoint);
    let model = dkp_core::nets::KeypointModel::from_checkpoint(&back).unwrap();
    let x = dkp_core::synthdata::stack_depth3(&data.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(model.predict_keypoints(&x).unwrap(), run.model.predict_keypoints(&x).unwrap());
    assert_eq!(model.load_adam(&back).unwrap().unwrap(), run.adam.state);
    assert_eq!(back.config["mode"], "teacher");
}
