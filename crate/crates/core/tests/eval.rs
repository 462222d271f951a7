use dkp_core::eval::{
    evaluate_model, evaluate_predictions, fit_regressor, mae, pck, read_predictions, regressed_l2, to_pixels, write_predictions,
    PredictionSource, Regressor,
};
use dkp_core::nets::{KeypointModel, ModelConfig};
use dkp_core::synthdata::{make_split, SynthConfig};
use dkp_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    Tensor::new(vec![n, k, 2], (0..n * k * 2).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Normal equations `(X^T X) W = X^T Y` solved by Gauss-Jordan elimination.
fn oracle_fit(pred: &Tensor, gt: &Tensor) -> (Vec<Vec<f64>>, usize) {
    let n = pred.shape()[0];
    let (din, dout) = (pred.shape()[1] * 2, gt.shape()[1] * 2);
    let cols = din + 1;
    let row = |r: usize| -> Vec<f64> {
        let mut x = pred.data()[r * din..(r + 1) * din].to_vec();
        x.push(1.0);
        x
    };
    let mut aug = vec![vec![0.0; cols + dout]; cols];
    for r in 0..n {
        let x = row(r);
        let y = &gt.data()[r * dout..(r + 1) * dout];
        for i in 0..cols {
            for j in 0..cols {
                aug[i][j] += x[i] * x[j];
            }
            for o in 0..dout {
                aug[i][cols + o] += x[i] * y[o];
            }
        }
    }
    for c in 0..cols {
        let p = (c..cols).max_by(|&a, &b| aug[a][c].abs().total_cmp(&aug[b][c].abs())).unwrap();
        aug.swap(c, p);
        let piv = aug[c][c];
        for v in aug[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..cols {
            if r != c {
                let f = aug[r][c];
                let src = aug[c].clone();
                for (v, s) in aug[r].iter_mut().zip(&src) {
                    *v -= f * s;
                }
            }
        }
    }
    // W[i][o] for input i (last = intercept).
    (aug.iter().map(|r| r[cols..].to_vec()).collect(), din)
}

fn oracle_l2(pred: &Tensor, gt: &Tensor, w: &[Vec<f64>], din: usize, size: usize) -> f64 {
    let dout = gt.shape()[1] * 2;
    let n = pred.shape()[0];
    let mut total = 0.0;
    for r in 0..n {
        let x = &pred.data()[r * din..(r + 1) * din];
        let mapped: Vec<f64> = (0..dout)
            .map(|o| w[din][o] + (0..din).map(|i| w[i][o] * x[i]).sum::<f64>())
            .collect();
        for jnt in 0..dout / 2 {
            let px = |v: f64| (v + 1.0) * size as f64 / 2.0;
            let dx = px(mapped[2 * jnt]) - px(gt.data()[r * dout + 2 * jnt]);
            let dy = px(mapped[2 * jnt + 1]) - px(gt.data()[r * dout + 2 * jnt + 1]);
            total += dx.hypot(dy);
        }
    }
    total / (n * dout / 2) as f64 / size as f64 * 100.0
}

fn brute_pck(pred: &Tensor, gt: &Tensor, thr: f64) -> f64 {
    let n = pred.len() / 2;
    let mut hits = 0;
    for i in 0..n {
        let (dx, dy) = (pred.data()[2 * i] - gt.data()[2 * i], pred.data()[2 * i + 1] - gt.data()[2 * i + 1]);
        if dx.hypot(dy) <= thr {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

fn brute_mae(pred: &Tensor, gt: &Tensor) -> f64 {
    let [n, j, _] = pred.shape()[..] else { unreachable!() };
    let mut per_image = Vec::new();
    for img in 0..n {
        let mut s = 0.0;
        for jnt in 0..j {
            let b = (img * j + jnt) * 2;
            s += (pred.data()[b] - gt.data()[b]).hypot(pred.data()[b + 1] - gt.data()[b + 1]);
        }
        per_image.push(s);
    }
    per_image.iter().sum::<f64>() / n as f64
}

#[test]
fn metrics_match_brute_force_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (k, j) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let n_train = rng.random_range(2 * k + 5..60);
        let (ptr, gtr) = (random_points(&mut rng, n_train, k), random_points(&mut rng, n_train, j));
        let (pte, gte) = (random_points(&mut rng, 20, k), random_points(&mut rng, 20, j));
        let size = [64, 128, 256][rng.random_range(0..3)];

        let reg = fit_regressor(&ptr, &gtr).unwrap();
        assert!(!reg.ridge);
        let (w, din) = oracle_fit(&ptr, &gtr);
        let got = regressed_l2(&reg, &pte, &gte, size).unwrap();
        let want = oracle_l2(&pte, &gte, &w, din, size);
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");

        let (pp, gp) = (to_pixels(&pte, 256), to_pixels(&random_points(&mut rng, 20, k), 256));
        let thr = rng.random_range(0.0..200.0);
        assert!((pck(&pp, &gp, thr).unwrap() - brute_pck(&pp, &gp, thr)).abs() <= 1e-9);
        assert!((mae(&pp, &gp).unwrap() - brute_mae(&pp, &gp)).abs() <= 1e-9);
    }
}

#[test]
fn residual_matches_normal_equations_on_joint_sized_problem() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (pred, gt) = (random_points(&mut rng, 100, 8), random_points(&mut rng, 100, 8));
    let reg = fit_regressor(&pred, &gt).unwrap();
    let (w, din) = oracle_fit(&pred, &gt);
    let got = regressed_l2(&reg, &pred, &gt, 256).unwrap();
    let want = oracle_l2(&pred, &gt, &w, din, 256);
    assert!((got - want).abs() <= 1e-9);
}

#[test]
fn identity_and_affine_maps_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pred = random_points(&mut rng, 40, 8);
    let reg = fit_regressor(&pred, &pred).unwrap();
    let id = Regressor::identity(8);
    assert!(reg.a.iter().zip(&id.a).all(|(a, b)| (a - b).abs() <= 1e-9));
    assert!(reg.b.iter().all(|b| b.abs() <= 1e-9));

    let gt = pred.map(|v| 0.5 * v - 0.2);
    let reg = fit_regressor(&pred, &gt).unwrap();
    assert!(regressed_l2(&reg, &pred, &gt, 64).unwrap() <= 1e-9);
}

fn affine(t: &Tensor, m: [[f64; 2]; 2], b: [f64; 2]) -> Tensor {
    let data = t
        .data()
        .chunks(2)
        .flat_map(|p| [m[0][0] * p[0] + m[0][1] * p[1] + b[0], m[1][0] * p[0] + m[1][1] * p[1] + b[1]])
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

#[test]
fn regressed_l2_absorbs_affine_distortion() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (ptr, gtr) = (random_points(&mut rng, 60, 6), random_points(&mut rng, 60, 8));
        let (pte, gte) = (random_points(&mut rng, 30, 6), random_points(&mut rng, 30, 8));
        let base = regressed_l2(&fit_regressor(&ptr, &gtr).unwrap(), &pte, &gte, 64).unwrap();
        let m = [[rng.random_range(0.5..2.0), rng.random_range(-0.5..0.5)], [rng.random_range(-0.5..0.5), rng.random_range(0.5..2.0)]];
        let b = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let (dtr, dte) = (affine(&ptr, m, b), affine(&pte, m, b));
        let moved = regressed_l2(&fit_regressor(&dtr, &gtr).unwrap(), &dte, &gte, 64).unwrap();
        assert!((base - moved).abs() <= 1e-6, "{base} vs {moved}");
    }
}

#[test]
fn normalization_cancels_image_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (p, g) = (random_points(&mut rng, 10, 4), random_points(&mut rng, 10, 4));
    let id = Regressor::identity(4);
    let a = regressed_l2(&id, &p, &g, 128).unwrap();
    let b = regressed_l2(&id, &p, &g, 256).unwrap();
    assert!((a - b).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn pck_is_monotone_in_threshold(seed in any::<u64>(), t1 in 0.0f64..300.0, t2 in 0.0f64..300.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, g) = (to_pixels(&random_points(&mut rng, 5, 4), 256), to_pixels(&random_points(&mut rng, 5, 4), 256));
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let (a, b) = (pck(&p, &g, lo).unwrap(), pck(&p, &g, hi).unwrap());
        prop_assert!(a <= b);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
    }

    #[test]
    fn errors_are_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = evaluate_predictions(
            &random_points(&mut rng, 12, 2), &random_points(&mut rng, 12, 3),
            &random_points(&mut rng, 4, 2), &random_points(&mut rng, 4, 3), 64,
        ).unwrap();
        prop_assert!(r.regressed_l2 >= 0.0 && r.mae >= 0.0 && (0.0..=1.0).contains(&r.pck));
    }
}

#[test]
fn ground_truth_injection_scores_perfectly() {
    let split = make_split(30, 6, 2, &SynthConfig { size: 16 }).unwrap();
    let model = KeypointModel::new(ModelConfig { widths: [4, 4, 8, 8], ..Default::default() }, 0).unwrap();
    let r = evaluate_model(&model, &split.train, &split.test, PredictionSource::GroundTruth).unwrap();
    assert!(r.regressed_l2 <= 1e-9);
    assert_eq!(r.pck, 1.0);
    assert_eq!(r.n_images, 6);

    let m1 = evaluate_model(&model, &split.train, &split.test, PredictionSource::Model).unwrap();
    let m2 = evaluate_model(&model, &split.train, &split.test, PredictionSource::Model).unwrap();
    assert_eq!(m1.to_json(), m2.to_json());
    assert_eq!(m1.n_images, 6);
}

#[test]
fn predictions_csv_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_points(&mut rng, 7, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.csv");
    write_predictions(&path, &p).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), p);
    std::fs::write(&path, "x0,y0\n1,2\n3\n").unwrap();
    assert!(read_predictions(&path).is_err());
}
