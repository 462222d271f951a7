use dkp_core::autodiff::grad_check;
use dkp_core::nets::{Checkpoint, FeatureExtractor, KeypointModel, Mode, ModelConfig, Tap};
use dkp_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        image_channels: 3,
        keypoints: 8,
        widths: [4, 8, 8, 16],
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn state_bits(m: &KeypointModel) -> Vec<(String, Vec<u64>)> {
    m.state_tensors(None)
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn detector_emits_k_heatmaps_at_input_resolution() {
    let model = KeypointModel::new(ModelConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let mut cx = model.ctx(&mut g, Mode::Eval);
    let x = cx.g.constant(random_tensor(&[1, 3, 64, 64], 2));
    let out = model.detect(&mut cx, x).unwrap();
    assert_eq!(g.value(out.heatmaps).shape(), &[1, 8, 64, 64]);
    let names: Vec<&str> = Tap::ALL.iter().map(|t| t.name()).collect();
    assert_eq!(names, ["early", "mid_tc", "output"]);
    assert_eq!(g.value(out.tap(Tap::Early)).shape(), &[1, 32, 32, 32]);
    assert_eq!(g.value(out.tap(Tap::MidTc)).shape(), &[1, 64, 16, 16]);
    assert_eq!(g.value(out.tap(Tap::Output)).shape(), &[1, 32, 64, 64]);
}

#[test]
fn detector_rejects_indivisible_input() {
    let model = KeypointModel::new(small_config(), 1).unwrap();
    let mut g = Graph::new();
    let mut cx = model.ctx(&mut g, Mode::Eval);
    let x = cx.g.constant(Tensor::zeros(&[1, 3, 40, 48]));
    assert!(matches!(
        model.detect(&mut cx, x),
        Err(dkp_core::Error::Indivisible { dim: 40, divisor: 16, .. })
    ));
}

#[test]
fn eval_forward_is_deterministic_and_pure() {
    let model = KeypointModel::new(small_config(), 3).unwrap();
    let before = state_bits(&model);
    let img = random_tensor(&[2, 3, 32, 32], 4);
    let a = model.predict_keypoints(&img).unwrap();
    let b = model.predict_keypoints(&img).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(before, state_bits(&model));
}

#[test]
fn train_forward_defers_running_stat_updates() {
    let mut model = KeypointModel::new(small_config(), 3).unwrap();
    let before = state_bits(&model);
    let mut g = Graph::new();
    let mut cx = model.ctx(&mut g, Mode::Train);
    let x = cx.g.constant(random_tensor(&[2, 3, 32, 32], 5));
    model.detect(&mut cx, x).unwrap();
    let updates = std::mem::take(&mut cx.bn_updates);
    assert_eq!(before, state_bits(&model));
    assert!(!updates.is_empty());
    model.apply_bn_updates(&updates);
    assert_ne!(before, state_bits(&model));
}

#[test]
fn decoder_maps_composed_input_to_image() {
    let model = KeypointModel::new(ModelConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let mut cx = model.ctx(&mut g, Mode::Eval);
    let x = cx.g.constant(random_tensor(&[1, 4, 64, 64], 6));
    let y = model.decoder.forward(&mut cx, x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 3, 64, 64]);
}

#[test]
fn zero_final_conv_gives_zero_reconstruction() {
    let mut model = KeypointModel::new(small_config(), 1).unwrap();
    let out = model.decoder.out_conv().clone();
    for id in std::iter::once(out.w).chain(out.b) {
        let p = model.store.get_mut(id);
        p.value = Tensor::zeros(p.value.shape());
    }
    let mut g = Graph::new();
    let mut cx = model.ctx(&mut g, Mode::Eval);
    let x = cx.g.constant(random_tensor(&[1, 4, 32, 32], 7));
    let y = model.decoder.forward(&mut cx, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn decoder_input_gradient_matches_finite_differences() {
    let model = KeypointModel::new(small_config(), 8).unwrap();
    let input = random_tensor(&[1, 4, 16, 16], 9);
    let report = grad_check(
        |g, x| {
            let mut cx = model.ctx(g, Mode::Eval);
            let y = model.decoder.forward(&mut cx, x)?;
            Ok(g.sum(y))
        },
        &input,
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    assert!(report.checked > 900);
}

#[test]
fn feature_stages_halve_resolution() {
    let fx = FeatureExtractor::default_for(3);
    let mut g = Graph::new();
    let x = g.constant(random_tensor(&[1, 3, 32, 32], 10));
    let stages = fx.forward(&mut g, x).unwrap();
    assert_eq!(stages.len(), 3);
    for (l, s) in stages.iter().enumerate() {
        let side = 32 >> (l + 1);
        assert_eq!(&g.value(*s).shape()[2..], &[side, side]);
    }
    let again = fx.forward(&mut g, x).unwrap();
    for (a, b) in stages.iter().zip(&again) {
        assert_eq!(g.value(*a), g.value(*b));
    }
    assert_eq!(fx, FeatureExtractor::default_for(3));
}

#[test]
fn checkpoint_restores_model_exactly() {
    let mut model = KeypointModel::new(small_config(), 11).unwrap();
    model.bn[0].mean[0] = 0.25;
    let mut ck = Checkpoint {
        iteration: 5,
        tensors: model.state_tensors(None),
        ..Default::default()
    };
    ck.config.extend(model.config_echo());
    let back = KeypointModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    assert_eq!(state_bits(&model), state_bits(&back));
    assert_eq!(back.config, model.config);
    assert!(back.load_adam(&ck).unwrap().is_none());
}
