use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use dkp_bench::wave;
use dkp_core::kpgraph::{render_edge_map_var, soft_argmax_var};
use dkp_core::synthdata::{generate, split_seeds, SynthConfig};
use dkp_core::train::{train_teacher, TrainConfig, TrainMode};
use dkp_core::Graph;

fn conv(c: &mut Criterion) {
    let (x, w, b) = (wave(&[4, 16, 32, 32], 0.0), wave(&[32, 16, 3, 3], 1.0), wave(&[32], 2.0));
    c.bench_function("conv2d 4x16x32x32 -> 32 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.leaf(x.clone(), true), g.leaf(w.clone(), true), g.leaf(b.clone(), true));
            let y = g.conv2d(xv, wv, Some(bv), 1, 1).unwrap();
            let s = g.sum(y);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn keypoint_ops(c: &mut Criterion) {
    let heat = wave(&[4, 8, 64, 64], 0.5);
    c.bench_function("soft_argmax 4x8x64x64 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let h = g.leaf(heat.clone(), true);
            let kp = soft_argmax_var(&mut g, h).unwrap();
            let s = g.sum(kp);
            black_box(g.backward(s).unwrap());
        })
    });

    let kps = wave(&[4, 8, 2], 0.3).map(|v| 0.8 * v);
    let logits = wave(&[28], 0.9);
    c.bench_function("edge_map 4x8 keypoints at 64x64 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (k, l) = (g.leaf(kps.clone(), true), g.leaf(logits.clone(), true));
            let e = render_edge_map_var(&mut g, k, l, 5e-4, 64, 64).unwrap();
            let s = g.sum(e);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn training(c: &mut Criterion) {
    let (seeds, _) = split_seeds(16, 1, 1).unwrap();
    let scenes = generate(&seeds, &SynthConfig { size: 64 }).unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::Teacher,
        iterations: 5,
        batch_size: 4,
        widths: [8, 16, 32, 64],
        ..Default::default()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("teacher 5 steps, batch 4 at 64x64", |bench| {
        bench.iter(|| black_box(train_teacher(&scenes, &cfg).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, conv, keypoint_ops, training);
criterion_main!(benches);
