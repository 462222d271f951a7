use dkp_core::kpgraph::{
    pixel_center, point_segment_distance, render_edge_map, soft_argmax, EdgeWeights, Keypoints,
};
use dkp_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum distance over `samples + 1` evenly spaced points of the segment.
fn sampled_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2], samples: usize) -> f64 {
    (0..=samples)
        .map(|i| {
            let t = i as f64 / samples as f64;
            let q = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            (p[0] - q[0]).hypot(p[1] - q[1])
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn distance_matches_dense_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pt = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    for _ in 0..100 {
        let (p, a, b) = (pt(), pt(), pt());
        let got = point_segment_distance(p, a, b);
        assert!((got - sampled_distance(p, a, b, 10_000)).abs() <= 1e-4);
    }
}

#[test]
fn degenerate_segment_is_point_distance() {
    assert_eq!(point_segment_distance([3.0, 4.0], [0.0, 0.0], [0.0, 0.0]), 5.0);
    assert_eq!(point_segment_distance([0.5, 0.0], [0.0, 0.0], [1.0, 0.0]), 0.0);
}

#[test]
fn edge_value_one_sigma_off_the_segment_is_inv_e() {
    let (h, w) = (16, 16);
    let row = 5;
    let y = pixel_center(row, h);
    let kps = Keypoints {
        coords: vec![[-0.9, 0.0], [0.9, 0.0]],
    };
    let map = render_edge_map(&kps, &EdgeWeights::uniform(2, 1.0), y * y, h, w).unwrap();
    for col in 2..14 {
        assert!((map.at(row, col) - (-1.0f64).exp()).abs() <= 1e-9);
    }
    let half = render_edge_map(&kps, &EdgeWeights::uniform(2, 0.5), y * y, h, w).unwrap();
    assert!((half.at(row, 8) - 0.5 * (-1.0f64).exp()).abs() <= 1e-9);
}

fn heatmaps(k: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-30.0f64..30.0, k * h * w).prop_map(move |v| Tensor::new(vec![k, h, w], v).unwrap())
}

proptest! {
    #[test]
    fn edge_values_in_unit_interval(
        coords in prop::collection::vec((-1.5f64..1.5, -1.5f64..1.5), 2..6),
        w in 0.0f64..1.0,
        sigma2 in 1e-4f64..1.0,
    ) {
        let k = coords.len();
        let kps = Keypoints { coords: coords.into_iter().map(|(x, y)| [x, y]).collect() };
        let map = render_edge_map(&kps, &EdgeWeights::uniform(k, w), sigma2, 8, 12).unwrap();
        prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn soft_argmax_stays_in_square(hm in heatmaps(3, 5, 7)) {
        let kp = soft_argmax(&hm).unwrap();
        for [x, y] in kp.coords {
            prop_assert!((-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y));
        }
    }

    #[test]
    fn soft_argmax_ignores_constant_shift(hm in heatmaps(2, 6, 6), c in -50.0f64..50.0) {
        let a = soft_argmax(&hm).unwrap();
        let b = soft_argmax(&hm.map(|v| v + c)).unwrap();
        for (p, q) in a.coords.iter().zip(&b.coords) {
            prop_assert!((p[0] - q[0]).abs() <= 1e-9 && (p[1] - q[1]).abs() <= 1e-9);
        }
    }
}

#[test]
fn sharp_peak_lands_on_its_pixel_center() {
    let mut hm = Tensor::zeros(&[1, 8, 8]);
    hm.data_mut()[3 * 8 + 6] = 200.0;
    let kp = soft_argmax(&hm).unwrap();
    assert!((kp.coords[0][0] - pixel_center(6, 8)).abs() <= 1e-12);
    assert!((kp.coords[0][1] - pixel_center(3, 8)).abs() <= 1e-12);
}
