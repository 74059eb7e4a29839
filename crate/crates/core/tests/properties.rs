mod common;

use candle_core::{DType, Device};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use splice_core::augment::{augment_pair, AugmentPolicy};
use splice_core::clsops::{interpolate_cls, kmeans_modes};
use splice_core::distillation::{knn, mutual_knn_pairs, parse_pairs, DescriptorIndex, Metric};
use splice_core::features::{self_similarity, ClsToken};
use splice_core::image::ImageTensor;
use splice_core::inversion::FeatureSelector;
use splice_core::losses::{LossReport, LossWeights};
use splice_core::training::TrainConfig;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, c), r)
            .prop_filter("rows need a nonzero norm", |m| m.iter().all(|row| row.iter().any(|v| v.abs() > 1e-3)))
    })
}

fn descriptors(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<Vec<f32>>> {
    n.prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), n))
        .prop_filter("nonzero descriptors", |d| d.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)))
}

fn index_of(desc: &[Vec<f32>]) -> DescriptorIndex {
    let ids = (0..desc.len()).map(|i| format!("im{i:03}")).collect();
    DescriptorIndex::new(ids, desc.to_vec(), Metric::Cosine, 4).unwrap()
}

fn token(v: &[f32]) -> ClsToken {
    ClsToken::from_vec(v, 12, &Device::Cpu, DType::F32).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn self_similarity_is_symmetric_with_unit_diagonal(keys in matrix(1..=24, 1..=12)) {
        let s = to_rows(&self_similarity(&to_tensor(&keys)).unwrap().matrix);
        for i in 0..s.len() {
            prop_assert!((s[i][i] - 1.0).abs() <= 1e-9);
            for j in 0..s.len() {
                prop_assert!((s[i][j] - s[j][i]).abs() <= 1e-12);
                prop_assert!((-1.0..=1.0).contains(&s[i][j]));
            }
        }
    }

    #[test]
    fn self_similarity_ignores_positive_row_scale(keys in matrix(2..=16, 1..=8), scale in 0.01f64..100.0) {
        let scaled: Vec<Vec<f64>> = keys.iter().enumerate()
            .map(|(i, r)| r.iter().map(|v| v * scale * (i + 1) as f64).collect())
            .collect();
        let a = to_rows(&self_similarity(&to_tensor(&keys)).unwrap().matrix);
        let b = to_rows(&self_similarity(&to_tensor(&scaled)).unwrap().matrix);
        prop_assert!(max_abs_diff(&a, &b) <= 1e-9);
    }

    #[test]
    fn self_similarity_is_permutation_equivariant(keys in matrix(2..=16, 1..=8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..keys.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| keys[p].clone()).collect();
        let s = to_rows(&self_similarity(&to_tensor(&keys)).unwrap().matrix);
        let sp = to_rows(&self_similarity(&to_tensor(&permuted)).unwrap().matrix);
        for (i, &a) in perm.iter().enumerate() {
            for (j, &b) in perm.iter().enumerate() {
                prop_assert!((sp[i][j] - s[a][b]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn interpolation_is_affine(
        pair in (1usize..=32).prop_flat_map(|d| (prop::collection::vec(-5.0f32..5.0, d), prop::collection::vec(-5.0f32..5.0, d))),
        alpha in -0.5f64..1.5,
    ) {
        let (s, t) = pair;
        let out = interpolate_cls(&token(&s), &token(&t), &[alpha]).unwrap()[0].to_vec().unwrap();
        for i in 0..s.len() {
            let want = alpha * t[i] as f64 + (1.0 - alpha) * s[i] as f64;
            prop_assert!((out[i] as f64 - want).abs() <= 1e-5 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(points in matrix(4..=40, 1..=5), k in 1usize..=4, seed in any::<u64>()) {
        let k = k.min(points.len());
        let m = kmeans_modes(&points, k, seed, 300).unwrap();
        prop_assert!(m.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", m.inertia_trace);
        prop_assert!(m.assignments.iter().all(|&a| a < k));
        let direct: f64 = points.iter().zip(&m.assignments)
            .map(|(p, &a)| p.iter().zip(&m.centroids[a]).map(|(x, c)| (x - c).powi(2)).sum::<f64>())
            .sum();
        prop_assert!((direct - m.inertia).abs() <= 1e-9 * (1.0 + direct));
    }

    #[test]
    fn mutual_pairs_grow_with_k_and_are_mutual(desc in descriptors(3..=24)) {
        let index = index_of(&desc);
        let mut prev: Vec<(String, String)> = Vec::new();
        for k in 1..desc.len() {
            let cur = mutual_knn_pairs(&index, k).unwrap().unordered;
            for p in &prev {
                prop_assert!(cur.contains(p), "{p:?} lost going to K={k}");
            }
            for (a, b) in &cur {
                prop_assert!(a < b);
                prop_assert!(knn(&index, a, k).unwrap().contains(b));
                prop_assert!(knn(&index, b, k).unwrap().contains(a));
            }
            prev = cur;
        }
        // at K = N-1 every image neighbors every other
        let n = desc.len();
        prop_assert_eq!(prev.len(), n * (n - 1) / 2);
    }

    #[test]
    fn pair_files_round_trip(desc in descriptors(3..=16), k in 1usize..=2) {
        let set = mutual_knn_pairs(&index_of(&desc), k).unwrap();
        let parsed = parse_pairs(&set.to_tsv(), std::path::Path::new("pairs.tsv")).unwrap();
        prop_assert_eq!(parsed, set.ordered());
    }

    #[test]
    fn loss_report_total_decomposes(
        parts in prop::array::uniform3(0.0f64..1e3),
        alpha in 0.0f64..10.0,
        beta in 0.0f64..10.0,
    ) {
        let r = LossReport::from_components(parts[0], parts[1], parts[2], LossWeights { alpha, beta });
        let want = parts[0] + alpha * parts[1] + beta * parts[2];
        prop_assert!((r.total - want).abs() <= 1e-12 * (1.0 + want));
        prop_assert!(r.is_finite());
    }

    #[test]
    fn selectors_round_trip(layer in 1usize..=12, kind in 0usize..3) {
        let sel = [FeatureSelector::Cls(layer), FeatureSelector::Keys(layer), FeatureSelector::SelfSim(layer)][kind];
        prop_assert_eq!(sel.to_string().parse::<FeatureSelector>().unwrap(), sel);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn augmentation_keeps_pixels_in_range_and_crops_square(
        h in 12usize..=40,
        w in 12usize..=40,
        seed in any::<u64>(),
    ) {
        let dev = Device::Cpu;
        let img = ImageTensor::from_fn(h, w, &dev, DType::F32, |y, x| {
            [x as f32 / w as f32, y as f32 / h as f32, ((x * y) % 7) as f32 / 7.0]
        }).unwrap();
        let policy = AugmentPolicy { blur_p: 1.0, jitter_p: 1.0, ..AugmentPolicy::splice() };
        let (s, t) = augment_pair(&img, &img, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for out in [&s, &t] {
            prop_assert_eq!(out.height(), out.width());
            prop_assert!(out.height() <= h.min(w));
            prop_assert!(out.height() as f64 >= 0.95 * h.min(w) as f64 - 1.0);
            prop_assert!(out.to_hwc().unwrap().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn disabled_augmentation_is_identity() {
    let dev = Device::Cpu;
    let img = ImageTensor::from_fn(16, 16, &dev, DType::F32, |y, x| [x as f32 / 16.0, y as f32 / 16.0, 0.25]).unwrap();
    let (s, t) = augment_pair(&img, &img, &AugmentPolicy::disabled(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(s.to_hwc().unwrap(), img.to_hwc().unwrap());
    assert_eq!(t.to_hwc().unwrap(), img.to_hwc().unwrap());
}

#[test]
fn flip_frequency_matches_its_probability() {
    let dev = Device::Cpu;
    // left-to-right ramp: a flip is recognisable from the first column
    let img = ImageTensor::from_fn(8, 8, &dev, DType::F32, |_, x| [x as f32 / 7.0; 3]).unwrap();
    let policy = AugmentPolicy {
        hflip_p: 0.3,
        ..AugmentPolicy::disabled()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let trials = 2000;
    let mut flips = [0usize; 2];
    for _ in 0..trials {
        let (s, t) = augment_pair(&img, &img, &policy, &mut rng).unwrap();
        for (slot, out) in [s, t].iter().enumerate() {
            if out.to_hwc().unwrap()[0] > 0.5 {
                flips[slot] += 1;
            }
        }
    }
    for f in flips {
        let freq = f as f64 / trials as f64;
        // four standard deviations of a binomial(2000, 0.3) proportion is about 0.041
        assert!((freq - 0.3).abs() < 0.041, "flip frequency {freq}");
    }
}

#[test]
fn train_config_survives_a_toml_round_trip() {
    let mut cfg = TrainConfig::splicenet();
    cfg.seed = 17;
    cfg.feature_layer = Some(9);
    let text = cfg.to_toml().unwrap();
    assert_eq!(TrainConfig::default().overlay_toml(&text).unwrap(), cfg);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = TrainConfig::splice().overlay_toml("learning_rate = 0.1\n").unwrap_err();
    assert!(err.to_string().contains("learning_rate"), "{err}");
}

#[test]
fn interpolation_rejects_mismatched_dimensions() {
    let err = interpolate_cls(&token(&[1.0, 2.0]), &token(&[1.0, 2.0, 3.0]), &[0.5]).unwrap_err();
    assert!(matches!(err, splice_core::Error::Shape(_)));
}
