mod common;

use candle_core::{DType, Device, Tensor, Var};

use common::*;
use splice_core::augment::jitter_image;
use splice_core::clsops::kmeans_modes;
use splice_core::distillation::{compute_descriptors, knn, mutual_knn_pairs, Metric};
use splice_core::features::{extract_cls, pca_visualize, self_similarity, ClsToken};
use splice_core::generators::{build_splicenet, splicenet_forward, SpliceNetConfig};
use splice_core::image::ImageTensor;
use splice_core::inversion::{invert_cls_across_layers, invert_feature, FeatureSelector, InversionConfig};
use splice_core::losses::{scalar, structure_loss};
use splice_core::perceptual::{perceptual_distance, Lpips, PerceptualDistance};
use splice_core::synthetic::{random_scene, subject_scene};

fn render(scene: &splice_core::synthetic::Scene, size: usize) -> ImageTensor {
    scene.render(size, size, &Device::Cpu, DType::F32).unwrap()
}

#[test]
fn one_pixel_moves_deep_keys() {
    let vit = tiny_vit(DType::F64);
    let img = render(&random_scene(3), 32).to_dtype(DType::F64).unwrap();
    let eps = 1e-3;
    let keys = |delta: f64| {
        let t = with_element(img.tensor(), 5 * 32 + 7, element(img.tensor(), 5 * 32 + 7) + delta);
        let f = vit.forward_features(&ImageTensor::new(t).unwrap(), &[4]).unwrap();
        to_rows(&f.layer(4).unwrap().keys)
    };
    let column = max_abs_diff(&keys(eps), &keys(-eps)) / (2.0 * eps);
    assert!(column > 0.0 && column.is_finite(), "Jacobian column norm {column}");
}

#[test]
fn different_textures_give_different_cls_tokens() {
    let vit = tiny_vit(DType::F32);
    let cls = |img: &ImageTensor| extract_cls(&vit.forward_features(img, &[4]).unwrap(), 4).unwrap();
    let a = render(&subject_scene(1), 64);
    let b = render(&subject_scene(1).with_appearance_of(&subject_scene(2)), 64);
    let (ca, cb) = (cls(&a), cls(&b));
    assert!(ca.cosine(&cb).unwrap() < 1.0);
    assert_eq!(ca.to_vec().unwrap(), cls(&a).to_vec().unwrap());
}

/// Top-`k` eigenvectors of a symmetric matrix by power iteration with deflation.
fn power_eigenvectors(m: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut out = Vec::new();
    for c in 0..k {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7 + c * 3) % 5) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i][j] * v[j]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.iter().map(|x| x / norm).collect();
            lambda = norm;
        }
        for i in 0..n {
            for j in 0..n {
                a[i][j] -= lambda * v[i] * v[j];
            }
        }
        out.push(v);
    }
    out
}

#[test]
fn pca_scores_match_a_power_iteration_oracle() {
    let mut rng = seeded(8);
    // keys with a dominant low-rank structure so the leading eigenvalues are well separated
    let basis = random_matrix(&mut rng, 3, 6);
    let keys: Vec<Vec<f64>> = (0..17)
        .map(|i| {
            let w = [1.0 + i as f64, (i as f64 * 0.7).sin() * 4.0, 0.5];
            (0..6)
                .map(|c| (0..3).map(|b| w[b] * basis[b][c]).sum::<f64>() + 0.05 * random_matrix(&mut rng, 1, 1)[0][0])
                .collect()
        })
        .collect();
    let s = self_similarity(&to_tensor(&keys)).unwrap();
    let pca = pca_visualize(&s, (4, 4), 2).unwrap();

    let rows = to_rows(&s.spatial().unwrap());
    let n = rows.len();
    let means: Vec<f64> = (0..n).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&means).map(|(v, m)| v - m).collect()).collect();
    let cov: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|r| x[r][i] * x[r][j]).sum()).collect())
        .collect();
    for (c, v) in power_eigenvectors(&cov, 2).iter().enumerate() {
        let oracle: Vec<f64> = x.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
        let sign = if oracle.iter().zip(&pca.scores[c]).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        let dev = oracle.iter().zip(&pca.scores[c]).map(|(a, b)| (sign * a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-6, "component {c} deviates by {dev}");
    }
    for m in &pca.maps {
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn learned_distance_orders_similar_before_dissimilar() {
    let lpips = PerceptualDistance::Learned(Box::new(Lpips::seeded(0, &Device::Cpu, DType::F32).unwrap()));
    let a = render(&subject_scene(4), 64);
    let near = jitter_image(&a, 1.05, 1.0, 1.0, 0.0).unwrap();
    let far = render(&random_scene(77), 64);
    let d = |x: &ImageTensor, y: &ImageTensor| scalar(&perceptual_distance(x, y, &lpips).unwrap()).unwrap();
    assert_eq!(d(&a, &a), 0.0);
    let (dn, df) = (d(&a, &near), d(&a, &far));
    assert!(dn > 0.0 && dn < df, "near {dn}, far {df}");
}

#[test]
fn splicenet_output_depends_on_the_token() {
    let (net, _) = build_splicenet(&SpliceNetConfig::small(16), 1, &Device::Cpu, DType::F32).unwrap();
    let img = render(&subject_scene(2), 32);
    let tok = |v: f32| ClsToken::from_vec(&[v; 16], 12, &Device::Cpu, DType::F32).unwrap();
    let a = splicenet_forward(&net, &img, &tok(0.5)).unwrap().to_hwc().unwrap();
    let b = splicenet_forward(&net, &img, &tok(-0.5)).unwrap().to_hwc().unwrap();
    let zero = splicenet_forward(&net, &img, &tok(0.0)).unwrap().to_hwc().unwrap();
    assert!(zero.iter().all(|v| v.is_finite()));
    assert_eq!(a, splicenet_forward(&net, &img, &tok(0.5)).unwrap().to_hwc().unwrap());
    let linf = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(linf > 0.0);
}

#[test]
fn splicenet_token_jacobian_matches_finite_differences() {
    let (net, _) = build_splicenet(&SpliceNetConfig::small(8), 4, &Device::Cpu, DType::F64).unwrap();
    let img = render(&subject_scene(6), 32).to_dtype(DType::F64).unwrap();
    let mut rng = seeded(12);
    let token = Var::from_tensor(&to_tensor(&random_matrix(&mut rng, 1, 8))).unwrap();
    let weights = Tensor::rand(0.0f64, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
    let loss = |t: &Tensor| net.forward_tensor(img.tensor(), t).unwrap().mul(&weights).unwrap().sum_all().unwrap();
    let grads = loss(token.as_tensor()).backward().unwrap();
    let g: Vec<f64> = grads.get(token.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let base = token.as_tensor().copy().unwrap();
    for i in [0, 2, 3, 5, 7] {
        let x0 = element(&base, i);
        let mut f = |x: f64| scalar(&loss(&with_element(&base, i, x))).unwrap();
        let numeric = central_difference(&mut f, x0, 1e-6);
        assert!(relative_error(g[i], numeric) < 1e-2, "coordinate {i}: {} vs {numeric}", g[i]);
    }
}

#[test]
fn jittered_copy_is_closer_than_an_unrelated_image() {
    let vit = tiny_vit(DType::F32);
    let a = render(&subject_scene(31), 64);
    let images = vec![
        ("a.png".to_string(), a.clone()),
        ("jitter.png".to_string(), jitter_image(&a, 1.2, 0.85, 1.2, 0.05).unwrap()),
        ("other.png".to_string(), render(&random_scene(5), 64)),
    ];
    let index = compute_descriptors(&images, &vit, 2, 64, Metric::Cosine).unwrap();
    assert!(index.similarity(0, 1) > index.similarity(0, 2), "{} vs {}", index.similarity(0, 1), index.similarity(0, 2));
}

#[test]
fn near_duplicates_rank_first_and_pair_up() {
    let vit = tiny_vit(DType::F32);
    let mut images: Vec<(String, ImageTensor)> =
        (0..8).map(|i| (format!("s{i}.png"), render(&random_scene(100 + i), 64))).collect();
    images.push(("copy.png".into(), jitter_image(&images[3].1, 1.03, 1.0, 1.0, 0.0).unwrap()));
    images.push(("twin.png".into(), images[5].1.clone()));
    let index = compute_descriptors(&images, &vit, 2, 64, Metric::Cosine).unwrap();
    assert_eq!(knn(&index, "s3.png", 1).unwrap(), vec!["copy.png"]);
    assert!((index.similarity(5, 9) - 1.0).abs() < 1e-9);
    for k in 1..=3 {
        let pairs = mutual_knn_pairs(&index, k).unwrap().unordered;
        assert!(pairs.contains(&("s5.png".into(), "twin.png".into())), "K={k}: {pairs:?}");
    }
    assert!(mutual_knn_pairs(&index, 10).is_err());
}

#[test]
fn descriptors_are_deterministic() {
    let vit = tiny_vit(DType::F32);
    let images: Vec<(String, ImageTensor)> =
        (0..3).map(|i| (format!("{i}.png"), render(&random_scene(i), 48))).collect();
    let a = compute_descriptors(&images, &vit, 3, 48, Metric::Cosine).unwrap();
    let b = compute_descriptors(&images, &vit, 3, 48, Metric::Cosine).unwrap();
    assert_eq!(a.descriptors, b.descriptors);
    assert_eq!(a.dataset_hash, b.dataset_hash);
    // 48 px / patch 8 = 6x6 grid, window 3 -> 2x2 cells -> 16 entries
    assert_eq!(a.descriptors[0].len(), 16);
}

fn inversion_config(steps: usize) -> InversionConfig {
    InversionConfig {
        steps,
        output_size: 32,
        ..InversionConfig::default()
    }
}

#[test]
fn zero_step_inversion_returns_the_prior_rendering() {
    let vit = tiny_vit(DType::F32);
    let target = render(&subject_scene(9), 32);
    let cfg = inversion_config(0).with_selector(FeatureSelector::Cls(4));
    let r = invert_feature(&target, &cfg, &vit).unwrap();
    assert_eq!(r.trace.len(), 1);
    assert_eq!(r.initial_loss(), r.final_loss());
    let again = invert_feature(&target, &cfg, &vit).unwrap();
    assert_eq!(r.image.to_hwc().unwrap(), again.image.to_hwc().unwrap());
}

#[test]
fn seeded_inversion_is_reproducible() {
    let vit = tiny_vit(DType::F32);
    let target = render(&subject_scene(9), 32);
    let cfg = inversion_config(5).with_selector(FeatureSelector::Keys(2));
    let a = invert_feature(&target, &cfg, &vit).unwrap();
    let b = invert_feature(&target, &cfg, &vit).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.image.to_hwc().unwrap(), b.image.to_hwc().unwrap());
    let c = invert_feature(&target, &InversionConfig { prior_seed: 1, ..cfg }, &vit).unwrap();
    assert_ne!(a.image.to_hwc().unwrap(), c.image.to_hwc().unwrap());
}

#[test]
fn deep_cls_inversion_drifts_further_from_the_layout() {
    let vit = tiny_vit(DType::F32);
    let target = render(&subject_scene(9), 32);
    let results = invert_cls_across_layers(&target, &[1, 4], &inversion_config(150), &vit);
    // structural deviation: distance between first-layer key self-similarities
    let sim = |img: &ImageTensor| {
        let f = vit.forward_features(img, &[1]).unwrap();
        self_similarity(&f.layer(1).unwrap().keys).unwrap()
    };
    let reference = sim(&target);
    let dev: Vec<f64> = results
        .into_iter()
        .map(|(_, r)| scalar(&structure_loss(&sim(&r.unwrap().image), &reference).unwrap()).unwrap())
        .collect();
    assert!(dev[1] > dev[0], "shallow {} vs deep {}", dev[0], dev[1]);
}

#[test]
fn kmeans_recovers_separated_cluster_means() {
    let mut rng = seeded(21);
    let noise = random_matrix(&mut rng, 200, 3);
    let centers = [[5.0, 5.0, 5.0], [-5.0, 0.0, 2.0]];
    let points: Vec<Vec<f64>> = noise
        .iter()
        .enumerate()
        .map(|(i, n)| (0..3).map(|c| centers[i % 2][c] + 0.3 * n[c]).collect())
        .collect();
    let m = kmeans_modes(&points, 2, 0, 300).unwrap();
    for (c, _) in centers.iter().enumerate() {
        let members: Vec<&Vec<f64>> = points.iter().skip(c).step_by(2).collect();
        let mean: Vec<f64> = (0..3).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
        let found = m
            .centroids
            .iter()
            .map(|cent| cent.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(f64::INFINITY, f64::min);
        assert!(found < 1e-3, "cluster {c} mean missed by {found}");
    }
}
