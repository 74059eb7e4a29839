//! Independent scalar-loop references and shared fixtures for integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splice_core::vit::{load_vit, VitConfig, VitModel};

pub fn tiny_vit(dtype: DType) -> VitModel {
    load_vit(&VitConfig::tiny("random:7"), &Device::Cpu, dtype).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_tensor(m: &[Vec<f64>]) -> Tensor {
    let rows = m.len();
    let cols = m[0].len();
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows, cols), &Device::Cpu).unwrap()
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
    }
    (dot / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

/// `S_ij = cos(k_i, k_j)`.
pub fn oracle_self_similarity(keys: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = keys.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            s[i][j] = cosine(&keys[i], &keys[j]);
        }
    }
    s
}

/// Averages `window x window` cells of a raster-order square grid of keys,
/// then takes cosine self-similarity of the cell means.
pub fn oracle_coarse(spatial: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    let n = spatial.len();
    let side = (n as f64).sqrt() as usize;
    let d = side / window;
    let dim = spatial[0].len();
    let mut pooled = Vec::new();
    for cy in 0..d {
        for cx in 0..d {
            let mut acc = vec![0.0; dim];
            for y in cy * window..(cy + 1) * window {
                for x in cx * window..(cx + 1) * window {
                    for c in 0..dim {
                        acc[c] += spatial[y * side + x][c];
                    }
                }
            }
            for v in acc.iter_mut() {
                *v /= (window * window) as f64;
            }
            pooled.push(acc);
        }
    }
    oracle_self_similarity(&pooled)
}

pub fn oracle_frobenius(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            acc += (a[i][j] - b[i][j]).powi(2);
        }
    }
    acc.sqrt()
}

pub fn oracle_l2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += (a[i] - b[i]).powi(2);
    }
    acc.sqrt()
}

pub fn oracle_cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    let a: Vec<f64> = a.iter().map(|v| *v as f64).collect();
    let b: Vec<f64> = b.iter().map(|v| *v as f64).collect();
    let mut dot = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
    }
    dot / (norm(&a) * norm(&b))
}

/// Full scan: every other index, sorted by similarity then index.
pub fn oracle_knn(desc: &[Vec<f32>], q: usize, k: usize) -> Vec<usize> {
    let mut scored = Vec::new();
    for j in 0..desc.len() {
        if j != q {
            scored.push((oracle_cosine_f32(&desc[q], &desc[j]), j));
        }
    }
    // selection by repeated maximum, ties to the smaller index
    let mut out = Vec::new();
    while out.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for &(s, j) in &scored {
            if out.contains(&j) {
                continue;
            }
            best = match best {
                Some((bs, bj)) if bs > s || (bs == s && bj < j) => Some((bs, bj)),
                _ => Some((s, j)),
            };
        }
        out.push(best.unwrap().1);
    }
    out
}

/// Every ordered pair checked against both neighbor lists; returned as `a < b`.
pub fn oracle_mutual(desc: &[Vec<f32>], k: usize) -> Vec<(usize, usize)> {
    let n = desc.len();
    let lists: Vec<Vec<usize>> = (0..n).map(|q| oracle_knn(desc, q, k)).collect();
    let mut out = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a < b && lists[a].contains(&b) && lists[b].contains(&a) {
                out.push((a, b));
            }
        }
    }
    out
}

/// Central difference of `f` along one coordinate.
pub fn central_difference(f: &mut dyn FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Copy of `t` with element `idx` (flat index) replaced.
pub fn with_element(t: &Tensor, idx: usize, value: f64) -> Tensor {
    let shape = t.shape().clone();
    let mut v: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
    v[idx] = value;
    Tensor::from_vec(v, shape, t.device()).unwrap()
}

pub fn element(t: &Tensor, idx: usize) -> f64 {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx]
}
