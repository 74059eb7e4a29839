//! Operations in CLS-token space: linear interpolation between appearances
//! and K-means discovery of appearance modes.

use std::path::Path;

use candle_core::{DType, Device};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ClsToken;

pub const KMEANS_TOLERANCE: f64 = 1e-6;
pub const KMEANS_MAX_ITERATIONS: usize = 300;

/// `alpha * target + (1 - alpha) * structure` for each alpha.
pub fn interpolate_cls(structure: &ClsToken, target: &ClsToken, alphas: &[f64]) -> Result<Vec<ClsToken>> {
    if structure.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "cannot interpolate a {}-d token with a {}-d token",
            structure.dim(),
            target.dim()
        )));
    }
    let s = structure.vector.detach();
    let t = target.vector.to_dtype(s.dtype())?.detach();
    alphas
        .iter()
        .map(|&a| {
            if !a.is_finite() {
                return Err(Error::Config(format!("interpolation weight {a} is not finite")));
            }
            Ok(ClsToken {
                vector: ((&t * a)? + (&s * (1.0 - a))?)?,
                source_layer: target.source_layer,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    pub centroids: Vec<Vec<f64>>,
    /// Mode index per input token, in input order.
    pub assignments: Vec<usize>,
    /// Ids matching `assignments`, when known.
    pub image_ids: Vec<String>,
    pub inertia: f64,
    /// Inertia after each assignment pass.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl ModeSet {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroid_token(&self, mode: usize, source_layer: usize, device: &Device, dtype: DType) -> Result<ClsToken> {
        let c = self
            .centroids
            .get(mode)
            .ok_or_else(|| Error::Lookup(format!("mode {mode} out of {}", self.k())))?;
        let v: Vec<f32> = c.iter().map(|x| *x as f32).collect();
        ClsToken::from_vec(&v, source_layer, device, dtype)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(tokens: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = tokens.len();
    let mut centroids = vec![tokens[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = tokens.iter().map(|t| sq_dist(t, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            // guard against rounding landing on an already chosen point
            if d2[pick] == 0.0 {
                pick = d2.iter().position(|d| *d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(tokens[next].clone());
        for (i, t) in tokens.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(t, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// K-means with k-means++ seeding and Lloyd iterations until the largest
/// centroid shift drops below 1e-6, assignments stop changing, or `max_iterations`.
pub fn kmeans_modes(tokens: &[Vec<f64>], k: usize, seed: u64, max_iterations: usize) -> Result<ModeSet> {
    let n = tokens.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("K must satisfy 1 <= K <= N ({n}), got {k}")));
    }
    let dim = tokens[0].len();
    if tokens.iter().any(|t| t.len() != dim) {
        return Err(Error::Shape("tokens differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(tokens, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, t) in tokens.iter().enumerate() {
            let (j, d) = nearest(t, &centroids);
            changed |= assignments[i] != j;
            assignments[i] = j;
            inertia += d;
        }
        inertia_trace.push(inertia);
        if !changed || iterations >= max_iterations {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (t, &j) in tokens.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(t) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[j] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&mean, &centroids[j]).sqrt());
            centroids[j] = mean;
        }
        if shift < KMEANS_TOLERANCE {
            // final pass re-assigns against the settled centroids
            let mut inertia = 0.0;
            for (i, t) in tokens.iter().enumerate() {
                let (j, d) = nearest(t, &centroids);
                assignments[i] = j;
                inertia += d;
            }
            inertia_trace.push(inertia);
            break;
        }
    }
    Ok(ModeSet {
        centroids,
        assignments,
        image_ids: Vec::new(),
        inertia: *inertia_trace.last().expect("at least one pass"),
        inertia_trace,
        iterations,
        seed,
    })
}

/// A CLS token stored as JSON, usable in place of an appearance image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFile {
    pub vector: Vec<f32>,
    pub source_layer: usize,
}

impl TokenFile {
    pub fn from_token(token: &ClsToken) -> Result<Self> {
        Ok(Self {
            vector: token.to_vec()?,
            source_layer: token.source_layer,
        })
    }

    pub fn to_token(&self, device: &Device, dtype: DType) -> Result<ClsToken> {
        ClsToken::from_vec(&self.vector, self.source_layer, device, dtype)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}
