//! Structure and appearance descriptors derived from ViT features: the
//! [CLS] token, cosine self-similarity of keys, its spatially pooled
//! variant, and a PCA rendering of the self-similarity.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::vit::LayerFeatures;

/// Global appearance descriptor: row 0 of a layer's tokens.
#[derive(Debug, Clone)]
pub struct ClsToken {
    pub vector: Tensor,
    pub source_layer: usize,
}

impl ClsToken {
    pub fn from_vec(values: &[f32], source_layer: usize, device: &candle_core::Device, dtype: DType) -> Result<Self> {
        Ok(Self {
            vector: Tensor::from_slice(values, values.len(), device)?.to_dtype(dtype)?,
            source_layer,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.elem_count()
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.vector.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }

    pub fn detach(&self) -> Self {
        Self {
            vector: self.vector.detach(),
            source_layer: self.source_layer,
        }
    }

    pub fn cosine(&self, other: &ClsToken) -> Result<f64> {
        let a = self.vector.to_dtype(DType::F64)?.flatten_all()?;
        let b = other.vector.to_dtype(DType::F64)?.flatten_all()?;
        let dot = (&a * &b)?.sum_all()?.to_scalar::<f64>()?;
        let na = a.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt();
        let nb = b.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt();
        Ok(dot / (na * nb))
    }
}

/// `(n + 1) x (n + 1)` cosine self-similarity of keys (CLS row/column first).
#[derive(Debug, Clone)]
pub struct SelfSimMatrix {
    pub matrix: Tensor,
    pub n: usize,
}

impl SelfSimMatrix {
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        let (r, c) = matrix.dims2()?;
        if r != c || r == 0 {
            return Err(Error::Shape(format!("self-similarity must be square, got {r}x{c}")));
        }
        Ok(Self { matrix, n: r - 1 })
    }

    /// The `n x n` block over spatial tokens.
    pub fn spatial(&self) -> Result<Tensor> {
        Ok(self.matrix.narrow(0, 1, self.n)?.narrow(1, 1, self.n)?)
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.matrix.to_dtype(DType::F64)?.to_vec2()?)
    }
}

/// Self-similarity of average-pooled spatial keys: `d^2 x d^2` with `d = sqrt(n) / window`.
#[derive(Debug, Clone)]
pub struct CoarseDescriptor {
    pub matrix: Tensor,
    pub window: usize,
    pub d: usize,
}

impl CoarseDescriptor {
    pub fn flattened(&self) -> Result<Vec<f32>> {
        Ok(self.matrix.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

pub fn extract_cls(features: &LayerFeatures, layer: usize) -> Result<ClsToken> {
    let out = features.layer(layer)?;
    Ok(ClsToken {
        vector: out.tokens.get(0)?,
        source_layer: layer,
    })
}

/// Keys of the patch tokens only (rows `1..=n`).
pub fn spatial_keys(features: &LayerFeatures, layer: usize) -> Result<Tensor> {
    Ok(features.layer(layer)?.keys.narrow(0, 1, features.n)?)
}

/// Unit-normalizes rows, failing on the first zero-norm row.
fn normalize_rows(keys: &Tensor) -> Result<Tensor> {
    let norms = keys.sqr()?.sum_keepdim(1)?.sqrt()?;
    let host: Vec<f64> = norms.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if let Some(row) = host.iter().position(|v| *v == 0.0 || !v.is_finite()) {
        return Err(Error::DegenerateKey { row });
    }
    Ok(keys.broadcast_div(&norms)?)
}

/// `S_ij = cos(k_i, k_j)` over all rows of `keys`.
pub fn self_similarity(keys: &Tensor) -> Result<SelfSimMatrix> {
    let (rows, _) = keys.dims2()?;
    if rows == 0 {
        return Err(Error::Shape("keys matrix has no rows".into()));
    }
    let unit = normalize_rows(keys)?;
    let s = unit.matmul(&unit.t()?)?.clamp(-1.0, 1.0)?;
    Ok(SelfSimMatrix { matrix: s, n: rows - 1 })
}

/// Average-pools the square grid of spatial keys with `window x window`
/// cells, then takes cosine self-similarity of the pooled keys.
pub fn coarse_self_similarity(spatial_keys: &Tensor, window: usize) -> Result<CoarseDescriptor> {
    let (n, dim) = spatial_keys.dims2()?;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::Grid(format!("{n} spatial keys do not form a square grid")));
    }
    if window == 0 || !side.is_multiple_of(window) {
        return Err(Error::Grid(format!(
            "pooling window {window} does not divide grid side {side}"
        )));
    }
    let d = side / window;
    let grid = spatial_keys
        .reshape((side, side, dim))?
        .permute((2, 0, 1))?
        .unsqueeze(0)?
        .contiguous()?;
    let pooled = grid
        .avg_pool2d(window)?
        .squeeze(0)?
        .reshape((dim, d * d))?
        .t()?
        .contiguous()?;
    let unit = normalize_rows(&pooled)?;
    let s = unit.matmul(&unit.t()?)?.clamp(-1.0, 1.0)?;
    Ok(CoarseDescriptor { matrix: s, window, d })
}

/// Per-token principal-component maps of a self-similarity matrix.
#[derive(Debug, Clone)]
pub struct PcaMaps {
    pub grid: (usize, usize),
    /// `k` maps of `grid.0 * grid.1` values in `[0, 1]`, raster order.
    pub maps: Vec<Vec<f32>>,
    /// Raw component scores before min-max normalization.
    pub scores: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
}

/// PCA over the rows of the spatial block of `selfsim` (each patch is an
/// observation described by its similarities to all patches). Rows are
/// centered; each component is sign-fixed so its largest-magnitude loading
/// is positive.
pub fn pca_visualize(selfsim: &SelfSimMatrix, grid: (usize, usize), k: usize) -> Result<PcaMaps> {
    let n = selfsim.n;
    if grid.0 * grid.1 != n {
        return Err(Error::Grid(format!(
            "grid {}x{} does not match {n} spatial tokens",
            grid.0, grid.1
        )));
    }
    let rows: Vec<Vec<f64>> = selfsim.spatial()?.to_dtype(DType::F64)?.to_vec2()?;
    let mut x = DMatrix::<f64>::from_fn(n, n, |i, j| rows[i][j]);
    for j in 0..n {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 * n as f64;
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    if k == 0 || k > rank {
        return Err(Error::Rank { requested: k, rank });
    }
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut maps = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    let mut ratios = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let mut v = eig.eigenvectors.column(c).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.neg_mut();
        }
        let s: Vec<f64> = (&x * v).iter().copied().collect();
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        maps.push(
            s.iter()
                .map(|v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
                .collect(),
        );
        scores.push(s);
        ratios.push(eig.eigenvalues[c].max(0.0) / total);
    }
    Ok(PcaMaps {
        grid,
        maps,
        scores,
        explained_variance_ratio: ratios,
    })
}
