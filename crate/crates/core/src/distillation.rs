//! Dataset pairing: coarse self-similarity descriptors, exact KNN retrieval
//! and mutual-nearest-neighbor pair selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{coarse_self_similarity, spatial_keys};
use crate::image::ImageTensor;
use crate::vit::VitModel;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_WINDOW: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Cosine similarity of flattened descriptors.
    Cosine,
    /// Negated Frobenius distance, so larger is still more similar.
    Frobenius,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Frobenius => "frobenius",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" | "cos" => Ok(Self::Cosine),
            "frobenius" | "fro" | "l2" => Ok(Self::Frobenius),
            other => Err(Error::Config(format!("unknown descriptor metric `{other}`"))),
        }
    }
}

impl Metric {
    pub fn similarity(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            Self::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
                for (x, y) in a.iter().zip(b) {
                    let (x, y) = (*x as f64, *y as f64);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na.sqrt() * nb.sqrt())
                }
            }
            Self::Frobenius => -a
                .iter()
                .zip(b)
                .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

/// An image that could not be described, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    pub image_ids: Vec<String>,
    pub descriptors: Vec<Vec<f32>>,
    pub metric: Metric,
    pub window: usize,
    pub skipped: Vec<Skipped>,
    /// SHA-256 over ids and pixel contents of the described images.
    pub dataset_hash: String,
}

impl DescriptorIndex {
    pub fn new(image_ids: Vec<String>, descriptors: Vec<Vec<f32>>, metric: Metric, window: usize) -> Result<Self> {
        if image_ids.len() != descriptors.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} descriptors",
                image_ids.len(),
                descriptors.len()
            )));
        }
        if let Some(d) = descriptors.first() {
            if descriptors.iter().any(|x| x.len() != d.len()) {
                return Err(Error::Shape("descriptors differ in length".into()));
            }
        }
        let unique: BTreeSet<&String> = image_ids.iter().collect();
        if unique.len() != image_ids.len() {
            return Err(Error::Config("duplicate image id in index".into()));
        }
        let mut h = Sha256::new();
        for (id, d) in image_ids.iter().zip(&descriptors) {
            h.update(id.as_bytes());
            for v in d {
                h.update(v.to_le_bytes());
            }
        }
        Ok(Self {
            image_ids,
            descriptors,
            metric,
            window,
            skipped: Vec::new(),
            dataset_hash: hex::encode(h.finalize()),
        })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.image_ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::Lookup(format!("image id `{id}` is not in the index")))
    }

    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        self.metric.similarity(&self.descriptors[a], &self.descriptors[b])
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k >= self.len() {
            return Err(Error::Config(format!(
                "K must satisfy 1 <= K < collection size ({}), got {k}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Neighbor positions of `q`, best first, ties by ascending position.
    fn knn_positions(&self, q: usize, k: usize) -> Vec<usize> {
        let mut others: Vec<(usize, f64)> = (0..self.len())
            .filter(|&j| j != q)
            .map(|j| (j, self.similarity(q, j)))
            .collect();
        others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        others.truncate(k);
        others.into_iter().map(|(j, _)| j).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let dim = self.descriptors.first().map_or(0, Vec::len);
        let flat: Vec<f32> = self.descriptors.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (self.len(), dim), &Device::Cpu)?;
        let tensor_path = dir.join("descriptors.safetensors");
        let meta = BTreeMap::from([
            ("metric".to_string(), self.metric.to_string()),
            ("window".to_string(), self.window.to_string()),
            ("dataset_hash".to_string(), self.dataset_hash.clone()),
        ]);
        crate::nn::write_safetensors(&[("descriptors".to_string(), t)], meta, &tensor_path)?;
        let ids_path = dir.join("descriptor_ids.txt");
        let mut text = self.image_ids.join("\n");
        text.push('\n');
        std::fs::write(&ids_path, text).map_err(|e| Error::io(&ids_path, e))?;
        Ok((tensor_path, ids_path))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let tensor_path = dir.join("descriptors.safetensors");
        let bytes = std::fs::read(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::WeightLoad {
            tensor: format!("<header of {}>", tensor_path.display()),
            reason: e.to_string(),
        })?;
        let meta = header.metadata().clone().unwrap_or_default();
        let metric: Metric = meta.get("metric").map_or(Ok(Metric::Cosine), |m| m.parse())?;
        let window = meta.get("window").and_then(|w| w.parse().ok()).unwrap_or(DEFAULT_WINDOW);
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let t = tensors.get("descriptors").ok_or_else(|| Error::WeightLoad {
            tensor: "descriptors".into(),
            reason: "missing".into(),
        })?;
        let descriptors: Vec<Vec<f32>> = t.to_dtype(DType::F32)?.to_vec2()?;
        let ids_path = dir.join("descriptor_ids.txt");
        let ids: Vec<String> = std::fs::read_to_string(&ids_path)
            .map_err(|e| Error::io(&ids_path, e))?
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Self::new(ids, descriptors, metric, window)
    }
}

/// Describes each image by its flattened coarse self-similarity. Images are
/// resized to a `resize x resize` square so every grid is square.
pub fn compute_descriptors(
    images: &[(String, ImageTensor)],
    vit: &VitModel,
    window: usize,
    resize: usize,
    metric: Metric,
) -> Result<DescriptorIndex> {
    let layer = vit.config().num_layers;
    let mut ids = Vec::with_capacity(images.len());
    let mut descriptors = Vec::with_capacity(images.len());
    for (id, img) in images {
        let square = img.to_dtype(vit.dtype())?.resize(resize, resize)?;
        let feats = vit.forward_features(&square, &[layer])?;
        let coarse = coarse_self_similarity(&spatial_keys(&feats, layer)?, window)?;
        ids.push(id.clone());
        descriptors.push(coarse.flattened()?);
    }
    DescriptorIndex::new(ids, descriptors, metric, window)
}

/// Image files in `dir` (png/jpg/jpeg), sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if path.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Like [`compute_descriptors`] over the images of a directory; unreadable
/// files are skipped with a warning and recorded in the index.
pub fn compute_descriptors_from_dir(
    dir: impl AsRef<Path>,
    vit: &VitModel,
    window: usize,
    resize: usize,
    metric: Metric,
) -> Result<DescriptorIndex> {
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for path in list_images(&dir)? {
        let id = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        match ImageTensor::load(&path, vit.device(), vit.dtype()) {
            Ok(img) => images.push((id, img)),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(Skipped {
                    id,
                    reason: e.to_string(),
                });
            }
        }
    }
    let mut index = compute_descriptors(&images, vit, window, resize, metric)?;
    index.skipped = skipped;
    Ok(index)
}

/// The `k` most similar ids to `query_id`, best first; ties by ascending position.
pub fn knn(index: &DescriptorIndex, query_id: &str, k: usize) -> Result<Vec<String>> {
    let q = index.position(query_id)?;
    index.check_k(k)?;
    Ok(index
        .knn_positions(q, k)
        .into_iter()
        .map(|j| index.image_ids[j].clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSetMeta {
    pub k: usize,
    pub window: usize,
    pub metric: Metric,
    pub dataset_hash: String,
    pub num_images: usize,
    pub skipped: Vec<Skipped>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    /// Unordered mutual pairs `(a, b)` with `a < b` in index order, sorted.
    pub unordered: Vec<(String, String)>,
    pub meta: PairSetMeta,
}

impl PairSet {
    /// Each unordered pair in both orders, for training.
    pub fn ordered(&self) -> Vec<(String, String)> {
        self.unordered
            .iter()
            .flat_map(|(a, b)| [(a.clone(), b.clone()), (b.clone(), a.clone())])
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        self.ordered().iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
    }

    /// Writes `path` (TSV) and `path.meta.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))?;
        let meta_path = meta_path(path);
        let json = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;
        Ok((path.to_path_buf(), meta_path))
    }
}

pub fn meta_path(pairs_path: &Path) -> PathBuf {
    let mut s = pairs_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Keeps exactly the pairs that appear in each other's K-nearest-neighbor lists.
pub fn mutual_knn_pairs(index: &DescriptorIndex, k: usize) -> Result<PairSet> {
    index.check_k(k)?;
    let lists: Vec<BTreeSet<usize>> = (0..index.len())
        .map(|q| index.knn_positions(q, k).into_iter().collect())
        .collect();
    let mut unordered = Vec::new();
    for a in 0..index.len() {
        for &b in &lists[a] {
            if a < b && lists[b].contains(&a) {
                unordered.push((index.image_ids[a].clone(), index.image_ids[b].clone()));
            }
        }
    }
    Ok(PairSet {
        unordered,
        meta: PairSetMeta {
            k,
            window: index.window,
            metric: index.metric,
            dataset_hash: index.dataset_hash.clone(),
            num_images: index.len(),
            skipped: index.skipped.clone(),
        },
    })
}

/// Parses `structure_id<TAB>appearance_id` lines; blank lines are ignored.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected `structure_id<TAB>appearance_id`".into(),
            });
        }
        if fields[0] == fields[1] {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("self-pair `{}`", fields[0]),
            });
        }
        pairs.push((fields[0].to_string(), fields[1].to_string()));
    }
    Ok(pairs)
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, path)
}

/// Maps string pairs onto positions in `ids`.
pub fn resolve_pairs(pairs: &[(String, String)], ids: &[String]) -> Result<Vec<(usize, usize)>> {
    let lookup: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let find = |id: &str| {
        lookup
            .get(id)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("pair refers to unknown image `{id}`")))
    };
    pairs.iter().map(|(a, b)| Ok((find(a)?, find(b)?))).collect()
}
