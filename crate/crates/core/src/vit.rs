//! Frozen ViT feature extractor.
//!
//! The forward pass records, for every requested block, the block's output
//! tokens and the full-width query/key/value projections of the block's
//! layer-normed input. Parameters are plain tensors (never `Var`s), so no
//! gradient ever reaches them; gradients flow only to the input image.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{resize_bicubic, ImageTensor};
use crate::nn::{checksum, layer_norm, softmax_last_dim};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub patch_size: usize,
    pub num_layers: usize,
    pub token_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    /// Side length (in patches) of the grid the positional embeddings were trained on.
    pub pos_grid: usize,
    pub layer_norm_eps: f64,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    /// A `.safetensors` / `.pth` path, or `random:<seed>` for a seeded
    /// synthetic extractor with the configured shapes.
    pub weights_source: String,
}

impl VitConfig {
    /// ViT-B/8 as released with DINO: 12 blocks, 768-d tokens, 12 heads.
    pub fn vit_b8(weights_source: impl Into<String>) -> Self {
        Self {
            patch_size: 8,
            num_layers: 12,
            token_dim: 768,
            num_heads: 12,
            mlp_dim: 3072,
            pos_grid: 28,
            layer_norm_eps: 1e-6,
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
            weights_source: weights_source.into(),
        }
    }

    /// A small /8 extractor used for desk-scale runs and tests.
    pub fn tiny(weights_source: impl Into<String>) -> Self {
        Self {
            num_layers: 4,
            token_dim: 96,
            num_heads: 4,
            mlp_dim: 192,
            ..Self::vit_b8(weights_source)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.num_layers == 0 || self.token_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config(
                "patch_size, num_layers, token_dim and num_heads must be positive".into(),
            ));
        }
        if !self.token_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "token_dim {} is not divisible by num_heads {}",
                self.token_dim, self.num_heads
            )));
        }
        if self.pixel_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("pixel_std entries must be positive".into()));
        }
        Ok(())
    }

    /// Patch count for an `height x width` input, or a dimension error.
    pub fn patch_count(&self, height: usize, width: usize) -> Result<usize> {
        if !height.is_multiple_of(self.patch_size) || !width.is_multiple_of(self.patch_size) || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "input {height}x{width} is not divisible by patch size {}; resize it first",
                self.patch_size
            )));
        }
        Ok((height / self.patch_size) * (width / self.patch_size))
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1_w: Tensor,
    norm1_b: Tensor,
    qkv_w: Tensor,
    qkv_b: Tensor,
    proj_w: Tensor,
    proj_b: Tensor,
    norm2_w: Tensor,
    norm2_b: Tensor,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
}

/// Per-layer outputs of one forward pass. Each matrix is `(n + 1) x token_dim`;
/// row 0 belongs to the [CLS] token and rows `1..=n` are patches in raster order.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub tokens: Tensor,
    pub queries: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerFeatures {
    /// Keyed by 1-based layer index.
    pub layers: BTreeMap<usize, LayerOutput>,
    pub n: usize,
    pub grid: (usize, usize),
}

impl LayerFeatures {
    pub fn layer(&self, layer: usize) -> Result<&LayerOutput> {
        self.layers.get(&layer).ok_or(Error::MissingLayer(layer))
    }

    /// Drops gradient linkage from every captured tensor.
    pub fn detach(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|(&l, o)| {
                (
                    l,
                    LayerOutput {
                        tokens: o.tokens.detach(),
                        queries: o.queries.detach(),
                        keys: o.keys.detach(),
                        values: o.values.detach(),
                    },
                )
            })
            .collect();
        Self {
            layers,
            n: self.n,
            grid: self.grid,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VitModel {
    config: VitConfig,
    patch_w: Tensor,
    patch_b: Tensor,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm_w: Tensor,
    norm_b: Tensor,
    named: Vec<(String, Tensor)>,
}

/// Loads the extractor described by `config`. The returned model holds no
/// trainable variables.
pub fn load_vit(config: &VitConfig, device: &Device, dtype: DType) -> Result<VitModel> {
    config.validate()?;
    let tensors = match config.weights_source.strip_prefix("random:") {
        Some(seed) => {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::Config(format!("bad random seed in `{}`", config.weights_source)))?;
            random_weights(config, seed)?
        }
        None => read_weight_file(Path::new(&config.weights_source))?,
    };
    VitModel::from_tensors(config.clone(), tensors, device, dtype)
}

fn read_weight_file(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "weight file not found"),
        ));
    }
    let is_pth = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("pth") | Some("pt") | Some("bin")
    );
    let corrupt = |e: candle_core::Error| Error::WeightLoad {
        tensor: format!("<header of {}>", path.display()),
        reason: e.to_string(),
    };
    let raw: HashMap<String, Tensor> = if is_pth {
        candle_core::pickle::read_all(path)
            .map_err(corrupt)?
            .into_iter()
            .collect()
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::WeightLoad {
            tensor: format!("<header of {}>", path.display()),
            reason: e.to_string(),
        })?;
        let mut out = HashMap::new();
        for (name, view) in st.tensors() {
            let t = candle_core::safetensors::Load::load(&view, &Device::Cpu).map_err(|e| Error::WeightLoad {
                tensor: name.clone(),
                reason: e.to_string(),
            })?;
            out.insert(name, t);
        }
        out
    };
    canonical_names(raw)
}

/// Maps Hugging Face `ViTModel` names onto the DINO/timm layout; DINO names
/// pass through unchanged.
fn canonical_names(raw: HashMap<String, Tensor>) -> Result<HashMap<String, Tensor>> {
    let strip = |k: &str| -> String {
        k.strip_prefix("vit.")
            .or_else(|| k.strip_prefix("module."))
            .or_else(|| k.strip_prefix("backbone."))
            .unwrap_or(k)
            .to_string()
    };
    let raw: HashMap<String, Tensor> = raw.into_iter().map(|(k, v)| (strip(&k), v)).collect();
    if !raw.contains_key("embeddings.cls_token") {
        return Ok(raw);
    }
    let take = |k: &str| -> Result<Tensor> {
        raw.get(k).cloned().ok_or_else(|| Error::WeightLoad {
            tensor: k.to_string(),
            reason: "missing from weight file".into(),
        })
    };
    let mut out = HashMap::new();
    out.insert("cls_token".into(), take("embeddings.cls_token")?);
    out.insert("pos_embed".into(), take("embeddings.position_embeddings")?);
    out.insert(
        "patch_embed.proj.weight".into(),
        take("embeddings.patch_embeddings.projection.weight")?,
    );
    out.insert(
        "patch_embed.proj.bias".into(),
        take("embeddings.patch_embeddings.projection.bias")?,
    );
    out.insert("norm.weight".into(), take("layernorm.weight")?);
    out.insert("norm.bias".into(), take("layernorm.bias")?);
    let mut i = 0;
    while raw.contains_key(&format!("encoder.layer.{i}.layernorm_before.weight")) {
        let p = format!("encoder.layer.{i}");
        let b = format!("blocks.{i}");
        let qkv = |suffix: &str| -> Result<Tensor> {
            Ok(Tensor::cat(
                &[
                    take(&format!("{p}.attention.attention.query.{suffix}"))?,
                    take(&format!("{p}.attention.attention.key.{suffix}"))?,
                    take(&format!("{p}.attention.attention.value.{suffix}"))?,
                ],
                0,
            )?)
        };
        out.insert(format!("{b}.attn.qkv.weight"), qkv("weight")?);
        out.insert(format!("{b}.attn.qkv.bias"), qkv("bias")?);
        for (dst, src) in [
            ("norm1", "layernorm_before"),
            ("norm2", "layernorm_after"),
            ("attn.proj", "attention.output.dense"),
            ("mlp.fc1", "intermediate.dense"),
            ("mlp.fc2", "output.dense"),
        ] {
            out.insert(format!("{b}.{dst}.weight"), take(&format!("{p}.{src}.weight"))?);
            out.insert(format!("{b}.{dst}.bias"), take(&format!("{p}.{src}.bias"))?);
        }
        i += 1;
    }
    Ok(out)
}

fn random_weights(config: &VitConfig, seed: u64) -> Result<HashMap<String, Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dev = Device::Cpu;
    let d = config.token_dim;
    let p = config.patch_size;
    let mut out = HashMap::new();
    let mut normal = |shape: &[usize], std: f32| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n)
            .map(|_| std * <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
            .collect();
        Ok(Tensor::from_vec(v, shape, &dev)?)
    };
    let patch_std = 1.0 / ((3 * p * p) as f32).sqrt();
    out.insert("patch_embed.proj.weight".into(), normal(&[d, 3, p, p], patch_std)?);
    out.insert("cls_token".into(), normal(&[1, 1, d], 0.02)?);
    let n0 = config.pos_grid * config.pos_grid;
    out.insert("pos_embed".into(), normal(&[1, n0 + 1, d], 0.02)?);
    for i in 0..config.num_layers {
        let b = format!("blocks.{i}");
        out.insert(format!("{b}.attn.qkv.weight"), normal(&[3 * d, d], 0.02)?);
        out.insert(format!("{b}.attn.proj.weight"), normal(&[d, d], 0.02)?);
        out.insert(format!("{b}.mlp.fc1.weight"), normal(&[config.mlp_dim, d], 0.02)?);
        out.insert(format!("{b}.mlp.fc2.weight"), normal(&[d, config.mlp_dim], 0.02)?);
    }
    let zeros = |n: usize| Tensor::zeros(n, DType::F32, &dev);
    let ones = |n: usize| Tensor::ones(n, DType::F32, &dev);
    out.insert("patch_embed.proj.bias".into(), zeros(d)?);
    out.insert("norm.weight".into(), ones(d)?);
    out.insert("norm.bias".into(), zeros(d)?);
    for i in 0..config.num_layers {
        let b = format!("blocks.{i}");
        out.insert(format!("{b}.attn.qkv.bias"), zeros(3 * d)?);
        out.insert(format!("{b}.attn.proj.bias"), zeros(d)?);
        out.insert(format!("{b}.mlp.fc1.bias"), zeros(config.mlp_dim)?);
        out.insert(format!("{b}.mlp.fc2.bias"), zeros(d)?);
        out.insert(format!("{b}.norm1.weight"), ones(d)?);
        out.insert(format!("{b}.norm1.bias"), zeros(d)?);
        out.insert(format!("{b}.norm2.weight"), ones(d)?);
        out.insert(format!("{b}.norm2.bias"), zeros(d)?);
    }
    Ok(out)
}

impl VitModel {
    fn from_tensors(
        config: VitConfig,
        mut tensors: HashMap<String, Tensor>,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        let d = config.token_dim;
        let p = config.patch_size;
        let file_layers = (0..)
            .take_while(|i| tensors.contains_key(&format!("blocks.{i}.attn.qkv.weight")))
            .count();
        if file_layers != config.num_layers {
            return Err(Error::Config(format!(
                "config expects {} layers but weights contain {file_layers}",
                config.num_layers
            )));
        }
        let mut named = Vec::new();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors.remove(name).ok_or_else(|| Error::WeightLoad {
                tensor: name.to_string(),
                reason: "missing from weight file".into(),
            })?;
            if t.dims() != shape {
                return Err(Error::Config(format!(
                    "shape mismatch for `{name}`: config implies {shape:?}, weights have {:?}",
                    t.dims()
                )));
            }
            let t = t.to_device(device)?.to_dtype(dtype)?;
            named.push((name.to_string(), t.clone()));
            Ok(t)
        };
        let patch_w = take("patch_embed.proj.weight", &[d, 3, p, p])?;
        let patch_b = take("patch_embed.proj.bias", &[d])?;
        let cls_token = take("cls_token", &[1, 1, d])?;
        let n0 = config.pos_grid * config.pos_grid;
        let pos_embed = take("pos_embed", &[1, n0 + 1, d])?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let b = format!("blocks.{i}");
            let m = config.mlp_dim;
            blocks.push(Block {
                norm1_w: take(&format!("{b}.norm1.weight"), &[d])?,
                norm1_b: take(&format!("{b}.norm1.bias"), &[d])?,
                qkv_w: take(&format!("{b}.attn.qkv.weight"), &[3 * d, d])?,
                qkv_b: take(&format!("{b}.attn.qkv.bias"), &[3 * d])?,
                proj_w: take(&format!("{b}.attn.proj.weight"), &[d, d])?,
                proj_b: take(&format!("{b}.attn.proj.bias"), &[d])?,
                norm2_w: take(&format!("{b}.norm2.weight"), &[d])?,
                norm2_b: take(&format!("{b}.norm2.bias"), &[d])?,
                fc1_w: take(&format!("{b}.mlp.fc1.weight"), &[m, d])?,
                fc1_b: take(&format!("{b}.mlp.fc1.bias"), &[m])?,
                fc2_w: take(&format!("{b}.mlp.fc2.weight"), &[d, m])?,
                fc2_b: take(&format!("{b}.mlp.fc2.bias"), &[d])?,
            });
        }
        let norm_w = take("norm.weight", &[d])?;
        let norm_b = take("norm.bias", &[d])?;
        Ok(Self {
            config,
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
            norm_w,
            norm_b,
            named,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.patch_w.dtype()
    }

    pub fn device(&self) -> &Device {
        self.patch_w.device()
    }

    pub fn num_parameters(&self) -> usize {
        self.named.iter().map(|(_, t)| t.elem_count()).sum()
    }

    /// SHA-256 over every parameter; unchanged by any amount of downstream training.
    pub fn checksum(&self) -> Result<String> {
        checksum(self.named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Writes the weights in DINO naming so [`load_vit`] can read them back.
    pub fn save_safetensors(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::nn::write_safetensors(&self.named, Default::default(), path)
    }

    fn positional(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let g0 = self.config.pos_grid;
        if gh == g0 && gw == g0 {
            return Ok(self.pos_embed.clone());
        }
        let d = self.config.token_dim;
        let cls_pos = self.pos_embed.narrow(1, 0, 1)?;
        let grid = self
            .pos_embed
            .narrow(1, 1, g0 * g0)?
            .reshape((1, g0, g0, d))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        let grid = resize_bicubic(&grid, gh, gw)?
            .permute((0, 2, 3, 1))?
            .reshape((1, gh * gw, d))?;
        Ok(Tensor::cat(&[cls_pos, grid], 1)?)
    }

    /// Runs the extractor on `image` and returns the features of the requested
    /// 1-based `layers`. Computation stops after the deepest requested layer.
    pub fn forward_features(&self, image: &ImageTensor, layers: &[usize]) -> Result<LayerFeatures> {
        let cfg = &self.config;
        for &l in layers {
            if l == 0 || l > cfg.num_layers {
                return Err(Error::Config(format!(
                    "layer {l} outside 1..={}",
                    cfg.num_layers
                )));
            }
        }
        let (h, w) = (image.height(), image.width());
        let n = cfg.patch_count(h, w)?;
        let (gh, gw) = (h / cfg.patch_size, w / cfg.patch_size);
        let d = cfg.token_dim;
        let dev = self.device();
        let dt = self.dtype();

        let x = image.tensor().to_dtype(dt)?;
        let mean = Tensor::from_vec(cfg.pixel_mean.to_vec(), (1, 3, 1, 1), dev)?.to_dtype(dt)?;
        let std = Tensor::from_vec(cfg.pixel_std.to_vec(), (1, 3, 1, 1), dev)?.to_dtype(dt)?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let patches = x
            .conv2d(&self.patch_w, 0, cfg.patch_size, 1, 1)?
            .broadcast_add(&self.patch_b.reshape((1, d, 1, 1))?)?
            .flatten_from(2)?
            .transpose(1, 2)?;
        let mut x = Tensor::cat(&[self.cls_token.clone(), patches], 1)?
            .broadcast_add(&self.positional(gh, gw)?)?
            .squeeze(0)?;

        let deepest = layers.iter().copied().max().unwrap_or(0);
        let heads = cfg.num_heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = BTreeMap::new();
        for (i, blk) in self.blocks.iter().enumerate().take(deepest) {
            let y = layer_norm(&x, &blk.norm1_w, &blk.norm1_b, cfg.layer_norm_eps)?;
            let qkv = y.matmul(&blk.qkv_w.t()?)?.broadcast_add(&blk.qkv_b)?;
            let q = qkv.narrow(1, 0, d)?;
            let k = qkv.narrow(1, d, d)?;
            let v = qkv.narrow(1, 2 * d, d)?;
            let split = |t: &Tensor| -> Result<Tensor> {
                Ok(t.reshape((n + 1, heads, hd))?.transpose(0, 1)?.contiguous()?)
            };
            let (qh, kh, vh) = (split(&q)?, split(&k)?, split(&v)?);
            let attn = softmax_last_dim(&(qh.matmul(&kh.t()?)? * scale)?)?;
            let ctx = attn
                .matmul(&vh)?
                .transpose(0, 1)?
                .reshape((n + 1, d))?;
            let ctx = ctx.matmul(&blk.proj_w.t()?)?.broadcast_add(&blk.proj_b)?;
            x = (x + ctx)?;
            let y = layer_norm(&x, &blk.norm2_w, &blk.norm2_b, cfg.layer_norm_eps)?;
            let y = y.matmul(&blk.fc1_w.t()?)?.broadcast_add(&blk.fc1_b)?.gelu_erf()?;
            let y = y.matmul(&blk.fc2_w.t()?)?.broadcast_add(&blk.fc2_b)?;
            x = (x + y)?;
            let layer = i + 1;
            if layers.contains(&layer) {
                out.insert(
                    layer,
                    LayerOutput {
                        tokens: x.clone(),
                        queries: q,
                        keys: k,
                        values: v,
                    },
                );
            }
        }
        Ok(LayerFeatures {
            layers: out,
            n,
            grid: (gh, gw),
        })
    }

    /// Final-norm [CLS] embedding, the extractor's classification-head input.
    pub fn pooled(&self, features: &LayerFeatures) -> Result<Tensor> {
        let last = features.layer(self.config.num_layers)?;
        let cls = last.tokens.narrow(0, 0, 1)?;
        layer_norm(&cls, &self.norm_w, &self.norm_b, self.config.layer_norm_eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VitModel {
        load_vit(&VitConfig::tiny("random:3"), &Device::Cpu, DType::F32).unwrap()
    }

    #[test]
    fn token_counts_follow_patch_grid() {
        let m = tiny();
        let img = ImageTensor::from_fn(32, 24, &Device::Cpu, DType::F32, |y, x| {
            [y as f32 / 32.0, x as f32 / 24.0, 0.5]
        })
        .unwrap();
        let f = m.forward_features(&img, &[1, 4]).unwrap();
        assert_eq!(f.n, 12);
        for l in [1, 4] {
            let o = f.layer(l).unwrap();
            assert_eq!(o.tokens.dims(), &[13, 96]);
            assert_eq!(o.keys.dims(), &[13, 96]);
        }
        assert!(matches!(f.layer(2), Err(Error::MissingLayer(2))));
    }

    #[test]
    fn rejects_non_divisible_input() {
        let m = tiny();
        let img = ImageTensor::from_fn(30, 24, &Device::Cpu, DType::F32, |_, _| [0.5; 3]).unwrap();
        assert!(matches!(m.forward_features(&img, &[4]), Err(Error::Dimension(_))));
    }

    #[test]
    fn rejects_out_of_range_layer() {
        let m = tiny();
        let img = ImageTensor::from_fn(16, 16, &Device::Cpu, DType::F32, |_, _| [0.5; 3]).unwrap();
        assert!(m.forward_features(&img, &[5]).is_err());
        assert!(m.forward_features(&img, &[0]).is_err());
    }

    #[test]
    fn hf_names_are_canonicalized() {
        let dev = Device::Cpu;
        let z = |s: &[usize]| Tensor::zeros(s, DType::F32, &dev).unwrap();
        let mut raw = HashMap::new();
        raw.insert("embeddings.cls_token".to_string(), z(&[1, 1, 4]));
        raw.insert("embeddings.position_embeddings".to_string(), z(&[1, 5, 4]));
        raw.insert("embeddings.patch_embeddings.projection.weight".to_string(), z(&[4, 3, 2, 2]));
        raw.insert("embeddings.patch_embeddings.projection.bias".to_string(), z(&[4]));
        raw.insert("layernorm.weight".to_string(), z(&[4]));
        raw.insert("layernorm.bias".to_string(), z(&[4]));
        let p = "encoder.layer.0";
        for n in ["query", "key", "value"] {
            raw.insert(format!("{p}.attention.attention.{n}.weight"), z(&[4, 4]));
            raw.insert(format!("{p}.attention.attention.{n}.bias"), z(&[4]));
        }
        for n in ["layernorm_before", "layernorm_after", "attention.output.dense", "output.dense"] {
            raw.insert(format!("{p}.{n}.weight"), z(&[4]));
            raw.insert(format!("{p}.{n}.bias"), z(&[4]));
        }
        raw.insert(format!("{p}.intermediate.dense.weight"), z(&[8, 4]));
        raw.insert(format!("{p}.intermediate.dense.bias"), z(&[8]));
        let out = canonical_names(raw).unwrap();
        assert_eq!(out["blocks.0.attn.qkv.weight"].dims(), &[12, 4]);
        assert!(out.contains_key("blocks.0.mlp.fc2.bias"));
        assert!(out.contains_key("pos_embed"));
    }
}
