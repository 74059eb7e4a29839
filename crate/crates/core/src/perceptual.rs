//! Pluggable image distance used as the feed-forward identity regularizer.
//!
//! `MeanSquared` is the per-element mean squared error. `Learned` is an
//! LPIPS-style distance over an AlexNet trunk: channel-normalized activations
//! at five depths, squared differences weighted by 1x1 linear heads,
//! spatially averaged and summed. Trunk and head weights are loaded from a
//! safetensors file (torchvision `features.*` names plus LPIPS `lin*.model.1.weight`
//! names), or drawn from a seeded initializer when no file is available.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    MeanSquared,
    Learned,
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" | "l2" | "mean-squared" => Ok(Self::MeanSquared),
            "lpips" | "learned" | "learned-perceptual" => Ok(Self::Learned),
            other => Err(Error::Config(format!("unknown perceptual distance backend `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum PerceptualDistance {
    MeanSquared,
    Learned(Box<Lpips>),
}

impl PerceptualDistance {
    /// Builds the backend named by `selector`; `weights` is only consulted by
    /// the learned backend.
    pub fn from_selector(selector: &str, weights: Option<&Path>, device: &Device, dtype: DType) -> Result<Self> {
        Ok(match selector.parse::<DistanceKind>()? {
            DistanceKind::MeanSquared => Self::MeanSquared,
            DistanceKind::Learned => Self::Learned(Box::new(match weights {
                Some(p) => Lpips::load(p, device, dtype)?,
                None => Lpips::seeded(0, device, dtype)?,
            })),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::MeanSquared => "mse",
            Self::Learned(_) => "lpips",
        }
    }
}

/// Distance between two equally sized images; differentiable in both.
pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor, backend: &PerceptualDistance) -> Result<Tensor> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::Shape(format!(
            "perceptual distance needs equal shapes, got {:?} and {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    match backend {
        PerceptualDistance::MeanSquared => Ok((a.tensor() - b.tensor())?.sqr()?.mean_all()?),
        PerceptualDistance::Learned(net) => net.distance(a.tensor(), b.tensor()),
    }
}

const TRUNK: [(usize, usize, usize, usize, usize); 5] = [
    // (torchvision index, out channels, kernel, stride, padding)
    (0, 64, 11, 4, 2),
    (3, 192, 5, 1, 2),
    (6, 384, 3, 1, 1),
    (8, 256, 3, 1, 1),
    (10, 256, 3, 1, 1),
];

#[derive(Debug, Clone)]
pub struct Lpips {
    convs: Vec<(Tensor, Tensor, usize, usize)>,
    heads: Vec<Tensor>,
    shift: Tensor,
    scale: Tensor,
}

impl Lpips {
    pub fn load(path: &Path, device: &Device, dtype: DType) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| match e {
            candle_core::Error::Io(io) => Error::io(path, io),
            e => Error::WeightLoad {
                tensor: format!("<header of {}>", path.display()),
                reason: e.to_string(),
            },
        })?;
        Self::from_map(&tensors, device, dtype)
    }

    pub fn seeded(seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = HashMap::new();
        let mut in_ch = 3;
        for (i, &(idx, out, k, _, _)) in TRUNK.iter().enumerate() {
            let fan_in = (in_ch * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w: Vec<f32> = (0..out * in_ch * k * k)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect();
            map.insert(
                format!("features.{idx}.weight"),
                Tensor::from_vec(w, (out, in_ch, k, k), &Device::Cpu)?,
            );
            map.insert(format!("features.{idx}.bias"), Tensor::zeros(out, DType::F32, &Device::Cpu)?);
            map.insert(
                format!("lin{i}.model.1.weight"),
                (Tensor::ones((1, out, 1, 1), DType::F32, &Device::Cpu)? / out as f64)?,
            );
            in_ch = out;
        }
        Self::from_map(&map, device, dtype)
    }

    fn from_map(map: &HashMap<String, Tensor>, device: &Device, dtype: DType) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            map.get(name)
                .ok_or_else(|| Error::WeightLoad {
                    tensor: name.to_string(),
                    reason: "missing from perceptual weights".into(),
                })?
                .to_device(device)?
                .to_dtype(dtype)
                .map_err(Error::from)
        };
        let mut convs = Vec::new();
        let mut heads = Vec::new();
        for (i, &(idx, out, k, stride, pad)) in TRUNK.iter().enumerate() {
            let w = get(&format!("features.{idx}.weight"))?;
            if w.dims()[0] != out || w.dims()[2] != k {
                return Err(Error::WeightLoad {
                    tensor: format!("features.{idx}.weight"),
                    reason: format!("unexpected shape {:?}", w.dims()),
                });
            }
            convs.push((w, get(&format!("features.{idx}.bias"))?, stride, pad));
            heads.push(get(&format!("lin{i}.model.1.weight"))?);
        }
        let shift = Tensor::new(&[-0.030f32, -0.088, -0.188], device)?
            .reshape((1, 3, 1, 1))?
            .to_dtype(dtype)?;
        let scale = Tensor::new(&[0.458f32, 0.448, 0.450], device)?
            .reshape((1, 3, 1, 1))?
            .to_dtype(dtype)?;
        Ok(Self {
            convs,
            heads,
            shift,
            scale,
        })
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let x = x.affine(2.0, -1.0)?;
        let mut h = x.broadcast_sub(&self.shift)?.broadcast_div(&self.scale)?;
        let mut out = Vec::with_capacity(5);
        for (i, (w, b, stride, pad)) in self.convs.iter().enumerate() {
            if i == 1 || i == 2 {
                h = max_pool_3x3_s2(&h)?;
            }
            let c = w.dims()[0];
            h = h
                .conv2d(w, *pad, *stride, 1, 1)?
                .broadcast_add(&b.reshape((1, c, 1, 1))?)?
                .relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = a.dims4()?;
        if h.min(w) < 32 {
            return Err(Error::Shape(format!(
                "learned perceptual distance needs images of at least 32x32, got {h}x{w}"
            )));
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Tensor> = None;
        for ((x, y), head) in fa.iter().zip(&fb).zip(&self.heads) {
            let nx = unit_channels(x)?;
            let ny = unit_channels(y)?;
            let d = (nx - ny)?.sqr()?;
            let c = head.dims()[1];
            let weighted = d.broadcast_mul(&head.reshape((1, c, 1, 1))?)?.sum_keepdim(1)?;
            let term = weighted.mean_all()?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
        Ok(total.expect("five trunk layers"))
    }
}

fn unit_channels(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-20)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-10)?)?)
}

/// 3x3 / stride-2 max pooling over non-negative activations, built from
/// strided slices so it stays differentiable.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let oh = (h - 3) / 2 + 1;
    let ow = (w - 3) / 2 + 1;
    let x = x
        .pad_with_zeros(2, 0, (2 * oh + 2).saturating_sub(h))?
        .pad_with_zeros(3, 0, (2 * ow + 2).saturating_sub(w))?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let s = x
                .narrow(2, dy, 2 * oh)?
                .narrow(3, dx, 2 * ow)?
                .contiguous()?
                .reshape((n, c, oh, 2, ow, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((n, c, oh, ow))?;
            out = Some(match out {
                Some(o) => o.maximum(&s)?,
                None => s,
            });
        }
    }
    Ok(out.expect("nine taps"))
}
