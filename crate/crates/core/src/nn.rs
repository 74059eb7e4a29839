//! Small neural-network toolkit on top of candle: a seeded, ordered parameter
//! store, the handful of layers the generators need, and Adam.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Trainable parameters in creation order. Initialization draws from a
/// seeded ChaCha stream so identical seeds give bit-identical models.
pub struct ParamStore {
    entries: Vec<(String, Var)>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device, dtype: DType) -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), var));
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites every parameter from `values`; names and shapes must match exactly.
    pub fn load(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let t = values.get(name).ok_or_else(|| Error::WeightLoad {
                tensor: name.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            if t.dims() != var.dims() {
                return Err(Error::WeightLoad {
                    tensor: name.clone(),
                    reason: format!("expected shape {:?}, found {:?}", var.dims(), t.dims()),
                });
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> Result<String> {
        checksum(self.entries.iter().map(|(n, v)| (n.as_str(), v.as_tensor())))
    }
}

/// SHA-256 over parameter names and raw little-endian values.
pub fn checksum<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        match t.dtype() {
            DType::F64 => {
                for v in t.flatten_all()?.to_vec1::<f64>()? {
                    h.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes a safetensors file whose bytes depend only on the inputs: the JSON
/// header is re-emitted with sorted keys, since the format's metadata map
/// otherwise serializes in hash order.
pub fn write_safetensors(tensors: &[(String, Tensor)], metadata: BTreeMap<String, String>, path: &Path) -> Result<()> {
    let contiguous = tensors
        .iter()
        .map(|(n, t)| Ok((n.as_str(), t.contiguous()?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = (!metadata.is_empty()).then(|| metadata.into_iter().collect());
    let bytes = safetensors::serialize(contiguous.iter().map(|(n, t)| (*n, t)), meta)
        .map_err(|e| Error::Config(format!("cannot serialize {}: {e}", path.display())))?;
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte length prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n])
        .map_err(|e| Error::Config(format!("cannot re-read header for {}: {e}", path.display())))?;
    let mut text = header.to_string().into_bytes();
    while !text.len().is_multiple_of(8) {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + n..]);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    /// Runtime weight multiplier; `1/sqrt(fan_in)` for equalized layers.
    gain: f64,
}

impl Linear {
    /// PyTorch-style uniform init in `±1/sqrt(fan_in)`.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[out_dim], bound)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            gain: 1.0,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias, gain: 1.0 }
    }

    /// Equalized learning rate: unit-normal weights scaled by `1/sqrt(fan_in)`
    /// at run time, so Adam's step size is the same relative to every layer.
    pub fn equalized(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias_init: f64) -> Result<Self> {
        Ok(Self {
            weight: store.randn(&format!("{name}.weight"), &[out_dim, in_dim], 1.0)?,
            bias: Some(store.constant(&format!("{name}.bias"), &[out_dim], bias_init)?),
            gain: 1.0 / (in_dim as f64).sqrt(),
        })
    }

    pub fn with_bias_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_init: f64,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_dim], bias_init)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            gain: 1.0,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        let y = if self.gain == 1.0 { y } else { (y * self.gain)? };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    gain: f64,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[out_ch], bound)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
            gain: 1.0,
        })
    }

    /// Equalized-learning-rate variant; see [`Linear::equalized`].
    pub fn equalized(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.randn(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?,
            stride,
            padding: kernel / 2,
            gain: 1.0 / ((in_ch * kernel * kernel) as f64).sqrt(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_ch = self.weight.dims()[0];
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let y = if self.gain == 1.0 { y } else { (y * self.gain)? };
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

/// Batch normalization that always normalizes with the statistics of the
/// current batch (per channel, over batch and spatial positions).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            beta: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Logistic sigmoid written through `tanh`, whose gradient stays finite for
/// saturated inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Adam with bias correction; with `beta1 = 0` the first moment is just the
/// current gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let mut first = Vec::with_capacity(store.len());
        let mut second = Vec::with_capacity(store.len());
        for (_, v) in store.vars() {
            first.push(v.as_tensor().zeros_like()?);
            second.push(v.as_tensor().zeros_like()?);
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, var)) in store.vars().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients of a graph that contains variables can themselves track ops
            let g = &g.detach();
            let m = ((&self.first[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.second[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / c1)?;
            let v_hat = (&v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.first[i] = m.detach();
            self.second[i] = v.detach();
        }
        Ok(())
    }

    /// Moment tensors keyed `adam.m.<param>` / `adam.v.<param>`.
    pub fn state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (i, (name, _)) in store.vars().enumerate() {
            out.push((format!("adam.m.{name}"), self.first[i].clone()));
            out.push((format!("adam.v.{name}"), self.second[i].clone()));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, values: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, var)) in store.vars().enumerate() {
            for (key, slot) in [
                (format!("adam.m.{name}"), &mut self.first[i]),
                (format!("adam.v.{name}"), &mut self.second[i]),
            ] {
                let t = values.get(&key).ok_or_else(|| Error::WeightLoad {
                    tensor: key.clone(),
                    reason: "missing optimizer state".into(),
                })?;
                if t.dims() != var.dims() {
                    return Err(Error::WeightLoad {
                        tensor: key,
                        reason: format!("expected shape {:?}, found {:?}", var.dims(), t.dims()),
                    });
                }
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
