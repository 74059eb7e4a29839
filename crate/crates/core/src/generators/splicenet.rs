//! Feed-forward generator conditioned on a [CLS] token.
//!
//! A 1x1 stem feeds five downsampling residual blocks. Each encoder level
//! (stem included) passes through a resolution-preserving modulated residual
//! block whose output is concatenated to the input of the matching decoder
//! block. Decoder blocks upsample (nearest), concatenate, and apply modulated
//! convolutions. A modulated 1x1 convolution and a sigmoid produce RGB.
//!
//! Modulation follows the weight modulate/demodulate scheme of style-based
//! generators: a 2-layer GELU MLP maps the token to a style vector, a learned
//! affine per modulated convolution turns it into per-input-channel scales,
//! and the scaled kernel is renormalized per output channel.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ClsToken;
use crate::image::ImageTensor;
use crate::nn::{leaky_relu, sigmoid, Conv2d, Linear, ParamStore};

use super::pad_to_multiple;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpliceNetConfig {
    pub stem_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub token_dim: usize,
    pub mapping_hidden: usize,
    pub mapping_layers: usize,
    /// Also modulate the 1x1 residual projections of skip and decoder blocks
    /// (the 3x3 convolutions there are always modulated).
    pub modulate_residual: bool,
    pub leaky_slope: f64,
    pub demod_eps: f64,
}

impl Default for SpliceNetConfig {
    fn default() -> Self {
        Self {
            stem_channels: 32,
            encoder_channels: vec![64, 128, 256, 512, 1024],
            token_dim: 768,
            mapping_hidden: 768,
            mapping_layers: 2,
            modulate_residual: true,
            leaky_slope: 0.2,
            demod_eps: 1e-8,
        }
    }
}

impl SpliceNetConfig {
    /// Narrow variant for desk-scale training runs.
    pub fn small(token_dim: usize) -> Self {
        Self {
            stem_channels: 8,
            encoder_channels: vec![16, 32, 64, 64, 64],
            token_dim,
            mapping_hidden: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::Config("encoder_channels must not be empty".into()));
        }
        if self.stem_channels == 0
            || self.encoder_channels.contains(&0)
            || self.token_dim == 0
            || self.mapping_hidden == 0
        {
            return Err(Error::Config("channel and token sizes must be positive".into()));
        }
        if self.mapping_layers == 0 {
            return Err(Error::Config("mapping network needs at least one layer".into()));
        }
        if !(self.demod_eps > 0.0) {
            return Err(Error::Config("demodulation epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Output of the mapping network, shared by every modulated convolution.
#[derive(Debug, Clone)]
pub struct ModulationVector {
    pub vector: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModConv2d {
    weight: Tensor,
    bias: Tensor,
    affine: Linear,
    gain: f64,
    demodulate: bool,
    eps: f64,
    padding: usize,
}

impl ModConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        style_dim: usize,
        demodulate: bool,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.randn(&format!("{name}.weight"), &[cout, cin, kernel, kernel], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[cout], 0.0)?,
            affine: Linear::equalized(store, &format!("{name}.affine"), style_dim, cin, 1.0)?,
            gain: 1.0 / ((cin * kernel * kernel) as f64).sqrt(),
            demodulate,
            eps,
            padding: kernel / 2,
        })
    }

    /// Per-sample modulated kernel for style vector `w` of shape `(style_dim,)`.
    pub fn modulated_weight(&self, w: &Tensor) -> Result<Tensor> {
        let (cout, cin, _, _) = self.weight.dims4()?;
        let scales = self.affine.forward(&w.unsqueeze(0)?)?.reshape((1, cin, 1, 1))?;
        let mut weight = (self.weight.broadcast_mul(&scales)? * self.gain)?;
        if self.demodulate {
            let d = (weight.sqr()?.sum_keepdim(1)?.sum_keepdim(2)?.sum_keepdim(3)? + self.eps)?
                .sqrt()?
                .recip()?;
            weight = weight.broadcast_mul(&d.reshape((cout, 1, 1, 1))?)?;
        }
        Ok(weight)
    }

    /// `x` is `(B, cin, H, W)`; `styles` is `(B, style_dim)`.
    pub fn forward(&self, x: &Tensor, styles: &Tensor) -> Result<Tensor> {
        let b = x.dims4()?.0;
        let cout = self.weight.dims()[0];
        let mut outs = Vec::with_capacity(b);
        for i in 0..b {
            let wt = self.modulated_weight(&styles.get(i)?)?;
            outs.push(x.narrow(0, i, 1)?.conv2d(&wt, self.padding, 1, 1, 1)?);
        }
        let y = if b == 1 { outs.remove(0) } else { Tensor::cat(&outs, 0)? };
        Ok(y.broadcast_add(&self.bias.reshape((1, cout, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct DownBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    residual: Conv2d,
}

impl DownBlock {
    fn forward(&self, x: &Tensor, slope: f64) -> Result<Tensor> {
        let main = leaky_relu(&self.conv1.forward(x)?, slope)?;
        let main = leaky_relu(&self.conv2.forward(&main)?, slope)?;
        let res = self.residual.forward(x)?;
        Ok(((main + res)? * std::f64::consts::FRAC_1_SQRT_2)?)
    }
}

#[derive(Debug, Clone)]
enum Projection {
    Plain(Conv2d),
    Modulated(ModConv2d),
}

/// Modulated residual block (used for skips and for the decoder).
#[derive(Debug, Clone)]
struct ModBlock {
    conv1: ModConv2d,
    conv2: ModConv2d,
    residual: Projection,
}

impl ModBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: &SpliceNetConfig) -> Result<Self> {
        let style = cfg.mapping_hidden;
        let eps = cfg.demod_eps;
        let residual = if cfg.modulate_residual {
            Projection::Modulated(ModConv2d::new(store, &format!("{name}.residual"), cin, cout, 1, style, true, eps)?)
        } else {
            Projection::Plain(Conv2d::equalized(store, &format!("{name}.residual"), cin, cout, 1, 1)?)
        };
        Ok(Self {
            conv1: ModConv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, style, true, eps)?,
            conv2: ModConv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, style, true, eps)?,
            residual,
        })
    }

    fn forward(&self, x: &Tensor, styles: &Tensor, slope: f64) -> Result<Tensor> {
        let main = leaky_relu(&self.conv1.forward(x, styles)?, slope)?;
        let main = leaky_relu(&self.conv2.forward(&main, styles)?, slope)?;
        let res = match &self.residual {
            Projection::Plain(c) => c.forward(x)?,
            Projection::Modulated(c) => c.forward(x, styles)?,
        };
        Ok(((main + res)? * std::f64::consts::FRAC_1_SQRT_2)?)
    }
}

#[derive(Debug, Clone)]
pub struct SpliceNet {
    config: SpliceNetConfig,
    mapping: Vec<Linear>,
    stem: Conv2d,
    down: Vec<DownBlock>,
    skips: Vec<ModBlock>,
    up: Vec<ModBlock>,
    to_rgb: ModConv2d,
}

impl SpliceNet {
    pub fn new(config: &SpliceNetConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut mapping = Vec::with_capacity(config.mapping_layers);
        let mut dim = config.token_dim;
        for i in 0..config.mapping_layers {
            mapping.push(Linear::equalized(store, &format!("mapping.{i}"), dim, config.mapping_hidden, 0.0)?);
            dim = config.mapping_hidden;
        }
        let stem = Conv2d::equalized(store, "stem", 3, config.stem_channels, 1, 1)?;
        // channels of each encoder level, stem first
        let mut levels = vec![config.stem_channels];
        levels.extend_from_slice(&config.encoder_channels);
        let mut down = Vec::new();
        for (i, pair) in levels.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            down.push(DownBlock {
                conv1: Conv2d::equalized(store, &format!("down{i}.conv1"), cin, cout, 3, 2)?,
                conv2: Conv2d::equalized(store, &format!("down{i}.conv2"), cout, cout, 3, 1)?,
                residual: Conv2d::equalized(store, &format!("down{i}.residual"), cin, cout, 1, 2)?,
            });
        }
        let depth = down.len();
        let mut skips = Vec::with_capacity(depth);
        for (i, &c) in levels.iter().take(depth).enumerate() {
            skips.push(ModBlock::new(store, &format!("skip{i}"), c, c, config)?);
        }
        let mut up = Vec::with_capacity(depth);
        let mut incoming = levels[depth];
        for i in (0..depth).rev() {
            up.push(ModBlock::new(store, &format!("up{i}"), levels[i] + incoming, levels[i], config)?);
            incoming = levels[i];
        }
        let to_rgb = ModConv2d::new(
            store,
            "to_rgb",
            levels[0],
            3,
            1,
            config.mapping_hidden,
            false,
            config.demod_eps,
        )?;
        Ok(Self {
            config: config.clone(),
            mapping,
            stem,
            down,
            skips,
            up,
            to_rgb,
        })
    }

    pub fn config(&self) -> &SpliceNetConfig {
        &self.config
    }

    /// Maps `(B, token_dim)` tokens to `(B, mapping_hidden)` styles.
    pub fn map_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let (_, d) = tokens.dims2()?;
        if d != self.config.token_dim {
            return Err(Error::Shape(format!(
                "token dimension {d} does not match model token_dim {}",
                self.config.token_dim
            )));
        }
        let mut h = tokens.clone();
        for layer in &self.mapping {
            h = layer.forward(&h)?.gelu_erf()?;
        }
        Ok(h)
    }

    /// `images` is `(B, 3, H, W)` in `[0, 1]`, `tokens` is `(B, token_dim)`.
    pub fn forward_tensor(&self, images: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = images.dims4()?;
        if tokens.dims2()?.0 != b {
            return Err(Error::Shape(format!(
                "{} tokens for a batch of {b} images",
                tokens.dims2()?.0
            )));
        }
        let styles = self.map_tokens(tokens)?;
        let slope = self.config.leaky_slope;
        let x = pad_to_multiple(images, 1 << self.down.len())?;
        let mut feats = vec![leaky_relu(&self.stem.forward(&x)?, slope)?];
        for blk in &self.down {
            let next = blk.forward(feats.last().expect("stem"), slope)?;
            feats.push(next);
        }
        let mut y = feats.pop().expect("bottleneck");
        for (blk, (skip, feat)) in self.up.iter().zip(self.skips.iter().zip(feats.iter()).rev()) {
            let s = skip.forward(feat, &styles, slope)?;
            let (_, _, sh, sw) = s.dims4()?;
            y = y.upsample_nearest2d(sh, sw)?;
            y = blk.forward(&Tensor::cat(&[s, y], 1)?, &styles, slope)?;
        }
        let out = sigmoid(&self.to_rgb.forward(&y, &styles)?)?;
        Ok(out.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }
}

pub fn build_splicenet(
    config: &SpliceNetConfig,
    seed: u64,
    device: &Device,
    dtype: DType,
) -> Result<(SpliceNet, ParamStore)> {
    let mut store = ParamStore::new(seed, device, dtype);
    let model = SpliceNet::new(config, &mut store)?;
    Ok((model, store))
}

pub fn mapping_forward(model: &SpliceNet, cls: &ClsToken) -> Result<ModulationVector> {
    if cls.dim() != model.config.token_dim {
        return Err(Error::Shape(format!(
            "token dimension {} does not match model token_dim {}",
            cls.dim(),
            model.config.token_dim
        )));
    }
    let t = cls.vector.flatten_all()?.unsqueeze(0)?;
    Ok(ModulationVector {
        vector: model.map_tokens(&t)?.squeeze(0)?,
    })
}

pub fn splicenet_forward(model: &SpliceNet, structure: &ImageTensor, cls_target: &ClsToken) -> Result<ImageTensor> {
    if cls_target.dim() != model.config.token_dim {
        return Err(Error::Shape(format!(
            "token dimension {} does not match model token_dim {}",
            cls_target.dim(),
            model.config.token_dim
        )));
    }
    let t = cls_target
        .vector
        .flatten_all()?
        .unsqueeze(0)?
        .to_dtype(structure.dtype())?;
    ImageTensor::new(model.forward_tensor(structure.tensor(), &t)?)
}
