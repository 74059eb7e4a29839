//! Single-pair generator: a 5-level skip U-Net with batch normalization.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{leaky_relu, sigmoid, BatchNorm2d, Conv2d, ParamStore};

use super::pad_to_multiple;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpliceGeneratorConfig {
    /// Input channels (3 for images, more for noise priors) followed by the output channels of each encoder level.
    pub encoder_channels: Vec<usize>,
    /// Width of the 1x1 skip projection taken at each encoder level.
    pub skip_channels: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
}

impl Default for SpliceGeneratorConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![3, 16, 32, 64, 128, 128],
            skip_channels: 4,
            kernel: 3,
            leaky_slope: 0.2,
        }
    }
}

impl SpliceGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() < 2 {
            return Err(Error::Config("encoder_channels needs an input and at least one level".into()));
        }
        if self.encoder_channels.contains(&0) || self.skip_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len() - 1
    }
}

#[derive(Debug, Clone)]
struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnAct {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, slope: f64) -> Result<Tensor> {
        leaky_relu(&self.bn.forward(&self.conv.forward(x)?)?, slope)
    }
}

#[derive(Debug, Clone)]
struct Level {
    skip: ConvBnAct,
    down1: ConvBnAct,
    down2: ConvBnAct,
    merge_bn: BatchNorm2d,
    up1: ConvBnAct,
    up2: ConvBnAct,
}

#[derive(Debug, Clone)]
pub struct SpliceGenerator {
    config: SpliceGeneratorConfig,
    levels: Vec<Level>,
    to_rgb: Conv2d,
}

impl SpliceGenerator {
    pub fn new(config: &SpliceGeneratorConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let ch = &config.encoder_channels;
        let k = config.kernel;
        let s = config.skip_channels;
        let levels_n = config.levels();
        let mut levels = Vec::with_capacity(levels_n);
        for i in 0..levels_n {
            let p = format!("level{i}");
            // the deepest level's decoder input is the bottleneck itself
            let up_in = if i + 1 == levels_n { ch[levels_n] } else { ch[i + 2] };
            levels.push(Level {
                skip: ConvBnAct::new(store, &format!("{p}.skip"), ch[i], s, 1, 1)?,
                down1: ConvBnAct::new(store, &format!("{p}.down1"), ch[i], ch[i + 1], k, 2)?,
                down2: ConvBnAct::new(store, &format!("{p}.down2"), ch[i + 1], ch[i + 1], k, 1)?,
                merge_bn: BatchNorm2d::new(store, &format!("{p}.merge_bn"), s + up_in)?,
                up1: ConvBnAct::new(store, &format!("{p}.up1"), s + up_in, ch[i + 1], k, 1)?,
                up2: ConvBnAct::new(store, &format!("{p}.up2"), ch[i + 1], ch[i + 1], 1, 1)?,
            });
        }
        let to_rgb = Conv2d::new(store, "to_rgb", ch[1], 3, 1, 1)?;
        Ok(Self {
            config: config.clone(),
            levels,
            to_rgb,
        })
    }

    pub fn config(&self) -> &SpliceGeneratorConfig {
        &self.config
    }

    /// Maps `(B, 3, H, W)` to `(B, 3, H, W)` with values in `(0, 1)`.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let x = pad_to_multiple(x, 1 << self.levels.len())?;
        let slope = self.config.leaky_slope;
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut y = x;
        for lvl in &self.levels {
            skips.push(lvl.skip.forward(&y, slope)?);
            y = lvl.down2.forward(&lvl.down1.forward(&y, slope)?, slope)?;
        }
        for (lvl, skip) in self.levels.iter().zip(skips).rev() {
            let (_, _, sh, sw) = skip.dims4()?;
            let up = y.upsample_nearest2d(sh, sw)?;
            let merged = lvl.merge_bn.forward(&Tensor::cat(&[skip, up], 1)?)?;
            y = lvl.up2.forward(&lvl.up1.forward(&merged, slope)?, slope)?;
        }
        let out = sigmoid(&self.to_rgb.forward(&y)?)?;
        Ok(out.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<ImageTensor> {
        ImageTensor::new(self.forward_tensor(image.tensor())?)
    }
}

/// Builds the generator with parameters drawn from `seed`.
pub fn build_splice_generator(
    config: &SpliceGeneratorConfig,
    seed: u64,
    device: &candle_core::Device,
    dtype: candle_core::DType,
) -> Result<(SpliceGenerator, ParamStore)> {
    let mut store = ParamStore::new(seed, device, dtype);
    let g = SpliceGenerator::new(config, &mut store)?;
    Ok((g, store))
}
