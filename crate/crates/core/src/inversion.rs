//! Feature inversion: optimize a deep-image-prior network on fixed noise so a
//! chosen ViT feature of its output matches that of a target image.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_cls, self_similarity};
use crate::generators::{build_splice_generator, SpliceGeneratorConfig};
use crate::image::ImageTensor;
use crate::losses::{frobenius_distance, scalar};
use crate::nn::{sigmoid, Adam, ParamStore};
use crate::training::resize_for_vit;
use crate::vit::{LayerFeatures, VitModel};

/// Consecutive steps above `DIVERGENCE_FACTOR x initial` that abort a run.
pub const DIVERGENCE_PATIENCE: usize = 50;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSelector {
    Cls(usize),
    Keys(usize),
    SelfSim(usize),
}

impl FeatureSelector {
    pub fn layer(self) -> usize {
        match self {
            Self::Cls(l) | Self::Keys(l) | Self::SelfSim(l) => l,
        }
    }

    fn extract(self, features: &LayerFeatures) -> Result<Tensor> {
        let l = self.layer();
        Ok(match self {
            Self::Cls(_) => extract_cls(features, l)?.vector,
            Self::Keys(_) => features.layer(l)?.keys.clone(),
            Self::SelfSim(_) => self_similarity(&features.layer(l)?.keys)?.matrix,
        })
    }
}

impl fmt::Display for FeatureSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Cls(l) => write!(f, "cls@{l}"),
            Self::Keys(l) => write!(f, "keys@{l}"),
            Self::SelfSim(l) => write!(f, "selfsim@{l}"),
        }
    }
}

impl FromStr for FeatureSelector {
    type Err = Error;

    /// Parses `cls@<layer>`, `keys@<layer>` or `selfsim@<layer>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("feature selector `{s}` must look like cls@12, keys@12 or selfsim@12"));
        let (kind, layer) = s.split_once('@').ok_or_else(bad)?;
        let layer: usize = layer.trim().parse().map_err(|_| bad())?;
        if layer == 0 {
            return Err(bad());
        }
        match kind.trim().to_ascii_lowercase().as_str() {
            "cls" => Ok(Self::Cls(layer)),
            "keys" => Ok(Self::Keys(layer)),
            "selfsim" | "self-sim" => Ok(Self::SelfSim(layer)),
            _ => Err(bad()),
        }
    }
}

/// String form of a selector, used in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InversionSelectorText(pub FeatureSelector);

impl Serialize for InversionSelectorText {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for InversionSelectorText {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map(Self).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    /// CLS of the deepest layer when unset.
    pub selector: Option<InversionSelectorText>,
    pub steps: usize,
    pub lr: f64,
    /// Seeds both the noise input and the prior's initial weights.
    pub prior_seed: u64,
    /// Height of the target after resizing; the output has the same size.
    pub output_size: usize,
    pub prior: SpliceGeneratorConfig,
    /// Scale of the uniform noise input.
    pub noise_scale: f64,
    /// Optimize raw pixels instead of a prior network.
    pub pixels_only: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            selector: None,
            steps: 2000,
            lr: 1e-3,
            prior_seed: 0,
            output_size: 224,
            prior: Self::default_prior(),
            noise_scale: 0.1,
            pixels_only: false,
        }
    }
}

impl InversionConfig {
    /// Four-level encoder-decoder on 32 noise channels.
    pub fn default_prior() -> SpliceGeneratorConfig {
        SpliceGeneratorConfig {
            encoder_channels: vec![32, 32, 64, 128, 128],
            ..SpliceGeneratorConfig::default()
        }
    }

    pub fn selector(&self, vit: &VitModel) -> FeatureSelector {
        self.selector
            .map_or(FeatureSelector::Cls(vit.config().num_layers), |s| s.0)
    }

    pub fn with_selector(&self, selector: FeatureSelector) -> Self {
        Self {
            selector: Some(InversionSelectorText(selector)),
            ..self.clone()
        }
    }

    pub fn validate(&self, vit: &VitModel) -> Result<()> {
        let l = self.selector(vit).layer();
        if l == 0 || l > vit.config().num_layers {
            return Err(Error::MissingLayer(l));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.output_size == 0 || !self.output_size.is_multiple_of(vit.config().patch_size) {
            return Err(Error::Config(format!(
                "output_size {} must be a positive multiple of the patch size {}",
                self.output_size,
                vit.config().patch_size
            )));
        }
        self.prior.validate()
    }
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub image: ImageTensor,
    /// Feature distance before each step, then once after the last step.
    pub trace: Vec<f64>,
    pub selector: FeatureSelector,
}

impl InversionResult {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

enum Renderer {
    Prior {
        generator: crate::generators::SpliceGenerator,
        noise: Tensor,
    },
    Pixels(Tensor),
}

impl Renderer {
    fn render(&self) -> Result<Tensor> {
        match self {
            Self::Prior { generator, noise } => generator.forward_tensor(noise),
            Self::Pixels(logits) => sigmoid(logits),
        }
    }
}

/// Minimizes `||phi(f(z)) - phi(target)||_F` over the prior's weights.
pub fn invert_feature(target: &ImageTensor, config: &InversionConfig, vit: &VitModel) -> Result<InversionResult> {
    config.validate(vit)?;
    let selector = config.selector(vit);
    let layer = selector.layer();
    let target = resize_for_vit(&target.to_dtype(vit.dtype())?, config.output_size, vit.config().patch_size)?;
    let (h, w) = (target.height(), target.width());
    let goal = selector.extract(&vit.forward_features(&target, &[layer])?)?.detach();

    let (device, dtype) = (vit.device(), vit.dtype());
    let (renderer, store) = if config.pixels_only {
        let mut store = ParamStore::new(config.prior_seed, device, dtype);
        let logits = store.randn("pixels", &[1, 3, h, w], 0.1)?;
        (Renderer::Pixels(logits), store)
    } else {
        let channels = config.prior.encoder_channels[0];
        // the noise draws from a separate stream than the weight init
        let mut rng = ChaCha8Rng::seed_from_u64(config.prior_seed);
        rng.set_stream(1);
        let values: Vec<f64> = (0..channels * h * w)
            .map(|_| config.noise_scale * rng.random::<f64>())
            .collect();
        let noise = Tensor::from_vec(values, (1, channels, h, w), device)?.to_dtype(dtype)?;
        let (generator, store) = build_splice_generator(&config.prior, config.prior_seed, device, dtype)?;
        (Renderer::Prior { generator, noise }, store)
    };
    let mut adam = Adam::new(&store, config.lr, 0.9, 0.999)?;

    let mut trace = Vec::with_capacity(config.steps + 1);
    let mut above = 0usize;
    let mut step = 0usize;
    loop {
        let img = renderer.render()?;
        let feats = vit.forward_features(&ImageTensor::new(img.clone())?, &[layer])?;
        let loss = frobenius_distance(&selector.extract(&feats)?, &goal)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iteration: step,
                term: selector.to_string(),
                value,
            });
        }
        trace.push(value);
        let initial = trace[0];
        if value > DIVERGENCE_FACTOR * initial {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step,
                    loss: value,
                    initial,
                    trace,
                });
            }
        } else {
            above = 0;
        }
        if step == config.steps {
            return Ok(InversionResult {
                image: ImageTensor::new(img.detach())?,
                trace,
                selector,
            });
        }
        adam.step(&store, &loss.backward()?)?;
        step += 1;
    }
}

/// Inverts the CLS token of each requested layer with otherwise shared settings.
/// A failing layer does not stop the others.
pub fn invert_cls_across_layers(
    target: &ImageTensor,
    layers: &[usize],
    config: &InversionConfig,
    vit: &VitModel,
) -> Vec<(usize, Result<InversionResult>)> {
    layers
        .iter()
        .map(|&l| (l, invert_feature(target, &config.with_selector(FeatureSelector::Cls(l)), vit)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_round_trip() {
        for s in ["cls@3", "keys@12", "selfsim@1"] {
            assert_eq!(s.parse::<FeatureSelector>().unwrap().to_string(), s);
        }
        for bad in ["cls", "cls@0", "values@2", "keys@x"] {
            assert!(bad.parse::<FeatureSelector>().is_err(), "{bad}");
        }
    }

    #[test]
    fn config_accepts_selector_text() {
        let c: InversionConfig = toml::from_str("selector = \"keys@4\"\nsteps = 5\n").unwrap();
        assert_eq!(c.selector.map(|s| s.0), Some(FeatureSelector::Keys(4)));
        assert_eq!(c.steps, 5);
        assert_eq!(c.prior.encoder_channels.len(), 5);
    }
}
