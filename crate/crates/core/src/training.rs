//! Optimization loops for the single-pair generator and the feed-forward
//! SpliceNet.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentPolicy};
use crate::error::{Error, Result};
use crate::features::{extract_cls, self_similarity, ClsToken, SelfSimMatrix};
use crate::generators::{
    build_splice_generator, Checkpoint, CheckpointKind, SpliceGenerator, SpliceGeneratorConfig, SpliceNet,
    SpliceNetConfig,
};
use crate::image::ImageTensor;
use crate::losses::{
    appearance_loss, combine, identity_loss_keys, scalar, splice_objective, structure_loss, LossReport, LossWeights,
    Objective,
};
use crate::nn::{Adam, ParamStore};
use crate::perceptual::{perceptual_distance, PerceptualDistance};
use crate::vit::{LayerFeatures, VitModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub iterations: usize,
    /// Every this many iterations the un-augmented pair joins the batch (0 disables).
    pub clean_pair_interval: usize,
    /// Height every image is resized to before entering the ViT.
    pub vit_resize: usize,
    /// Probability that a SpliceNet step trains on an identity pair.
    pub identity_pair_p: f64,
    pub seed: u64,
    pub checkpoint_interval: usize,
    /// ViT layer for CLS and keys; the deepest layer when unset.
    pub feature_layer: Option<usize>,
    pub augment: AugmentPolicy,
    /// Identity distance for SpliceNet: `lpips` or `mse`.
    pub perceptual: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::splice()
    }
}

impl TrainConfig {
    pub fn splice() -> Self {
        Self {
            weights: LossWeights::SPLICE,
            lr: 2e-3,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            iterations: 2000,
            clean_pair_interval: 75,
            vit_resize: 224,
            identity_pair_p: 0.25,
            seed: 0,
            checkpoint_interval: 500,
            feature_layer: None,
            augment: AugmentPolicy::splice(),
            perceptual: "lpips".into(),
        }
    }

    pub fn splicenet() -> Self {
        Self {
            weights: LossWeights::SPLICENET,
            iterations: 20_000,
            augment: AugmentPolicy::splicenet(),
            ..Self::splice()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.augment.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(0.0..=1.0).contains(&self.identity_pair_p) {
            return Err(Error::Config(format!(
                "identity_pair_p must lie in [0, 1], got {}",
                self.identity_pair_p
            )));
        }
        if self.vit_resize == 0 {
            return Err(Error::Config("vit_resize must be positive".into()));
        }
        if self.feature_layer == Some(0) {
            return Err(Error::Config("feature_layer is 1-based".into()));
        }
        Ok(())
    }

    /// Returns a copy with the keys of a TOML document laid over it.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let merged = crate::config::overlay_toml(self, text)?;
        merged.validate()?;
        Ok(merged)
    }

    pub fn to_toml(&self) -> Result<String> {
        crate::config::to_toml(self)
    }

    fn layer_for(&self, vit: &VitModel) -> Result<usize> {
        let deepest = vit.config().num_layers;
        let l = self.feature_layer.unwrap_or(deepest);
        if l == 0 || l > deepest {
            return Err(Error::MissingLayer(l));
        }
        Ok(l)
    }
}

/// Per-iteration loss components.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossHistory {
    pub records: Vec<(usize, LossReport)>,
}

impl LossHistory {
    pub fn push(&mut self, iteration: usize, report: LossReport) {
        self.records.push((iteration, report));
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|(_, r)| r.total).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["iteration", "total", "appearance", "structure", "identity"])
            .map_err(|e| csv_error(path, e))?;
        for (it, r) in &self.records {
            w.write_record([
                it.to_string(),
                r.total.to_string(),
                r.app.to_string(),
                r.structure.to_string(),
                r.identity.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

/// Resizes to height `target` with the width scaled to keep the aspect ratio
/// and rounded to a multiple of `patch`. Already compliant images pass through.
pub fn resize_for_vit(image: &ImageTensor, target: usize, patch: usize) -> Result<ImageTensor> {
    if patch == 0 || target == 0 || !target.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "resize target {target} must be a positive multiple of the patch size {patch}"
        )));
    }
    let (h, w) = (image.height(), image.width());
    let cols = ((w as f64 * target as f64 / h as f64) / patch as f64).round().max(1.0) as usize;
    let new_w = cols * patch;
    if h == target && w == new_w {
        return Ok(image.clone());
    }
    image.resize(target, new_w)
}

fn features_at(vit: &VitModel, image: &ImageTensor, target: usize, layer: usize) -> Result<LayerFeatures> {
    let resized = resize_for_vit(image, target, vit.config().patch_size)?;
    vit.forward_features(&resized, &[layer])
}

fn check_finite(report: &LossReport, iteration: usize) -> Result<()> {
    match report.first_non_finite() {
        Some((term, value)) => Err(Error::NonFinite {
            iteration,
            term: term.to_string(),
            value,
        }),
        None => Ok(()),
    }
}

/// Each step draws its randomness from its own stream, so a resumed run
/// replays exactly the steps an uninterrupted run would have taken.
fn step_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

fn mean_report(reports: &[LossReport], weights: LossWeights) -> LossReport {
    let n = reports.len() as f64;
    let app = reports.iter().map(|r| r.app).sum::<f64>() / n;
    let st = reports.iter().map(|r| r.structure).sum::<f64>() / n;
    let id = reports.iter().map(|r| r.identity).sum::<f64>() / n;
    LossReport::from_components(app, st, id, weights)
}

/// Fixed targets of one (structure, appearance) pair.
struct PairTargets {
    sim_source: SelfSimMatrix,
    cls_target: ClsToken,
    keys_target: Tensor,
}

/// Trains a fresh generator on a single (structure, appearance) pair.
pub struct SpliceTrainer<'a> {
    vit: &'a VitModel,
    generator: SpliceGenerator,
    generator_config: SpliceGeneratorConfig,
    store: ParamStore,
    adam: Adam,
    config: TrainConfig,
    structure: ImageTensor,
    appearance: ImageTensor,
    clean: PairTargets,
    layer: usize,
    iteration: usize,
    history: LossHistory,
}

impl<'a> SpliceTrainer<'a> {
    pub fn new(
        vit: &'a VitModel,
        generator_config: &SpliceGeneratorConfig,
        config: &TrainConfig,
        structure: &ImageTensor,
        appearance: &ImageTensor,
    ) -> Result<Self> {
        config.validate()?;
        if generator_config.encoder_channels.first() != Some(&3) {
            return Err(Error::Config("the Splice generator takes RGB input; encoder_channels must start with 3".into()));
        }
        let layer = config.layer_for(vit)?;
        let (generator, store) = build_splice_generator(generator_config, config.seed, vit.device(), vit.dtype())?;
        let adam = Adam::new(&store, config.lr, config.adam_beta1, config.adam_beta2)?;
        let structure = structure.to_dtype(vit.dtype())?;
        let appearance = appearance.to_dtype(vit.dtype())?;
        let clean = Self::targets(vit, config.vit_resize, layer, &structure, &appearance)?;
        Ok(Self {
            vit,
            generator,
            generator_config: generator_config.clone(),
            store,
            adam,
            config: config.clone(),
            structure,
            appearance,
            clean,
            layer,
            iteration: 0,
            history: LossHistory::default(),
        })
    }

    fn targets(
        vit: &VitModel,
        resize: usize,
        layer: usize,
        structure: &ImageTensor,
        appearance: &ImageTensor,
    ) -> Result<PairTargets> {
        let fs = features_at(vit, structure, resize, layer)?.detach();
        let ft = features_at(vit, appearance, resize, layer)?.detach();
        Ok(PairTargets {
            sim_source: self_similarity(&fs.layer(layer)?.keys)?,
            cls_target: extract_cls(&ft, layer)?,
            keys_target: ft.layer(layer)?.keys.clone(),
        })
    }

    fn objective(&self, structure: &ImageTensor, appearance: &ImageTensor, targets: &PairTargets) -> Result<Objective> {
        let resize = self.config.vit_resize;
        let out_s = self.generator.forward(structure)?;
        let fo = features_at(self.vit, &out_s, resize, self.layer)?;
        let out_t = self.generator.forward(appearance)?;
        let fk = features_at(self.vit, &out_t, resize, self.layer)?;
        splice_objective(
            &extract_cls(&fo, self.layer)?,
            &targets.cls_target,
            &self_similarity(&fo.layer(self.layer)?.keys)?,
            &targets.sim_source,
            &targets.keys_target,
            &fk.layer(self.layer)?.keys,
            self.config.weights,
        )
    }

    /// One optimizer step on an augmented pair (plus the clean pair on schedule).
    pub fn step(&mut self) -> Result<LossReport> {
        let it = self.iteration;
        let mut rng = step_rng(self.config.seed, it);
        let (s, t) = augment_pair(&self.structure, &self.appearance, &self.config.augment, &mut rng)?;
        let aug = Self::targets(self.vit, self.config.vit_resize, self.layer, &s, &t)?;
        let mut objectives = vec![self.objective(&s, &t, &aug)?];
        let interval = self.config.clean_pair_interval;
        if interval > 0 && it.is_multiple_of(interval) {
            objectives.push(self.objective(&self.structure, &self.appearance, &self.clean)?);
        }
        let reports: Vec<LossReport> = objectives.iter().map(|o| o.report).collect();
        let report = mean_report(&reports, self.config.weights);
        check_finite(&report, it)?;
        let n = objectives.len() as f64;
        let mut total = objectives[0].total.clone();
        for o in &objectives[1..] {
            total = (total + &o.total)?;
        }
        let total = (total / n)?;
        let grads = total.backward()?;
        self.adam.step(&self.store, &grads)?;
        self.history.push(it, report);
        self.iteration += 1;
        Ok(report)
    }

    /// Runs until `config.iterations` steps have been taken.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.step()?;
            if self.iteration.is_multiple_of(100) {
                log::info!("splice iteration {} total {:.5}", self.iteration, self.history.records.last().map_or(0.0, |r| r.1.total));
            }
        }
        Ok(())
    }

    /// The objective on the un-augmented pair at the current parameters.
    pub fn clean_objective(&self) -> Result<LossReport> {
        Ok(self.objective(&self.structure, &self.appearance, &self.clean)?.report)
    }

    /// The generator applied to the un-augmented structure image.
    pub fn output(&self) -> Result<ImageTensor> {
        Ok(self.generator.forward(&self.structure)?.detach())
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &LossHistory {
        &self.history
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn generator(&self) -> &SpliceGenerator {
        &self.generator
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut extras = BTreeMap::new();
        extras.insert("train_config".into(), serde_json::to_string(&self.config).unwrap_or_default());
        extras.insert("vit_config".into(), serde_json::to_string(self.vit.config()).unwrap_or_default());
        Checkpoint::capture(
            CheckpointKind::Splice,
            &self.generator_config,
            &self.store,
            Some(&self.adam),
            self.iteration,
            extras,
        )
    }
}

/// Result of a completed single-pair run.
pub struct SpliceOutcome {
    pub output: ImageTensor,
    pub history: LossHistory,
    pub checkpoint: Checkpoint,
}

/// Trains a generator on one pair for `config.iterations` steps.
pub fn train_splice(
    vit: &VitModel,
    structure: &ImageTensor,
    appearance: &ImageTensor,
    generator_config: &SpliceGeneratorConfig,
    config: &TrainConfig,
) -> Result<SpliceOutcome> {
    let mut trainer = SpliceTrainer::new(vit, generator_config, config, structure, appearance)?;
    trainer.run()?;
    Ok(SpliceOutcome {
        output: trainer.output()?,
        checkpoint: trainer.checkpoint()?,
        history: trainer.history.clone(),
    })
}

/// Trains SpliceNet on ordered (structure, appearance) index pairs into `images`.
pub struct SpliceNetTrainer<'a> {
    vit: &'a VitModel,
    model: SpliceNet,
    store: ParamStore,
    adam: Adam,
    config: TrainConfig,
    images: Vec<ImageTensor>,
    pairs: Vec<(usize, usize)>,
    distance: PerceptualDistance,
    layer: usize,
    iteration: usize,
    history: LossHistory,
}

impl<'a> SpliceNetTrainer<'a> {
    pub fn new(
        vit: &'a VitModel,
        model: SpliceNet,
        store: ParamStore,
        config: &TrainConfig,
        images: Vec<ImageTensor>,
        pairs: Vec<(usize, usize)>,
        distance: PerceptualDistance,
    ) -> Result<Self> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(Error::Config("pair set is empty; nothing to train on".into()));
        }
        if let Some(&(a, b)) = pairs.iter().find(|(a, b)| *a >= images.len() || *b >= images.len()) {
            return Err(Error::Lookup(format!(
                "pair ({a}, {b}) refers past the {} loaded images",
                images.len()
            )));
        }
        let layer = config.layer_for(vit)?;
        if model.config().token_dim != vit.config().token_dim {
            return Err(Error::Config(format!(
                "SpliceNet expects {}-d tokens but the ViT produces {}",
                model.config().token_dim,
                vit.config().token_dim
            )));
        }
        let adam = Adam::new(&store, config.lr, config.adam_beta1, config.adam_beta2)?;
        let images = images
            .iter()
            .map(|i| i.to_dtype(vit.dtype()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vit,
            model,
            store,
            adam,
            config: config.clone(),
            images,
            pairs,
            distance,
            layer,
            iteration: 0,
            history: LossHistory::default(),
        })
    }

    /// Restores parameters, optimizer moments and the iteration counter.
    pub fn resume(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.expect_kind(CheckpointKind::SpliceNet)?;
        let saved: SpliceNetConfig = checkpoint.config()?;
        if &saved != self.model.config() {
            return Err(Error::Version("checkpoint was written for a different SpliceNet config".into()));
        }
        checkpoint.restore(&self.store, Some(&mut self.adam))?;
        self.iteration = checkpoint.iteration;
        Ok(())
    }

    pub fn step(&mut self) -> Result<LossReport> {
        let it = self.iteration;
        let resize = self.config.vit_resize;
        let layer = self.layer;
        let mut rng = step_rng(self.config.seed, it);
        let (a, b) = self.pairs[rng.random_range(0..self.pairs.len())];
        let identity = rng.random_bool(self.config.identity_pair_p);
        let b = if identity { a } else { b };
        let (s, t) = augment_pair(&self.images[a], &self.images[b], &self.config.augment, &mut rng)?;
        let ft = features_at(self.vit, &t, resize, layer)?;
        let cls_target = extract_cls(&ft, layer)?.detach();
        let fs = features_at(self.vit, &s, resize, layer)?;
        let sim_source = self_similarity(&fs.layer(layer)?.keys.detach())?;

        let out = ImageTensor::new(self.model.forward_tensor(s.tensor(), &cls_target.vector.unsqueeze(0)?)?)?;
        let fo = features_at(self.vit, &out, resize, layer)?;
        let app = appearance_loss(&extract_cls(&fo, layer)?, &cls_target)?;
        let structure = structure_loss(&self_similarity(&fo.layer(layer)?.keys)?, &sim_source)?;
        let id = if identity {
            perceptual_distance(&s, &out, &self.distance)?
        } else {
            Tensor::zeros((), out.dtype(), out.device())?
        };
        let obj = combine(app, structure, id, self.config.weights)?;
        check_finite(&obj.report, it)?;
        let grads = obj.total.backward()?;
        self.adam.step(&self.store, &grads)?;
        self.history.push(it, obj.report);
        self.iteration += 1;
        Ok(obj.report)
    }

    /// Trains until `config.iterations`, checkpointing into `checkpoint_dir`
    /// every `checkpoint_interval` steps and once at the end.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.iteration < self.config.iterations {
            self.step()?;
            let interval = self.config.checkpoint_interval;
            if let Some(dir) = checkpoint_dir {
                if interval > 0 && self.iteration.is_multiple_of(interval) {
                    let p = dir.join(format!("checkpoint_{:06}.safetensors", self.iteration));
                    self.checkpoint()?.save(&p)?;
                    written.push(p);
                }
            }
            if self.iteration.is_multiple_of(100) {
                log::info!("splicenet iteration {} total {:.5}", self.iteration, self.history.records.last().map_or(0.0, |r| r.1.total));
            }
        }
        if let Some(dir) = checkpoint_dir {
            let p = dir.join("final.safetensors");
            self.checkpoint()?.save(&p)?;
            written.push(p);
        }
        Ok(written)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut extras = BTreeMap::new();
        extras.insert("train_config".into(), serde_json::to_string(&self.config).unwrap_or_default());
        extras.insert("vit_config".into(), serde_json::to_string(self.vit.config()).unwrap_or_default());
        Checkpoint::capture(
            CheckpointKind::SpliceNet,
            self.model.config(),
            &self.store,
            Some(&self.adam),
            self.iteration,
            extras,
        )
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &LossHistory {
        &self.history
    }

    pub fn model(&self) -> &SpliceNet {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// `||cls(F(structure; cls(appearance))) - cls(appearance)||` without augmentation.
pub fn splicenet_appearance_loss(
    vit: &VitModel,
    model: &SpliceNet,
    structure: &ImageTensor,
    appearance: &ImageTensor,
    vit_resize: usize,
    layer: usize,
) -> Result<f64> {
    let target = extract_cls(&features_at(vit, appearance, vit_resize, layer)?, layer)?.detach();
    let out = model.forward_tensor(structure.tensor(), &target.vector.unsqueeze(0)?)?;
    let fo = features_at(vit, &ImageTensor::new(out)?.detach(), vit_resize, layer)?;
    scalar(&appearance_loss(&extract_cls(&fo, layer)?, &target)?)
}

/// The keys identity term of a generator on a single image; exposed for diagnostics.
pub fn keys_identity(vit: &VitModel, generated: &ImageTensor, reference: &ImageTensor, vit_resize: usize, layer: usize) -> Result<f64> {
    let fg = features_at(vit, generated, vit_resize, layer)?;
    let fr = features_at(vit, reference, vit_resize, layer)?;
    scalar(&identity_loss_keys(&fr.layer(layer)?.keys, &fg.layer(layer)?.keys)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn resize_keeps_aspect_and_patch_multiple() {
        let img = ImageTensor::from_fn(300, 450, &Device::Cpu, DType::F32, |_, _| [0.5; 3]).unwrap();
        let r = resize_for_vit(&img, 224, 8).unwrap();
        assert_eq!((r.height(), r.width()), (224, 336));
        let same = resize_for_vit(&r, 224, 8).unwrap();
        assert_eq!(same.tensor().dims(), r.tensor().dims());
    }

    #[test]
    fn toml_overlay_changes_only_given_keys() {
        let base = TrainConfig::splicenet();
        let c = base.overlay_toml("lr = 0.01\n[augment]\nhflip_p = 0.0\n").unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.augment.hflip_p, 0.0);
        assert_eq!(c.augment.jitter_p, base.augment.jitter_p);
        assert_eq!(c.weights, LossWeights::SPLICENET);
        assert!(base.overlay_toml("learning_rate = 1.0").is_err());
        assert!(base.overlay_toml("identity_pair_p = 2.0").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = TrainConfig::splice();
        assert_eq!(TrainConfig::splice().overlay_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn step_streams_differ_and_repeat() {
        let a: u64 = step_rng(3, 10).random();
        let b: u64 = step_rng(3, 10).random();
        let c: u64 = step_rng(3, 11).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
