//! Command implementations behind the `splice` binary. Each command returns
//! the [`RunManifest`] it wrote, so they are usable and testable as library calls.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clsops::{interpolate_cls, kmeans_modes, TokenFile, KMEANS_MAX_ITERATIONS};
use crate::distillation::{
    compute_descriptors_from_dir, list_images, mutual_knn_pairs, read_pairs, resolve_pairs, Metric, DEFAULT_K,
    DEFAULT_WINDOW,
};
use crate::error::{Error, Result};
use crate::features::{extract_cls, ClsToken};
use crate::generators::{build_splicenet, Checkpoint, CheckpointKind, SpliceGeneratorConfig, SpliceNet, SpliceNetConfig};
use crate::image::{tile_grid, ImageTensor};
use crate::inversion::{invert_cls_across_layers, invert_feature, FeatureSelector, InversionConfig, InversionResult};
use crate::losses::{appearance_loss, scalar};
use crate::perceptual::{perceptual_distance, PerceptualDistance};
use crate::training::{resize_for_vit, train_splice, SpliceNetTrainer, TrainConfig};
use crate::vit::{load_vit, VitConfig, VitModel};

/// Environment variable selecting the compute device.
pub const DEVICE_ENV: &str = "SPLICE_DEVICE";

/// Resolves `SPLICE_DEVICE`; only `cpu` is available in this build.
pub fn device_from_env() -> Result<Device> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok(Device::Cpu),
        Ok(v) if v.trim().is_empty() || v.trim().eq_ignore_ascii_case("cpu") => Ok(Device::Cpu),
        Ok(v) => Err(Error::Config(format!(
            "{DEVICE_ENV}={v} is not available; this build supports only `cpu`"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitSpec {
    /// `vit-b8` or `tiny`.
    pub arch: String,
    /// Weight file path, or `random:<seed>` for seeded synthetic weights.
    pub weights: String,
}

impl Default for VitSpec {
    fn default() -> Self {
        Self {
            arch: "vit-b8".into(),
            weights: "random:0".into(),
        }
    }
}

impl VitSpec {
    pub fn to_config(&self) -> Result<VitConfig> {
        match self.arch.to_ascii_lowercase().as_str() {
            "vit-b8" | "vit_b8" | "dino_vitb8" => Ok(VitConfig::vit_b8(self.weights.clone())),
            "tiny" => Ok(VitConfig::tiny(self.weights.clone())),
            other => Err(Error::Config(format!("unknown ViT architecture `{other}` (expected vit-b8 or tiny)"))),
        }
    }

    pub fn load(&self, device: &Device) -> Result<VitModel> {
        if self.weights.starts_with("random:") {
            log::warn!("using seeded synthetic ViT weights ({}); features are not DINO features", self.weights);
        }
        load_vit(&self.to_config()?, device, DType::F32)
    }
}

/// Everything a command can be configured with; each command reads the parts it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vit: VitSpec,
    pub train: TrainConfig,
    pub generator: SpliceGeneratorConfig,
    /// `auto` picks the full model for 768-d tokens and the small one otherwise.
    pub splicenet_preset: String,
    /// Full SpliceNet config; overrides the preset when present.
    pub splicenet: Option<SpliceNetConfig>,
    pub inversion: InversionConfig,
    pub lpips_weights: Option<PathBuf>,
    /// Square side images are resized to before computing dataset descriptors.
    pub descriptor_resize: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            vit: VitSpec::default(),
            train: TrainConfig::splice(),
            generator: SpliceGeneratorConfig::default(),
            splicenet_preset: "auto".into(),
            splicenet: None,
            inversion: InversionConfig::default(),
            lpips_weights: None,
            descriptor_resize: 224,
        }
    }
}

impl RunConfig {
    pub fn for_splicenet() -> Self {
        Self {
            train: TrainConfig::splicenet(),
            ..Self::default()
        }
    }

    /// `base` overlaid with the TOML file at `path`, if any.
    pub fn load(base: Self, path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                crate::config::overlay_toml(&base, &text)?
            }
            None => base,
        };
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn splicenet_config(&self, token_dim: usize) -> Result<SpliceNetConfig> {
        if let Some(c) = &self.splicenet {
            return Ok(c.clone());
        }
        match self.splicenet_preset.as_str() {
            "auto" if token_dim == 768 => Ok(SpliceNetConfig::default()),
            "auto" | "small" => Ok(SpliceNetConfig::small(token_dim)),
            "full" => Ok(SpliceNetConfig {
                token_dim,
                ..SpliceNetConfig::default()
            }),
            other => Err(Error::Config(format!("unknown splicenet_preset `{other}`"))),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
    pub vit_arch: Option<String>,
    pub vit_weights: Option<String>,
    pub vit_resize: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(n) = self.iterations {
            cfg.train.iterations = n;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.inversion.prior_seed = s;
        }
        if let Some(a) = &self.vit_arch {
            cfg.vit.arch = a.clone();
        }
        if let Some(w) = &self.vit_weights {
            cfg.vit.weights = w.clone();
        }
        if let Some(r) = self.vit_resize {
            cfg.train.vit_resize = r;
            cfg.inversion.output_size = r;
        }
        cfg.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<PathBuf>,
    pub timings: BTreeMap<String, f64>,
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(InputRecord {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(path.to_path_buf());
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn load_image(path: &Path, device: &Device, manifest: &mut RunManifest) -> Result<ImageTensor> {
    let img = ImageTensor::load(path, device, DType::F32)?;
    manifest.add_input(path)?;
    Ok(img)
}

fn cls_of(vit: &VitModel, image: &ImageTensor, resize: usize, layer: usize) -> Result<ClsToken> {
    let r = resize_for_vit(image, resize, vit.config().patch_size)?;
    Ok(extract_cls(&vit.forward_features(&r, &[layer])?, layer)?.detach())
}

pub struct SpliceArgs {
    pub structure: PathBuf,
    pub appearance: PathBuf,
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub overrides: Overrides,
}

/// Trains a single-pair generator; writes `result.png`, `checkpoint.safetensors`,
/// `losses.csv` and `manifest.json` into `out_dir`.
pub fn cmd_splice(args: &SpliceArgs) -> Result<RunManifest> {
    let mut cfg = RunConfig::load(RunConfig::default(), args.config.as_deref())?;
    args.overrides.apply(&mut cfg)?;
    let device = device_from_env()?;
    let mut manifest = RunManifest::new("splice", &cfg);
    manifest.seeds.insert("train".into(), cfg.train.seed);
    let structure = load_image(&args.structure, &device, &mut manifest)?;
    let appearance = load_image(&args.appearance, &device, &mut manifest)?;
    let vit = cfg.vit.load(&device)?;
    create_dir(&args.out_dir)?;

    let t0 = Instant::now();
    let outcome = train_splice(&vit, &structure, &appearance, &cfg.generator, &cfg.train)?;
    manifest.timings.insert("train_seconds".into(), t0.elapsed().as_secs_f64());

    let result = args.out_dir.join("result.png");
    outcome.output.save_png(&result)?;
    manifest.add_output(&result);
    let ckpt = args.out_dir.join("checkpoint.safetensors");
    outcome.checkpoint.save(&ckpt)?;
    manifest.add_output(&ckpt);
    let losses = args.out_dir.join("losses.csv");
    outcome.history.write_csv(&losses)?;
    manifest.add_output(&losses);
    manifest.write(&args.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub struct SpliceNetTrainArgs {
    pub pairs: PathBuf,
    pub data_dir: PathBuf,
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub overrides: Overrides,
}

/// Trains SpliceNet on a pair file; writes periodic checkpoints under
/// `out_dir/checkpoints`, `losses.csv` and `manifest.json`.
pub fn cmd_splicenet_train(args: &SpliceNetTrainArgs) -> Result<RunManifest> {
    let mut cfg = RunConfig::load(RunConfig::for_splicenet(), args.config.as_deref())?;
    args.overrides.apply(&mut cfg)?;
    let device = device_from_env()?;
    let mut manifest = RunManifest::new("splicenet-train", &cfg);
    manifest.seeds.insert("train".into(), cfg.train.seed);

    let pairs = read_pairs(&args.pairs)?;
    manifest.add_input(&args.pairs)?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("pair file {} is empty", args.pairs.display())));
    }
    let mut ids: Vec<String> = pairs.iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
    ids.sort();
    ids.dedup();
    let images = ids
        .iter()
        .map(|id| load_image(&args.data_dir.join(id), &device, &mut manifest))
        .collect::<Result<Vec<_>>>()?;
    let index_pairs = resolve_pairs(&pairs, &ids)?;

    let vit = cfg.vit.load(&device)?;
    let net_cfg = cfg.splicenet_config(vit.config().token_dim)?;
    let (model, store) = build_splicenet(&net_cfg, cfg.train.seed, &device, DType::F32)?;
    let distance =
        PerceptualDistance::from_selector(&cfg.train.perceptual, cfg.lpips_weights.as_deref(), &device, DType::F32)?;
    let mut trainer = SpliceNetTrainer::new(&vit, model, store, &cfg.train, images, index_pairs, distance)?;
    if let Some(resume) = &args.resume {
        let ckpt = Checkpoint::load(resume)?;
        trainer.resume(&ckpt)?;
        manifest.add_input(resume)?;
        manifest.notes.insert("resumed_at".into(), trainer.iteration().to_string());
    }
    create_dir(&args.out_dir)?;
    let t0 = Instant::now();
    let written = trainer.run(Some(&args.out_dir.join("checkpoints")))?;
    manifest.timings.insert("train_seconds".into(), t0.elapsed().as_secs_f64());
    for p in written {
        manifest.add_output(p);
    }
    let losses = args.out_dir.join("losses.csv");
    trainer.history().write_csv(&losses)?;
    manifest.add_output(&losses);
    manifest.write(&args.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A SpliceNet restored from a checkpoint with the ViT it was trained against.
pub struct LoadedSpliceNet {
    pub model: SpliceNet,
    pub vit: VitModel,
    pub layer: usize,
    pub vit_resize: usize,
}

impl LoadedSpliceNet {
    /// `vit_weights` replaces the recorded weight source (the architecture must match).
    pub fn load(path: &Path, vit_weights: Option<&str>, device: &Device) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.expect_kind(CheckpointKind::SpliceNet)?;
        let net_cfg: SpliceNetConfig = ckpt.config()?;
        let mut vit_cfg: VitConfig = ckpt
            .extras
            .get("vit_config")
            .ok_or_else(|| Error::Version("checkpoint does not record its ViT config".into()))
            .and_then(|s| serde_json::from_str(s).map_err(|e| Error::Version(format!("bad ViT config: {e}"))))?;
        if let Some(w) = vit_weights {
            vit_cfg.weights_source = w.to_string();
        }
        if vit_cfg.token_dim != net_cfg.token_dim {
            return Err(Error::Version(format!(
                "checkpoint expects {}-d tokens but its ViT config yields {}",
                net_cfg.token_dim, vit_cfg.token_dim
            )));
        }
        let train: TrainConfig = ckpt
            .extras
            .get("train_config")
            .and_then(|s| serde_json::from_str(s).ok())
            .unwrap_or_else(TrainConfig::splicenet);
        let vit = load_vit(&vit_cfg, device, DType::F32)?;
        let (model, store) = build_splicenet(&net_cfg, 0, device, DType::F32)?;
        ckpt.restore(&store, None)?;
        Ok(Self {
            model,
            layer: train.feature_layer.unwrap_or(vit_cfg.num_layers),
            vit_resize: train.vit_resize,
            vit,
        })
    }

    pub fn cls(&self, image: &ImageTensor) -> Result<ClsToken> {
        cls_of(&self.vit, image, self.vit_resize, self.layer)
    }

    pub fn forward(&self, structure: &ImageTensor, token: &ClsToken) -> Result<ImageTensor> {
        if token.dim() != self.model.config().token_dim {
            return Err(Error::Version(format!(
                "token has {} dims but the model expects {}",
                token.dim(),
                self.model.config().token_dim
            )));
        }
        let t = token.vector.to_dtype(DType::F32)?.unsqueeze(0)?;
        Ok(ImageTensor::new(self.model.forward_tensor(structure.tensor(), &t)?)?.detach())
    }

    pub fn appearance_loss(&self, output: &ImageTensor, target: &ClsToken) -> Result<f64> {
        scalar(&appearance_loss(&self.cls(output)?, target)?)
    }
}

pub struct SpliceNetRunArgs {
    pub checkpoint: PathBuf,
    pub structure: PathBuf,
    pub appearance: Option<PathBuf>,
    pub token_file: Option<PathBuf>,
    pub out: PathBuf,
    pub vit_weights: Option<String>,
}

/// One feed-forward transfer; writes `out` and `<out>.manifest.json`.
pub fn cmd_splicenet_run(args: &SpliceNetRunArgs) -> Result<RunManifest> {
    let device = device_from_env()?;
    let loaded = LoadedSpliceNet::load(&args.checkpoint, args.vit_weights.as_deref(), &device)?;
    let mut manifest = RunManifest::new("splicenet-run", loaded.model.config());
    manifest.add_input(&args.checkpoint)?;
    let structure = load_image(&args.structure, &device, &mut manifest)?;
    let token = match (&args.appearance, &args.token_file) {
        (Some(p), None) => loaded.cls(&load_image(p, &device, &mut manifest)?)?,
        (None, Some(p)) => {
            manifest.add_input(p)?;
            TokenFile::load(p)?.to_token(&device, DType::F32)?
        }
        _ => return Err(Error::Config("give exactly one of an appearance image or a token file".into())),
    };
    let t0 = Instant::now();
    let out = loaded.forward(&structure, &token)?;
    let secs = t0.elapsed().as_secs_f64();
    println!("inference_seconds: {secs:.4}");
    manifest.timings.insert("inference_seconds".into(), secs);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    out.save_png(&args.out)?;
    manifest.add_output(&args.out);
    manifest.write(&sibling_manifest(&args.out))?;
    Ok(manifest)
}

pub struct DistillArgs {
    pub data_dir: PathBuf,
    pub k: Option<usize>,
    pub window: Option<usize>,
    pub metric: Metric,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
}

/// Descriptor index, mutual-KNN pair file and its metadata sidecar.
pub fn cmd_distill(args: &DistillArgs) -> Result<RunManifest> {
    let mut cfg = RunConfig::load(RunConfig::default(), args.config.as_deref())?;
    args.overrides.apply(&mut cfg)?;
    let device = device_from_env()?;
    let k = args.k.unwrap_or(DEFAULT_K);
    let window = args.window.unwrap_or(DEFAULT_WINDOW);
    let mut manifest = RunManifest::new("distill", &cfg);
    manifest.notes.insert("k".into(), k.to_string());
    manifest.notes.insert("window".into(), window.to_string());
    let vit = cfg.vit.load(&device)?;
    let t0 = Instant::now();
    let index = compute_descriptors_from_dir(&args.data_dir, &vit, window, cfg.descriptor_resize, args.metric)?;
    manifest.timings.insert("descriptor_seconds".into(), t0.elapsed().as_secs_f64());
    if index.len() < 2 {
        return Err(Error::Config(format!(
            "{} has {} usable images; at least 2 are needed",
            args.data_dir.display(),
            index.len()
        )));
    }
    for path in list_images(&args.data_dir)? {
        let id = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if index.image_ids.iter().any(|i| i == id) {
            manifest.add_input(&path)?;
        }
    }
    let pairs = mutual_knn_pairs(&index, k)?;
    let out_dir = args.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let (desc, ids) = index.save(out_dir)?;
    let (pair_path, meta_path) = pairs.save(&args.out)?;
    for p in [desc, ids, pair_path, meta_path] {
        manifest.add_output(p);
    }
    manifest
        .notes
        .insert("pairs".into(), pairs.unordered.len().to_string());
    manifest.write(&sibling_manifest(&args.out))?;
    Ok(manifest)
}

pub struct InvertArgs {
    pub target: PathBuf,
    pub selector: Option<String>,
    pub layers: Vec<usize>,
    pub steps: Option<usize>,
    pub pixels_only: bool,
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub overrides: Overrides,
}

fn write_trace(path: &Path, rows: &[(String, &[f64])]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::training::csv_error(path, e))?;
    w.write_record(["selector", "step", "loss"])
        .map_err(|e| crate::training::csv_error(path, e))?;
    for (sel, trace) in rows {
        for (i, v) in trace.iter().enumerate() {
            w.write_record([sel.clone(), i.to_string(), v.to_string()])
                .map_err(|e| crate::training::csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Feature inversion. With `layers`, inverts the CLS token of each layer and
/// writes `layer_<l>.png` plus `grid.png` (left to right in the given order);
/// otherwise writes `result.png`. Always writes `trace.csv`.
pub fn cmd_invert(args: &InvertArgs) -> Result<RunManifest> {
    let mut cfg = RunConfig::load(RunConfig::default(), args.config.as_deref())?;
    args.overrides.apply(&mut cfg)?;
    if let Some(s) = &args.selector {
        cfg.inversion.selector = Some(crate::inversion::InversionSelectorText(s.parse()?));
    }
    if let Some(n) = args.steps {
        cfg.inversion.steps = n;
    }
    cfg.inversion.pixels_only |= args.pixels_only;
    let device = device_from_env()?;
    let mut manifest = RunManifest::new("invert", &cfg);
    manifest.seeds.insert("prior".into(), cfg.inversion.prior_seed);
    let target = load_image(&args.target, &device, &mut manifest)?;
    let vit = cfg.vit.load(&device)?;
    create_dir(&args.out_dir)?;
    let trace_path = args.out_dir.join("trace.csv");
    let t0 = Instant::now();

    let runs: Vec<(String, Result<InversionResult>)> = if args.layers.is_empty() {
        let sel = cfg.inversion.selector(&vit).to_string();
        vec![(sel, invert_feature(&target, &cfg.inversion, &vit))]
    } else {
        invert_cls_across_layers(&target, &args.layers, &cfg.inversion, &vit)
            .into_iter()
            .map(|(l, r)| (FeatureSelector::Cls(l).to_string(), r))
            .collect()
    };
    manifest.timings.insert("invert_seconds".into(), t0.elapsed().as_secs_f64());

    let mut traces: Vec<(String, Vec<f64>)> = Vec::new();
    let mut tiles = Vec::new();
    let mut first_error = None;
    for ((sel, run), layer) in runs.into_iter().zip(args.layers.iter().map(Some).chain(std::iter::repeat(None))) {
        match run {
            Ok(res) => {
                let name = match layer {
                    Some(l) => format!("layer_{l}.png"),
                    None => "result.png".into(),
                };
                let p = args.out_dir.join(name);
                res.image.save_png(&p)?;
                manifest.add_output(&p);
                manifest.notes.insert(format!("final_loss.{sel}"), res.final_loss().to_string());
                tiles.push(res.image);
                traces.push((sel, res.trace));
            }
            Err(e) => {
                log::error!("inversion {sel} failed: {e}");
                manifest.notes.insert(format!("error.{sel}"), e.to_string());
                if let Error::Diverged { trace, .. } = &e {
                    traces.push((sel, trace.clone()));
                }
                first_error.get_or_insert(e);
            }
        }
    }
    let rows: Vec<(String, &[f64])> = traces.iter().map(|(s, t)| (s.clone(), t.as_slice())).collect();
    write_trace(&trace_path, &rows)?;
    manifest.add_output(&trace_path);
    if !args.layers.is_empty() && !tiles.is_empty() {
        let grid = args.out_dir.join("grid.png");
        tile_grid(&[tiles])?.save_png(&grid)?;
        manifest.add_output(&grid);
    }
    manifest.write(&args.out_dir.join("manifest.json"))?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

pub struct ModesArgs {
    pub data_dir: PathBuf,
    pub k: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub structures: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
}

/// K-means over the CLS tokens of a directory. Writes `modes.json` and one
/// `mode_<j>.token.json` per centroid; with a checkpoint and structure images,
/// also `mode_grid.png` (one row per structure, one column per mode).
pub fn cmd_modes(args: &ModesArgs) -> Result<RunManifest> {
    let mut cfg = RunConfig::load(RunConfig::for_splicenet(), args.config.as_deref())?;
    args.overrides.apply(&mut cfg)?;
    let device = device_from_env()?;
    let mut manifest = RunManifest::new("modes", &cfg);
    manifest.seeds.insert("kmeans".into(), args.seed);
    let loaded = match &args.checkpoint {
        Some(p) => {
            manifest.add_input(p)?;
            Some(LoadedSpliceNet::load(p, args.overrides.vit_weights.as_deref(), &device)?)
        }
        None => None,
    };
    let own_vit;
    let (vit, resize, layer) = match &loaded {
        Some(l) => (&l.vit, l.vit_resize, l.layer),
        None => {
            own_vit = cfg.vit.load(&device)?;
            let layer = cfg.train.feature_layer.unwrap_or(own_vit.config().num_layers);
            (&own_vit, cfg.train.vit_resize, layer)
        }
    };
    let mut ids = Vec::new();
    let mut tokens = Vec::new();
    for path in list_images(&args.data_dir)? {
        let img = load_image(&path, &device, &mut manifest)?;
        let v: Vec<f64> = cls_of(vit, &img, resize, layer)?
            .to_vec()?
            .into_iter()
            .map(f64::from)
            .collect();
        ids.push(path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string());
        tokens.push(v);
    }
    if tokens.is_empty() {
        return Err(Error::Config(format!("{} contains no images", args.data_dir.display())));
    }
    let mut modes = kmeans_modes(&tokens, args.k, args.seed, KMEANS_MAX_ITERATIONS)?;
    modes.image_ids = ids;
    create_dir(&args.out_dir)?;
    let modes_path = args.out_dir.join("modes.json");
    modes.save(&modes_path)?;
    manifest.add_output(&modes_path);
    let mut centroid_tokens = Vec::new();
    for j in 0..modes.k() {
        let tok = modes.centroid_token(j, layer, &device, DType::F32)?;
        let p = args.out_dir.join(format!("mode_{j}.token.json"));
        TokenFile::from_token(&tok)?.save(&p)?;
        manifest.add_output(&p);
        centroid_tokens.push(tok);
    }
    if let Some(l) = &loaded {
        if !args.structures.is_empty() {
            let mut rows = Vec::new();
            for s in &args.structures {
                let img = load_image(s, &device, &mut manifest)?;
                rows.push(
                    centroid_tokens
                        .iter()
                        .map(|t| l.forward(&img, t))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            let grid = args.out_dir.join("mode_grid.png");
            tile_grid(&rows)?.save_png(&grid)?;
            manifest.add_output(&grid);
        }
    }
    manifest.notes.insert("inertia".into(), modes.inertia.to_string());
    manifest.write(&args.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub struct InterpolateArgs {
    pub checkpoint: PathBuf,
    pub structure: PathBuf,
    pub appearance: PathBuf,
    pub alphas: Vec<f64>,
    pub out_dir: PathBuf,
    pub vit_weights: Option<String>,
}

/// Renders the structure under tokens interpolated from its own CLS toward
/// the appearance CLS. Writes `alpha_<i>.png`, `grid.png` and
/// `interpolation.csv` (alpha, appearance loss to the target).
pub fn cmd_interpolate(args: &InterpolateArgs) -> Result<RunManifest> {
    let device = device_from_env()?;
    let loaded = LoadedSpliceNet::load(&args.checkpoint, args.vit_weights.as_deref(), &device)?;
    let mut manifest = RunManifest::new("interpolate", &args.alphas);
    manifest.add_input(&args.checkpoint)?;
    let structure = load_image(&args.structure, &device, &mut manifest)?;
    let appearance = load_image(&args.appearance, &device, &mut manifest)?;
    let cs = loaded.cls(&structure)?;
    let ct = loaded.cls(&appearance)?;
    let tokens = interpolate_cls(&cs, &ct, &args.alphas)?;
    create_dir(&args.out_dir)?;
    let csv_path = args.out_dir.join("interpolation.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| crate::training::csv_error(&csv_path, e))?;
    w.write_record(["alpha", "appearance_loss"])
        .map_err(|e| crate::training::csv_error(&csv_path, e))?;
    let mut tiles = Vec::new();
    for (i, (alpha, tok)) in args.alphas.iter().zip(&tokens).enumerate() {
        let out = loaded.forward(&structure, tok)?;
        let loss = loaded.appearance_loss(&out, &ct)?;
        let p = args.out_dir.join(format!("alpha_{i}.png"));
        out.save_png(&p)?;
        manifest.add_output(&p);
        w.write_record([alpha.to_string(), loss.to_string()])
            .map_err(|e| crate::training::csv_error(&csv_path, e))?;
        tiles.push(out);
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    manifest.add_output(&csv_path);
    let grid = args.out_dir.join("grid.png");
    tile_grid(&[tiles])?.save_png(&grid)?;
    manifest.add_output(&grid);
    manifest.write(&args.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    pub image_id: String,
    pub mse: f64,
    pub perceptual: f64,
}

/// Self-reconstruction errors: each image transferred onto itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub rows: Vec<ReconRow>,
    pub mean_mse: f64,
    pub mean_perceptual: f64,
    pub perceptual_kind: String,
}

impl ReconReport {
    pub fn from_rows(rows: Vec<ReconRow>, perceptual_kind: &str) -> Self {
        let n = rows.len().max(1) as f64;
        Self {
            mean_mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
            mean_perceptual: rows.iter().map(|r| r.perceptual).sum::<f64>() / n,
            rows,
            perceptual_kind: perceptual_kind.into(),
        }
    }

    /// Rows in input order followed by a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| crate::training::csv_error(path, e))?;
        w.write_record(["image_id", "mse", "perceptual"])
            .map_err(|e| crate::training::csv_error(path, e))?;
        for r in &self.rows {
            w.write_record([r.image_id.clone(), r.mse.to_string(), r.perceptual.to_string()])
                .map_err(|e| crate::training::csv_error(path, e))?;
        }
        w.write_record(["mean".to_string(), self.mean_mse.to_string(), self.mean_perceptual.to_string()])
            .map_err(|e| crate::training::csv_error(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reconstruction error of a model over image files.
pub fn evaluate_reconstruction(
    loaded: &LoadedSpliceNet,
    images: &[(String, ImageTensor)],
    distance: &PerceptualDistance,
) -> Result<ReconReport> {
    if images.is_empty() {
        return Err(Error::Config("no images to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(images.len());
    for (id, img) in images {
        let out = loaded.forward(img, &loaded.cls(img)?)?;
        rows.push(ReconRow {
            image_id: id.clone(),
            mse: out.mse(img)?,
            perceptual: scalar(&perceptual_distance(&out, img, distance)?)?,
        });
    }
    Ok(ReconReport::from_rows(rows, distance.name()))
}

pub struct EvalReconArgs {
    pub checkpoint: PathBuf,
    pub image_dir: PathBuf,
    pub out_csv: PathBuf,
    pub perceptual: String,
    pub lpips_weights: Option<PathBuf>,
    pub vit_weights: Option<String>,
}

pub fn cmd_eval_recon(args: &EvalReconArgs) -> Result<(ReconReport, RunManifest)> {
    let device = device_from_env()?;
    let loaded = LoadedSpliceNet::load(&args.checkpoint, args.vit_weights.as_deref(), &device)?;
    let distance = PerceptualDistance::from_selector(&args.perceptual, args.lpips_weights.as_deref(), &device, DType::F32)?;
    let mut manifest = RunManifest::new("eval-recon", &args.perceptual);
    manifest.add_input(&args.checkpoint)?;
    let paths = list_images(&args.image_dir)?;
    if paths.is_empty() {
        return Err(Error::Config(format!("{} contains no images", args.image_dir.display())));
    }
    let mut images = Vec::new();
    for p in paths {
        let id = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        images.push((id, load_image(&p, &device, &mut manifest)?));
    }
    let t0 = Instant::now();
    let report = evaluate_reconstruction(&loaded, &images, &distance)?;
    manifest.timings.insert("eval_seconds".into(), t0.elapsed().as_secs_f64());
    if let Some(parent) = args.out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    report.write_csv(&args.out_csv)?;
    manifest.add_output(&args.out_csv);
    manifest.notes.insert("mean_mse".into(), report.mean_mse.to_string());
    manifest.notes.insert("mean_perceptual".into(), report.mean_perceptual.to_string());
    manifest.write(&sibling_manifest(&args.out_csv))?;
    Ok((report, manifest))
}
