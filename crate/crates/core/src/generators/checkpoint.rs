//! Self-describing checkpoint: a safetensors file whose tensors hold the
//! parameters (`param.*`) and Adam moments (`adam.*`), and whose header
//! metadata carries the format tag, kind, model config, iteration counter
//! and any caller-supplied extras.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{write_safetensors, Adam, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "splice-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Splice,
    SpliceNet,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Splice => "splice",
            Self::SpliceNet => "splicenet",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config_json: String,
    pub iteration: usize,
    pub params: HashMap<String, Tensor>,
    pub optimizer: HashMap<String, Tensor>,
    pub extras: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn capture<C: Serialize>(
        kind: CheckpointKind,
        config: &C,
        store: &ParamStore,
        optimizer: Option<&Adam>,
        iteration: usize,
        extras: BTreeMap<String, String>,
    ) -> Result<Self> {
        let config_json = serde_json::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
        let params = store.named_tensors().into_iter().collect();
        let optimizer = optimizer
            .map(|o| o.state(store).into_iter().collect())
            .unwrap_or_default();
        Ok(Self {
            kind,
            config_json,
            iteration,
            params,
            optimizer,
            extras,
        })
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_str(&self.config_json)
            .map_err(|e| Error::Version(format!("checkpoint config does not match this model: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (k, v) in &self.params {
            tensors.push((format!("param.{k}"), v.clone()));
        }
        for (k, v) in &self.optimizer {
            tensors.push((k.clone(), v.clone()));
        }
        let mut meta: BTreeMap<String, String> = self.extras.clone().into_iter().collect();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("version".into(), CHECKPOINT_VERSION.into());
        meta.insert("kind".into(), self.kind.as_str().into());
        meta.insert("config".into(), self.config_json.clone());
        meta.insert("iteration".into(), self.iteration.to_string());
        write_safetensors(&tensors, meta, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Version(format!("{} is not a checkpoint: {e}", path.display())))?;
        let meta = header.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Version(format!("{} is not a {CHECKPOINT_FORMAT} file", path.display())));
        }
        let version = meta.get("version").cloned().unwrap_or_default();
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let kind = match meta.get("kind").map(String::as_str) {
            Some("splice") => CheckpointKind::Splice,
            Some("splicenet") => CheckpointKind::SpliceNet,
            other => return Err(Error::Version(format!("unknown checkpoint kind {other:?}"))),
        };
        let iteration = meta
            .get("iteration")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Version("checkpoint lacks an iteration counter".into()))?;
        let config_json = meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Version("checkpoint lacks a model config".into()))?;
        let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut params = HashMap::new();
        let mut optimizer = HashMap::new();
        for (k, v) in all {
            if let Some(name) = k.strip_prefix("param.") {
                params.insert(name.to_string(), v);
            } else if k.starts_with("adam.") {
                optimizer.insert(k, v);
            }
        }
        let extras = meta
            .into_iter()
            .filter(|(k, _)| !matches!(k.as_str(), "format" | "version" | "kind" | "config" | "iteration"))
            .collect();
        Ok(Self {
            kind,
            config_json,
            iteration,
            params,
            optimizer,
            extras,
        })
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Version(format!(
                "expected a {} checkpoint, found {}",
                kind.as_str(),
                self.kind.as_str()
            )));
        }
        Ok(())
    }

    /// Copies parameters (and optimizer moments, when present) into live objects.
    pub fn restore(&self, store: &ParamStore, optimizer: Option<&mut Adam>) -> Result<()> {
        store.load(&self.params).map_err(|e| match e {
            Error::WeightLoad { tensor, reason } => {
                Error::Version(format!("checkpoint does not match model at `{tensor}`: {reason}"))
            }
            e => e,
        })?;
        if let Some(opt) = optimizer {
            if !self.optimizer.is_empty() {
                opt.load_state(store, &self.optimizer, self.iteration)?;
            }
        }
        Ok(())
    }
}
