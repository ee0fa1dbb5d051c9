//! Run configuration: JSON files plus dotted-path command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::error::{CeaError, Result};
use crate::metrics::LossConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Total optimizer steps; the cosine schedule decays to 0 over this span.
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            steps: 200,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub dataset: PathBuf,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            dataset: PathBuf::from("dataset"),
            seed: 0,
            out_dir: PathBuf::from("runs/run"),
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        if self.optim.batch_size == 0 {
            return Err(CeaError::Config("batch_size must be >= 1".into()));
        }
        if self.optim.lr <= 0.0 {
            return Err(CeaError::Config("learning rate must be positive".into()));
        }
        if self.threads == 0 {
            return Err(CeaError::Config("threads must be >= 1".into()));
        }
        Ok(())
    }

    /// Apply `key=value` overrides with dotted paths rooted at this config
    /// (e.g. `optim.lr=1e-3`, `backbone.cea.rank=16`). As a convenience,
    /// `cea.*` is treated as `backbone.cea.*`. Values parse as JSON first,
    /// falling back to a string.
    pub fn apply_overrides(&self, sets: &[String]) -> Result<RunConfig> {
        let mut root = serde_json::to_value(self)?;
        for s in sets {
            let (path, raw) = s
                .split_once('=')
                .ok_or_else(|| CeaError::Config(format!("override {s:?} is not key=value")))?;
            let path = if path.starts_with("cea.") {
                format!("backbone.{path}")
            } else {
                path.to_string()
            };
            let value: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
            set_path(&mut root, &path, value)?;
        }
        let cfg: RunConfig = serde_json::from_value(root)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            CeaError::Config(format!("override path {path:?}: {part:?} is not an object"))
        })?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(CeaError::Config(format!(
                    "override path {path:?}: unknown field {part:?}"
                )));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).ok_or_else(|| {
            CeaError::Config(format!("override path {path:?}: unknown field {part:?}"))
        })?;
    }
    unreachable!()
}

/// JSON paths on which two configs differ (dotted, sorted). Used to assert
/// that ablation variants change only their named axis.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Result<Vec<String>> {
    let (va, vb) = (serde_json::to_value(a)?, serde_json::to_value(b)?);
    let mut out = Vec::new();
    diff_values("", &va, &vb, &mut out);
    out.sort();
    Ok(out)
}

fn diff_values(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let keys: std::collections::BTreeSet<_> = ma.keys().chain(mb.keys()).collect();
            for k in keys {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match (ma.get(k), mb.get(k)) {
                    (Some(x), Some(y)) => diff_values(&p, x, y, out),
                    _ => out.push(p),
                }
            }
        }
        _ => {
            if a != b {
                out.push(prefix.to_string());
            }
        }
    }
}
