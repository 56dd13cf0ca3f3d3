//! Run configuration: strict JSON with every field defaulted, unknown
//! keys rejected, and the resolved form echoed back out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::PrepSettings;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// View branch frozen for this many leading epochs; absent means 30%.
    pub phase_a_epochs: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Weight of the alignment orthogonality penalty in the loss.
    pub orth_weight: f64,
    /// Points fed to the model; absent means every cached point.
    pub n_points: Option<usize>,
    /// Views fed to the model; absent means every cached view.
    pub n_views: Option<usize>,
    /// Stop once training-split overall accuracy reaches this.
    pub early_stop_overall: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            phase_a_epochs: None,
            lr: 0.01,
            batch_size: 8,
            seed: 0,
            optimizer: OptimizerKind::default(),
            orth_weight: 1e-3,
            n_points: None,
            n_views: None,
            early_stop_overall: None,
        }
    }
}

impl TrainConfig {
    /// Leading epochs with the view branch frozen.
    pub fn resolved_phase_a(&self) -> usize {
        self.phase_a_epochs.unwrap_or(self.epochs * 3 / 10)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be nonzero"));
        }
        if self.resolved_phase_a() > self.epochs {
            return Err(Error::config(format!(
                "phase_a_epochs {} exceeds epochs {}",
                self.resolved_phase_a(),
                self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be nonzero"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(n) = self.n_points {
            if model.k >= n {
                return Err(Error::config(format!(
                    "neighbor count k={} needs more than n_points={n}",
                    model.k
                )));
            }
        }
        if let Some(v) = self.n_views {
            if v == 0 {
                return Err(Error::config("n_views must be nonzero when set"));
            }
        }
        if let Some(t) = self.early_stop_overall {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config(format!("early_stop_overall {t} outside [0, 1]")));
            }
        }
        match self.optimizer {
            OptimizerKind::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::config(format!("momentum {momentum} outside [0, 1)")));
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                    return Err(Error::config("adam needs beta1, beta2 in [0, 1) and eps > 0"));
                }
            }
        }
        Ok(())
    }
}

/// Everything one run needs, as read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prep: PrepSettings,
    /// Preprocessing cache directory.
    pub data_dir: PathBuf,
    /// Shape manifest, needed by prep and corpus generation.
    pub manifest: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("parse {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        if let Some(n) = self.train.n_points {
            if n > self.prep.n_points {
                return Err(Error::config(format!(
                    "n_points {n} exceeds the {} cached per shape",
                    self.prep.n_points
                )));
            }
        }
        if let Some(v) = self.train.n_views {
            if v > self.prep.n_views {
                return Err(Error::config(format!(
                    "n_views {v} exceeds the {} cached per shape",
                    self.prep.n_views
                )));
            }
        }
        if self.train.n_points.is_none() && self.model.k >= self.prep.n_points {
            return Err(Error::config(format!(
                "neighbor count k={} needs more than the {} cached points",
                self.model.k, self.prep.n_points
            )));
        }
        Ok(())
    }

    /// Write the fully resolved config (defaults filled in) to `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("config.resolved.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Dot-paths whose values differ between two JSON trees, each rendered as
/// `path: left vs right`. Drives explicit incompatibility messages.
pub fn json_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        use serde_json::Value;
        match (a, b) {
            (Value::Object(ma), Value::Object(mb)) => {
                let keys: std::collections::BTreeSet<&String> =
                    ma.keys().chain(mb.keys()).collect();
                for key in keys {
                    let sub = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                    match (ma.get(key), mb.get(key)) {
                        (Some(va), Some(vb)) => walk(&sub, va, vb, out),
                        (Some(va), None) => out.push(format!("{sub}: {va} vs absent")),
                        (None, Some(vb)) => out.push(format!("{sub}: absent vs {vb}")),
                        (None, None) => unreachable!(),
                    }
                }
            }
            _ if a == b => {}
            _ => out.push(format!("{path}: {a} vs {b}")),
        }
    }
    let mut out = Vec::new();
    walk("", a, b, &mut out);
    out
}
