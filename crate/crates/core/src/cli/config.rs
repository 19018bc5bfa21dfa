//! Run configuration: one JSON document drives every subcommand; CLI flags
//! override the seed and output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AnchorDistance, Interpolation};
use crate::admm::CombinedStrategy;
use crate::sparsity::SparsityMode;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Input model archive directory (read tasks).
    pub model: Option<PathBuf>,
    pub net: NetConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub eval: EvalConfig,
    pub anchors: AnchorsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("out"),
            model: None,
            net: NetConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
            eval: EvalConfig::default(),
            anchors: AnchorsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::usage(format!("bad config: {e}")))?;
        Ok(cfg)
    }

    /// The resolved configuration embedded in reports and archives.
    /// Filesystem locations are normalized to null so artifacts from
    /// identical runs stay bit-identical wherever they are written.
    pub fn to_value(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["out"] = serde_json::Value::Null;
        v["model"] = serde_json::Value::Null;
        v["dataset"]["images"] = serde_json::Value::Null;
        v["dataset"]["boxes"] = serde_json::Value::Null;
        v["eval"]["predictions"] = serde_json::Value::Null;
        v["eval"]["truths"] = serde_json::Value::Null;
        v["anchors"]["boxes"] = serde_json::Value::Null;
        v
    }

    pub fn require_model(&self) -> Result<&PathBuf> {
        let path = self
            .model
            .as_ref()
            .ok_or_else(|| Error::usage("this command requires `model` in the config"))?;
        require_exists(path, "model archive")?;
        Ok(path)
    }
}

/// Read tasks must point at existing files; reported as usage errors.
pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::usage(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NetKindConfig {
    #[default]
    Classifier,
    Detector,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub kind: NetKindConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// "synthetic" or "files".
    pub kind: DatasetKind,
    pub train_count: usize,
    pub eval_count: usize,
    pub image_size: usize,
    /// Dataset generation seed; defaults to the run seed.
    pub seed: Option<u64>,
    /// File mode: raw little-endian f32 image blob + JSON sidecar.
    pub images: Option<PathBuf>,
    /// File mode: ground-truth boxes, JSON lines.
    pub boxes: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Files,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            train_count: 512,
            eval_count: 256,
            image_size: 16,
            seed: None,
            images: None,
            boxes: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Defaults to one epoch of batches.
    pub warmup_batches: Option<usize>,
    /// Defaults to the full planned run.
    pub total_batches: Option<usize>,
    pub lr_min: f64,
    pub mixup_enabled: bool,
    pub mixup_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            lr0: 0.2,
            warmup_batches: None,
            total_batches: None,
            lr_min: 0.0,
            mixup_enabled: false,
            mixup_alpha: 0.2,
        }
    }
}

impl TrainConfig {
    /// Concrete schedule for a run of `total_planned` batches with
    /// `batches_per_epoch` per epoch.
    pub fn lr_schedule(
        &self,
        batches_per_epoch: usize,
        total_planned: usize,
    ) -> Result<crate::schedules::LrSchedule> {
        let warmup = self.warmup_batches.unwrap_or(batches_per_epoch);
        let total = self.total_batches.unwrap_or(total_planned).max(warmup);
        let mut s = crate::schedules::LrSchedule::new(self.lr0, warmup, total)?;
        s.lr_min = self.lr_min;
        s.validate()?;
        Ok(s)
    }

    pub fn mixup(&self) -> crate::schedules::MixupConfig {
        crate::schedules::MixupConfig {
            alpha: self.mixup_alpha,
            enabled: self.mixup_enabled,
        }
    }
}

/// Per-layer constraint overrides (counts win over global ratios).
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct LayerAlphaOverride {
    pub alpha_filters: Option<usize>,
    pub alpha_columns: Option<usize>,
    pub alpha_weights: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub mode: SparsityMode,
    /// Retention ratios (fraction of the dimension kept).
    pub keep_filters: f64,
    pub keep_columns: f64,
    pub keep_weights: f64,
    /// Keyed by conv ordinal (as a string, JSON maps need string keys).
    pub per_layer: std::collections::BTreeMap<String, LayerAlphaOverride>,
    pub rho: f64,
    pub admm_iterations: usize,
    pub epochs_per_iteration: usize,
    pub retrain_epochs: usize,
    pub strategy: CombinedStrategy,
    pub interpolation: Interpolation,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            mode: SparsityMode::Combined,
            keep_filters: 0.5,
            keep_columns: 0.5,
            keep_weights: 0.25,
            per_layer: Default::default(),
            rho: 1e-3,
            admm_iterations: 9,
            epochs_per_iteration: 1,
            retrain_epochs: 4,
            strategy: CombinedStrategy::default(),
            interpolation: Interpolation::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate a predictions file directly instead of running a model.
    pub predictions: Option<PathBuf>,
    /// Ground-truth boxes file; defaults to the synthetic dataset.
    pub truths: Option<PathBuf>,
    pub thresholds: Option<Vec<f64>>,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            predictions: None,
            truths: None,
            thresholds: None,
            score_threshold: 0.2,
            nms_iou: 0.5,
            interpolation: Interpolation::default(),
        }
    }
}

impl EvalConfig {
    /// Sweep thresholds: the default eight, or the configured list, which
    /// must be strictly increasing within [0, 1].
    pub fn sweep_thresholds(&self) -> Result<Vec<f64>> {
        let t = match &self.thresholds {
            None => return Ok(crate::metrics::DEFAULT_THRESHOLDS.to_vec()),
            Some(t) => t.clone(),
        };
        if t.is_empty()
            || t.iter().any(|v| !(0.0..=1.0).contains(v))
            || t.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::usage(
                "eval.thresholds must be strictly increasing within [0, 1]",
            ));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorsConfig {
    pub k: usize,
    pub scales: usize,
    pub distance: AnchorDistance,
    /// Boxes file (JSON lines); defaults to the synthetic dataset's truths.
    pub boxes: Option<PathBuf>,
}

impl Default for AnchorsConfig {
    fn default() -> Self {
        Self {
            k: 9,
            scales: 3,
            distance: AnchorDistance::default(),
            boxes: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.prune.admm_iterations, 9);
        assert_eq!(back.prune.rho, 1e-3);
        assert_eq!(back.train.mixup_alpha, 0.2);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "prune": {"mode": "filter"}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.prune.mode, SparsityMode::Filter);
        assert_eq!(cfg.prune.keep_filters, 0.5);
    }

    #[test]
    fn unknown_fields_rejected() {
        let r: std::result::Result<RunConfig, _> =
            serde_json::from_str(r#"{"sneed": 7}"#);
        assert!(r.is_err());
    }

    #[test]
    fn lr_schedule_derivation() {
        let t = TrainConfig::default();
        let s = t.lr_schedule(16, 192).unwrap();
        assert_eq!(s.warmup_batches, 16);
        assert_eq!(s.total_batches, 192);
        assert_eq!(s.lr0, 0.2);
    }

    #[test]
    fn threshold_validation() {
        let mut cfg = EvalConfig::default();
        assert_eq!(cfg.sweep_thresholds().unwrap().len(), 8);
        cfg.thresholds = Some(vec![0.3, 0.5, 0.9]);
        assert!(cfg.sweep_thresholds().is_ok());
        cfg.thresholds = Some(vec![0.5, 0.5]);
        assert!(cfg.sweep_thresholds().is_err());
        cfg.thresholds = Some(vec![0.5, 0.4]);
        assert!(cfg.sweep_thresholds().is_err());
        cfg.thresholds = Some(vec![-0.1, 0.5]);
        assert!(cfg.sweep_thresholds().is_err());
        cfg.thresholds = Some(vec![]);
        assert!(cfg.sweep_thresholds().is_err());
    }

    #[test]
    fn embedded_config_normalizes_paths() {
        let mut cfg = RunConfig::default();
        cfg.model = Some("/somewhere/model".into());
        cfg.out = "/tmp/run-a".into();
        let v = cfg.to_value();
        assert!(v["model"].is_null());
        assert!(v["out"].is_null());
        assert_eq!(v["seed"], 42);
    }
}
