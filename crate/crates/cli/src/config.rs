//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use forgetkit::data::{ScenarioSpec, SyntheticSpec};
use forgetkit::engine::{Method, TaskConfig};
use forgetkit::metrics::RecoveryConfig;
use forgetkit::model::{ModelConfig, PretrainConfig};
use serde::{Deserialize, Serialize};

use crate::UserError;

/// Transformer geometry; input width and class count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub blocks: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub tokens: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let m = ModelConfig::new(8, 2);
        ModelShape {
            blocks: m.blocks,
            d_model: m.d_model,
            d_ff: m.d_ff,
            heads: m.heads,
            tokens: m.tokens,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFlags {
    /// Save the model after every task, not only after the last one.
    #[serde(default)]
    pub per_task: bool,
}

/// Lists to sweep; every combination of the non-empty lists becomes one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub rank: Vec<usize>,
    #[serde(default)]
    pub data_ratio: Vec<f64>,
    #[serde(default)]
    pub shots: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dataset: SyntheticSpec,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub checkpoints: CheckpointFlags,
    /// Fill the `wall_ms` column; leaves metrics.csv run-dependent.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub recovery: RecoveryConfig,
    #[serde(default)]
    pub sweep: Sweep,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_method() -> Method {
    Method::GsLoraPlusPlus
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| UserError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| UserError(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.dataset.dim,
            num_classes: self.dataset.classes,
            blocks: self.model.blocks,
            d_model: self.model.d_model,
            d_ff: self.model.d_ff,
            heads: self.model.heads,
            tokens: self.model.tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            bail!(UserError("name must be a nonempty single path component".into()));
        }
        if self.seeds.is_empty() {
            bail!(UserError("seeds must not be empty".into()));
        }
        self.model_config().validate()?;
        self.task.validate()?;
        self.scenario.validate(self.dataset.classes)?;
        for point in self.sweep_points() {
            point.apply(self)?.scenario.validate(self.dataset.classes)?;
        }
        Ok(())
    }

    /// Every combination of sweep values; one empty point when nothing is swept.
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        let mut points = vec![SweepPoint::default()];
        let s = &self.sweep;
        if !s.alpha.is_empty() {
            points = cross(points, &s.alpha, |p, v| p.alpha = Some(v));
        }
        if !s.rank.is_empty() {
            points = cross(points, &s.rank, |p, v| p.rank = Some(v));
        }
        if !s.data_ratio.is_empty() {
            points = cross(points, &s.data_ratio, |p, v| p.data_ratio = Some(v));
        }
        if !s.shots.is_empty() {
            points = cross(points, &s.shots, |p, v| p.shots = Some(v));
        }
        points
    }
}

fn cross<T: Copy>(points: Vec<SweepPoint>, values: &[T], set: impl Fn(&mut SweepPoint, T)) -> Vec<SweepPoint> {
    let mut out = Vec::with_capacity(points.len() * values.len());
    for p in points {
        for &v in values {
            let mut q = p.clone();
            set(&mut q, v);
            out.push(q);
        }
    }
    out
}

/// One setting of the swept values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepPoint {
    pub alpha: Option<f64>,
    pub rank: Option<usize>,
    pub data_ratio: Option<f64>,
    pub shots: Option<usize>,
}

impl SweepPoint {
    /// Directory name for the point, e.g. `alpha=0.1_rank=4`; empty for the
    /// unswept point.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.alpha {
            parts.push(format!("alpha={v}"));
        }
        if let Some(v) = self.rank {
            parts.push(format!("rank={v}"));
        }
        if let Some(v) = self.data_ratio {
            parts.push(format!("data_ratio={v}"));
        }
        if let Some(v) = self.shots {
            parts.push(format!("shots={v}"));
        }
        parts.join("_")
    }

    /// The base config with this point's values substituted.
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        if let Some(v) = self.alpha {
            cfg.task.loss.alpha = v;
        }
        if let Some(v) = self.rank {
            cfg.task.lora.rank = v;
        }
        if let Some(v) = self.data_ratio {
            cfg.scenario.data_ratio = v;
            cfg.scenario.shots = None;
        }
        if let Some(v) = self.shots {
            cfg.scenario.shots = Some(v);
        }
        cfg.sweep = Sweep::default();
        cfg.task.validate()?;
        Ok(cfg)
    }
}
