//! Training configuration and the named model variants.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionKind, HeadKind, ModelConfig};
use crate::signal::PipelineConfig;
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty for Adam and SGD, decoupled decay for AdamW.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean binary cross-entropy with logits over every (sample, class).
    #[default]
    BceWithLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    #[default]
    Cpu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Random crops drawn from every training recording per epoch.
    pub crops_per_recording: usize,
    pub device: Device,
    pub precision: DType,
    /// Fold held out for per-epoch validation; `None` trains on everything.
    pub validation_fold: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            pipeline: PipelineConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            epochs: 10,
            loss: LossKind::BceWithLogits,
            seed: 0,
            crops_per_recording: 1,
            device: Device::Cpu,
            precision: DType::F32,
            validation_fold: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: 4 leads at 100 Hz, 2.5 s segments, width 32,
    /// 4 heads and one block per stage.
    pub fn desk() -> Self {
        let mut c = TrainConfig::default();
        c.pipeline.target_fs = 100.0;
        c.pipeline.segment_seconds = 2.5;
        c.model.input_len = c.pipeline.segment_len();
        c.model.encoder.leads = 4;
        c.model.stages.dim = 32;
        c.model.stages.heads = 4;
        c.model.stages.layers = [1, 1, 1];
        c.batch_size = 16;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad(format!("optimizer betas must lie in [0, 1), got {} and {}", o.beta1, o.beta2));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad("optimizer eps must be positive and weight_decay nonnegative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.crops_per_recording == 0 {
            return bad("crops_per_recording must be positive".into());
        }
        self.pipeline.validate()?;
        self.model.validate()?;
        if self.model.input_len != self.pipeline.segment_len() {
            return bad(format!(
                "model.input_len {} differs from the pipeline segment length {}",
                self.model.input_len,
                self.pipeline.segment_len()
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// The four members of the model family: with or without the gated
/// inter-lead head, with standard or differential attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Base,
    NoGated,
    Diff,
    NoGatedDiff,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::NoGated, Variant::Diff, Variant::NoGatedDiff];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::NoGated => "no-gated",
            Variant::Diff => "diff",
            Variant::NoGatedDiff => "no-gated-diff",
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            Variant::Base | Variant::Diff => HeadKind::Gated,
            Variant::NoGated | Variant::NoGatedDiff => HeadKind::Pooled,
        }
    }

    pub fn attention(self) -> AttentionKind {
        match self {
            Variant::Base | Variant::NoGated => AttentionKind::Standard,
            Variant::Diff | Variant::NoGatedDiff => AttentionKind::Differential,
        }
    }

    pub fn apply(self, model: &mut ModelConfig) {
        model.head.kind = self.head();
        model.stages.attention = self.attention();
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}
