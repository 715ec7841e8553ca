use serde::{Deserialize, Serialize};

use super::task::SyntheticTask;
use super::train::{train, TrainConfig};
use crate::error::Result;
use crate::kvcache::{memory_report, MemoryReport, STORAGE_BYTES};
use crate::model::{ForwardOptions, Model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every layer full.
    FullAttn,
    /// The hybrid layout with sparse layers reduced to their window branch.
    HybridSwa,
    HySparse,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::FullAttn, Regime::HybridSwa, Regime::HySparse];

    pub fn name(&self) -> &'static str {
        match self {
            Regime::FullAttn => "full_attn",
            Regime::HybridSwa => "hybrid_swa",
            Regime::HySparse => "hysparse",
        }
    }

    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        match self {
            Regime::FullAttn => ModelConfig { hybrid_ratio: 0, ..base.clone() },
            _ => base.clone(),
        }
    }

    pub fn options(&self) -> ForwardOptions {
        ForwardOptions { sparse_branch: *self != Regime::HybridSwa, ..ForwardOptions::default() }
    }

    pub fn build(&self, base: &ModelConfig, seed: u64) -> Result<Model> {
        Ok(Model::new(self.model_config(base), seed)?.with_options(self.options()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeResult {
    pub regime: Regime,
    pub layout: String,
    pub heldout_accuracy: f64,
    pub heldout_loss: f64,
    pub memory: MemoryReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub task: SyntheticTask,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub results: Vec<RegimeResult>,
}

impl ComparisonReport {
    pub fn result(&self, regime: Regime) -> Option<&RegimeResult> {
        self.results.iter().find(|r| r.regime == regime)
    }

    /// Canonical JSON: object keys sorted.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serialises")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("regime,layout,heldout_accuracy,heldout_loss,kv_bytes,reduction_ratio\n");
        for r in &self.results {
            s.push_str(&format!(
                "{},{},{:?},{:?},{},{:?}\n",
                r.regime.name(),
                r.layout,
                r.heldout_accuracy,
                r.heldout_loss,
                r.memory.hybrid_bytes,
                r.memory.reduction_ratio
            ));
        }
        s
    }
}

/// Trains each regime from the same seed and budget and reports held-out
/// accuracy with the KV footprint at the task's length.
pub fn compare_regimes(
    task: &SyntheticTask,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    regimes: &[Regime],
) -> Result<ComparisonReport> {
    let mut results = Vec::with_capacity(regimes.len());
    for &regime in regimes {
        let mut model = regime.build(base, train_cfg.seed)?;
        let report = train(&mut model, task, train_cfg)?;
        results.push(RegimeResult {
            regime,
            layout: model.stack.pattern(),
            heldout_accuracy: report.heldout_accuracy,
            heldout_loss: report.heldout_loss,
            memory: memory_report(&model.cfg, task.seq_len, STORAGE_BYTES)?,
        });
    }
    Ok(ComparisonReport {
        schema_version: 1,
        task: task.clone(),
        model: base.clone(),
        train: train_cfg.clone(),
        results,
    })
}
