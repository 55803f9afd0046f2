//! Experiment configuration: human-editable TOML, schema-checked (unknown
//! keys rejected), every field defaulted.

use crate::adapters::AdaptTarget;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numcore::Precision;
use crate::policy::PolicySpec;
use crate::tasks::{TaskFamily, TaskSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: String,
    /// Evaluation-only parallelism; None decodes on the global pool.
    pub threads: Option<usize>,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub tasks: Vec<TaskSpec>,
    pub router: RouterSection,
    pub adapters: AdaptersSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub policies: Vec<PolicySpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { d_model: 64, n_layers: 4, n_heads: 4, d_ff: 128, max_seq_len: 96 }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Pretraining corpus size drawn per task family.
    pub corpus_per_family: usize,
    /// Copy warm-up samples mixed into the corpus.
    pub copy_count: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { steps: 1200, batch_size: 16, lr: 1e-3, corpus_per_family: 1500, copy_count: 400 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RouterSection {
    pub sigma: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Easy threshold for score-valued metrics (token F1).
    pub tau_f1: f64,
    /// Easy threshold for 0/1 metrics (exact answers).
    pub tau_exact: f64,
    pub holdout_fraction: f64,
    /// Class -> rank table, ascending by difficulty.
    pub rank_table: Vec<usize>,
    /// Decode budget for the zero-shot labeling sweep.
    pub label_max_new: usize,
}

impl Default for RouterSection {
    fn default() -> Self {
        RouterSection {
            sigma: 0.1,
            hidden: 32,
            epochs: 40,
            lr: 0.1,
            tau_f1: 0.5,
            tau_exact: 1.0,
            holdout_fraction: 0.2,
            rank_table: vec![2, 8],
            label_max_new: 8,
        }
    }
}

impl RouterSection {
    pub fn tau_for(&self, family: TaskFamily) -> f64 {
        match family.metric_kind() {
            crate::tasks::MetricKind::TokenF1 => self.tau_f1,
            _ => self.tau_exact,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptersSection {
    pub r_max: usize,
    pub alpha_base: f64,
    pub targets: Vec<AdaptTarget>,
}

impl Default for AdaptersSection {
    fn default() -> Self {
        AdaptersSection { r_max: 8, alpha_base: 16.0, targets: AdaptTarget::defaults() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection { steps: 300, batch_size: 16, lr: 0.05, momentum: 0.9, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
    pub max_new: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { batch_size: 16, max_new: 8 }
    }
}

fn default_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            family: TaskFamily::ModChain,
            easy_knobs: (1, 2),
            hard_knobs: (6, 8),
            train_size: 512,
            eval_size: 200,
        },
        TaskSpec {
            family: TaskFamily::KvRecall,
            easy_knobs: (1, 3),
            hard_knobs: (8, 12),
            train_size: 512,
            eval_size: 200,
        },
    ]
}

fn default_policies() -> Vec<PolicySpec> {
    vec![
        PolicySpec::fixed(2),
        PolicySpec::fixed(8),
        PolicySpec::dylora((1, 8), 8),
        PolicySpec::dylora_plus((1, 8)),
        PolicySpec::flexi(),
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            precision: Precision::F32,
            out_dir: "runs/default".into(),
            threads: None,
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            tasks: default_tasks(),
            router: RouterSection::default(),
            adapters: AdaptersSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
            policies: default_policies(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        // placeholder vocab, only the dimension laws matter here
        self.model
            .to_model_config(64)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task spec is required".into()));
        }
        for t in &self.tasks {
            t.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.policies.is_empty() {
            return Err(Error::Config("at least one policy is required".into()));
        }
        let registry = crate::policy::PolicyRegistry::builtin();
        let known = registry.names();
        for p in &self.policies {
            if !known.contains(&p.kind.as_str()) {
                return Err(Error::Config(format!(
                    "unknown policy kind '{}' (known: {})",
                    p.kind,
                    known.join(", ")
                )));
            }
        }
        if self.adapters.r_max < *self.router.rank_table.iter().max().unwrap_or(&1) {
            return Err(Error::Config(format!(
                "router rank table {:?} exceeds adapter capacity r_max {}",
                self.router.rank_table, self.adapters.r_max
            )));
        }
        for p in &self.policies {
            let top = p
                .rank
                .or(p.range.map(|(_, hi)| hi))
                .or(p.inference_rank)
                .unwrap_or(0);
            if top > self.adapters.r_max {
                return Err(Error::Config(format!(
                    "policy '{}' uses rank {top} beyond r_max {}",
                    p.kind, self.adapters.r_max
                )));
            }
        }
        if !(0.0..1.0).contains(&self.router.holdout_fraction) {
            return Err(Error::Config("router.holdout_fraction must be in [0, 1)".into()));
        }
        if self.router.sigma < 0.0 {
            return Err(Error::Config("router.sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Stable hash of a config slice (canonical JSON), for stage caching.
    pub fn slice_hash(parts: &[&str]) -> String {
        let mut hasher = Sha256::new();
        for p in parts {
            hasher.update(p.as_bytes());
            hasher.update([0u8]);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn json_of<T: Serialize>(v: &T) -> String {
        serde_json::to_string(v).expect("config slices serialize")
    }
}
