//! Rank-allocation strategies behind one trait, registered by name and
//! selected at runtime from config or the CLI.
//!
//! The four built-ins differ only in how ranks are chosen per phase:
//!
//! | kind      | train                   | level  | inference               |
//! |-----------|-------------------------|--------|-------------------------|
//! | `lora`    | fixed rank              | all    | fixed rank              |
//! | `dylora`  | uniform draw per batch  | batch  | fixed inference rank    |
//! | `dylora+` | uniform draw per batch  | batch  | uniform draw per batch  |
//! | `flexi`   | router, per sample      | sample | router, per sample      |

mod dylora;
mod dylora_plus;
mod fixed;
mod flexi;

pub use dylora::DyLora;
pub use dylora_plus::DyLoraPlus;
pub use fixed::FixedRank;
pub use flexi::Flexi;

use crate::adapters::{Phase, RankAssignment};
use crate::error::{Error, Result};
use crate::model::{Tokenizer, TransformerWeights};
use crate::numcore::{Precision, StreamRng};
use crate::router::RouterWeights;
use crate::tasks::Sample;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Read-only resources a policy may consult when assigning ranks.
pub struct PolicyContext<'a> {
    pub base: &'a TransformerWeights,
    pub tokenizer: &'a Tokenizer,
    pub precision: Precision,
}

/// A rank-allocation strategy. Implementations must be pure given
/// (batch, phase, rng state): all randomness flows through the passed stream.
pub trait RankPolicy: Send + Sync {
    /// Registry key, e.g. "dylora+".
    fn kind(&self) -> &'static str;

    /// Human-readable descriptor carried into reports, e.g. "lora(r=8)".
    fn descriptor(&self) -> String;

    /// Every rank this policy can emit (used for validation and reporting).
    fn rank_set(&self) -> Vec<usize>;

    fn assign_ranks(
        &self,
        batch: &[Sample],
        phase: Phase,
        ctx: &PolicyContext<'_>,
        rng: &mut StreamRng,
    ) -> Result<RankAssignment>;
}

/// Declarative policy selection, parsed from config or CLI flags.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub kind: String,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub range: Option<(usize, usize)>,
    #[serde(default)]
    pub inference_rank: Option<usize>,
    #[serde(default)]
    pub rank_table: Option<Vec<usize>>,
}

impl PolicySpec {
    pub fn fixed(rank: usize) -> Self {
        PolicySpec { kind: "lora".into(), rank: Some(rank), range: None, inference_rank: None, rank_table: None }
    }

    pub fn dylora(range: (usize, usize), inference_rank: usize) -> Self {
        PolicySpec {
            kind: "dylora".into(),
            rank: None,
            range: Some(range),
            inference_rank: Some(inference_rank),
            rank_table: None,
        }
    }

    pub fn dylora_plus(range: (usize, usize)) -> Self {
        PolicySpec { kind: "dylora+".into(), rank: None, range: Some(range), inference_rank: None, rank_table: None }
    }

    pub fn flexi() -> Self {
        PolicySpec { kind: "flexi".into(), rank: None, range: None, inference_rank: None, rank_table: None }
    }
}

/// Resources available while building policies (the trained router, when one
/// exists).
#[derive(Default)]
pub struct BuildResources<'a> {
    pub router: Option<&'a RouterWeights>,
}

pub type PolicyBuilder = fn(&PolicySpec, &BuildResources<'_>) -> Result<Box<dyn RankPolicy>>;

/// Name-keyed registry of strategy builders.
pub struct PolicyRegistry {
    builders: BTreeMap<&'static str, PolicyBuilder>,
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        PolicyRegistry { builders: BTreeMap::new() }
    }

    /// Registry with the four built-in strategies.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register("lora", fixed::build);
        reg.register("dylora", dylora::build);
        reg.register("dylora+", dylora_plus::build);
        reg.register("flexi", flexi::build);
        reg
    }

    pub fn register(&mut self, name: &'static str, builder: PolicyBuilder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn build(
        &self,
        spec: &PolicySpec,
        resources: &BuildResources<'_>,
    ) -> Result<Box<dyn RankPolicy>> {
        match self.builders.get(spec.kind.as_str()) {
            Some(builder) => builder(spec, resources),
            None => Err(Error::Policy(format!(
                "unknown policy kind '{}'; registered: {}",
                spec.kind,
                self.names().join(", ")
            ))),
        }
    }
}

pub(crate) fn require_range(spec: &PolicySpec) -> Result<(usize, usize)> {
    let (lo, hi) = spec
        .range
        .ok_or_else(|| Error::Policy(format!("policy '{}' needs a rank range", spec.kind)))?;
    if lo < 1 || lo > hi {
        return Err(Error::Policy(format!("empty or invalid rank range {lo}..={hi}")));
    }
    Ok((lo, hi))
}
