//! Static LoRA: one fixed rank in both phases.

use super::{BuildResources, PolicyContext, PolicySpec, RankPolicy};
use crate::adapters::{Phase, RankAssignment};
use crate::error::{Error, Result};
use crate::numcore::StreamRng;
use crate::tasks::Sample;

pub struct FixedRank {
    rank: usize,
}

impl FixedRank {
    pub fn new(rank: usize) -> Result<Self> {
        if rank < 1 {
            return Err(Error::Policy("fixed rank must be at least 1".into()));
        }
        Ok(FixedRank { rank })
    }
}

pub(super) fn build(spec: &PolicySpec, _res: &BuildResources<'_>) -> Result<Box<dyn RankPolicy>> {
    let rank = spec
        .rank
        .ok_or_else(|| Error::Policy("policy 'lora' needs a rank".into()))?;
    Ok(Box::new(FixedRank::new(rank)?))
}

impl RankPolicy for FixedRank {
    fn kind(&self) -> &'static str {
        "lora"
    }

    fn descriptor(&self) -> String {
        format!("lora(r={})", self.rank)
    }

    fn rank_set(&self) -> Vec<usize> {
        vec![self.rank]
    }

    fn assign_ranks(
        &self,
        batch: &[Sample],
        phase: Phase,
        _ctx: &PolicyContext<'_>,
        _rng: &mut StreamRng,
    ) -> Result<RankAssignment> {
        if batch.is_empty() {
            return Err(Error::Policy("empty batch".into()));
        }
        Ok(RankAssignment {
            ranks: vec![self.rank; batch.len()],
            phase,
            provenance: self.descriptor(),
        })
    }
}
