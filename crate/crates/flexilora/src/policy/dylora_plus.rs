//! DyLoRA+: batch-level random ranks in both phases, keeping inference
//! consistent with the training dynamics.

use super::{require_range, BuildResources, PolicyContext, PolicySpec, RankPolicy};
use crate::adapters::{Phase, RankAssignment};
use crate::error::{Error, Result};
use crate::numcore::StreamRng;
use crate::tasks::Sample;

pub struct DyLoraPlus {
    range: (usize, usize),
}

impl DyLoraPlus {
    pub fn new(range: (usize, usize)) -> Result<Self> {
        if range.0 < 1 || range.0 > range.1 {
            return Err(Error::Policy(format!("empty rank range {}..={}", range.0, range.1)));
        }
        Ok(DyLoraPlus { range })
    }
}

pub(super) fn build(spec: &PolicySpec, _res: &BuildResources<'_>) -> Result<Box<dyn RankPolicy>> {
    Ok(Box::new(DyLoraPlus::new(require_range(spec)?)?))
}

impl RankPolicy for DyLoraPlus {
    fn kind(&self) -> &'static str {
        "dylora+"
    }

    fn descriptor(&self) -> String {
        format!("dylora+({}..{})", self.range.0, self.range.1)
    }

    fn rank_set(&self) -> Vec<usize> {
        (self.range.0..=self.range.1).collect()
    }

    fn assign_ranks(
        &self,
        batch: &[Sample],
        phase: Phase,
        _ctx: &PolicyContext<'_>,
        rng: &mut StreamRng,
    ) -> Result<RankAssignment> {
        if batch.is_empty() {
            return Err(Error::Policy("empty batch".into()));
        }
        let rank = rng.int_inclusive(self.range.0, self.range.1);
        Ok(RankAssignment {
            ranks: vec![rank; batch.len()],
            phase,
            provenance: self.descriptor(),
        })
    }
}
