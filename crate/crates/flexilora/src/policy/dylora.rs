//! DyLoRA: one uniform rank draw per training batch, a fixed rank at
//! inference regardless of the training dynamics.

use super::{require_range, BuildResources, PolicyContext, PolicySpec, RankPolicy};
use crate::adapters::{Phase, RankAssignment};
use crate::error::{Error, Result};
use crate::numcore::StreamRng;
use crate::tasks::Sample;

pub struct DyLora {
    range: (usize, usize),
    inference_rank: usize,
}

impl DyLora {
    pub fn new(range: (usize, usize), inference_rank: usize) -> Result<Self> {
        if range.0 < 1 || range.0 > range.1 {
            return Err(Error::Policy(format!("empty rank range {}..={}", range.0, range.1)));
        }
        Ok(DyLora { range, inference_rank })
    }
}

pub(super) fn build(spec: &PolicySpec, _res: &BuildResources<'_>) -> Result<Box<dyn RankPolicy>> {
    let range = require_range(spec)?;
    // default inference rank: the top of the training range (the rank under
    // comparison in the report tables)
    let inference_rank = spec.inference_rank.unwrap_or(range.1);
    Ok(Box::new(DyLora::new(range, inference_rank)?))
}

impl RankPolicy for DyLora {
    fn kind(&self) -> &'static str {
        "dylora"
    }

    fn descriptor(&self) -> String {
        format!("dylora({}..{},inf={})", self.range.0, self.range.1, self.inference_rank)
    }

    fn rank_set(&self) -> Vec<usize> {
        let mut set: Vec<usize> = (self.range.0..=self.range.1).collect();
        if !set.contains(&self.inference_rank) {
            set.push(self.inference_rank);
            set.sort_unstable();
        }
        set
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
        let rank = match phase {
            Phase::Train => rng.int_inclusive(self.range.0, self.range.1),
            Phase::Inference => self.inference_rank,
        };
        Ok(RankAssignment {
            ranks: vec![rank; batch.len()],
            phase,
            provenance: self.descriptor(),
        })
    }
}
