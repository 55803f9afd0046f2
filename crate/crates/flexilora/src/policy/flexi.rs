//! Flexi-LoRA: the trained router maps each sample's pooled prompt
//! embedding to a rank, in both phases.

use super::{BuildResources, PolicyContext, PolicySpec, RankPolicy};
use crate::adapters::{Phase, RankAssignment};
use crate::error::{Error, Result};
use crate::numcore::StreamRng;
use crate::router::{pooled_for_samples, RouterWeights};
use crate::tasks::Sample;

pub struct Flexi {
    router: RouterWeights,
}

impl Flexi {
    pub fn new(router: RouterWeights) -> Self {
        Flexi { router }
    }

    pub fn router(&self) -> &RouterWeights {
        &self.router
    }
}

pub(super) fn build(spec: &PolicySpec, res: &BuildResources<'_>) -> Result<Box<dyn RankPolicy>> {
    let router = res
        .router
        .ok_or_else(|| Error::Policy("policy 'flexi' needs a trained router".into()))?;
    let mut router = router.clone();
    if let Some(table) = &spec.rank_table {
        if *table != router.rank_table {
            return Err(Error::Policy(format!(
                "policy rank_table {table:?} does not match the trained router's {:?}",
                router.rank_table
            )));
        }
        router.rank_table = table.clone();
    }
    Ok(Box::new(Flexi::new(router)))
}

impl RankPolicy for Flexi {
    fn kind(&self) -> &'static str {
        "flexi"
    }

    fn descriptor(&self) -> String {
        let ranks: Vec<String> = self.router.rank_table.iter().map(|r| r.to_string()).collect();
        format!("flexi({})", ranks.join(","))
    }

    fn rank_set(&self) -> Vec<usize> {
        self.router.rank_table.clone()
    }

    fn assign_ranks(
        &self,
        batch: &[Sample],
        phase: Phase,
        ctx: &PolicyContext<'_>,
        _rng: &mut StreamRng,
    ) -> Result<RankAssignment> {
        if batch.is_empty() {
            return Err(Error::Policy("empty batch".into()));
        }
        let pooled = pooled_for_samples(ctx.base, ctx.tokenizer, batch, ctx.precision)?;
        let ranks = self.router.route(&pooled)?;
        Ok(RankAssignment { ranks, phase, provenance: self.descriptor() })
    }
}
