//! Dynamic-rank LoRA adapters.
//!
//! Every adapted projection owns a full-capacity pair: A with `r_max` rows
//! and B with `r_max` columns. A forward pass at rank `r` uses only the
//! first `r` rows of A and first `r` columns of B, scaled by
//! `alpha_base / r`. Batches with heterogeneous per-sample ranks share one
//! matmul: the `r_max`-wide intermediate is multiplied by a per-row mask
//! that zeroes columns past each sample's rank (and folds in the scaling),
//! which also confines gradients to the active rows/columns.

use crate::error::{Error, Result};
use crate::numcore::{Graph, Precision, StreamRng, TensorId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which base projections carry adapters. W_q and W_v are the default pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptTarget {
    Wq,
    Wk,
    Wv,
    Wo,
}

impl AdaptTarget {
    pub fn name(self) -> &'static str {
        match self {
            AdaptTarget::Wq => "wq",
            AdaptTarget::Wk => "wk",
            AdaptTarget::Wv => "wv",
            AdaptTarget::Wo => "wo",
        }
    }

    pub fn defaults() -> Vec<AdaptTarget> {
        vec![AdaptTarget::Wq, AdaptTarget::Wv]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Inference,
}

/// Per-sample ranks for one batch, produced by a rank policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankAssignment {
    pub ranks: Vec<usize>,
    pub phase: Phase,
    /// Name of the policy that produced this assignment.
    pub provenance: String,
}

impl RankAssignment {
    pub fn validate(&self, r_max: usize) -> Result<()> {
        if self.ranks.is_empty() {
            return Err(Error::Policy("empty rank assignment".into()));
        }
        for &r in &self.ranks {
            if r < 1 || r > r_max {
                return Err(Error::Policy(format!("rank {r} outside [1, {r_max}]")));
            }
        }
        Ok(())
    }
}

/// Full-capacity A/B pair for one adapted projection.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub layer: usize,
    pub target: AdaptTarget,
    /// [r_max, d_in] row-major.
    pub a: Vec<f64>,
    /// [d_out, r_max] row-major.
    pub b: Vec<f64>,
    pub d_in: usize,
    pub d_out: usize,
    pub r_max: usize,
    pub alpha_base: f64,
}

impl LoraPair {
    /// Standard LoRA init: A ~ N(0, 0.02^2), B = 0, so the initial delta is
    /// exactly zero.
    pub fn init(
        layer: usize,
        target: AdaptTarget,
        d_in: usize,
        d_out: usize,
        r_max: usize,
        alpha_base: f64,
        rng: &mut StreamRng,
        precision: Precision,
    ) -> Self {
        let mut a = rng.normal_vec(r_max * d_in, 0.0, 0.02);
        precision.round_slice(&mut a);
        LoraPair {
            layer,
            target,
            a,
            b: vec![0.0; d_out * r_max],
            d_in,
            d_out,
            r_max,
            alpha_base,
        }
    }

    pub fn name(&self) -> String {
        format!("l{}.{}.lora", self.layer, self.target.name())
    }

    /// Rank-specific scaling: alpha_base / r (strictly decreasing in r).
    pub fn alpha_of(&self, r: usize) -> f64 {
        self.alpha_base / r as f64
    }

    /// View of the first `r` rows of A and first `r` columns of B, sharing
    /// storage with the full matrices.
    pub fn truncate_view(&self, r: usize) -> Result<TruncatedView<'_>> {
        if r < 1 || r > self.r_max {
            return Err(Error::InvalidArgument {
                op: "truncate_view",
                msg: format!("rank {r} outside [1, {}]", self.r_max),
            });
        }
        Ok(TruncatedView { pair: self, r })
    }

    /// Dense delta alpha_r * B_r * A_r as a [d_out, d_in] matrix.
    pub fn merge_delta(&self, r: usize) -> Result<Vec<f64>> {
        let view = self.truncate_view(r)?;
        let alpha = self.alpha_of(r);
        let mut delta = vec![0.0; self.d_out * self.d_in];
        for i in 0..self.d_out {
            for p in 0..r {
                let bv = view.b_at(i, p);
                if bv != 0.0 {
                    for j in 0..self.d_in {
                        delta[i * self.d_in + j] += bv * view.a_at(p, j);
                    }
                }
            }
        }
        for v in delta.iter_mut() {
            *v *= alpha;
        }
        Ok(delta)
    }
}

/// Borrowed rank-r view over a pair: rows `0..r` of A, columns `0..r` of B.
pub struct TruncatedView<'a> {
    pair: &'a LoraPair,
    pub r: usize,
}

impl TruncatedView<'_> {
    /// The first r rows of A are a contiguous prefix of the full storage.
    pub fn a_rows(&self) -> &[f64] {
        &self.pair.a[..self.r * self.pair.d_in]
    }

    pub fn a_at(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.r);
        self.pair.a[row * self.pair.d_in + col]
    }

    /// B columns are strided in the [d_out, r_max] storage.
    pub fn b_at(&self, row: usize, col: usize) -> f64 {
        debug_assert!(col < self.r);
        self.pair.b[row * self.pair.r_max + col]
    }
}

/// All pairs for a model: one per (layer, target).
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub pairs: Vec<LoraPair>,
    pub n_layers: usize,
    pub targets: Vec<AdaptTarget>,
    pub r_max: usize,
    pub alpha_base: f64,
}

impl AdapterSet {
    pub fn init(
        n_layers: usize,
        d_model: usize,
        targets: &[AdaptTarget],
        r_max: usize,
        alpha_base: f64,
        seed: u64,
        precision: Precision,
    ) -> Self {
        let mut pairs = Vec::new();
        for layer in 0..n_layers {
            for &target in targets {
                let mut rng = StreamRng::new(seed, &format!("adapters/l{layer}/{}", target.name()));
                pairs.push(LoraPair::init(
                    layer, target, d_model, d_model, r_max, alpha_base, &mut rng, precision,
                ));
            }
        }
        AdapterSet {
            pairs,
            n_layers,
            targets: targets.to_vec(),
            r_max,
            alpha_base,
        }
    }

    pub fn pair(&self, layer: usize, target: AdaptTarget) -> Option<&LoraPair> {
        self.pairs.iter().find(|p| p.layer == layer && p.target == target)
    }

    pub fn pair_mut(&mut self, layer: usize, target: AdaptTarget) -> Option<&mut LoraPair> {
        self.pairs.iter_mut().find(|p| p.layer == layer && p.target == target)
    }

    /// (name, shape, data) triples for checkpointing; full r_max matrices.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for p in &self.pairs {
            out.push((format!("{}.a", p.name()), vec![p.r_max, p.d_in], p.a.as_slice()));
            out.push((format!("{}.b", p.name()), vec![p.d_out, p.r_max], p.b.as_slice()));
        }
        out
    }

    pub fn load_named(&mut self, tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        for p in self.pairs.iter_mut() {
            let a_name = format!("{}.a", p.name());
            let b_name = format!("{}.b", p.name());
            let (ashape, adata) = tensors
                .get(&a_name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {a_name}")))?;
            let (bshape, bdata) = tensors
                .get(&b_name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {b_name}")))?;
            if *ashape != vec![p.r_max, p.d_in] || *bshape != vec![p.d_out, p.r_max] {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", p.name())));
            }
            p.a = adata.clone();
            p.b = bdata.clone();
        }
        Ok(())
    }
}

/// Trainable parameter layout of an adapter set: (d_in, d_out) per adapted
/// matrix. Counting needs only the dims, not the weights.
#[derive(Debug, Clone)]
pub struct AdapterLayout {
    pub dims: Vec<(usize, usize)>,
}

impl AdapterLayout {
    pub fn new(n_layers: usize, d_model: usize, targets: &[AdaptTarget]) -> Self {
        AdapterLayout {
            dims: vec![(d_model, d_model); n_layers * targets.len()],
        }
    }
}

/// Trainable parameters at rank r: sum over adapted matrices of
/// (d_in + d_out) * r.
pub fn count_params(layout: &AdapterLayout, r: usize) -> usize {
    layout.dims.iter().map(|(din, dout)| (din + dout) * r).sum()
}

/// Expectation of `count_params` under a rank distribution
/// (rank, probability); probabilities must sum to 1 within 1e-9.
pub fn expected_active_params(layout: &AdapterLayout, dist: &[(usize, f64)]) -> Result<f64> {
    let total: f64 = dist.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument {
            op: "expected_active_params",
            msg: format!("probabilities sum to {total}, expected 1"),
        });
    }
    Ok(dist
        .iter()
        .map(|&(r, p)| p * count_params(layout, r) as f64)
        .sum())
}

// ---- graph-side forward -----------------------------------------------------

/// Adapter leaves inserted into one step's graph, plus the shared rank mask.
pub struct GraphAdapters {
    entries: BTreeMap<(usize, AdaptTarget), (TensorId, TensorId, f64)>,
    /// [n*seq_len, r_max] mask with alpha_r folded in.
    mask: TensorId,
    pub r_max: usize,
}

impl GraphAdapters {
    pub fn leaf_ids(&self) -> Vec<(usize, AdaptTarget, TensorId, TensorId)> {
        self.entries
            .iter()
            .map(|(&(l, t), &(a, b, _))| (l, t, a, b))
            .collect()
    }

    pub fn is_adapted(&self, layer: usize, target: AdaptTarget) -> bool {
        self.entries.contains_key(&(layer, target))
    }

    /// Wrap a base projection: out = base + mask(x . A^T) . B^T.
    /// No-op for projections without an adapter.
    pub fn adapt(
        &self,
        g: &mut Graph,
        layer: usize,
        target: AdaptTarget,
        x: TensorId,
        base_out: TensorId,
    ) -> Result<TensorId> {
        let (a_id, b_id, _) = match self.entries.get(&(layer, target)) {
            Some(e) => *e,
            None => return Ok(base_out),
        };
        let u = g.matmul_nt(x, a_id)?;
        let masked = g.mul(u, self.mask)?;
        let delta = g.matmul_nt(masked, b_id)?;
        g.add(base_out, delta)
    }
}

/// Insert adapter leaves and the per-row rank mask into a graph.
///
/// `seq_len` is the padded length: mask row `i` belongs to sample
/// `i / seq_len` and carries `alpha_r` on its first `r` columns.
pub fn bind(
    g: &mut Graph,
    set: &AdapterSet,
    assignment: &RankAssignment,
    seq_len: usize,
    trainable: bool,
) -> Result<GraphAdapters> {
    let mut leaves = Vec::with_capacity(set.pairs.len());
    for p in &set.pairs {
        let a_id = g.leaf(vec![p.r_max, p.d_in], p.a.clone(), trainable)?;
        let b_id = g.leaf(vec![p.d_out, p.r_max], p.b.clone(), trainable)?;
        leaves.push((p.layer, p.target, a_id, b_id));
    }
    bind_leaves(g, set, &leaves, assignment, seq_len)
}

/// Like [`bind`], but over A/B leaves the caller already inserted (the
/// gradient-check harness drives the parameters itself).
pub fn bind_leaves(
    g: &mut Graph,
    set: &AdapterSet,
    leaves: &[(usize, AdaptTarget, TensorId, TensorId)],
    assignment: &RankAssignment,
    seq_len: usize,
) -> Result<GraphAdapters> {
    assignment.validate(set.r_max)?;
    let n = assignment.ranks.len();
    let mut mask = vec![0.0; n * seq_len * set.r_max];
    for (s, &r) in assignment.ranks.iter().enumerate() {
        let alpha = set.alpha_base / r as f64;
        for pos in 0..seq_len {
            let row = (s * seq_len + pos) * set.r_max;
            for j in 0..r {
                mask[row + j] = alpha;
            }
        }
    }
    let mask_id = g.constant(vec![n * seq_len, set.r_max], mask)?;
    let mut entries = BTreeMap::new();
    for &(layer, target, a_id, b_id) in leaves {
        entries.insert((layer, target), (a_id, b_id, set.alpha_base));
    }
    Ok(GraphAdapters { entries, mask: mask_id, r_max: set.r_max })
}

/// Single-projection adapted forward: base W x plus the rank-masked LoRA
/// branch, batched over samples with heterogeneous ranks.
pub fn lora_forward(
    g: &mut Graph,
    h_in: TensorId,
    w: TensorId,
    pair: &LoraPair,
    assignment: &RankAssignment,
    seq_len: usize,
    trainable: bool,
) -> Result<TensorId> {
    assignment.validate(pair.r_max)?;
    let rows = g.shape(h_in)[0];
    if rows != assignment.ranks.len() * seq_len {
        return Err(Error::InvalidArgument {
            op: "lora_forward",
            msg: format!(
                "input has {rows} rows but assignment covers {} samples x {seq_len}",
                assignment.ranks.len()
            ),
        });
    }
    let set = AdapterSet {
        pairs: vec![pair.clone()],
        n_layers: pair.layer + 1,
        targets: vec![pair.target],
        r_max: pair.r_max,
        alpha_base: pair.alpha_base,
    };
    let bound = bind(g, &set, assignment, seq_len, trainable)?;
    let base = g.matmul_nt(h_in, w)?;
    bound.adapt(g, pair.layer, pair.target, h_in, base)
}

/// Reference route for the equivalence suites: physically slice A/B to each
/// sample's rank and compute the delta sample by sample, no masking.
pub fn lora_forward_sliced_oracle(
    h_in: &[f64],
    w: &[f64],
    pair: &LoraPair,
    assignment: &RankAssignment,
    seq_len: usize,
) -> Result<Vec<f64>> {
    assignment.validate(pair.r_max)?;
    let d_in = pair.d_in;
    let d_out = pair.d_out;
    let n = assignment.ranks.len();
    let mut out = vec![0.0; n * seq_len * d_out];
    for (s, &r) in assignment.ranks.iter().enumerate() {
        let view = pair.truncate_view(r)?;
        let alpha = pair.alpha_of(r);
        for pos in 0..seq_len {
            let x = &h_in[(s * seq_len + pos) * d_in..(s * seq_len + pos + 1) * d_in];
            // u = A_r x  (r entries)
            let u: Vec<f64> = (0..r)
                .map(|p| (0..d_in).map(|j| view.a_at(p, j) * x[j]).sum())
                .collect();
            let orow = &mut out[(s * seq_len + pos) * d_out..(s * seq_len + pos + 1) * d_out];
            for i in 0..d_out {
                let base: f64 = (0..d_in).map(|j| w[i * d_in + j] * x[j]).sum();
                let delta: f64 = (0..r).map(|p| view.b_at(i, p) * u[p]).sum();
                orow[i] = base + alpha * delta;
            }
        }
    }
    Ok(out)
}
