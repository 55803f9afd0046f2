//! Built-in invariant suites behind the `selftest` subcommand. Exit code 0
//! iff every check passes.
//!
//! Gradient checks run in 64-bit over three seeds: every numcore primitive
//! at rel err <= 1e-6, the full adapter-augmented task loss and the router
//! loss (sigma = 0) at rel err <= 1e-4.

use crate::adapters::{self, AdaptTarget, AdapterLayout, AdapterSet, Phase, RankAssignment};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{collect_named, load_checkpoint, save_checkpoint};
use crate::model::{
    build_forward, insert_weights, sequence_loss, ModelConfig, Supervision, TokenBatch, Tokenizer,
    TransformerWeights,
};
use crate::numcore::{grad_check, Graph, Precision, StreamRng, TensorId};
use crate::router::router_logits_graph;
use std::time::Instant;

pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
    pub elapsed_secs: f64,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

const SEEDS: [u64; 3] = [101, 102, 103];

fn record(checks: &mut Vec<CheckResult>, name: &str, outcome: Result<(bool, String)>) {
    let (passed, detail) = match outcome {
        Ok((p, d)) => (p, d),
        Err(e) => (false, e.to_string()),
    };
    checks.push(CheckResult { name: name.to_string(), passed, detail });
}

/// Reroll entries near zero so relu's kink never sits on a probe point.
fn away_from_zero(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut v = rng.normal(0.0, 1.0);
            while v.abs() < 0.05 {
                v = rng.normal(0.0, 1.0);
            }
            v
        })
        .collect()
}

fn primitive_checks(seed: u64) -> Result<(bool, String)> {
    let mut rng = StreamRng::new(seed, "selftest/primitives");
    let mut worst: (f64, &'static str) = (0.0, "none");
    let mut run = |name: &'static str,
                   params: Vec<(Vec<usize>, Vec<f64>)>,
                   build: &dyn Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
                   rng: &mut StreamRng|
     -> Result<()> {
        let err = grad_check(&build, &params, 1e-5, None, rng)?;
        if err > worst.0 {
            worst = (err, name);
        }
        Ok(())
    };

    let c_weights = rng.normal_vec(20, 0.0, 1.0);
    let weighted_sum = move |g: &mut Graph, out: TensorId| -> Result<TensorId> {
        let n = g.data(out).len();
        let c = g.constant(g.shape(out).to_vec(), c_weights[..n].to_vec())?;
        let w = g.mul(out, c)?;
        g.sum(w)
    };

    let m34 = (vec![3, 4], rng.normal_vec(12, 0.0, 1.0));
    let m45 = (vec![4, 5], rng.normal_vec(20, 0.0, 1.0));
    let m54 = (vec![5, 4], rng.normal_vec(20, 0.0, 1.0));
    let v4 = (vec![4], rng.normal_vec(4, 0.0, 1.0));
    let relu_in = (vec![3, 4], away_from_zero(&mut rng, 12));
    let square = (vec![4, 4], rng.normal_vec(16, 0.0, 1.0));

    run("matmul", vec![m34.clone(), m45.clone()], &|g, ids| {
        let c = g.matmul(ids[0], ids[1])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("matmul_nt", vec![m34.clone(), m54.clone()], &|g, ids| {
        let c = g.matmul_nt(ids[0], ids[1])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("add", vec![m34.clone(), m34.clone()], &|g, ids| {
        let c = g.add(ids[0], ids[1])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("add_row", vec![m34.clone(), v4.clone()], &|g, ids| {
        let c = g.add_row(ids[0], ids[1])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("mul_row", vec![m34.clone(), v4.clone()], &|g, ids| {
        let c = g.mul_row(ids[0], ids[1])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("mul", vec![m34.clone(), m34.clone()], &|g, ids| {
        let c = g.mul(ids[0], ids[1])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("scale", vec![m34.clone()], &|g, ids| {
        let c = g.scale(ids[0], 1.7)?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("relu", vec![relu_in], &|g, ids| {
        let c = g.relu(ids[0])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("tanh", vec![m34.clone()], &|g, ids| {
        let c = g.tanh(ids[0])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("row_softmax", vec![m34.clone()], &|g, ids| {
        let c = g.row_softmax(ids[0])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("causal_softmax", vec![square.clone()], &|g, ids| {
        let c = g.causal_softmax(ids[0])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("layer_norm", vec![m34.clone()], &|g, ids| {
        let c = g.layer_norm(ids[0])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("gather_rows", vec![m34.clone()], &|g, ids| {
        let c = g.gather_rows(ids[0], vec![2, 0, 2, 1])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("slice_concat", vec![m34.clone()], &|g, ids| {
        let top = g.slice_rows(ids[0], 0, 2)?;
        let bot = g.slice_rows(ids[0], 2, 1)?;
        let joined = g.concat_rows(&[bot, top])?;
        let left = g.slice_cols(joined, 0, 2)?;
        let right = g.slice_cols(joined, 2, 2)?;
        let c = g.concat_cols(&[right, left])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("masked_mean_rows", vec![m34.clone()], &|g, ids| {
        let c = g.masked_mean_rows(ids[0], vec![1.0, 0.0, 1.0])?;
        weighted_sum(g, c)
    }, &mut rng)?;
    run("cross_entropy", vec![m34.clone()], &|g, ids| {
        g.cross_entropy(ids[0], vec![0, 3, 1])
    }, &mut rng)?;
    run("reshape", vec![m34.clone()], &|g, ids| {
        let c = g.reshape(ids[0], vec![4, 3])?;
        weighted_sum(g, c)
    }, &mut rng)?;

    Ok((worst.0 <= 1e-6, format!("max rel err {:.2e} ({})", worst.0, worst.1)))
}

fn mini_setup(seed: u64) -> Result<(TransformerWeights, Tokenizer, TokenBatch)> {
    use crate::tasks::{DifficultyBucket, Sample, TaskFamily};
    let tok = Tokenizer::build(["0123456789+-*=?;:abc~"]).unwrap();
    let cfg = ModelConfig {
        vocab_size: tok.vocab_size(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
    };
    let w = TransformerWeights::init(cfg, seed, Precision::F64)?;
    let mk = |prompt: &str, gold: &str| Sample {
        id: prompt.into(),
        family: TaskFamily::ModChain,
        knob: 1,
        bucket: DifficultyBucket::Easy,
        prompt: prompt.into(),
        gold: gold.into(),
    };
    let samples = [mk("3+4=?", "7"), mk("2*3=?", "6"), mk("9-4=?", "5")];
    let batch = TokenBatch::from_samples(&samples, &tok, 16, Supervision::AnswerOnly)?;
    Ok((w, tok, batch))
}

/// Gradient check of the full adapter-augmented task loss with mixed ranks,
/// differentiating the adapter tensors.
fn adapter_loss_check(seed: u64) -> Result<(bool, String)> {
    let (base, _tok, batch) = mini_setup(seed)?;
    let mut rng = StreamRng::new(seed, "selftest/adapter-loss");
    let mut set = AdapterSet::init(2, 16, &AdaptTarget::defaults(), 8, 16.0, seed, Precision::F64);
    for p in set.pairs.iter_mut() {
        p.b = rng.normal_vec(p.b.len(), 0.0, 0.05);
    }
    let assignment = RankAssignment {
        ranks: vec![1, 4, 8],
        phase: Phase::Train,
        provenance: "selftest".into(),
    };
    let meta: Vec<(usize, AdaptTarget)> = set.pairs.iter().map(|p| (p.layer, p.target)).collect();
    let mut params = Vec::new();
    for p in &set.pairs {
        params.push((vec![p.r_max, p.d_in], p.a.clone()));
        params.push((vec![p.d_out, p.r_max], p.b.clone()));
    }
    let build = |g: &mut Graph, ids: &[TensorId]| -> Result<TensorId> {
        let gw = insert_weights(g, &base, false)?;
        let leaves: Vec<(usize, AdaptTarget, TensorId, TensorId)> = meta
            .iter()
            .enumerate()
            .map(|(i, &(layer, target))| (layer, target, ids[2 * i], ids[2 * i + 1]))
            .collect();
        let bound = adapters::bind_leaves(g, &set, &leaves, &assignment, batch.t)?;
        let out = build_forward(g, &base, &gw, &batch, Some(&bound))?;
        sequence_loss(g, &out, &batch)
    };
    let err = grad_check(&build, &params, 1e-5, Some(24), &mut rng)?;
    Ok((err <= 1e-4, format!("max rel err {err:.2e}")))
}

/// Gradient check of the router objective with sigma = 0 (plain CE).
fn router_loss_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = StreamRng::new(seed, "selftest/router-loss");
    let d = 12;
    let hidden = 8;
    let n = 6;
    let h_data = rng.normal_vec(n * d, 0.0, 1.0);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let params = vec![
        (vec![hidden, d], rng.normal_vec(hidden * d, 0.0, 0.3)),
        (vec![hidden], rng.normal_vec(hidden, 0.0, 0.1)),
        (vec![2, hidden], rng.normal_vec(2 * hidden, 0.0, 0.3)),
        (vec![2], rng.normal_vec(2, 0.0, 0.1)),
    ];
    let build = |g: &mut Graph, ids: &[TensorId]| -> Result<TensorId> {
        let h = g.constant(vec![n, d], h_data.clone())?;
        let logits = router_logits_graph(g, h, ids[0], ids[1], ids[2], ids[3])?;
        g.cross_entropy(logits, labels.clone())
    };
    let err = grad_check(&build, &params, 1e-5, None, &mut rng)?;
    Ok((err <= 1e-4, format!("max rel err {err:.2e}")))
}

fn truncation_equivalence_check() -> Result<(bool, String)> {
    let d = 12;
    let seq = 4;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = StreamRng::new(seed, "selftest/trunc");
        let mut pair = crate::adapters::LoraPair::init(
            0,
            AdaptTarget::Wq,
            d,
            d,
            8,
            16.0,
            &mut rng,
            Precision::F32,
        );
        let mut b = rng.normal_vec(d * 8, 0.0, 0.3);
        Precision::F32.round_slice(&mut b);
        pair.b = b;
        let ranks: Vec<usize> = (0..4).map(|_| [1, 2, 4, 8][rng.int_inclusive(0, 3)]).collect();
        let assignment =
            RankAssignment { ranks, phase: Phase::Train, provenance: "selftest".into() };
        let x = rng.normal_vec(4 * seq * d, 0.0, 1.0);
        let w = rng.normal_vec(d * d, 0.0, 0.5);
        let mut g = Graph::new(Precision::F32);
        let x_id = g.leaf(vec![4 * seq, d], x.clone(), false)?;
        let w_id = g.leaf(vec![d, d], w.clone(), false)?;
        let out = adapters::lora_forward(&mut g, x_id, w_id, &pair, &assignment, seq, false)?;
        let oracle = adapters::lora_forward_sliced_oracle(&x, &w, &pair, &assignment, seq)?;
        for (a, b) in g.data(out).iter().zip(oracle.iter()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    Ok((worst <= 1e-6, format!("max masked-vs-sliced rel diff {worst:.2e}")))
}

fn zero_init_neutrality_check() -> Result<(bool, String)> {
    let (base, _tok, batch) = mini_setup(7)?;
    let set = AdapterSet::init(2, 16, &AdaptTarget::defaults(), 8, 16.0, 7, Precision::F64);
    let assignment =
        RankAssignment { ranks: vec![2, 8, 4], phase: Phase::Inference, provenance: "selftest".into() };
    let mut g = Graph::new(Precision::F64);
    let gw = insert_weights(&mut g, &base, false)?;
    let bound = adapters::bind(&mut g, &set, &assignment, batch.t, false)?;
    let adapted = build_forward(&mut g, &base, &gw, &batch, Some(&bound))?;
    let mut g2 = Graph::new(Precision::F64);
    let gw2 = insert_weights(&mut g2, &base, false)?;
    let plain = build_forward(&mut g2, &base, &gw2, &batch, None)?;
    let same = g
        .data(adapted.logits)
        .iter()
        .zip(g2.data(plain.logits))
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((same, "zero-init adapted forward vs base forward, 64-bit bitwise".into()))
}

fn checkpoint_roundtrip_check() -> Result<(bool, String)> {
    let dir = std::env::temp_dir().join(format!("flexilora-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("selftest.ckpt");
    let mut rng = StreamRng::new(3, "selftest/ckpt");
    let mut data = rng.normal_vec(64, 0.0, 1.0);
    Precision::F32.round_slice(&mut data);
    let tensors = collect_named([("w".to_string(), vec![8, 8], data)])?;
    save_checkpoint(&tensors, Precision::F32, &path)?;
    let (_, loaded) = load_checkpoint(&path)?;
    let ok = loaded["w"].1.iter().zip(&tensors["w"].1).all(|(a, b)| a.to_bits() == b.to_bits());
    std::fs::remove_dir_all(&dir).ok();
    Ok((ok, "save/load bit-exact".into()))
}

fn param_count_check() -> Result<(bool, String)> {
    let layout = AdapterLayout::new(4, 64, &AdaptTarget::defaults());
    let doubling = adapters::count_params(&layout, 8) == 2 * adapters::count_params(&layout, 4);
    let toy = adapters::count_params(&layout, 2) == 2048;
    let expectation =
        adapters::expected_active_params(&layout, &[(2, 0.5), (8, 0.5)])? == 5120.0;
    Ok((doubling && toy && expectation, "count(2r)=2count(r), toy 2048, mix 5120".into()))
}

fn replay_check() -> Result<(bool, String)> {
    let (base, _tok, batch) = mini_setup(9)?;
    let mut g = Graph::new(Precision::F32);
    let gw = insert_weights(&mut g, &base, false)?;
    let out = build_forward(&mut g, &base, &gw, &batch, None)?;
    let _ = out;
    let ok = g.replay_forward_bitexact()?;
    g.assert_all_finite()?;
    Ok((ok, format!("replayed {} nodes bit-exactly", g.node_count())))
}

fn norm_invariants_check() -> Result<(bool, String)> {
    let mut rng = StreamRng::new(11, "selftest/norms");
    let mut g = Graph::new(Precision::F64);
    let x = g.leaf(vec![6, 9], rng.normal_vec(54, 0.0, 2.5), false)?;
    let sm = g.row_softmax(x)?;
    let ln = g.layer_norm(x)?;
    let mut ok = true;
    for i in 0..6 {
        let row: f64 = g.data(sm)[i * 9..(i + 1) * 9].iter().sum();
        ok &= (row - 1.0).abs() <= 1e-6;
        let lrow = &g.data(ln)[i * 9..(i + 1) * 9];
        let mu: f64 = lrow.iter().sum::<f64>() / 9.0;
        let var: f64 = lrow.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 9.0;
        ok &= mu.abs() <= 1e-6 && (var - 1.0).abs() <= 1e-4;
    }
    Ok((ok, "softmax rows sum to 1; layer-norm rows standardized".into()))
}

/// Run every invariant suite; used by the `selftest` subcommand and the
/// acceptance tests.
pub fn run_selftest() -> Result<SelftestReport> {
    let started = Instant::now();
    let mut checks = Vec::new();
    for seed in SEEDS {
        record(&mut checks, &format!("gradcheck/primitives/seed{seed}"), primitive_checks(seed));
    }
    for seed in SEEDS {
        record(&mut checks, &format!("gradcheck/adapter-task-loss/seed{seed}"), adapter_loss_check(seed));
    }
    for seed in SEEDS {
        record(&mut checks, &format!("gradcheck/router-loss/seed{seed}"), router_loss_check(seed));
    }
    record(&mut checks, "adapters/mask-vs-slice", truncation_equivalence_check());
    record(&mut checks, "adapters/zero-init-neutrality", zero_init_neutrality_check());
    record(&mut checks, "adapters/param-count-laws", param_count_check());
    record(&mut checks, "graph/replay-bitexact", replay_check());
    record(&mut checks, "graph/norm-invariants", norm_invariants_check());
    record(&mut checks, "harness/checkpoint-roundtrip", checkpoint_roundtrip_check());
    Ok(SelftestReport { checks, elapsed_secs: started.elapsed().as_secs_f64() })
}

impl SelftestReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<44} {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        out.push_str(&format!(
            "selftest: {}/{} checks passed in {:.1}s\n",
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len(),
            self.elapsed_secs
        ));
        out
    }
}

pub fn selftest_to_error(report: &SelftestReport) -> Result<()> {
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(Error::Selftest(format!("failed checks: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_is_green() {
        let report = run_selftest().unwrap();
        assert!(report.all_passed(), "\n{}", report.render());
        assert!(report.elapsed_secs < 120.0, "selftest took {:.1}s", report.elapsed_secs);
    }
}
