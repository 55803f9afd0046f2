//! Pre-LN causal decoder with sinusoidal positions and an optional adapter
//! hook on the attention projections. The forward pass is recorded on a
//! graph; positionwise ops run on the flattened [n*t, d] layout and
//! attention runs per sample and head.

use super::{ModelConfig, TokenBatch, Tokenizer, BOS_ID, EOS_ID};
use crate::adapters::{AdaptTarget, AdapterSet, GraphAdapters, Phase, RankAssignment};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Precision, StreamRng, TensorId};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Base model weights. The positional table is derived from the config and
/// never trained or serialized.
#[derive(Debug, Clone)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    pe: Vec<f64>,
}

/// Positional table amplitude. Plain unit-amplitude sinusoids would dwarf
/// the 0.02-std token embeddings at layer input; this keeps the rows at a
/// comparable norm so content is learnable from step one.
const PE_SCALE: f64 = 0.05;

fn sinusoidal_pe(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = PE_SCALE * angle.sin();
            if 2 * i + 1 < d {
                pe[pos * d + 2 * i + 1] = PE_SCALE * angle.cos();
            }
        }
    }
    pe
}

impl TransformerWeights {
    pub fn init(config: ModelConfig, seed: u64, precision: Precision) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: Vec<f64>| {
            let mut data = data;
            precision.round_slice(&mut data);
            params.push(Param { name, shape, data });
        };
        let mat = |name: &str, rows: usize, cols: usize, std: f64| {
            let mut rng = StreamRng::new(seed, &format!("init/{name}"));
            (name.to_string(), vec![rows, cols], rng.normal_vec(rows * cols, 0.0, std))
        };
        let (n, s, dt) = mat("tok_embed", config.vocab_size, d, 0.02);
        push(n, s, dt);
        for l in 0..config.n_layers {
            for tag in ["wq", "wk", "wv", "wo"] {
                let (n, s, dt) = mat(&format!("l{l}.{tag}"), d, d, 0.02);
                push(n, s, dt);
            }
            push(format!("l{l}.ln1.g"), vec![d], vec![1.0; d]);
            push(format!("l{l}.ln1.b"), vec![d], vec![0.0; d]);
            push(format!("l{l}.ln2.g"), vec![d], vec![1.0; d]);
            push(format!("l{l}.ln2.b"), vec![d], vec![0.0; d]);
            let (n, s, dt) = mat(&format!("l{l}.w1"), config.d_ff, d, 0.02);
            push(n, s, dt);
            let (n, s, dt) = mat(&format!("l{l}.w2"), d, config.d_ff, 0.02);
            push(n, s, dt);
        }
        push("ln_f.g".into(), vec![d], vec![1.0; d]);
        push("ln_f.b".into(), vec![d], vec![0.0; d]);
        let (n, s, dt) = mat("head", config.vocab_size, d, 0.02);
        push(n, s, dt);

        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(TransformerWeights {
            pe: sinusoidal_pe(config.max_seq_len, d),
            config,
            params,
            index,
        })
    }

    pub fn param(&self, name: &str) -> &Param {
        &self.params[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param {
        &mut self.params[self.index[name]]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn pe(&self) -> &[f64] {
        &self.pe
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.data.as_slice()))
            .collect()
    }

    pub fn from_named(
        config: ModelConfig,
        tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
        precision: Precision,
    ) -> Result<Self> {
        let mut w = TransformerWeights::init(config, 0, precision)?;
        for p in w.params.iter_mut() {
            let (shape, data) = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if *shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name, shape, p.shape
                )));
            }
            p.data = data.clone();
        }
        Ok(w)
    }

    /// SHA-256 over (name, shape, payload) in name order; the frozen-base law
    /// asserts this is unchanged by fine-tuning.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut names: Vec<&String> = self.index.keys().collect();
        names.sort();
        for name in names {
            let p = self.param(name);
            hasher.update(name.as_bytes());
            for &d in &p.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in &p.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Weight leaves inserted into one graph.
pub struct GraphWeights {
    ids: BTreeMap<String, TensorId>,
    pub trainable: bool,
}

impl GraphWeights {
    pub fn id(&self, name: &str) -> TensorId {
        self.ids[name]
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.ids.keys()
    }
}

pub fn insert_weights(g: &mut Graph, w: &TransformerWeights, trainable: bool) -> Result<GraphWeights> {
    let mut ids = BTreeMap::new();
    for p in w.params() {
        let shape = if p.shape.len() == 1 { vec![p.shape[0]] } else { p.shape.clone() };
        ids.insert(p.name.clone(), g.leaf(shape, p.data.clone(), trainable)?);
    }
    Ok(GraphWeights { ids, trainable })
}

pub struct ForwardOutput {
    /// Token embeddings plus positions, flattened [n*t, d].
    pub h0: TensorId,
    /// Logits, flattened [n*t, vocab].
    pub logits: TensorId,
}

/// Token embeddings plus positional encodings, flattened to [n*t, d].
fn embed_flat(
    g: &mut Graph,
    w: &TransformerWeights,
    gw: &GraphWeights,
    batch: &TokenBatch,
) -> Result<TensorId> {
    let d = w.config.d_model;
    if batch.t > w.config.max_seq_len {
        return Err(Error::Task(format!(
            "sequence length {} exceeds max_seq_len {}",
            batch.t, w.config.max_seq_len
        )));
    }
    let tok = g.gather_rows(gw.id("tok_embed"), batch.ids.clone())?;
    let pe_table = g.constant(vec![w.config.max_seq_len, d], w.pe.clone())?;
    let pos_ids: Vec<usize> = (0..batch.n).flat_map(|_| 0..batch.t).collect();
    let pos = g.gather_rows(pe_table, pos_ids)?;
    g.add(tok, pos)
}

/// Spec-shaped embedding: [n, t, d].
pub fn embed(
    g: &mut Graph,
    w: &TransformerWeights,
    gw: &GraphWeights,
    batch: &TokenBatch,
) -> Result<TensorId> {
    let flat = embed_flat(g, w, gw, batch)?;
    g.reshape(flat, vec![batch.n, batch.t, w.config.d_model])
}

fn layer_norm_affine(
    g: &mut Graph,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
) -> Result<TensorId> {
    let normed = g.layer_norm(x)?;
    let scaled = g.mul_row(normed, gamma)?;
    g.add_row(scaled, beta)
}

/// Record the full forward pass. `adapters`, when given, wraps the adapted
/// projections; `None` is the base-only forward.
pub fn build_forward(
    g: &mut Graph,
    w: &TransformerWeights,
    gw: &GraphWeights,
    batch: &TokenBatch,
    adapters: Option<&GraphAdapters>,
) -> Result<ForwardOutput> {
    let cfg = &w.config;
    let (n, t, d) = (batch.n, batch.t, cfg.d_model);
    let dh = cfg.head_dim();
    let h0 = embed_flat(g, w, gw, batch)?;

    let project = |g: &mut Graph, layer: usize, target: AdaptTarget, name: &str, x: TensorId| -> Result<TensorId> {
        let base = g.matmul_nt(x, gw.id(name))?;
        match adapters {
            Some(ad) => ad.adapt(g, layer, target, x, base),
            None => Ok(base),
        }
    };

    let mut x = h0;
    for l in 0..cfg.n_layers {
        let ln1 = layer_norm_affine(g, x, gw.id(&format!("l{l}.ln1.g")), gw.id(&format!("l{l}.ln1.b")))?;
        let q = project(g, l, AdaptTarget::Wq, &format!("l{l}.wq"), ln1)?;
        let k = project(g, l, AdaptTarget::Wk, &format!("l{l}.wk"), ln1)?;
        let v = project(g, l, AdaptTarget::Wv, &format!("l{l}.wv"), ln1)?;

        let mut sample_outs = Vec::with_capacity(n);
        for s in 0..n {
            let qs = g.slice_rows(q, s * t, t)?;
            let ks = g.slice_rows(k, s * t, t)?;
            let vs = g.slice_rows(v, s * t, t)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = g.slice_cols(qs, h * dh, dh)?;
                let kh = g.slice_cols(ks, h * dh, dh)?;
                let vh = g.slice_cols(vs, h * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let probs = g.causal_softmax(scaled)?;
                heads.push(g.matmul(probs, vh)?);
            }
            sample_outs.push(g.concat_cols(&heads)?);
        }
        let attn = g.concat_rows(&sample_outs)?;
        let attn_out = project(g, l, AdaptTarget::Wo, &format!("l{l}.wo"), attn)?;
        x = g.add(x, attn_out)?;

        let ln2 = layer_norm_affine(g, x, gw.id(&format!("l{l}.ln2.g")), gw.id(&format!("l{l}.ln2.b")))?;
        let h1 = g.matmul_nt(ln2, gw.id(&format!("l{l}.w1")))?;
        let act = g.relu(h1)?;
        let ff = g.matmul_nt(act, gw.id(&format!("l{l}.w2")))?;
        x = g.add(x, ff)?;
    }
    let lnf = layer_norm_affine(g, x, gw.id("ln_f.g"), gw.id("ln_f.b"))?;
    let logits = g.matmul_nt(lnf, gw.id("head"))?;
    let _ = d;
    Ok(ForwardOutput { h0, logits })
}

/// Mean cross-entropy over the batch's supervised positions.
pub fn sequence_loss(g: &mut Graph, out: &ForwardOutput, batch: &TokenBatch) -> Result<TensorId> {
    let (idx, labels) = batch.supervised_positions();
    if idx.is_empty() {
        return Err(Error::Task("batch has no supervised positions".into()));
    }
    let selected = g.gather_rows(out.logits, idx)?;
    g.cross_entropy(selected, labels)
}

/// Base-only forward on a fresh graph; returns flattened logits [n*t, vocab].
pub fn forward_base(
    w: &TransformerWeights,
    batch: &TokenBatch,
    precision: Precision,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(precision);
    let gw = insert_weights(&mut g, w, false)?;
    let out = build_forward(&mut g, w, &gw, batch, None)?;
    Ok(g.data(out.logits).to_vec())
}

/// Argmax with ties broken toward the lowest token id.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: argmax next token until EOS or `max_new` tokens.
/// `adapters` applies the given rank to the single decoded sample.
pub fn greedy_decode(
    w: &TransformerWeights,
    tok: &Tokenizer,
    adapters: Option<(&AdapterSet, usize)>,
    prompt: &str,
    max_new: usize,
    precision: Precision,
) -> Result<String> {
    let prompt_ids = tok.encode(prompt)?;
    let mut ids: Vec<usize> = Vec::with_capacity(prompt_ids.len() + 1 + max_new);
    ids.push(BOS_ID);
    ids.extend_from_slice(&prompt_ids);
    let mut generated = Vec::new();
    for _ in 0..max_new {
        if ids.len() >= w.config.max_seq_len {
            break;
        }
        let t = ids.len();
        let batch = TokenBatch {
            n: 1,
            t,
            ids: ids.clone(),
            mask: vec![1.0; t],
            targets: vec![super::IGNORE; t],
        };
        let mut g = Graph::new(precision);
        let gw = insert_weights(&mut g, w, false)?;
        let bound = match adapters {
            Some((set, rank)) => {
                let assignment = RankAssignment {
                    ranks: vec![rank],
                    phase: Phase::Inference,
                    provenance: "decode".into(),
                };
                Some(crate::adapters::bind(&mut g, set, &assignment, t, false)?)
            }
            None => None,
        };
        let out = build_forward(&mut g, w, &gw, &batch, bound.as_ref())?;
        let logits = g.data(out.logits);
        let vocab = w.config.vocab_size;
        let next = argmax_lowest(&logits[(t - 1) * vocab..t * vocab]);
        if next == EOS_ID {
            break;
        }
        generated.push(next);
        ids.push(next);
    }
    Ok(tok.decode(&generated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Supervision;
    use crate::tasks::{DifficultyBucket, Sample, TaskFamily};

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig { vocab_size: vocab, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq_len: 24 }
    }

    fn sample(prompt: &str, gold: &str) -> Sample {
        Sample {
            id: "t".into(),
            family: TaskFamily::ModChain,
            knob: 1,
            bucket: DifficultyBucket::Easy,
            prompt: prompt.into(),
            gold: gold.into(),
        }
    }

    #[test]
    fn logits_shape_law_single_token() {
        let tok = Tokenizer::build(["ab"]).unwrap();
        let w = TransformerWeights::init(tiny_config(tok.vocab_size()), 1, Precision::F64).unwrap();
        let batch = TokenBatch { n: 1, t: 1, ids: vec![BOS_ID], mask: vec![1.0], targets: vec![super::super::IGNORE] };
        let logits = forward_base(&w, &batch, Precision::F64).unwrap();
        assert_eq!(logits.len(), tok.vocab_size());
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let tok = Tokenizer::build(["abc"]).unwrap();
        let w = TransformerWeights::init(tiny_config(tok.vocab_size()), 1, Precision::F64).unwrap();
        let samples = [sample("ab", "c"), sample("ab", "c")];
        let batch = TokenBatch::from_samples(&samples, &tok, 24, Supervision::AnswerOnly).unwrap();
        let mut g = Graph::new(Precision::F64);
        let gw = insert_weights(&mut g, &w, false).unwrap();
        let h0 = embed(&mut g, &w, &gw, &batch).unwrap();
        assert_eq!(g.shape(h0), &[2, batch.t, 16]);
        let d = g.data(h0);
        let half = d.len() / 2;
        assert_eq!(&d[..half], &d[half..], "identical samples embed identically");
    }

    #[test]
    fn causality_logits_ignore_future_tokens() {
        let tok = Tokenizer::build(["abcd"]).unwrap();
        let cfg = tiny_config(tok.vocab_size());
        let w = TransformerWeights::init(cfg, 3, Precision::F64).unwrap();
        let ids_a = vec![BOS_ID, 3, 4, 5, 6];
        let mut ids_b = ids_a.clone();
        ids_b[4] = 3; // change only the last token
        let mk = |ids: Vec<usize>| TokenBatch {
            n: 1,
            t: 5,
            mask: vec![1.0; 5],
            targets: vec![super::super::IGNORE; 5],
            ids,
        };
        let la = forward_base(&w, &mk(ids_a), Precision::F64).unwrap();
        let lb = forward_base(&w, &mk(ids_b), Precision::F64).unwrap();
        let v = tok.vocab_size();
        assert_eq!(&la[..4 * v], &lb[..4 * v], "positions before t must be unchanged");
        assert_ne!(&la[4 * v..], &lb[4 * v..]);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let tok = Tokenizer::build(["abcd"]).unwrap();
        let w = TransformerWeights::init(tiny_config(tok.vocab_size()), 5, Precision::F64).unwrap();
        let s1 = sample("ab", "c");
        let s2 = sample("dc", "a");
        let b12 = TokenBatch::from_samples(&[s1.clone(), s2.clone()], &tok, 24, Supervision::AnswerOnly).unwrap();
        let b21 = TokenBatch::from_samples(&[s2, s1], &tok, 24, Supervision::AnswerOnly).unwrap();
        let l12 = forward_base(&w, &b12, Precision::F64).unwrap();
        let l21 = forward_base(&w, &b21, Precision::F64).unwrap();
        let half = l12.len() / 2;
        assert_eq!(&l12[..half], &l21[half..]);
        assert_eq!(&l12[half..], &l21[..half]);
    }

    #[test]
    fn random_weights_loss_near_uniform() {
        let tok = Tokenizer::build(["abcdefgh"]).unwrap();
        let w = TransformerWeights::init(tiny_config(tok.vocab_size()), 7, Precision::F64).unwrap();
        let samples: Vec<Sample> = (0..8).map(|i| sample(&"abcdefgh"[i % 4..i % 4 + 3], "a")).collect();
        let batch = TokenBatch::from_samples(&samples, &tok, 24, Supervision::FullSequence).unwrap();
        let mut g = Graph::new(Precision::F64);
        let gw = insert_weights(&mut g, &w, false).unwrap();
        let out = build_forward(&mut g, &w, &gw, &batch, None).unwrap();
        let loss = sequence_loss(&mut g, &out, &batch).unwrap();
        let v = g.data(loss)[0];
        let uniform = (tok.vocab_size() as f64).ln();
        assert!((v - uniform).abs() / uniform < 0.15, "loss {v} vs ln(V) {uniform}");
    }

    #[test]
    fn init_is_deterministic_and_hash_is_stable() {
        let cfg = tiny_config(11);
        let a = TransformerWeights::init(cfg, 9, Precision::F32).unwrap();
        let b = TransformerWeights::init(cfg, 9, Precision::F32).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = TransformerWeights::init(cfg, 10, Precision::F32).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn decode_zero_budget_is_empty_and_decoding_is_deterministic() {
        let tok = Tokenizer::build(["3+4=?7"]).unwrap();
        let w = TransformerWeights::init(tiny_config(tok.vocab_size()), 2, Precision::F64).unwrap();
        let out = greedy_decode(&w, &tok, None, "3+4=?", 0, Precision::F64).unwrap();
        assert_eq!(out, "");
        let a = greedy_decode(&w, &tok, None, "3+4=?", 5, Precision::F64).unwrap();
        let b = greedy_decode(&w, &tok, None, "3+4=?", 5, Precision::F64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_id() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[5.0, 5.0]), 0);
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let tok = Tokenizer::build(["abcdefghij"]).unwrap();
        let mut cfg = tiny_config(tok.vocab_size());
        cfg.max_seq_len = 4;
        let w = TransformerWeights::init(cfg, 2, Precision::F64).unwrap();
        let batch = TokenBatch {
            n: 1,
            t: 6,
            ids: vec![BOS_ID; 6],
            mask: vec![1.0; 6],
            targets: vec![super::super::IGNORE; 6],
        };
        assert!(forward_base(&w, &batch, Precision::F64).is_err());
    }
}
