//! Difficulty router: pools layer-0 token embeddings into one vector per
//! sample, labels training samples by zero-shot base-model performance,
//! balances the classes, and trains a small classifier whose argmax picks
//! the rank for each input.

use crate::error::{Error, Result};
use crate::model::{greedy_decode, Tokenizer, TokenBatch, TransformerWeights};
use crate::numcore::{Graph, Precision, StreamRng, TensorId};
use crate::optim::Sgd;
use crate::tasks::{DifficultyBucket, MetricKind, Sample};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Zero-shot difficulty label for one training sample: easy iff the base
/// model's metric reaches the threshold tau.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DifficultyLabel {
    pub sample_id: String,
    pub class: DifficultyBucket,
    pub metric_kind: MetricKind,
    pub metric_value: f64,
}

/// Mask-weighted mean of token embeddings: h = sum_i m_i H_i / sum_i m_i.
pub fn pool_embedding(h: &[f64], d: usize, mask: &[f64]) -> Result<Vec<f64>> {
    if h.len() != mask.len() * d {
        return Err(Error::Router(format!(
            "embedding rows {} do not match mask length {}",
            h.len() / d.max(1),
            mask.len()
        )));
    }
    let total: f64 = mask.iter().sum();
    if total <= 0.0 {
        return Err(Error::Router("all-zero mask in pooling".into()));
    }
    let mut out = vec![0.0; d];
    for (i, &m) in mask.iter().enumerate() {
        if m != 0.0 {
            for j in 0..d {
                out[j] += m * h[i * d + j];
            }
        }
    }
    for v in out.iter_mut() {
        *v /= total;
    }
    Ok(out)
}

/// Pooled layer-0 embedding per sample of a batch, computed with the same
/// graph ops the model forward uses (token embedding plus positions, then a
/// masked mean over real positions).
pub fn pooled_embeddings(
    w: &TransformerWeights,
    batch: &TokenBatch,
    precision: Precision,
) -> Result<Vec<Vec<f64>>> {
    let d = w.config.d_model;
    let mut g = Graph::new(precision);
    let table = g.constant(
        vec![w.config.vocab_size, d],
        w.param("tok_embed").data.clone(),
    )?;
    let pe = g.constant(vec![w.config.max_seq_len, d], w.pe().to_vec())?;
    let tok = g.gather_rows(table, batch.ids.clone())?;
    let pos_ids: Vec<usize> = (0..batch.n).flat_map(|_| 0..batch.t).collect();
    let pos = g.gather_rows(pe, pos_ids)?;
    let h0 = g.add(tok, pos)?;
    let mut out = Vec::with_capacity(batch.n);
    for s in 0..batch.n {
        let hs = g.slice_rows(h0, s * batch.t, batch.t)?;
        let pooled = g.masked_mean_rows(hs, batch.sample_mask(s).to_vec())?;
        out.push(g.data(pooled).to_vec());
    }
    Ok(out)
}

/// Prompt-only pooled embeddings for a set of samples (the router never sees
/// answers).
pub fn pooled_for_samples(
    w: &TransformerWeights,
    tok: &Tokenizer,
    samples: &[Sample],
    precision: Precision,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let prompts: Vec<Vec<usize>> = chunk
            .iter()
            .map(|s| tok.encode(&s.prompt))
            .collect::<Result<_>>()?;
        let batch = TokenBatch::from_prompt_batch(&prompts, w.config.max_seq_len)?;
        out.extend(pooled_embeddings(w, &batch, precision)?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LabelOpts {
    pub tau: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Decode budget per sample during the zero-shot sweep.
    pub max_new: usize,
}

/// Zero-shot label sweep: greedy-decode the frozen base on every prompt,
/// score against gold with the family metric, label easy iff score >= tau.
/// A sample that fails to decode is labeled hard with metric 0 (warned, the
/// sweep never aborts).
pub fn label_difficulty(
    w: &TransformerWeights,
    tok: &Tokenizer,
    dataset: &[Sample],
    opts: &LabelOpts,
) -> Result<Vec<DifficultyLabel>> {
    if dataset.is_empty() {
        return Err(Error::Router("empty labeling dataset".into()));
    }
    let labels: Vec<DifficultyLabel> = dataset
        .par_iter()
        .map(|s| {
            let metric_kind = s.family.metric_kind();
            let metric_value = match greedy_decode(w, tok, None, &s.prompt, opts.max_new, opts.precision)
                .and_then(|pred| metric_kind.score(&pred, &s.gold))
            {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("labeling decode failed for {}: {e}; labeling hard", s.id);
                    0.0
                }
            };
            let class = if metric_value >= opts.tau {
                DifficultyBucket::Easy
            } else {
                DifficultyBucket::Hard
            };
            DifficultyLabel { sample_id: s.id.clone(), class, metric_kind, metric_value }
        })
        .collect();
    Ok(labels)
}

/// Downsample the majority class to the minority count (seeded, without
/// replacement) and shuffle the result deterministically.
pub fn balance_classes(labels: &[DifficultyLabel], seed: u64) -> Result<Vec<DifficultyLabel>> {
    let easy: Vec<&DifficultyLabel> =
        labels.iter().filter(|l| l.class == DifficultyBucket::Easy).collect();
    let hard: Vec<&DifficultyLabel> =
        labels.iter().filter(|l| l.class == DifficultyBucket::Hard).collect();
    if easy.is_empty() || hard.is_empty() {
        return Err(Error::Router(format!(
            "cannot balance classes: {} easy / {} hard; adjust tau",
            easy.len(),
            hard.len()
        )));
    }
    let keep = easy.len().min(hard.len());
    let mut rng = StreamRng::new(seed, "router/balance");
    let mut pick = |class: Vec<&DifficultyLabel>| -> Vec<DifficultyLabel> {
        let idx = rng.sample_indices(class.len(), keep);
        let mut sorted = idx;
        sorted.sort_unstable();
        sorted.into_iter().map(|i| class[i].clone()).collect()
    };
    let mut out = pick(easy);
    out.extend(pick(hard));
    rng.shuffle(&mut out);
    Ok(out)
}

/// Two-layer classifier over pooled embeddings plus the class -> rank table.
#[derive(Debug, Clone)]
pub struct RouterWeights {
    pub d_model: usize,
    pub hidden: usize,
    /// Ascending ranks, one per difficulty class (easy first).
    pub rank_table: Vec<usize>,
    pub sigma: f64,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl RouterWeights {
    pub fn init(
        d_model: usize,
        hidden: usize,
        rank_table: Vec<usize>,
        sigma: f64,
        seed: u64,
        precision: Precision,
    ) -> Result<Self> {
        if rank_table.len() < 2 {
            return Err(Error::Router("rank table needs at least two classes".into()));
        }
        if !rank_table.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Router(format!(
                "rank table {rank_table:?} must be strictly ascending"
            )));
        }
        if sigma < 0.0 {
            return Err(Error::Router(format!("negative noise scale {sigma}")));
        }
        let mut rng = StreamRng::new(seed, "router/init");
        let mut w1 = rng.normal_vec(hidden * d_model, 0.0, 0.1);
        precision.round_slice(&mut w1);
        // zero output layer: logits start at exactly zero (loss ln C)
        Ok(RouterWeights {
            d_model,
            hidden,
            w2: vec![0.0; rank_table.len() * hidden],
            b2: vec![0.0; rank_table.len()],
            b1: vec![0.0; hidden],
            rank_table,
            sigma,
            w1,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.rank_table.len()
    }

    /// Class logits for one pooled embedding (no noise).
    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.d_model {
            return Err(Error::Router(format!(
                "embedding dim {} does not match router dim {}",
                h.len(),
                self.d_model
            )));
        }
        let mut hid = vec![0.0; self.hidden];
        for (i, hv) in hid.iter_mut().enumerate() {
            let mut acc = self.b1[i];
            for j in 0..self.d_model {
                acc += self.w1[i * self.d_model + j] * h[j];
            }
            *hv = acc.tanh();
        }
        let mut out = vec![0.0; self.n_classes()];
        for (c, ov) in out.iter_mut().enumerate() {
            let mut acc = self.b2[c];
            for i in 0..self.hidden {
                acc += self.w2[c * self.hidden + i] * hid[i];
            }
            *ov = acc;
        }
        Ok(out)
    }

    /// Predicted class: argmax with ties toward the lower class (and hence
    /// the lower rank, since the table ascends).
    pub fn classify(&self, h: &[f64]) -> Result<usize> {
        let logits = self.logits(h)?;
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Map a pooled embedding to a rank through the class table.
    pub fn route_one(&self, h: &[f64]) -> Result<usize> {
        Ok(self.rank_table[self.classify(h)?])
    }

    pub fn route(&self, hs: &[Vec<f64>]) -> Result<Vec<usize>> {
        hs.iter().map(|h| self.route_one(h)).collect()
    }

    pub fn accuracy(&self, examples: &[(Vec<f64>, usize)]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Router("empty accuracy set".into()));
        }
        let mut correct = 0usize;
        for (h, class) in examples {
            if self.classify(h)? == *class {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        vec![
            ("router.w1".into(), vec![self.hidden, self.d_model], self.w1.clone()),
            ("router.b1".into(), vec![self.hidden], self.b1.clone()),
            ("router.w2".into(), vec![self.n_classes(), self.hidden], self.w2.clone()),
            ("router.b2".into(), vec![self.n_classes()], self.b2.clone()),
            ("router.sigma".into(), vec![1], vec![self.sigma]),
            (
                "router.rank_table".into(),
                vec![self.rank_table.len()],
                self.rank_table.iter().map(|&r| r as f64).collect(),
            ),
        ]
    }

    pub fn from_named(tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let get = |name: &str| -> Result<&(Vec<usize>, Vec<f64>)> {
            tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let (w1_shape, w1) = get("router.w1")?;
        let (_, b1) = get("router.b1")?;
        let (_, w2) = get("router.w2")?;
        let (_, b2) = get("router.b2")?;
        let (_, sigma) = get("router.sigma")?;
        let (_, table) = get("router.rank_table")?;
        Ok(RouterWeights {
            d_model: w1_shape[1],
            hidden: w1_shape[0],
            rank_table: table.iter().map(|&v| v as usize).collect(),
            sigma: sigma[0],
            w1: w1.clone(),
            b1: b1.clone(),
            w2: w2.clone(),
            b2: b2.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RouterTrainOpts {
    pub sigma: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub precision: Precision,
    pub rank_table: Vec<usize>,
    /// Fraction of the balanced set held out for the accuracy report.
    pub holdout_fraction: f64,
}

pub struct TrainedRouter {
    pub weights: RouterWeights,
    pub holdout_accuracy: f64,
    pub final_loss: f64,
}

pub(crate) fn router_logits_graph(
    g: &mut Graph,
    h: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
) -> Result<TensorId> {
    let pre = g.matmul_nt(h, w1)?;
    let pre = g.add_row(pre, b1)?;
    let hid = g.tanh(pre)?;
    let out = g.matmul_nt(hid, w2)?;
    g.add_row(out, b2)
}

/// Train the classifier with noise-added cross-entropy: fresh Gaussian noise
/// on each pooled embedding every epoch, plain CE on the resulting logits.
pub fn train_router(
    examples: &[(Vec<f64>, usize)],
    opts: &RouterTrainOpts,
) -> Result<TrainedRouter> {
    if examples.len() < 4 {
        return Err(Error::Router("too few examples to train a router".into()));
    }
    if opts.sigma < 0.0 {
        return Err(Error::Router(format!("negative noise scale {}", opts.sigma)));
    }
    let d = examples[0].0.len();
    let n_classes = opts.rank_table.len();
    for (h, class) in examples {
        if h.len() != d {
            return Err(Error::Router("inconsistent embedding dims".into()));
        }
        if *class >= n_classes {
            return Err(Error::Router(format!("class {class} outside {n_classes} classes")));
        }
    }
    let mut router = RouterWeights::init(
        d,
        opts.hidden,
        opts.rank_table.clone(),
        opts.sigma,
        opts.seed,
        opts.precision,
    )?;

    let mut rng = StreamRng::new(opts.seed, "router/train");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng.shuffle(&mut order);
    let holdout = ((examples.len() as f64 * opts.holdout_fraction).round() as usize)
        .clamp(1, examples.len() - 1);
    let (held, train) = order.split_at(holdout);
    let held: Vec<(Vec<f64>, usize)> = held.iter().map(|&i| examples[i].clone()).collect();
    let train_idx: Vec<usize> = train.to_vec();

    let mut opt = Sgd::new(opts.lr, 0.9, Some(1.0), opts.precision);
    let mut noise_rng = StreamRng::new(opts.seed, "router/noise");
    let mut epoch_rng = StreamRng::new(opts.seed, "router/epochs");
    let mut final_loss = f64::NAN;

    for _epoch in 0..opts.epochs {
        let mut idx = train_idx.clone();
        epoch_rng.shuffle(&mut idx);
        for chunk in idx.chunks(32) {
            let mut h_data = Vec::with_capacity(chunk.len() * d);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (h, class) = &examples[i];
                for &v in h {
                    let noise = if opts.sigma > 0.0 { noise_rng.normal(0.0, opts.sigma) } else { 0.0 };
                    h_data.push(v + noise);
                }
                labels.push(*class);
            }
            let mut g = Graph::new(opts.precision);
            let h = g.constant(vec![chunk.len(), d], h_data)?;
            let w1 = g.leaf(vec![router.hidden, d], router.w1.clone(), true)?;
            let b1 = g.leaf(vec![router.hidden], router.b1.clone(), true)?;
            let w2 = g.leaf(vec![n_classes, router.hidden], router.w2.clone(), true)?;
            let b2 = g.leaf(vec![n_classes], router.b2.clone(), true)?;
            let logits = router_logits_graph(&mut g, h, w1, b1, w2, b2)?;
            let loss = g.cross_entropy(logits, labels)?;
            final_loss = g.data(loss)[0];
            if !final_loss.is_finite() {
                return Err(Error::Router(format!("router loss diverged to {final_loss}")));
            }
            g.backward(loss)?;
            let grab = |g: &Graph, id: TensorId, len: usize| {
                g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; len])
            };
            let gw1 = grab(&g, w1, router.w1.len());
            let gb1 = grab(&g, b1, router.b1.len());
            let gw2 = grab(&g, w2, router.w2.len());
            let gb2 = grab(&g, b2, router.b2.len());
            let mut entries = vec![
                ("router.w1".to_string(), router.w1.as_mut_slice(), gw1),
                ("router.b1".to_string(), router.b1.as_mut_slice(), gb1),
                ("router.w2".to_string(), router.w2.as_mut_slice(), gw2),
                ("router.b2".to_string(), router.b2.as_mut_slice(), gb2),
            ];
            opt.step(&mut entries);
        }
    }
    let holdout_accuracy = router.accuracy(&held)?;
    Ok(TrainedRouter { weights: router, holdout_accuracy, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_hand_cases() {
        // single live token
        let h = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(pool_embedding(&h, 2, &[1.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        // constant rows pool to the constant
        let h = vec![5.0, 6.0, 5.0, 6.0, 5.0, 6.0];
        assert_eq!(pool_embedding(&h, 2, &[1.0, 1.0, 0.0]).unwrap(), vec![5.0, 6.0]);
        // hand mean of three rows
        let h = vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0];
        assert_eq!(pool_embedding(&h, 2, &[1.0, 1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        // all-zero mask errors
        assert!(pool_embedding(&h, 2, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn pooling_ignores_masked_positions() {
        let base = vec![1.0, 2.0, 3.0, 4.0, 9.0, 9.0];
        let changed = vec![1.0, 2.0, 3.0, 4.0, -7.0, 0.5];
        let m = [1.0, 1.0, 0.0];
        assert_eq!(
            pool_embedding(&base, 2, &m).unwrap(),
            pool_embedding(&changed, 2, &m).unwrap()
        );
    }

    fn clusters(n_per: usize, d: usize, dist: f64, std: f64, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = StreamRng::new(seed, "clusters");
        let mut out = Vec::new();
        for class in 0..2usize {
            let center = if class == 0 { 0.0 } else { dist / (d as f64).sqrt() };
            for _ in 0..n_per {
                let h: Vec<f64> = (0..d).map(|_| center + rng.normal(0.0, std)).collect();
                out.push((h, class));
            }
        }
        out
    }

    fn train_opts(sigma: f64, seed: u64) -> RouterTrainOpts {
        RouterTrainOpts {
            sigma,
            hidden: 32,
            epochs: 40,
            lr: 0.2,
            seed,
            precision: Precision::F64,
            rank_table: vec![2, 8],
            holdout_fraction: 0.2,
        }
    }

    #[test]
    fn separable_clusters_reach_high_holdout_accuracy() {
        let data = clusters(100, 64, 10.0, 0.1, 1);
        let trained = train_router(&data, &train_opts(0.0, 7)).unwrap();
        assert!(
            trained.holdout_accuracy >= 0.99,
            "holdout accuracy {}",
            trained.holdout_accuracy
        );
    }

    #[test]
    fn initial_logits_are_zero_so_initial_loss_is_ln2() {
        let router = RouterWeights::init(8, 32, vec![2, 8], 0.0, 3, Precision::F64).unwrap();
        let logits = router.logits(&vec![0.3; 8]).unwrap();
        assert_eq!(logits, vec![0.0, 0.0]);
        // plain CE of zero logits over 2 classes
        let mut g = Graph::new(Precision::F64);
        let l = g.leaf(vec![1, 2], logits, false).unwrap();
        let loss = g.cross_entropy(l, vec![0]).unwrap();
        assert!((g.data(loss)[0] - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        let mut data = clusters(100, 64, 10.0, 0.1, 2);
        let mut rng = StreamRng::new(5, "shuffle-labels");
        let mut labels: Vec<usize> = data.iter().map(|(_, c)| *c).collect();
        rng.shuffle(&mut labels);
        for (ex, l) in data.iter_mut().zip(labels) {
            ex.1 = l;
        }
        let trained = train_router(&data, &train_opts(0.0, 9)).unwrap();
        assert!(
            (trained.holdout_accuracy - 0.5).abs() <= 0.1,
            "permutation control accuracy {}",
            trained.holdout_accuracy
        );
    }

    #[test]
    fn routing_maps_classes_to_table_ranks_with_low_tie_rule() {
        let mut router = RouterWeights::init(4, 8, vec![2, 8], 0.0, 1, Precision::F64).unwrap();
        // force logits by zeroing w2 and setting biases
        router.w2 = vec![0.0; 2 * 8];
        router.b2 = vec![2.0, -1.0];
        assert_eq!(router.route_one(&vec![0.0; 4]).unwrap(), 2);
        router.b2 = vec![-1.0, 2.0];
        assert_eq!(router.route_one(&vec![0.0; 4]).unwrap(), 8);
        // exact tie -> lower rank
        router.b2 = vec![1.5, 1.5];
        assert_eq!(router.route_one(&vec![0.0; 4]).unwrap(), 2);
        // shift invariance of argmax
        router.b2 = vec![1.5 + 3.0, 1.5 + 3.0];
        assert_eq!(router.route_one(&vec![0.0; 4]).unwrap(), 2);
    }

    #[test]
    fn every_table_rank_is_reachable() {
        let router = RouterWeights::init(4, 8, vec![2, 8], 0.0, 1, Precision::F64).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for class in 0..router.n_classes() {
            seen.insert(router.rank_table[class]);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![2, 8]);
    }

    #[test]
    fn invalid_tables_and_sigma_are_rejected() {
        assert!(RouterWeights::init(4, 8, vec![8, 2], 0.0, 1, Precision::F64).is_err());
        assert!(RouterWeights::init(4, 8, vec![4], 0.0, 1, Precision::F64).is_err());
        assert!(RouterWeights::init(4, 8, vec![2, 8], -0.1, 1, Precision::F64).is_err());
    }

    #[test]
    fn balance_downsamples_majority_deterministically() {
        let mk = |id: usize, class: DifficultyBucket| DifficultyLabel {
            sample_id: format!("s{id}"),
            class,
            metric_kind: MetricKind::TokenF1,
            metric_value: 0.0,
        };
        let mut labels = Vec::new();
        for i in 0..100 {
            labels.push(mk(i, DifficultyBucket::Easy));
        }
        for i in 100..140 {
            labels.push(mk(i, DifficultyBucket::Hard));
        }
        let balanced = balance_classes(&labels, 3).unwrap();
        assert_eq!(balanced.len(), 80);
        let easy = balanced.iter().filter(|l| l.class == DifficultyBucket::Easy).count();
        assert_eq!(easy, 40);
        let again = balance_classes(&labels, 3).unwrap();
        let ids: Vec<&str> = balanced.iter().map(|l| l.sample_id.as_str()).collect();
        let ids2: Vec<&str> = again.iter().map(|l| l.sample_id.as_str()).collect();
        assert_eq!(ids, ids2, "same seed gives the identical subset");

        // already balanced -> same multiset
        let labels: Vec<DifficultyLabel> = (0..10)
            .map(|i| mk(i, if i % 2 == 0 { DifficultyBucket::Easy } else { DifficultyBucket::Hard }))
            .collect();
        let balanced = balance_classes(&labels, 1).unwrap();
        let mut ids: Vec<&str> = balanced.iter().map(|l| l.sample_id.as_str()).collect();
        ids.sort_unstable();
        let mut expect: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        expect.sort();
        assert_eq!(ids, expect.iter().map(|s| s.as_str()).collect::<Vec<_>>());

        // one empty class errors
        let labels: Vec<DifficultyLabel> = (0..4).map(|i| mk(i, DifficultyBucket::Easy)).collect();
        let err = balance_classes(&labels, 1).unwrap_err().to_string();
        assert!(err.contains("tau"), "{err}");
    }

    #[test]
    fn router_checkpoint_tensors_round_trip() {
        let router = RouterWeights::init(6, 4, vec![2, 8], 0.25, 11, Precision::F64).unwrap();
        let named: BTreeMap<String, (Vec<usize>, Vec<f64>)> = router
            .named_tensors()
            .into_iter()
            .map(|(n, s, d)| (n, (s, d)))
            .collect();
        let back = RouterWeights::from_named(&named).unwrap();
        assert_eq!(back.w1, router.w1);
        assert_eq!(back.rank_table, router.rank_table);
        assert_eq!(back.sigma, router.sigma);
    }
}
