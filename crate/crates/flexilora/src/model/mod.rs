//! Character-level tokenizer and a small decoder-only transformer. The base
//! weights are pretrained once and then frozen for every fine-tuning
//! experiment; adapters hook into the attention projections at forward time.

pub mod pretrain;
pub mod tokenizer;
pub mod transformer;

pub use pretrain::{next_token_accuracy, pretrain_base, PretrainOpts, PretrainOutcome};
pub use tokenizer::{Tokenizer, BOS_ID, EOS_ID, N_SPECIALS, PAD_ID};
pub use transformer::{
    build_forward, embed, forward_base, greedy_decode, insert_weights, sequence_loss,
    ForwardOutput, GraphWeights, Param, TransformerWeights,
};

use crate::error::{Error, Result};
use crate::tasks::Sample;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Target marker for positions that carry no supervision.
pub const IGNORE: usize = usize::MAX;

/// Which positions are supervised when building targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    /// Only answer tokens (and EOS) are predicted; prompt positions are
    /// ignored. Used for fine-tuning and labeling.
    AnswerOnly,
    /// Every next token is predicted. Used for pretraining.
    FullSequence,
}

/// A padded batch of tokenized samples: ids, {0,1} mask, and next-token
/// targets with `IGNORE` at unsupervised positions. Row-major [n, t].
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub n: usize,
    pub t: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<f64>,
    pub targets: Vec<usize>,
}

impl TokenBatch {
    pub fn from_samples(
        samples: &[Sample],
        tok: &Tokenizer,
        max_seq_len: usize,
        mode: Supervision,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Task("empty batch".into()));
        }
        let mut encoded = Vec::with_capacity(samples.len());
        for s in samples {
            let prompt_ids = tok.encode(&s.prompt)?;
            let gold_ids = tok.encode(&s.gold)?;
            if gold_ids.is_empty() {
                return Err(Error::Task(format!("sample {} has empty gold answer", s.id)));
            }
            let mut ids = Vec::with_capacity(prompt_ids.len() + gold_ids.len() + 2);
            ids.push(BOS_ID);
            ids.extend_from_slice(&prompt_ids);
            let answer_start = ids.len();
            ids.extend_from_slice(&gold_ids);
            ids.push(EOS_ID);
            if ids.len() > max_seq_len {
                return Err(Error::Task(format!(
                    "sample {} needs {} tokens, max_seq_len is {max_seq_len}",
                    s.id,
                    ids.len()
                )));
            }
            encoded.push((ids, answer_start));
        }
        let t = encoded.iter().map(|(ids, _)| ids.len()).max().unwrap();
        let n = encoded.len();
        let mut batch = TokenBatch {
            n,
            t,
            ids: vec![PAD_ID; n * t],
            mask: vec![0.0; n * t],
            targets: vec![IGNORE; n * t],
        };
        for (s, (ids, answer_start)) in encoded.iter().enumerate() {
            let len = ids.len();
            for (i, &id) in ids.iter().enumerate() {
                batch.ids[s * t + i] = id;
                batch.mask[s * t + i] = 1.0;
            }
            let first_supervised = match mode {
                Supervision::AnswerOnly => *answer_start, // predicts ids[answer_start]..
                Supervision::FullSequence => 1,
            };
            for i in first_supervised - 1..len - 1 {
                batch.targets[s * t + i] = ids[i + 1];
            }
        }
        Ok(batch)
    }

    /// Prompt-only rows (BOS + prompt, no answer), padded to the longest
    /// prompt. Used for routing and decoding, where answers must be unseen.
    pub fn from_prompt_batch(prompts: &[Vec<usize>], max_seq_len: usize) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Task("empty prompt batch".into()));
        }
        let t = prompts.iter().map(|p| p.len() + 1).max().unwrap();
        if t > max_seq_len {
            return Err(Error::Task(format!(
                "prompt needs {t} tokens, max_seq_len is {max_seq_len}"
            )));
        }
        let n = prompts.len();
        let mut batch = TokenBatch {
            n,
            t,
            ids: vec![PAD_ID; n * t],
            mask: vec![0.0; n * t],
            targets: vec![IGNORE; n * t],
        };
        for (s, prompt) in prompts.iter().enumerate() {
            batch.ids[s * t] = BOS_ID;
            batch.mask[s * t] = 1.0;
            for (i, &id) in prompt.iter().enumerate() {
                batch.ids[s * t + 1 + i] = id;
                batch.mask[s * t + 1 + i] = 1.0;
            }
        }
        Ok(batch)
    }

    pub fn sample_mask(&self, s: usize) -> &[f64] {
        &self.mask[s * self.t..(s + 1) * self.t]
    }

    pub fn sample_ids(&self, s: usize) -> &[usize] {
        &self.ids[s * self.t..(s + 1) * self.t]
    }

    /// Flat indices and labels of every supervised position.
    pub fn supervised_positions(&self) -> (Vec<usize>, Vec<usize>) {
        let mut idx = Vec::new();
        let mut labels = Vec::new();
        for (i, &tgt) in self.targets.iter().enumerate() {
            if tgt != IGNORE {
                idx.push(i);
                labels.push(tgt);
            }
        }
        (idx, labels)
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..self.n {
            let has_target = self.targets[s * self.t..(s + 1) * self.t]
                .iter()
                .any(|&t| t != IGNORE);
            if !has_target {
                return Err(Error::Task(format!("sample {s} has no supervised position")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{DifficultyBucket, Sample, TaskFamily};

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
    fn answer_only_supervises_answer_and_eos() {
        let tok = Tokenizer::build(["3+4=?7"]).unwrap();
        let b = TokenBatch::from_samples(&[sample("3+4=?", "7")], &tok, 32, Supervision::AnswerOnly)
            .unwrap();
        b.validate().unwrap();
        // seq = BOS 3 + 4 = ? 7 EOS  (8 tokens)
        assert_eq!(b.t, 8);
        let (idx, labels) = b.supervised_positions();
        // position 5 ('?') predicts '7', position 6 ('7') predicts EOS
        assert_eq!(idx, vec![5, 6]);
        assert_eq!(labels[1], EOS_ID);
        assert_eq!(tok.decode(&[labels[0]]), "7");
    }

    #[test]
    fn full_sequence_supervises_everything_after_bos() {
        let tok = Tokenizer::build(["ab"]).unwrap();
        let b = TokenBatch::from_samples(&[sample("a", "b")], &tok, 32, Supervision::FullSequence)
            .unwrap();
        let (idx, _) = b.supervised_positions();
        assert_eq!(idx, vec![0, 1, 2]); // BOS->a, a->b, b->EOS
    }

    #[test]
    fn padding_and_masks() {
        let tok = Tokenizer::build(["abcd"]).unwrap();
        let b = TokenBatch::from_samples(
            &[sample("a", "b"), sample("abc", "d")],
            &tok,
            32,
            Supervision::AnswerOnly,
        )
        .unwrap();
        assert_eq!(b.t, 6);
        assert_eq!(b.sample_mask(0), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.sample_ids(0)[4], PAD_ID);
    }

    #[test]
    fn overlong_sample_is_rejected() {
        let tok = Tokenizer::build(["abcdef"]).unwrap();
        let err = TokenBatch::from_samples(&[sample("abcdef", "a")], &tok, 4, Supervision::AnswerOnly);
        assert!(err.is_err());
    }
}
