//! Synthetic task families with a controllable difficulty knob, plus the
//! evaluation metrics. Every generated sample's gold answer is recomputable
//! from the prompt by a reference solver, which the tests run over full
//! generated sets.
//!
//! Families:
//! - `kv_recall` — retrieval: the prompt lists `k` key:value pairs and asks
//!   one key back ("a:17;b:42;b=?" -> "42"); difficulty = number of pairs.
//! - `mod_chain` — sequential arithmetic: a left-to-right chain over
//!   {+,-,*} evaluated mod 10 ("3+4*2=?" -> "4"); difficulty = chain length.
//!   No operator precedence: each step depends on the previous one.
//! - `copy` — echo task used only to warm up pretraining ("~xyz=?" -> "xyz");
//!   never part of an experiment's task specs.

use crate::error::{Error, Result};
use crate::numcore::StreamRng;
use serde::{Deserialize, Serialize};

pub const KV_KNOB_MAX: u32 = 12;
pub const MOD_CHAIN_KNOB_MAX: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    KvRecall,
    ModChain,
    /// Pretraining warm-up only; not a benchmark family.
    Copy,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::KvRecall => "kv_recall",
            TaskFamily::ModChain => "mod_chain",
            TaskFamily::Copy => "copy",
        }
    }

    /// Metric used to score this family (labeling and evaluation).
    pub fn metric_kind(self) -> MetricKind {
        match self {
            TaskFamily::KvRecall => MetricKind::TokenF1,
            TaskFamily::ModChain => MetricKind::AnswerAccuracy,
            TaskFamily::Copy => MetricKind::ExactMatch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyBucket {
    Easy,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    TokenF1,
    ExactMatch,
    AnswerAccuracy,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::TokenF1 => "token_f1",
            MetricKind::ExactMatch => "exact_match",
            MetricKind::AnswerAccuracy => "answer_accuracy",
        }
    }

    pub fn score(self, prediction: &str, gold: &str) -> Result<f64> {
        Ok(match self {
            MetricKind::TokenF1 => metric_token_f1(prediction, gold),
            MetricKind::ExactMatch => metric_exact_match(prediction, gold) as f64,
            MetricKind::AnswerAccuracy => metric_answer_accuracy(prediction, gold)? as f64,
        })
    }
}

/// One generated sample. The gold answer is a deterministic function of the
/// prompt (see the reference solvers below).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub family: TaskFamily,
    pub knob: u32,
    pub bucket: DifficultyBucket,
    pub prompt: String,
    pub gold: String,
}

/// Task specification: family, difficulty-knob ranges for the easy and hard
/// halves of each split, and split sizes. Splits are mixed 50/50 easy/hard
/// so both router classes exist.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: TaskFamily,
    /// Inclusive knob range for easy samples.
    pub easy_knobs: (u32, u32),
    /// Inclusive knob range for hard samples.
    pub hard_knobs: (u32, u32),
    pub train_size: usize,
    pub eval_size: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let max = match self.family {
            TaskFamily::KvRecall => KV_KNOB_MAX,
            TaskFamily::ModChain => MOD_CHAIN_KNOB_MAX,
            TaskFamily::Copy => {
                return Err(Error::Task("copy is a pretraining-only family".into()))
            }
        };
        for &(lo, hi) in [&self.easy_knobs, &self.hard_knobs] {
            if lo < 1 || hi > max || lo > hi {
                return Err(Error::Task(format!(
                    "{} knob range {lo}..={hi} outside 1..={max}",
                    self.family.name()
                )));
            }
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::Task("split sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn is_hard(&self, knob: u32) -> bool {
        knob >= self.hard_knobs.0
    }
}

/// Generate one split (tagged `train` or `eval`) for a task spec: half easy,
/// half hard, deterministically shuffled. Pure function of (spec, seed, tag).
pub fn generate_split(spec: &TaskSpec, seed: u64, tag: &str) -> Result<Vec<Sample>> {
    spec.validate()?;
    let size = match tag {
        "train" => spec.train_size,
        "eval" => spec.eval_size,
        other => return Err(Error::Task(format!("unknown split tag '{other}'"))),
    };
    let mut rng = StreamRng::new(seed, &format!("tasks/{}/{}", spec.family.name(), tag));
    let mut samples = Vec::with_capacity(size);
    for i in 0..size {
        let (range, bucket) = if i % 2 == 0 {
            (spec.easy_knobs, DifficultyBucket::Easy)
        } else {
            (spec.hard_knobs, DifficultyBucket::Hard)
        };
        let knob = rng.int_inclusive(range.0 as usize, range.1 as usize) as u32;
        let id = format!("{}-{}-{:05}", spec.family.name(), tag, i);
        let sample = match spec.family {
            TaskFamily::KvRecall => gen_kv_sample(id, knob, bucket, &mut rng),
            TaskFamily::ModChain => gen_mod_chain_sample(id, knob, bucket, &mut rng),
            TaskFamily::Copy => unreachable!("validated above"),
        };
        samples.push(sample);
    }
    rng.shuffle(&mut samples);
    Ok(samples)
}

fn gen_kv_sample(id: String, knob: u32, bucket: DifficultyBucket, rng: &mut StreamRng) -> Sample {
    let k = knob as usize;
    let keys = {
        let mut letters: Vec<char> = ('a'..='z').collect();
        rng.shuffle(&mut letters);
        letters.truncate(k);
        letters
    };
    let values: Vec<u32> = (0..k).map(|_| rng.int_inclusive(10, 99) as u32).collect();
    let query = rng.int_inclusive(0, k - 1);
    let mut prompt = String::new();
    for (key, value) in keys.iter().zip(values.iter()) {
        prompt.push(*key);
        prompt.push(':');
        prompt.push_str(&value.to_string());
        prompt.push(';');
    }
    prompt.push(keys[query]);
    prompt.push_str("=?");
    let gold = values[query].to_string();
    Sample { id, family: TaskFamily::KvRecall, knob, bucket, prompt, gold }
}

fn gen_mod_chain_sample(
    id: String,
    knob: u32,
    bucket: DifficultyBucket,
    rng: &mut StreamRng,
) -> Sample {
    const OPS: [char; 3] = ['+', '-', '*'];
    let len = knob as usize;
    let mut prompt = String::new();
    prompt.push_str(&rng.int_inclusive(0, 9).to_string());
    for _ in 0..len {
        prompt.push(OPS[rng.int_inclusive(0, 2)]);
        prompt.push_str(&rng.int_inclusive(0, 9).to_string());
    }
    prompt.push_str("=?");
    let gold = solve_mod_chain(&prompt).expect("generated chain must parse");
    Sample { id, family: TaskFamily::ModChain, knob, bucket, prompt, gold }
}

/// Copy warm-up samples for pretraining: "~xyz=?" -> "xyz".
pub fn generate_copy_samples(count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = StreamRng::new(seed, "tasks/copy");
    let alphabet: Vec<char> = ('a'..='z').chain('0'..='9').collect();
    (0..count)
        .map(|i| {
            let len = rng.int_inclusive(2, 5);
            let body: String =
                (0..len).map(|_| alphabet[rng.int_inclusive(0, alphabet.len() - 1)]).collect();
            Sample {
                id: format!("copy-{i:05}"),
                family: TaskFamily::Copy,
                knob: len as u32,
                bucket: DifficultyBucket::Easy,
                prompt: format!("~{body}=?"),
                gold: body,
            }
        })
        .collect()
}

// ---- reference solvers ------------------------------------------------------

/// Recompute the kv_recall answer from the prompt alone.
pub fn solve_kv_recall(prompt: &str) -> Option<String> {
    let body = prompt.strip_suffix("=?")?;
    let mut parts: Vec<&str> = body.split(';').collect();
    let query = parts.pop()?;
    if query.len() != 1 {
        return None;
    }
    for pair in parts {
        let (key, value) = pair.split_once(':')?;
        if key == query {
            return Some(value.to_string());
        }
    }
    None
}

/// Recompute the mod_chain answer: strict left-to-right evaluation mod 10.
pub fn solve_mod_chain(prompt: &str) -> Option<String> {
    let body = prompt.strip_suffix("=?")?;
    let mut chars = body.chars();
    let mut acc = chars.next()?.to_digit(10)? as i64;
    loop {
        let op = match chars.next() {
            None => break,
            Some(c) => c,
        };
        let operand = chars.next()?.to_digit(10)? as i64;
        acc = match op {
            '+' => acc + operand,
            '-' => acc - operand,
            '*' => acc * operand,
            _ => return None,
        };
        acc = acc.rem_euclid(10);
    }
    Some(acc.to_string())
}

/// Reference solver dispatch; `copy` echoes the marked body.
pub fn reference_solve(family: TaskFamily, prompt: &str) -> Option<String> {
    match family {
        TaskFamily::KvRecall => solve_kv_recall(prompt),
        TaskFamily::ModChain => solve_mod_chain(prompt),
        TaskFamily::Copy => prompt.strip_prefix('~')?.strip_suffix("=?").map(|s| s.to_string()),
    }
}

// ---- metrics ------------------------------------------------------------------

/// Whitespace-token multiset overlap F1. Both empty -> 1.0, one empty -> 0.0.
pub fn metric_token_f1(prediction: &str, gold: &str) -> f64 {
    let pred: Vec<&str> = prediction.split_whitespace().collect();
    let gold_toks: Vec<&str> = gold.split_whitespace().collect();
    match (pred.is_empty(), gold_toks.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts = std::collections::HashMap::new();
    for t in &gold_toks {
        *counts.entry(*t).or_insert(0usize) += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold_toks.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// 1 iff normalized strings (trim, collapse whitespace, lowercase) match.
pub fn metric_exact_match(prediction: &str, gold: &str) -> u8 {
    (normalize(prediction) == normalize(gold)) as u8
}

/// 1 iff the last integer substring of the prediction equals the gold value.
/// Gold must itself parse as an integer (a generator bug otherwise).
pub fn metric_answer_accuracy(prediction: &str, gold: &str) -> Result<u8> {
    let gold_value: i64 = gold
        .trim()
        .parse()
        .map_err(|_| Error::Task(format!("gold answer '{gold}' is not an integer (generator bug)")))?;
    let mut last: Option<i64> = None;
    let mut current = String::new();
    for c in prediction.chars() {
        if c.is_ascii_digit() {
            current.push(c);
        } else if !current.is_empty() {
            last = current.parse().ok().or(last);
            current.clear();
        }
    }
    if !current.is_empty() {
        last = current.parse().ok().or(last);
    }
    Ok(match last {
        Some(v) => (v == gold_value) as u8,
        None => 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv_spec() -> TaskSpec {
        TaskSpec {
            family: TaskFamily::KvRecall,
            easy_knobs: (1, 3),
            hard_knobs: (8, 12),
            train_size: 64,
            eval_size: 32,
        }
    }

    fn chain_spec() -> TaskSpec {
        TaskSpec {
            family: TaskFamily::ModChain,
            easy_knobs: (1, 2),
            hard_knobs: (6, 8),
            train_size: 64,
            eval_size: 32,
        }
    }

    #[test]
    fn mod_chain_hand_cases() {
        assert_eq!(solve_mod_chain("3+4=?").unwrap(), "7");
        // left-to-right, no precedence: (3+4)*2 mod 10 = 4
        assert_eq!(solve_mod_chain("3+4*2=?").unwrap(), "4");
        assert_eq!(solve_mod_chain("1-5=?").unwrap(), "6"); // rem_euclid keeps 0..9
    }

    #[test]
    fn kv_recall_single_pair_is_trivially_present() {
        let mut rng = StreamRng::new(0, "t");
        let s = gen_kv_sample("x".into(), 1, DifficultyBucket::Easy, &mut rng);
        assert_eq!(s.prompt.matches(';').count(), 1);
        assert!(s.prompt.contains(&s.gold));
    }

    #[test]
    fn reference_solver_agrees_on_full_generated_sets() {
        for spec in [kv_spec(), chain_spec()] {
            for tag in ["train", "eval"] {
                for s in generate_split(&spec, 17, tag).unwrap() {
                    let solved = reference_solve(s.family, &s.prompt)
                        .unwrap_or_else(|| panic!("unsolvable prompt {:?}", s.prompt));
                    assert_eq!(solved, s.gold, "prompt {:?}", s.prompt);
                }
            }
        }
    }

    #[test]
    fn generation_is_pure_in_spec_and_seed() {
        let a = generate_split(&kv_spec(), 5, "train").unwrap();
        let b = generate_split(&kv_spec(), 5, "train").unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_split(&kv_spec(), 6, "train").unwrap();
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn knob_out_of_budget_is_rejected() {
        let mut spec = kv_spec();
        spec.hard_knobs = (8, 30);
        assert!(spec.validate().is_err());
        let mut spec = chain_spec();
        spec.easy_knobs = (0, 2);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn token_f1_cases() {
        assert_eq!(metric_token_f1("same text", "same text"), 1.0);
        let f1 = metric_token_f1("a b c", "b c d");
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12, "got {f1}");
        assert_eq!(metric_token_f1("x y", "p q"), 0.0);
        assert_eq!(metric_token_f1("", ""), 1.0);
        assert_eq!(metric_token_f1("", "x"), 0.0);
        assert_eq!(metric_token_f1("x", ""), 0.0);
        // multiset, not set: the second "a" finds no unmatched gold copy
        let f1 = metric_token_f1("a a", "a");
        assert!((f1 - 2.0 * (0.5 * 1.0) / 1.5).abs() < 1e-12);
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(metric_exact_match(" 7 ", "7"), 1);
        assert_eq!(metric_exact_match("7", "17"), 0);
        assert_eq!(metric_exact_match("A  B", "a b"), 1);
        // EM = 1 implies F1 = 1 on the same pair
        assert_eq!(metric_token_f1(" 7 ", "7"), 1.0);
    }

    #[test]
    fn answer_accuracy_cases() {
        assert_eq!(metric_answer_accuracy("the answer is 4", "4").unwrap(), 1);
        assert_eq!(metric_answer_accuracy("no digits here", "4").unwrap(), 0);
        assert_eq!(metric_answer_accuracy("14", "4").unwrap(), 0);
        assert_eq!(metric_answer_accuracy("7 then 42", "42").unwrap(), 1);
        assert!(metric_answer_accuracy("4", "four").is_err());
    }

    #[test]
    fn copy_samples_echo_their_body() {
        for s in generate_copy_samples(20, 3) {
            assert_eq!(reference_solve(TaskFamily::Copy, &s.prompt).unwrap(), s.gold);
        }
    }

    #[test]
    fn prompts_fit_the_sequence_budget() {
        let mut spec = kv_spec();
        spec.hard_knobs = (KV_KNOB_MAX, KV_KNOB_MAX);
        for s in generate_split(&spec, 1, "eval").unwrap() {
            // BOS + prompt + gold + EOS must fit max_seq_len 96
            assert!(s.prompt.len() + s.gold.len() + 2 <= 96, "{}", s.prompt.len());
        }
    }
}
