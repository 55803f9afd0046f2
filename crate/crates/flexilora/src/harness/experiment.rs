//! Experiment orchestration: pretrain-or-load, task generation, difficulty
//! labeling, router training, per-policy fine-tuning and evaluation, report
//! emission. Every stage persists its artifact plus a meta record keyed by
//! a hash of the upstream config slice; a rerun with the identical config
//! reuses cached stages, and a stale artifact (hash mismatch) is recomputed
//! rather than reused.

use super::checkpoint::{collect_named, load_checkpoint, save_checkpoint, NamedTensors};
use super::config::ExperimentConfig;
use super::report::{emit_report, MethodRow, ReportPaths};
use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::model::{
    next_token_accuracy, pretrain_base, PretrainOpts, Supervision, Tokenizer, TransformerWeights,
};
use crate::router::{
    balance_classes, label_difficulty, pooled_for_samples, train_router, DifficultyLabel,
    LabelOpts, RouterTrainOpts, RouterWeights,
};
use crate::tasks::{generate_copy_samples, generate_split, DifficultyBucket, Sample, TaskSpec};
use crate::train::{evaluate, finetune, EvalOpts, EvalSummary, FinetuneOpts, FinetuneReport};
use crate::policy::{BuildResources, PolicyRegistry, PolicySpec};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub struct Experiment {
    pub cfg: ExperimentConfig,
    out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub tokenizer: Tokenizer,
    /// (spec, train split, eval split) per configured family.
    pub splits: Vec<(TaskSpec, Vec<Sample>, Vec<Sample>)>,
    pub pretrain_corpus: Vec<Sample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub spec: PolicySpec,
    pub descriptor: String,
    /// Trainable parameters at the policy's largest rank.
    pub capacity_params: usize,
    pub per_family: BTreeMap<String, EvalSummary>,
    pub finetune_reports: BTreeMap<String, FinetuneReport>,
}

pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub outcomes: Vec<MethodOutcome>,
    pub report: ReportPaths,
}

#[derive(Serialize, Deserialize)]
struct StageMeta {
    input_hash: String,
    #[serde(default)]
    extra: serde_json::Value,
}

const DATASET_FORMAT: &str = "flexilora.dataset/1";
const LABELS_FORMAT: &str = "flexilora.labels/1";

fn write_jsonl<T: Serialize>(path: &Path, format_tag: &str, items: &[T]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&serde_json::json!({ "format": format_tag }).to_string());
    text.push('\n');
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("serializable record"));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, format_tag: &str) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("{}: empty record file", path.display())))?;
    let header: serde_json::Value = serde_json::from_str(header)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.get("format").and_then(|v| v.as_str()) != Some(format_tag) {
        return Err(Error::Checkpoint(format!(
            "{}: expected format {format_tag}, got {header}",
            path.display()
        )));
    }
    lines
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::Checkpoint(format!("{}: bad record: {e}", path.display())))
        })
        .collect()
}

/// File-name slug for a policy descriptor, e.g. "lora(r=8)" -> "lora-r8".
pub fn slugify(descriptor: &str) -> String {
    let mut out = String::new();
    let mut last_dash = true;
    for c in descriptor.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c);
            last_dash = false;
        } else if c == '+' {
            out.push_str("plus");
            last_dash = false;
        } else if !last_dash {
            out.push('-');
            last_dash = true;
        }
    }
    out.trim_end_matches('-').to_string()
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let out = PathBuf::from(&cfg.out_dir);
        std::fs::create_dir_all(out.join("meta"))?;
        std::fs::create_dir_all(out.join("tasks"))?;
        std::fs::create_dir_all(out.join("labels"))?;
        std::fs::create_dir_all(out.join("checkpoints"))?;
        std::fs::create_dir_all(out.join("reports"))?;
        Ok(Experiment { cfg, out })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn meta_path(&self, stage: &str) -> PathBuf {
        self.out.join("meta").join(format!("{stage}.json"))
    }

    fn stage_is_fresh(&self, stage: &str, input_hash: &str, artifacts: &[PathBuf]) -> bool {
        let meta_path = self.meta_path(stage);
        let Ok(text) = std::fs::read_to_string(&meta_path) else {
            return false;
        };
        let Ok(meta) = serde_json::from_str::<StageMeta>(&text) else {
            return false;
        };
        if meta.input_hash != input_hash {
            log::info!("stage {stage}: cached artifact is stale, recomputing");
            return false;
        }
        artifacts.iter().all(|p| p.exists())
    }

    fn write_meta(&self, stage: &str, input_hash: &str, extra: serde_json::Value) -> Result<()> {
        let meta = StageMeta { input_hash: input_hash.to_string(), extra };
        std::fs::write(
            self.meta_path(stage),
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )?;
        Ok(())
    }

    fn stage_err(stage: &'static str, seed: u64) -> impl Fn(Error) -> Error {
        move |e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage { stage, seed, msg: other.to_string() },
        }
    }

    // ---- stage: task generation + tokenizer -------------------------------

    fn tasks_hash(&self) -> String {
        ExperimentConfig::slice_hash(&[
            &ExperimentConfig::json_of(&self.cfg.tasks),
            &ExperimentConfig::json_of(&self.cfg.pretrain.corpus_per_family),
            &ExperimentConfig::json_of(&self.cfg.pretrain.copy_count),
            &self.cfg.seed.to_string(),
        ])
    }

    pub fn stage_tasks(&self) -> Result<TaskData> {
        self.stage_tasks_inner().map_err(Self::stage_err("gen-tasks", self.cfg.seed))
    }

    fn stage_tasks_inner(&self) -> Result<TaskData> {
        let hash = self.tasks_hash();
        let mut artifact_paths = vec![self.out.join("tasks").join("pretrain_corpus.jsonl")];
        for spec in &self.cfg.tasks {
            let f = spec.family.name();
            artifact_paths.push(self.out.join("tasks").join(format!("{f}.train.jsonl")));
            artifact_paths.push(self.out.join("tasks").join(format!("{f}.eval.jsonl")));
        }

        let (splits, corpus): (Vec<(TaskSpec, Vec<Sample>, Vec<Sample>)>, Vec<Sample>) =
            if self.stage_is_fresh("tasks", &hash, &artifact_paths) {
                let mut splits = Vec::new();
                for spec in &self.cfg.tasks {
                    let f = spec.family.name();
                    let train = read_jsonl(
                        &self.out.join("tasks").join(format!("{f}.train.jsonl")),
                        DATASET_FORMAT,
                    )?;
                    let eval = read_jsonl(
                        &self.out.join("tasks").join(format!("{f}.eval.jsonl")),
                        DATASET_FORMAT,
                    )?;
                    splits.push((spec.clone(), train, eval));
                }
                let corpus =
                    read_jsonl(&artifact_paths[0], DATASET_FORMAT)?;
                (splits, corpus)
            } else {
                let mut splits = Vec::new();
                let mut corpus: Vec<Sample> = Vec::new();
                for spec in &self.cfg.tasks {
                    let train = generate_split(spec, self.cfg.seed, "train")?;
                    let eval = generate_split(spec, self.cfg.seed, "eval")?;
                    let mut corpus_spec = spec.clone();
                    corpus_spec.train_size = self.cfg.pretrain.corpus_per_family;
                    // widen to the full knob range so pretraining sees every
                    // difficulty, with the middle included
                    corpus_spec.easy_knobs = (spec.easy_knobs.0, spec.hard_knobs.0.saturating_sub(1).max(spec.easy_knobs.0));
                    corpus_spec.hard_knobs = spec.hard_knobs;
                    corpus.extend(generate_split(&corpus_spec, self.cfg.seed.wrapping_add(1), "train")?);
                    let f = spec.family.name();
                    write_jsonl(
                        &self.out.join("tasks").join(format!("{f}.train.jsonl")),
                        DATASET_FORMAT,
                        &train,
                    )?;
                    write_jsonl(
                        &self.out.join("tasks").join(format!("{f}.eval.jsonl")),
                        DATASET_FORMAT,
                        &eval,
                    )?;
                    splits.push((spec.clone(), train, eval));
                }
                corpus.extend(generate_copy_samples(
                    self.cfg.pretrain.copy_count,
                    self.cfg.seed.wrapping_add(2),
                ));
                write_jsonl(&artifact_paths[0], DATASET_FORMAT, &corpus)?;
                self.write_meta("tasks", &hash, serde_json::json!({}))?;
                (splits, corpus)
            };

        let mut texts: Vec<&str> = Vec::new();
        for (_, train, eval) in &splits {
            texts.extend(train.iter().map(|s| s.prompt.as_str()));
            texts.extend(train.iter().map(|s| s.gold.as_str()));
            texts.extend(eval.iter().map(|s| s.prompt.as_str()));
            texts.extend(eval.iter().map(|s| s.gold.as_str()));
        }
        texts.extend(corpus.iter().map(|s| s.prompt.as_str()));
        texts.extend(corpus.iter().map(|s| s.gold.as_str()));
        let tokenizer = Tokenizer::build(texts)?;
        Ok(TaskData { tokenizer, splits, pretrain_corpus: corpus })
    }

    // ---- stage: pretrain-or-load ------------------------------------------

    fn pretrain_hash(&self, data: &TaskData) -> String {
        ExperimentConfig::slice_hash(&[
            &ExperimentConfig::json_of(&self.cfg.model),
            &ExperimentConfig::json_of(&self.cfg.pretrain),
            &ExperimentConfig::json_of(&self.cfg.precision),
            &self.tasks_hash(),
            &self.cfg.seed.to_string(),
            &data.tokenizer.vocab_size().to_string(),
        ])
    }

    pub fn stage_pretrain(&self, data: &TaskData) -> Result<TransformerWeights> {
        self.stage_pretrain_inner(data).map_err(Self::stage_err("pretrain", self.cfg.seed))
    }

    fn stage_pretrain_inner(&self, data: &TaskData) -> Result<TransformerWeights> {
        let hash = self.pretrain_hash(data);
        let ckpt = self.out.join("checkpoints").join("base.ckpt");
        let config = self.cfg.model.to_model_config(data.tokenizer.vocab_size());
        if self.stage_is_fresh("pretrain", &hash, &[ckpt.clone()]) {
            let (_, tensors) = load_checkpoint(&ckpt)?;
            return TransformerWeights::from_named(config, &tensors, self.cfg.precision);
        }
        let opts = PretrainOpts {
            steps: self.cfg.pretrain.steps,
            batch_size: self.cfg.pretrain.batch_size,
            lr: self.cfg.pretrain.lr,
            seed: self.cfg.seed,
            precision: self.cfg.precision,
        };
        log::info!("pretraining base model: {} steps", opts.steps);
        let outcome = pretrain_base(config, &data.pretrain_corpus, &data.tokenizer, &opts)?;
        let named = collect_named(
            outcome
                .weights
                .named_tensors()
                .into_iter()
                .map(|(n, s, d)| (n, s, d.to_vec())),
        )?;
        save_checkpoint(&named, self.cfg.precision, &ckpt)?;

        // quality telemetry: copy warm-up accuracy and zero-shot hard accuracy
        let copy: Vec<Sample> = data
            .pretrain_corpus
            .iter()
            .filter(|s| s.family == crate::tasks::TaskFamily::Copy)
            .take(100)
            .cloned()
            .collect();
        let copy_acc = if copy.is_empty() {
            f64::NAN
        } else {
            next_token_accuracy(&outcome.weights, &copy, &data.tokenizer, Supervision::AnswerOnly, self.cfg.precision)?
        };
        self.write_meta(
            "pretrain",
            &hash,
            serde_json::json!({
                "content_hash": outcome.weights.content_hash(),
                "first_loss": outcome.loss_trace.first(),
                "final_loss": outcome.loss_trace.last(),
                "copy_next_token_accuracy": copy_acc,
            }),
        )?;
        if copy_acc.is_finite() && copy_acc < 0.99 {
            log::warn!("copy warm-up next-token accuracy {copy_acc:.3} is below the 0.99 target");
        }
        Ok(outcome.weights)
    }

    // ---- stage: difficulty labels ------------------------------------------

    fn labels_hash(&self, base: &TransformerWeights) -> String {
        ExperimentConfig::slice_hash(&[
            &self.tasks_hash(),
            &base.content_hash(),
            &ExperimentConfig::json_of(&self.cfg.router),
            &self.cfg.seed.to_string(),
        ])
    }

    pub fn stage_labels(
        &self,
        data: &TaskData,
        base: &TransformerWeights,
    ) -> Result<BTreeMap<String, Vec<DifficultyLabel>>> {
        self.stage_labels_inner(data, base).map_err(Self::stage_err("label", self.cfg.seed))
    }

    fn stage_labels_inner(
        &self,
        data: &TaskData,
        base: &TransformerWeights,
    ) -> Result<BTreeMap<String, Vec<DifficultyLabel>>> {
        let hash = self.labels_hash(base);
        let paths: Vec<PathBuf> = data
            .splits
            .iter()
            .map(|(spec, _, _)| {
                self.out.join("labels").join(format!("{}.labels.jsonl", spec.family.name()))
            })
            .collect();
        let mut out = BTreeMap::new();
        if self.stage_is_fresh("labels", &hash, &paths) {
            for ((spec, _, _), path) in data.splits.iter().zip(&paths) {
                out.insert(spec.family.name().to_string(), read_jsonl(path, LABELS_FORMAT)?);
            }
            return Ok(out);
        }
        for ((spec, train, _), path) in data.splits.iter().zip(&paths) {
            let opts = LabelOpts {
                tau: self.cfg.router.tau_for(spec.family),
                seed: self.cfg.seed,
                precision: self.cfg.precision,
                max_new: self.cfg.router.label_max_new,
            };
            log::info!("labeling {} train samples for {}", train.len(), spec.family.name());
            let labels = label_difficulty(base, &data.tokenizer, train, &opts)?;
            write_jsonl(path, LABELS_FORMAT, &labels)?;
            out.insert(spec.family.name().to_string(), labels);
        }
        self.write_meta("labels", &hash, serde_json::json!({}))?;
        Ok(out)
    }

    // ---- stage: router training --------------------------------------------

    pub fn stage_router(
        &self,
        data: &TaskData,
        base: &TransformerWeights,
        labels: &BTreeMap<String, Vec<DifficultyLabel>>,
    ) -> Result<BTreeMap<String, RouterWeights>> {
        self.stage_router_inner(data, base, labels)
            .map_err(Self::stage_err("train-router", self.cfg.seed))
    }

    fn stage_router_inner(
        &self,
        data: &TaskData,
        base: &TransformerWeights,
        labels: &BTreeMap<String, Vec<DifficultyLabel>>,
    ) -> Result<BTreeMap<String, RouterWeights>> {
        let hash = ExperimentConfig::slice_hash(&[
            &self.labels_hash(base),
            &ExperimentConfig::json_of(&self.cfg.router),
        ]);
        let mut out = BTreeMap::new();
        let paths: Vec<PathBuf> = data
            .splits
            .iter()
            .map(|(spec, _, _)| {
                self.out
                    .join("checkpoints")
                    .join(format!("router-{}.ckpt", spec.family.name()))
            })
            .collect();
        if self.stage_is_fresh("router", &hash, &paths) {
            for ((spec, _, _), path) in data.splits.iter().zip(&paths) {
                let (_, tensors) = load_checkpoint(path)?;
                out.insert(spec.family.name().to_string(), RouterWeights::from_named(&tensors)?);
            }
            return Ok(out);
        }
        let mut accuracies = serde_json::Map::new();
        for ((spec, train, _), path) in data.splits.iter().zip(&paths) {
            let family = spec.family.name();
            let family_labels = labels
                .get(family)
                .ok_or_else(|| Error::Router(format!("no labels for {family}")))?;
            let balanced = balance_classes(family_labels, self.cfg.seed)?;
            let by_id: BTreeMap<&str, &Sample> =
                train.iter().map(|s| (s.id.as_str(), s)).collect();
            let samples: Vec<Sample> = balanced
                .iter()
                .map(|l| {
                    by_id
                        .get(l.sample_id.as_str())
                        .map(|s| (*s).clone())
                        .ok_or_else(|| Error::Router(format!("label for unknown sample {}", l.sample_id)))
                })
                .collect::<Result<_>>()?;
            let pooled = pooled_for_samples(base, &data.tokenizer, &samples, self.cfg.precision)?;
            let examples: Vec<(Vec<f64>, usize)> = pooled
                .into_iter()
                .zip(balanced.iter())
                .map(|(h, l)| {
                    let class = match l.class {
                        DifficultyBucket::Easy => 0,
                        DifficultyBucket::Hard => 1,
                    };
                    (h, class)
                })
                .collect();
            let opts = RouterTrainOpts {
                sigma: self.cfg.router.sigma,
                hidden: self.cfg.router.hidden,
                epochs: self.cfg.router.epochs,
                lr: self.cfg.router.lr,
                seed: self.cfg.seed,
                precision: self.cfg.precision,
                rank_table: self.cfg.router.rank_table.clone(),
                holdout_fraction: self.cfg.router.holdout_fraction,
            };
            let trained = train_router(&examples, &opts)?;
            log::info!(
                "router for {family}: holdout accuracy {:.3} over {} balanced samples",
                trained.holdout_accuracy,
                examples.len()
            );
            let named = collect_named(trained.weights.named_tensors())?;
            save_checkpoint(&named, self.cfg.precision, path)?;
            accuracies.insert(
                family.to_string(),
                serde_json::json!({
                    "holdout_accuracy": trained.holdout_accuracy,
                    "balanced_size": examples.len(),
                }),
            );
            out.insert(family.to_string(), trained.weights);
        }
        self.write_meta("router", &hash, serde_json::Value::Object(accuracies))?;
        Ok(out)
    }

    // ---- stage: per-policy fine-tune + eval ---------------------------------

    fn method_hash(
        &self,
        base: &TransformerWeights,
        spec: &PolicySpec,
        family: &str,
        router: Option<&RouterWeights>,
    ) -> String {
        let router_tag = router
            .map(|r| ExperimentConfig::json_of(&r.named_tensors()))
            .unwrap_or_default();
        ExperimentConfig::slice_hash(&[
            &base.content_hash(),
            &self.tasks_hash(),
            &ExperimentConfig::json_of(&self.cfg.adapters),
            &ExperimentConfig::json_of(&self.cfg.finetune),
            &ExperimentConfig::json_of(&self.cfg.eval),
            &ExperimentConfig::json_of(spec),
            family,
            &router_tag,
            &self.cfg.seed.to_string(),
        ])
    }

    #[allow(clippy::too_many_arguments)]
    fn run_method_on_family(
        &self,
        data: &TaskData,
        base: &TransformerWeights,
        spec: &PolicySpec,
        task: &TaskSpec,
        train: &[Sample],
        eval_set: &[Sample],
        router: Option<&RouterWeights>,
    ) -> Result<(EvalSummary, FinetuneReport)> {
        let family = task.family.name();
        let registry = PolicyRegistry::builtin();
        let policy = registry.build(spec, &BuildResources { router })?;
        let slug = slugify(&policy.descriptor());
        let stage_name = format!("method-{family}-{slug}");
        let hash = self.method_hash(base, spec, family, router);
        let ckpt = self.out.join("checkpoints").join(format!("adapters-{family}-{slug}.ckpt"));
        let report_path = self.out.join("reports").join(format!("finetune-{family}-{slug}.json"));
        let eval_path = self.out.join("reports").join(format!("eval-{family}-{slug}.json"));

        if self.stage_is_fresh(&stage_name, &hash, &[ckpt.clone(), report_path.clone(), eval_path.clone()]) {
            let summary: EvalSummary = serde_json::from_str(&std::fs::read_to_string(&eval_path)?)
                .map_err(|e| Error::Checkpoint(format!("bad cached eval summary: {e}")))?;
            let report: FinetuneReport =
                serde_json::from_str(&std::fs::read_to_string(&report_path)?)
                    .map_err(|e| Error::Checkpoint(format!("bad cached finetune report: {e}")))?;
            return Ok((summary, report));
        }

        let mut adapter_set = AdapterSet::init(
            base.config.n_layers,
            base.config.d_model,
            &self.cfg.adapters.targets,
            self.cfg.adapters.r_max,
            self.cfg.adapters.alpha_base,
            self.cfg.seed,
            self.cfg.precision,
        );
        let ft_opts = FinetuneOpts {
            steps: self.cfg.finetune.steps,
            batch_size: self.cfg.finetune.batch_size,
            lr: self.cfg.finetune.lr,
            momentum: self.cfg.finetune.momentum,
            clip_norm: self.cfg.finetune.clip_norm,
            seed: self.cfg.seed,
            precision: self.cfg.precision,
        };
        log::info!("fine-tuning {} on {family}", policy.descriptor());
        let mut report = finetune(base, &data.tokenizer, &mut adapter_set, policy.as_ref(), train, &ft_opts)?;
        let named: NamedTensors = collect_named(
            adapter_set
                .named_tensors()
                .into_iter()
                .map(|(n, s, d)| (n, s, d.to_vec())),
        )?;
        save_checkpoint(&named, self.cfg.precision, &ckpt)?;
        report.checkpoint = Some(ckpt.display().to_string());

        let ev_opts = EvalOpts {
            batch_size: self.cfg.eval.batch_size,
            max_new: self.cfg.eval.max_new,
            seed: self.cfg.seed,
            precision: self.cfg.precision,
            threads: self.cfg.threads,
        };
        let summary = evaluate(base, &data.tokenizer, &adapter_set, policy.as_ref(), eval_set, task, &ev_opts)?;
        std::fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report"))?;
        std::fs::write(&eval_path, serde_json::to_string_pretty(&summary).expect("summary"))?;
        self.write_meta(&stage_name, &hash, serde_json::json!({ "mean": summary.mean }))?;
        Ok((summary, report))
    }

    pub fn stage_methods(
        &self,
        data: &TaskData,
        base: &TransformerWeights,
        routers: &BTreeMap<String, RouterWeights>,
    ) -> Result<Vec<MethodOutcome>> {
        self.stage_methods_inner(data, base, routers)
            .map_err(Self::stage_err("finetune", self.cfg.seed))
    }

    fn stage_methods_inner(
        &self,
        data: &TaskData,
        base: &TransformerWeights,
        routers: &BTreeMap<String, RouterWeights>,
    ) -> Result<Vec<MethodOutcome>> {
        let layout = crate::adapters::AdapterLayout::new(
            base.config.n_layers,
            base.config.d_model,
            &self.cfg.adapters.targets,
        );
        let mut outcomes = Vec::new();
        for spec in &self.cfg.policies {
            let mut per_family = BTreeMap::new();
            let mut reports = BTreeMap::new();
            let mut descriptor = String::new();
            for (task, train, eval_set) in &data.splits {
                let family = task.family.name();
                let router = routers.get(family);
                if spec.kind == "flexi" && router.is_none() {
                    return Err(Error::Policy(format!("no trained router for {family}")));
                }
                let (summary, report) =
                    self.run_method_on_family(data, base, spec, task, train, eval_set, router)?;
                descriptor = summary.policy.clone();
                per_family.insert(family.to_string(), summary);
                reports.insert(family.to_string(), report);
            }
            let top_rank = per_family
                .values()
                .flat_map(|s| s.rank_histogram.keys().copied())
                .chain(spec.rank.into_iter())
                .chain(spec.range.map(|(_, hi)| hi))
                .chain(spec.inference_rank.into_iter())
                .max()
                .unwrap_or(self.cfg.adapters.r_max);
            outcomes.push(MethodOutcome {
                spec: spec.clone(),
                descriptor,
                capacity_params: crate::adapters::count_params(&layout, top_rank),
                per_family,
                finetune_reports: reports,
            });
        }
        Ok(outcomes)
    }

    /// The full pipeline: tasks -> pretrain -> labels -> routers -> methods
    /// -> report. Every stage is resumable from its artifact.
    pub fn run(&self) -> Result<RunArtifacts> {
        let data = self.stage_tasks()?;
        let base = self.stage_pretrain(&data)?;
        let needs_router = self.cfg.policies.iter().any(|p| p.kind == "flexi");
        let routers = if needs_router {
            let labels = self.stage_labels(&data, &base)?;
            self.stage_router(&data, &base, &labels)?
        } else {
            BTreeMap::new()
        };
        let outcomes = self.stage_methods(&data, &base, &routers)?;
        let rows: Vec<MethodRow> = outcomes
            .iter()
            .map(|o| MethodRow {
                descriptor: o.descriptor.clone(),
                capacity_params: o.capacity_params,
                per_family: o.per_family.clone(),
            })
            .collect();
        let report = emit_report(&rows, &self.out.join("reports"))
            .map_err(Self::stage_err("report", self.cfg.seed))?;
        Ok(RunArtifacts { out_dir: self.out.clone(), outcomes, report })
    }
}
