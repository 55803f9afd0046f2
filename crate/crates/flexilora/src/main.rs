//! Command-line face of the laboratory: stage subcommands, the full
//! pipeline, and the invariant selftest.
//!
//! Exit codes: 0 success, 1 config error, 2 runtime error, 3 selftest
//! failure.

use clap::{Args, Parser, Subcommand};
use flexilora::error::Result;
use flexilora::harness::{selftest_to_error, run_selftest, Experiment, ExperimentConfig};
use flexilora::numcore::Precision;
use flexilora::policy::PolicySpec;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "flexilora", version, about = "Input-adaptive low-rank adaptation laboratory")]
struct Cli {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the run precision.
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Evaluation-only parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate task splits and the pretraining corpus.
    GenTasks,
    /// Pretrain the base model (or load the cached checkpoint).
    Pretrain,
    /// Zero-shot difficulty labeling of the train splits.
    Label,
    /// Train the per-family difficulty routers.
    TrainRouter,
    /// Fine-tune adapters under one policy (or every configured policy).
    Finetune(PolicyArgs),
    /// Evaluate fine-tuned policies on the eval splits.
    Eval(PolicyArgs),
    /// Emit the comparison report from cached stage artifacts.
    Report,
    /// Run the full pipeline: tasks, pretrain, label, router, methods, report.
    Run,
    /// Run the built-in invariant suites.
    Selftest,
}

#[derive(Args, Clone, Default)]
struct PolicyArgs {
    /// Restrict to one policy kind: lora | dylora | dylora+ | flexi.
    #[arg(long)]
    policy: Option<String>,

    /// Rank for the lora policy.
    #[arg(long)]
    rank: Option<usize>,

    /// Rank range "LO,HI" for dylora / dylora+.
    #[arg(long, value_parser = parse_range)]
    range: Option<(usize, usize)>,

    /// Inference rank for dylora.
    #[arg(long)]
    inference_rank: Option<usize>,

    /// Class-to-rank table "a,b" for flexi (must match the trained router).
    #[arg(long, value_parser = parse_rank_set)]
    rank_set: Option<Vec<usize>>,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected LO,HI".into());
    }
    let lo = parts[0].trim().parse().map_err(|_| "bad LO")?;
    let hi = parts[1].trim().parse().map_err(|_| "bad HI")?;
    Ok((lo, hi))
}

fn parse_rank_set(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad rank '{p}'")))
        .collect()
}

impl PolicyArgs {
    fn to_spec(&self) -> Option<PolicySpec> {
        let kind = self.policy.clone()?;
        Some(PolicySpec {
            kind,
            rank: self.rank,
            range: self.range,
            inference_rank: self.inference_rank,
            rank_table: self.rank_set.clone(),
        })
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &cli.precision {
        cfg.precision = Precision::parse(p)?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(threads) = cli.threads {
        cfg.threads = Some(threads);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Selftest => {
            let report = run_selftest()?;
            print!("{}", report.render());
            return selftest_to_error(&report);
        }
        Command::GenTasks => {
            let exp = Experiment::new(load_config(cli)?)?;
            let data = exp.stage_tasks()?;
            println!(
                "generated {} task split(s) and a {}-sample pretraining corpus (vocab {})",
                data.splits.len(),
                data.pretrain_corpus.len(),
                data.tokenizer.vocab_size()
            );
        }
        Command::Pretrain => {
            let exp = Experiment::new(load_config(cli)?)?;
            let data = exp.stage_tasks()?;
            let base = exp.stage_pretrain(&data)?;
            println!("base model ready: content hash {}", base.content_hash());
        }
        Command::Label => {
            let exp = Experiment::new(load_config(cli)?)?;
            let data = exp.stage_tasks()?;
            let base = exp.stage_pretrain(&data)?;
            let labels = exp.stage_labels(&data, &base)?;
            for (family, ls) in &labels {
                let easy = ls
                    .iter()
                    .filter(|l| l.class == flexilora::tasks::DifficultyBucket::Easy)
                    .count();
                println!("{family}: {easy} easy / {} hard", ls.len() - easy);
            }
        }
        Command::TrainRouter => {
            let exp = Experiment::new(load_config(cli)?)?;
            let data = exp.stage_tasks()?;
            let base = exp.stage_pretrain(&data)?;
            let labels = exp.stage_labels(&data, &base)?;
            let routers = exp.stage_router(&data, &base, &labels)?;
            println!("trained {} router(s)", routers.len());
        }
        Command::Finetune(args) | Command::Eval(args) => {
            let mut cfg = load_config(cli)?;
            if let Some(spec) = args.to_spec() {
                cfg.policies = vec![spec];
                cfg.validate()?;
            }
            let exp = Experiment::new(cfg)?;
            let artifacts = exp.run()?;
            println!("report: {}", artifacts.report.table.display());
            print!("{}", std::fs::read_to_string(&artifacts.report.table)?);
        }
        Command::Report | Command::Run => {
            let exp = Experiment::new(load_config(cli)?)?;
            let artifacts = exp.run()?;
            println!("report: {}", artifacts.report.table.display());
            print!("{}", std::fs::read_to_string(&artifacts.report.table)?);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
