//! `carft` command line: dataset generation, supervised warmup, reinforced
//! fine-tuning (carft-positive / carft-negative / reft), evaluation, and
//! metrics export.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use carft_core::exec::Execution;
use carft_core::model;
use carft_core::task::{self, Sample};
use carft_core::trainer::{self, MetricsRecord, MetricsWriter};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "carft", version, about = "Contrastive reinforced fine-tuning on arithmetic chain-of-thought")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file; command-line overrides win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` or `key=value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset split (keys: n, seed, split, out).
    GenData(CommonArgs),
    /// Supervised warmup only; equivalent to train with rl_steps=0.
    Sft(CommonArgs),
    /// Full pipeline: SFT, reference snapshot, then RL steps.
    Train(CommonArgs),
    /// Print greedy-decoding accuracy of a checkpoint on a dataset.
    Eval(CommonArgs),
    /// Export plot-ready (step, eval_accuracy) columns from a metrics file.
    ExportMetrics(CommonArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::GenData(a) => gen_data(load(&a)?),
        Cmd::Sft(a) => {
            let mut cfg = load(&a)?;
            cfg.train.rl_steps = 0;
            train_pipeline(cfg)
        }
        Cmd::Train(a) => train_pipeline(load(&a)?),
        Cmd::Eval(a) => eval(load(&a)?),
        Cmd::ExportMetrics(a) => export_metrics(load(&a)?),
    }
}

fn load(args: &CommonArgs) -> Result<RunConfig> {
    config::load(args.config.as_deref(), &args.overrides)
}

fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| anyhow!("missing required key {key:?}"))
}

fn require_existing(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = require(path, key)?;
    if !p.exists() {
        bail!("{key}: path {} does not exist", p.display());
    }
    Ok(p)
}

fn echo(cfg: &RunConfig) {
    print!("{}", config::echo_text(cfg));
}

fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    task::load_dataset(path).with_context(|| format!("dataset {}", path.display()))
}

fn gen_data(cfg: RunConfig) -> Result<()> {
    let out = require(&cfg.out, "out")?;
    let samples = task::gen_dataset(cfg.n, cfg.train.seed, cfg.split)?;
    task::save_dataset(&out, &samples)?;
    echo(&cfg);
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn train_pipeline(cfg: RunConfig) -> Result<()> {
    let train_path = require_existing(&cfg.dataset, "dataset")?;
    let test_path = require_existing(&cfg.test_dataset, "test_dataset")?;
    let train_set = load_samples(&train_path)?;
    let test_set = load_samples(&test_path)?;
    let initial = match &cfg.checkpoint_in {
        Some(p) => {
            if !p.exists() {
                bail!("checkpoint_in: path {} does not exist", p.display());
            }
            Some(model::load_checkpoint(p)?)
        }
        None => None,
    };

    echo(&cfg);
    let outcome = match &cfg.metrics_out {
        Some(path) => {
            let file = File::create(path)
                .with_context(|| format!("metrics_out {}", path.display()))?;
            let mut metrics = MetricsWriter::new(BufWriter::new(file));
            metrics.config(&config::resolved_entries(&cfg))?;
            trainer::train(
                &cfg.train,
                &train_set,
                &test_set,
                initial,
                &mut metrics,
                cfg.checkpoint_out.as_deref(),
            )?
        }
        None => {
            let mut metrics = MetricsWriter::new(std::io::sink());
            trainer::train(
                &cfg.train,
                &train_set,
                &test_set,
                initial,
                &mut metrics,
                cfg.checkpoint_out.as_deref(),
            )?
        }
    };

    println!("post_sft_accuracy: {:.4}", outcome.post_sft_accuracy);
    if let Some(acc) = outcome.final_accuracy {
        println!("final_accuracy: {acc:.4}");
    }
    if let Some(path) = &cfg.checkpoint_out {
        println!("checkpoint: {}", path.display());
    }
    Ok(())
}

fn eval(cfg: RunConfig) -> Result<()> {
    let ckpt = require_existing(&cfg.checkpoint_in, "checkpoint_in")?;
    let data_path = require_existing(&cfg.dataset, "dataset")?;
    let params = model::load_checkpoint(&ckpt)?;
    let samples = load_samples(&data_path)?;
    let vocab = task::Vocab::arithmetic();
    let accuracy = trainer::evaluate(
        &params,
        &samples,
        &vocab,
        cfg.train.max_new_tokens,
        Execution::default(),
    )?;
    echo(&cfg);
    println!("accuracy: {accuracy:.4}");
    Ok(())
}

fn export_metrics(cfg: RunConfig) -> Result<()> {
    let input = require_existing(&cfg.metrics_in, "metrics_in")?;
    let out = require(&cfg.out, "out")?;
    let text = std::fs::read_to_string(&input)?;
    let records = trainer::parse_metrics(&text)?;
    let mut w = BufWriter::new(File::create(&out)?);
    writeln!(w, "# step\teval_accuracy")?;
    let mut rows = 0;
    for rec in &records {
        if let MetricsRecord::RlStep(m) = rec {
            if let Some(acc) = m.eval_accuracy {
                writeln!(w, "{}\t{}", m.step, acc)?;
                rows += 1;
            }
        }
    }
    w.flush()?;
    echo(&cfg);
    println!("wrote {rows} rows to {}", out.display());
    Ok(())
}
