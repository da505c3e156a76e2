//! One binary wiring the whole pipeline: toy data generation, training,
//! re-ranking, evaluation, latency benchmarking, and vote inspection.
//!
//! Exit codes: 0 success, 2 usage/configuration, 3 data or format problems,
//! 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elvis_core::error::Error;

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "elvis", version, about = "Local-descriptor image similarity: train, re-rank, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic toy retrieval dataset (descriptors, ground
    /// truth, initial rankings, training pairs)
    Gen(Opts),
    /// Train the similarity model on labeled pairs
    Train(Opts),
    /// Re-rank retrieval shortlists with a trained model or a baseline
    Rerank(Opts),
    /// Compute mAP / mAP@K metric reports
    Eval(Opts),
    /// Measure per-pair similarity latency with precomputed database side
    Bench(Opts),
    /// Dump the strongest votes and dustbin gains of one pair
    Inspect(Opts),
}

#[derive(Args)]
struct Opts {
    /// Key=value configuration file applied before any flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Additional key=value overrides, applied after --config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Descriptor dataset (.elvd)
    #[arg(long)]
    descriptors: Option<PathBuf>,
    /// Training pair pool (.jsonl)
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Initial rankings (.jsonl)
    #[arg(long)]
    rankings: Option<PathBuf>,
    /// Ground truth positives (.jsonl)
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Model checkpoint (.elvc)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory; receives results and the effective config echo
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Query image id (inspect)
    #[arg(long)]
    query: Option<String>,
    /// Candidate image id (inspect)
    #[arg(long)]
    candidate: Option<String>,

    /// Scorer: elvis | chamfer | chamfer-ot | none
    #[arg(long)]
    method: Option<String>,
    /// Metric: map | map@K
    #[arg(long)]
    metric: Option<String>,

    /// Entropy weight of the transport solve
    #[arg(long)]
    lambda: Option<f64>,
    /// Sinkhorn iteration count
    #[arg(long)]
    iterations: Option<usize>,
    /// Descriptors kept per image at inference
    #[arg(long)]
    m: Option<usize>,
    /// Projected descriptor dimension
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Peak learning rate
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    m_min: Option<usize>,
    #[arg(long)]
    m_max: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Re-rank depth
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,

    /// Ablation: drop the dustbin row/column entirely
    #[arg(long)]
    no_dustbin: bool,
    /// Ablation: one shared learnable gain instead of the per-descriptor head
    #[arg(long)]
    scalar_gain: bool,
    /// Ablation: identity-then-clamp instead of the learnable vote function
    #[arg(long)]
    no_f: bool,
    /// Ablation: plain BCE on sigmoid(score/tau) instead of the learnable warp
    #[arg(long)]
    no_g: bool,
    /// Ablation: skip the learnable projection, use raw descriptors
    #[arg(long)]
    no_projection: bool,

    // Toy generation.
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    images_per_instance: Option<usize>,
    #[arg(long)]
    descriptor_dim: Option<usize>,
    #[arg(long)]
    descriptors_per_image: Option<usize>,
    #[arg(long)]
    shared_fraction: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    distractors: Option<usize>,

    // Benchmark.
    #[arg(long)]
    bench_batch_size: Option<usize>,
    #[arg(long)]
    bench_batches: Option<usize>,
}

impl Opts {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        for assignment in &self.set {
            let (key, value) = assignment.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects KEY=VALUE, got {assignment:?}"))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }

        macro_rules! merge {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone().into(); })*
            };
        }
        merge!(descriptors, pairs, rankings, ground_truth, checkpoint, out_dir, query, candidate);
        if let Some(v) = &self.method {
            cfg.method = v.clone();
        }
        if let Some(v) = &self.metric {
            cfg.metric = v.clone();
        }
        macro_rules! merge_val {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        merge_val!(
            lambda, iterations, m, d, batch_size, epochs, steps_per_epoch, m_min, m_max, tau, k,
            seed, threads, instances, images_per_instance, descriptor_dim, descriptors_per_image,
            shared_fraction, noise_sigma, distractors, bench_batch_size, bench_batches,
        );
        if let Some(v) = self.lr {
            cfg.lr_peak = v;
        }
        if self.no_dustbin {
            cfg.no_dustbin = true;
        }
        if self.scalar_gain {
            cfg.scalar_gain = true;
        }
        if self.no_f {
            cfg.no_f = true;
        }
        if self.no_g {
            cfg.no_g = true;
        }
        if self.no_projection {
            cfg.no_projection = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::NotFound(_) | Error::Format { .. } | Error::Parse { .. } | Error::Io(_) | Error::Shape { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (opts, run): (&Opts, fn(&RunConfig) -> Result<(), Error>) = match &cli.command {
        Command::Gen(o) => (o, commands::gen::run),
        Command::Train(o) => (o, commands::train::run),
        Command::Rerank(o) => (o, commands::rerank::run),
        Command::Eval(o) => (o, commands::eval::run),
        Command::Bench(o) => (o, commands::bench::run),
        Command::Inspect(o) => (o, commands::inspect::run),
    };
    let cfg = match opts.resolve() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for(&e));
        }
    };
    match run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
