//! `elvis bench`: single-threaded per-pair latency with the database side
//! precomputed, plus the learnable parameter counts.

use std::io::Write;

use elvis_core::error::Result;
use elvis_core::inference::{run_benchmark, BenchConfig};
use elvis_core::model::ModelParams;

use crate::config::RunConfig;

pub fn run(cfg: &RunConfig) -> Result<()> {
    let bench_cfg = BenchConfig {
        m: cfg.m,
        d: cfg.d,
        iterations: cfg.iterations,
        batch_size: cfg.bench_batch_size,
        batches: cfg.bench_batches,
        lambda: cfg.lambda,
        seed: cfg.seed,
        d_prime: cfg.d_prime,
    };
    let model = match &cfg.checkpoint {
        Some(path) => Some(ModelParams::load(path)?),
        None => None,
    };
    let report = run_benchmark(&bench_cfg, model.as_ref())?;

    println!("pairs = {}", report.pairs);
    println!("batch_size = {}", report.batch_size);
    println!("batches = {}", report.batches);
    println!("m = {}", report.m);
    println!("d = {}", report.d);
    println!("iterations = {}", report.iterations);
    println!("mean_us_per_pair = {:.2}", report.mean_us_per_pair);
    println!("median_us_per_pair = {:.2}", report.median_us_per_pair);
    println!("total_seconds = {:.3}", report.total_seconds);
    println!("param_count = {}", report.param_count);
    println!(
        "param_count_without_projection = {}",
        report.param_count_without_projection
    );

    if let Some(out_dir) = &cfg.out_dir {
        std::fs::create_dir_all(out_dir)?;
        let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("bench.csv"))?);
        writeln!(
            csv,
            "m,d,iterations,batch_size,batches,pairs,mean_us_per_pair,median_us_per_pair,param_count,param_count_without_projection"
        )?;
        writeln!(
            csv,
            "{},{},{},{},{},{},{:.2},{:.2},{},{}",
            report.m,
            report.d,
            report.iterations,
            report.batch_size,
            report.batches,
            report.pairs,
            report.mean_us_per_pair,
            report.median_us_per_pair,
            report.param_count,
            report.param_count_without_projection
        )?;
        csv.flush()?;
        cfg.write_echo(out_dir)?;
    }
    Ok(())
}
