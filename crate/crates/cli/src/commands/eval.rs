//! `elvis eval`: metric reports over ranking files.

use std::io::Write;

use elvis_core::error::Result;
use elvis_core::eval::{map_at_k, mean_average_precision, read_ground_truth, read_rankings};

use crate::config::{parse_metric, RunConfig};

pub fn run(cfg: &RunConfig) -> Result<()> {
    let rankings_path = cfg.require("rankings", &cfg.rankings)?;
    let gt_path = cfg.require("ground_truth", &cfg.ground_truth)?;
    let lists = read_rankings(&rankings_path)?;
    let gt = read_ground_truth(&gt_path)?;

    let value = match parse_metric(&cfg.metric)? {
        None => mean_average_precision(&lists, &gt)?,
        Some(k) => map_at_k(&lists, &gt, k)?,
    };
    println!("{} = {:.6}", cfg.metric, value);

    if let Some(out_dir) = &cfg.out_dir {
        std::fs::create_dir_all(out_dir)?;
        let dataset = rankings_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "rankings".into());
        let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("metrics.csv"))?);
        writeln!(csv, "dataset,method,metric,value")?;
        writeln!(csv, "{dataset},{},{},{value}", cfg.method, cfg.metric)?;
        csv.flush()?;
        cfg.write_echo(out_dir)?;
    }
    Ok(())
}
