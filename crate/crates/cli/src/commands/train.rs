//! `elvis train`: fit all model parameters on a labeled pair pool.

use std::io::Write;

use elvis_core::dataset::DescriptorDataset;
use elvis_core::error::Result;
use elvis_core::learning::{read_pairs, train, TrainConfig, TrainData};

use crate::config::RunConfig;

pub fn run(cfg: &RunConfig) -> Result<()> {
    let out_dir = cfg.require("out_dir", &cfg.out_dir)?;
    let descriptors = cfg.require("descriptors", &cfg.descriptors)?;
    let pairs_path = cfg.require("pairs", &cfg.pairs)?;
    std::fs::create_dir_all(&out_dir)?;

    let ds = DescriptorDataset::open(&descriptors)?;
    let pairs = read_pairs(&pairs_path)?;
    let data = TrainData::from_dataset(&ds, pairs, cfg.m_max.max(cfg.m_min))?;

    let train_cfg = TrainConfig {
        d: cfg.d,
        ln_eps: cfg.ln_eps,
        epochs: cfg.epochs,
        steps_per_epoch: cfg.steps_per_epoch,
        batch_size: cfg.batch_size,
        m_range: (cfg.m_min, cfg.m_max),
        lr_peak: cfg.lr_peak,
        warmup_frac: cfg.warmup_frac,
        weight_decay: cfg.weight_decay,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        adam_eps: cfg.adam_eps,
        ot: cfg.ot(),
        tau: cfg.tau,
        ablation: cfg.ablation(),
        seed: cfg.seed,
        threads: cfg.threads,
        checkpoint_dir: Some(out_dir.clone()),
    };
    let outcome = train(&data, &train_cfg)?;

    let model_path = out_dir.join("model.elvc");
    outcome.model.save(&model_path)?;

    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("loss.csv"))?);
    writeln!(csv, "step,lr,loss")?;
    for rec in &outcome.curve {
        writeln!(csv, "{},{},{}", rec.step, rec.lr, rec.loss)?;
    }
    csv.flush()?;
    cfg.write_echo(&out_dir)?;

    let mean_first = mean_epoch_loss(&outcome.curve, cfg.epochs, 0);
    let mean_last = mean_epoch_loss(&outcome.curve, cfg.epochs, cfg.epochs - 1);
    println!(
        "trained {} parameters for {} epochs ({} steps); epoch-1 mean loss {:.4}, final-epoch mean loss {:.4} -> {}",
        outcome.model.param_count(),
        cfg.epochs,
        outcome.curve.len(),
        mean_first,
        mean_last,
        model_path.display()
    );
    Ok(())
}

fn mean_epoch_loss(curve: &[elvis_core::learning::LossRecord], epochs: usize, epoch: usize) -> f64 {
    let per = curve.len() / epochs.max(1);
    if per == 0 {
        return f64::NAN;
    }
    let slice = &curve[epoch * per..(epoch + 1) * per];
    slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
}
