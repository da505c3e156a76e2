//! Balanced pair sampling and the end-to-end training loop.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::dataset::DescriptorDataset;
use crate::descriptor::{select_top_m, RawDescriptorSet};
use crate::error::{Error, Result};
use crate::learning::backprop::{backward_pair, forward_pair, LossSpec};
use crate::learning::optim::{adamw_step, OptimState};
use crate::model::{Ablation, ModelParams};
use crate::transport::OtConfig;

/// One labeled training pair; positive means both images show the same
/// instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPair {
    pub query_id: String,
    pub candidate_id: String,
    pub label: bool,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Projected descriptor dimension.
    pub d: usize,
    pub ln_eps: f64,
    pub epochs: usize,
    /// 0 derives one pass over the pool per epoch.
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Per-batch descriptor count is drawn uniformly from this inclusive
    /// range (capped by what an image actually has).
    pub m_range: (usize, usize),
    pub lr_peak: f64,
    /// Warmup length as a fraction of total steps.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ot: OtConfig,
    /// Temperature of the fixed loss head used when `g` is ablated.
    pub tau: f64,
    pub ablation: Ablation,
    pub seed: u64,
    pub threads: usize,
    /// When set, a checkpoint is written after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 128,
            ln_eps: 1e-5,
            epochs: 10,
            steps_per_epoch: 0,
            batch_size: 200,
            m_range: (100, 400),
            lr_peak: 5e-4,
            warmup_frac: 0.1,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ot: OtConfig::default(),
            tau: 10.0,
            ablation: Ablation::default(),
            seed: 0,
            threads: 1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ot.validate()?;
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.m_range.0 < 1 || self.m_range.0 > self.m_range.1 {
            return Err(Error::Config(format!(
                "invalid descriptor count range {:?}",
                self.m_range
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.warmup_frac >= 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!(
                "warmup_frac must be in [0, 1), got {}",
                self.warmup_frac
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// In-memory training inputs: descriptor sets for every id the pairs touch,
/// plus the labeled pool.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub images: HashMap<String, RawDescriptorSet>,
    pub pairs: Vec<TrainPair>,
}

impl TrainData {
    /// Load every image referenced by the pair pool, keeping at most
    /// `max_m` strongest descriptors per image.
    pub fn from_dataset(ds: &DescriptorDataset, pairs: Vec<TrainPair>, max_m: usize) -> Result<Self> {
        let mut ids: HashSet<&str> = HashSet::new();
        for p in &pairs {
            ids.insert(&p.query_id);
            ids.insert(&p.candidate_id);
        }
        let mut images = HashMap::with_capacity(ids.len());
        for id in ids {
            let raw = ds.read_image(id)?;
            let raw = if raw.count() > max_m {
                select_top_m(&raw, max_m)
            } else {
                raw
            };
            images.insert(id.to_string(), raw);
        }
        Ok(TrainData { images, pairs })
    }

    pub fn from_sets(sets: Vec<RawDescriptorSet>, pairs: Vec<TrainPair>) -> Self {
        TrainData {
            images: sets.into_iter().map(|s| (s.image_id.clone(), s)).collect(),
            pairs,
        }
    }

    fn descriptor_dim(&self) -> Result<usize> {
        self.images
            .values()
            .next()
            .map(|s| s.dim())
            .ok_or_else(|| Error::Config("training data has no images".into()))
    }
}

/// Draw a balanced batch (half positive, half negative, with replacement)
/// plus the descriptor count every image uses for this batch.
pub fn sample_batch(
    pool: &[TrainPair],
    batch_size: usize,
    m_range: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(Vec<TrainPair>, usize)> {
    let positives: Vec<&TrainPair> = pool.iter().filter(|p| p.label).collect();
    let negatives: Vec<&TrainPair> = pool.iter().filter(|p| !p.label).collect();
    if positives.is_empty() {
        return Err(Error::Config("pair pool has no positive pairs".into()));
    }
    if negatives.is_empty() {
        return Err(Error::Config("pair pool has no negative pairs".into()));
    }
    let half = batch_size / 2;
    let mut batch = Vec::with_capacity(half * 2);
    for _ in 0..half {
        batch.push(positives[rng.gen_range(0..positives.len())].clone());
    }
    for _ in 0..half {
        batch.push(negatives[rng.gen_range(0..negatives.len())].clone());
    }
    let m = rng.gen_range(m_range.0..=m_range.1);
    Ok((batch, m))
}

/// JSON-lines pair-pool files: `{"query": id, "candidate": id, "label": 0|1}`.
pub fn write_pairs(pairs: &[TrainPair], path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for p in pairs {
        let line = serde_json::json!({
            "query": p.query_id,
            "candidate": p.candidate_id,
            "label": if p.label { 1 } else { 0 },
        });
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Config(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: impl AsRef<std::path::Path>) -> Result<Vec<TrainPair>> {
    use std::io::BufRead;
    let path = path.as_ref();
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |detail: String| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            detail,
        };
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let field = |name: &str| -> Result<String> {
            Ok(v.get(name)
                .and_then(|x| x.as_str())
                .ok_or_else(|| parse_err(format!("missing string field {name:?}")))?
                .to_string())
        };
        let label = v
            .get("label")
            .and_then(|x| x.as_u64())
            .ok_or_else(|| parse_err("missing 0/1 field \"label\"".into()))?;
        pairs.push(TrainPair {
            query_id: field("query")?,
            candidate_id: field("candidate")?,
            label: label != 0,
        });
    }
    Ok(pairs)
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub curve: Vec<LossRecord>,
}

/// Mean loss and accumulated gradients over one batch. Pairs are split into
/// `threads` contiguous chunks; chunk results merge in chunk order, so runs
/// are deterministic for a fixed seed and thread count.
fn batch_gradients(
    model: &ModelParams,
    images: &HashMap<String, RawDescriptorSet>,
    batch: &[TrainPair],
    m: usize,
    ot: &OtConfig,
    loss_spec: &LossSpec,
    threads: usize,
) -> Result<(f64, ModelParams)> {
    // Truncate each referenced image once per batch.
    let mut prepared: HashMap<&str, RawDescriptorSet> = HashMap::new();
    for pair in batch {
        for id in [pair.query_id.as_str(), pair.candidate_id.as_str()] {
            if !prepared.contains_key(id) {
                let raw = images
                    .get(id)
                    .ok_or_else(|| Error::NotFound(id.to_string()))?;
                let raw = if raw.count() > m { select_top_m(raw, m) } else { raw.clone() };
                prepared.insert(id, raw);
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    let run_chunk = |chunk: &[TrainPair]| -> Result<(f64, ModelParams)> {
        let mut grads = model.zeros_like();
        let mut loss_sum = 0.0;
        for pair in chunk {
            let q = &prepared[pair.query_id.as_str()];
            let x = &prepared[pair.candidate_id.as_str()];
            let trace = forward_pair(model, q, x, ot, loss_spec, pair.label)?;
            loss_sum += trace.loss;
            backward_pair(model, &trace, loss_spec, scale, &mut grads);
        }
        Ok((loss_sum, grads))
    };

    if threads <= 1 || batch.len() < 2 * threads {
        let (loss_sum, grads) = run_chunk(batch)?;
        return Ok((loss_sum * scale, grads));
    }

    let chunk_len = batch.len().div_ceil(threads);
    let chunks: Vec<&[TrainPair]> = batch.chunks(chunk_len).collect();
    let results: Vec<Result<(f64, ModelParams)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| scope.spawn(|| run_chunk(chunk)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });

    let mut total = model.zeros_like();
    let mut loss_sum = 0.0;
    let mut flat = total.flatten();
    for r in results {
        let (l, g) = r?;
        loss_sum += l;
        for (acc, v) in flat.iter_mut().zip(g.flatten()) {
            *acc += v;
        }
    }
    total.assign_flat(&flat);
    Ok((loss_sum * scale, total))
}

/// Train all model parameters; returns the final model and the per-step
/// loss curve. A checkpoint is written after every epoch when the config
/// names a directory.
pub fn train(data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.pairs.is_empty() {
        return Err(Error::Config("training pool is empty".into()));
    }
    let d_prime = data.descriptor_dim()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let score_scale = (cfg.m_range.0 + cfg.m_range.1) as f64 / 2.0;
    let mut model = ModelParams::init(d_prime, cfg.d, cfg.ln_eps, score_scale, cfg.ablation, &mut rng);
    let loss_spec = LossSpec { tau: cfg.tau };

    let steps_per_epoch = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        (data.pairs.len().div_ceil(cfg.batch_size)).max(1)
    };
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let warmup_steps = (total_steps as f64 * cfg.warmup_frac).round() as u64;
    let mut opt = OptimState::new(
        &model,
        cfg.lr_peak,
        warmup_steps,
        total_steps,
        cfg.weight_decay,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    );

    let mut curve = Vec::with_capacity(total_steps as usize);
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let (batch, m) = sample_batch(&data.pairs, cfg.batch_size, cfg.m_range, &mut rng)?;
            let (loss, grads) = batch_gradients(
                &model,
                &data.images,
                &batch,
                m,
                &cfg.ot,
                &loss_spec,
                cfg.threads,
            )?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "NaN loss at step {}; batch starts with pair ({}, {})",
                    opt.step, batch[0].query_id, batch[0].candidate_id
                )));
            }
            let lr = adamw_step(&mut model, &grads, &mut opt);
            if !model.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite parameters after step {}; batch starts with pair ({}, {})",
                    opt.step, batch[0].query_id, batch[0].candidate_id
                )));
            }
            curve.push(LossRecord {
                step: opt.step,
                lr,
                loss,
            });
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            model.save(dir.join(format!("epoch_{:03}.elvc", epoch + 1)))?;
        }
    }
    Ok(TrainOutcome { model, curve })
}
