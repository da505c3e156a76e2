//! Plain-text key=value run configuration.
//!
//! Defaults carry the stock hyperparameters; a config file and command-line
//! flags override them in that order. Unknown keys are rejected and every
//! value is range-checked. The effective configuration is echoed into each
//! output directory as `config.cfg`, and feeding that file back through
//! `--config` reproduces the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use elvis_core::error::{Error, Result};
use elvis_core::model::Ablation;
use elvis_core::transport::OtConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Paths.
    pub descriptors: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub rankings: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub query: Option<String>,
    pub candidate: Option<String>,

    // Scoring method and metric.
    pub method: String,
    pub metric: String,

    // Transport and model shape.
    pub lambda: f64,
    pub iterations: usize,
    pub m: usize,
    pub d: usize,
    pub d_prime: usize,
    pub ln_eps: f64,

    // Training.
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub lr_peak: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub tau: f64,

    // Ablation switches.
    pub no_dustbin: bool,
    pub scalar_gain: bool,
    pub no_f: bool,
    pub no_g: bool,
    pub no_projection: bool,

    // Re-ranking and execution.
    pub k: usize,
    pub seed: u64,
    pub threads: usize,

    // Toy data generation.
    pub instances: usize,
    pub images_per_instance: usize,
    pub descriptor_dim: usize,
    pub descriptors_per_image: usize,
    pub shared_fraction: f64,
    pub noise_sigma: f64,
    pub distractors: usize,
    pub positives_per_anchor: usize,
    pub negatives_per_anchor: usize,

    // Benchmark.
    pub bench_batch_size: usize,
    pub bench_batches: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            descriptors: None,
            pairs: None,
            rankings: None,
            ground_truth: None,
            checkpoint: None,
            out_dir: None,
            query: None,
            candidate: None,
            method: "elvis".into(),
            metric: "map@100".into(),
            lambda: 0.1,
            iterations: 10,
            m: 600,
            d: 128,
            d_prime: 768,
            ln_eps: 1e-5,
            epochs: 10,
            steps_per_epoch: 0,
            batch_size: 200,
            m_min: 100,
            m_max: 400,
            lr_peak: 5e-4,
            warmup_frac: 0.1,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            tau: 10.0,
            no_dustbin: false,
            scalar_gain: false,
            no_f: false,
            no_g: false,
            no_projection: false,
            k: 400,
            seed: 0,
            threads: 1,
            instances: 50,
            images_per_instance: 20,
            descriptor_dim: 32,
            descriptors_per_image: 24,
            shared_fraction: 0.5,
            noise_sigma: 0.25,
            distractors: 12,
            positives_per_anchor: 1,
            negatives_per_anchor: 1,
            bench_batch_size: 500,
            bench_batches: 20,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("cannot parse {key} value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("cannot parse {key} value {other:?} as bool"))),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment; unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "descriptors" => self.descriptors = Some(PathBuf::from(value)),
            "pairs" => self.pairs = Some(PathBuf::from(value)),
            "rankings" => self.rankings = Some(PathBuf::from(value)),
            "ground_truth" => self.ground_truth = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "query" => self.query = Some(value.to_string()),
            "candidate" => self.candidate = Some(value.to_string()),
            "method" => self.method = value.to_string(),
            "metric" => self.metric = value.to_string(),
            "lambda" => self.lambda = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "d_prime" => self.d_prime = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "m_min" => self.m_min = parse(key, value)?,
            "m_max" => self.m_max = parse(key, value)?,
            "lr_peak" => self.lr_peak = parse(key, value)?,
            "warmup_frac" => self.warmup_frac = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "no_dustbin" => self.no_dustbin = parse_bool(key, value)?,
            "scalar_gain" => self.scalar_gain = parse_bool(key, value)?,
            "no_f" => self.no_f = parse_bool(key, value)?,
            "no_g" => self.no_g = parse_bool(key, value)?,
            "no_projection" => self.no_projection = parse_bool(key, value)?,
            "k" => self.k = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "instances" => self.instances = parse(key, value)?,
            "images_per_instance" => self.images_per_instance = parse(key, value)?,
            "descriptor_dim" => self.descriptor_dim = parse(key, value)?,
            "descriptors_per_image" => self.descriptors_per_image = parse(key, value)?,
            "shared_fraction" => self.shared_fraction = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "distractors" => self.distractors = parse(key, value)?,
            "positives_per_anchor" => self.positives_per_anchor = parse(key, value)?,
            "negatives_per_anchor" => self.negatives_per_anchor = parse(key, value)?,
            "bench_batch_size" => self.bench_batch_size = parse(key, value)?,
            "bench_batches" => self.bench_batches = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Read `key = value` lines; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                detail: "expected key = value".into(),
            })?;
            self.apply(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                detail: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.m < 1 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        if self.threads < 1 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.m_min < 1 || self.m_min > self.m_max {
            return Err(Error::Config(format!(
                "descriptor range [{}, {}] is invalid",
                self.m_min, self.m_max
            )));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::Config(format!(
                "shared_fraction must be in [0, 1], got {}",
                self.shared_fraction
            )));
        }
        if !["elvis", "chamfer", "chamfer-ot", "none"].contains(&self.method.as_str()) {
            return Err(Error::Config(format!(
                "method must be one of elvis|chamfer|chamfer-ot|none, got {:?}",
                self.method
            )));
        }
        parse_metric(&self.metric)?;
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_dustbin: self.no_dustbin,
            scalar_gain: self.scalar_gain,
            no_f: self.no_f,
            no_g: self.no_g,
            no_projection: self.no_projection,
        }
    }

    pub fn ot(&self) -> OtConfig {
        OtConfig {
            lambda: self.lambda,
            iterations: self.iterations,
            log_domain: true,
        }
    }

    /// Serialize every key; parsing the result reproduces the config.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        if let Some(v) = path(&self.descriptors) {
            kv("descriptors", v);
        }
        if let Some(v) = path(&self.pairs) {
            kv("pairs", v);
        }
        if let Some(v) = path(&self.rankings) {
            kv("rankings", v);
        }
        if let Some(v) = path(&self.ground_truth) {
            kv("ground_truth", v);
        }
        if let Some(v) = path(&self.checkpoint) {
            kv("checkpoint", v);
        }
        if let Some(v) = path(&self.out_dir) {
            kv("out_dir", v);
        }
        if let Some(v) = &self.query {
            kv("query", v.clone());
        }
        if let Some(v) = &self.candidate {
            kv("candidate", v.clone());
        }
        kv("method", self.method.clone());
        kv("metric", self.metric.clone());
        kv("lambda", self.lambda.to_string());
        kv("iterations", self.iterations.to_string());
        kv("m", self.m.to_string());
        kv("d", self.d.to_string());
        kv("d_prime", self.d_prime.to_string());
        kv("ln_eps", self.ln_eps.to_string());
        kv("epochs", self.epochs.to_string());
        kv("steps_per_epoch", self.steps_per_epoch.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("m_min", self.m_min.to_string());
        kv("m_max", self.m_max.to_string());
        kv("lr_peak", self.lr_peak.to_string());
        kv("warmup_frac", self.warmup_frac.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("tau", self.tau.to_string());
        kv("no_dustbin", self.no_dustbin.to_string());
        kv("scalar_gain", self.scalar_gain.to_string());
        kv("no_f", self.no_f.to_string());
        kv("no_g", self.no_g.to_string());
        kv("no_projection", self.no_projection.to_string());
        kv("k", self.k.to_string());
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        kv("instances", self.instances.to_string());
        kv("images_per_instance", self.images_per_instance.to_string());
        kv("descriptor_dim", self.descriptor_dim.to_string());
        kv("descriptors_per_image", self.descriptors_per_image.to_string());
        kv("shared_fraction", self.shared_fraction.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("distractors", self.distractors.to_string());
        kv("positives_per_anchor", self.positives_per_anchor.to_string());
        kv("negatives_per_anchor", self.negatives_per_anchor.to_string());
        kv("bench_batch_size", self.bench_batch_size.to_string());
        kv("bench_batches", self.bench_batches.to_string());
        s
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.cfg"), self.echo())?;
        Ok(())
    }

    pub fn require(&self, what: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        value
            .clone()
            .ok_or_else(|| Error::Config(format!("missing required input: {what}")))
    }
}

/// Parse `map` or `map@K` (e.g. `map@100`).
pub fn parse_metric(metric: &str) -> Result<Option<usize>> {
    if metric == "map" {
        return Ok(None);
    }
    if let Some(k) = metric.strip_prefix("map@") {
        let k: usize = k
            .parse()
            .map_err(|_| Error::Config(format!("bad metric {metric:?}")))?;
        if k < 1 {
            return Err(Error::Config("metric cutoff must be >= 1".into()));
        }
        return Ok(Some(k));
    }
    Err(Error::Config(format!(
        "metric must be map or map@K, got {metric:?}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply("not_a_key", "1").is_err());
    }

    #[test]
    fn echo_roundtrip_reproduces_config() {
        let mut cfg = RunConfig::default();
        cfg.apply("lambda", "0.25").unwrap();
        cfg.apply("seed", "7").unwrap();
        cfg.apply("descriptors", "/tmp/x.elvd").unwrap();
        cfg.apply("no_f", "true").unwrap();
        let echoed = cfg.echo();

        let mut back = RunConfig::default();
        for line in echoed.lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.apply(k.trim(), v.trim()).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn range_checks_fire() {
        let mut cfg = RunConfig::default();
        cfg.apply("lambda", "0").unwrap();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.apply("iterations", "0").unwrap();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.apply("k", "0").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn metric_aliases() {
        assert_eq!(parse_metric("map").unwrap(), None);
        assert_eq!(parse_metric("map@100").unwrap(), Some(100));
        assert!(parse_metric("ndcg").is_err());
        assert!(parse_metric("map@0").is_err());
    }
}
