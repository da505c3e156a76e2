//! `elvis gen`: synthesize a toy retrieval world.

use elvis_core::dataset::write_dataset;
use elvis_core::error::Result;
use elvis_core::eval::{write_ground_truth, write_rankings};
use elvis_core::learning::write_pairs;
use elvis_core::synthetic::{generate_synthetic, mine_training_pairs, SyntheticSpec};

use crate::config::RunConfig;

pub fn run(cfg: &RunConfig) -> Result<()> {
    let out_dir = cfg.require("out_dir", &cfg.out_dir)?;
    std::fs::create_dir_all(&out_dir)?;

    let spec = SyntheticSpec {
        instance_count: cfg.instances,
        images_per_instance: cfg.images_per_instance,
        descriptor_dim: cfg.descriptor_dim,
        descriptors_per_image: cfg.descriptors_per_image,
        shared_fraction: cfg.shared_fraction,
        noise_sigma: cfg.noise_sigma,
        distractor_descriptor_count: cfg.distractors,
        seed: cfg.seed,
    };
    let data = generate_synthetic(&spec)?;
    write_dataset(&data.sets, out_dir.join("descriptors.elvd"))?;
    write_ground_truth(&data.ground_truth, out_dir.join("ground_truth.jsonl"))?;
    write_rankings(&data.rankings, out_dir.join("rankings.jsonl"))?;
    let pairs = mine_training_pairs(
        &data,
        cfg.positives_per_anchor,
        cfg.negatives_per_anchor,
        cfg.seed,
    );
    write_pairs(&pairs, out_dir.join("pairs.jsonl"))?;
    cfg.write_echo(&out_dir)?;

    println!(
        "generated {} images ({} instances x {}), {} queries, {} training pairs -> {}",
        data.sets.len(),
        cfg.instances,
        cfg.images_per_instance,
        data.queries.len(),
        pairs.len(),
        out_dir.display()
    );
    Ok(())
}
