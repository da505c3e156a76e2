//! `elvis rerank`: re-score shortlist heads with the chosen scorer and
//! re-sort them.

use std::collections::BTreeSet;

use elvis_core::dataset::DescriptorDataset;
use elvis_core::error::{Error, Result};
use elvis_core::eval::{
    read_rankings, rerank_all, write_rankings, ChamferOtScorer, ChamferScorer, DescriptorStore,
    ModelScorer, PairScorer,
};
use elvis_core::model::ModelParams;

use crate::config::RunConfig;

pub fn run(cfg: &RunConfig) -> Result<()> {
    let out_dir = cfg.require("out_dir", &cfg.out_dir)?;
    let rankings_path = cfg.require("rankings", &cfg.rankings)?;
    std::fs::create_dir_all(&out_dir)?;

    let lists = read_rankings(&rankings_path)?;
    for list in &lists {
        list.validate()?;
    }

    let out_path = out_dir.join("reranked.jsonl");
    if cfg.method == "none" {
        write_rankings(&lists, &out_path)?;
        cfg.write_echo(&out_dir)?;
        println!("passed through {} rankings -> {}", lists.len(), out_path.display());
        return Ok(());
    }

    let descriptors = cfg.require("descriptors", &cfg.descriptors)?;
    let ds = DescriptorDataset::open(&descriptors)?;

    // Only ids the re-scoring touches are loaded: queries plus each head.
    let mut ids: BTreeSet<&str> = BTreeSet::new();
    for list in &lists {
        ids.insert(&list.query_id);
        for (id, _) in list.entries.iter().take(cfg.k) {
            ids.insert(id);
        }
    }

    let reranked = match cfg.method.as_str() {
        "elvis" => {
            let checkpoint = cfg.require("checkpoint", &cfg.checkpoint)?;
            let model = ModelParams::load(&checkpoint)?;
            let store =
                DescriptorStore::prepare(&ds, ids.iter().copied(), cfg.m, Some(&model))?;
            let scorer = ModelScorer {
                model: &model,
                cfg: cfg.ot(),
                store: &store,
            };
            rerank_all(&lists, cfg.k, &scorer as &(dyn PairScorer + Sync), cfg.threads)?
        }
        "chamfer" => {
            let store = DescriptorStore::prepare(&ds, ids.iter().copied(), cfg.m, None)?;
            let scorer = ChamferScorer { store: &store };
            rerank_all(&lists, cfg.k, &scorer as &(dyn PairScorer + Sync), cfg.threads)?
        }
        "chamfer-ot" => {
            let store = DescriptorStore::prepare(&ds, ids.iter().copied(), cfg.m, None)?;
            let scorer = ChamferOtScorer {
                store: &store,
                cfg: cfg.ot(),
            };
            rerank_all(&lists, cfg.k, &scorer as &(dyn PairScorer + Sync), cfg.threads)?
        }
        other => return Err(Error::Config(format!("unknown method {other:?}"))),
    };

    write_rankings(&reranked, &out_path)?;
    cfg.write_echo(&out_dir)?;
    println!(
        "re-ranked top-{} of {} lists with {} -> {}",
        cfg.k,
        reranked.len(),
        cfg.method,
        out_path.display()
    );
    Ok(())
}
