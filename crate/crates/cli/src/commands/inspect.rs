//! `elvis inspect`: the strongest votes of one pair, with raw and refined
//! similarities, transformed strengths, and dense dustbin gains.

use serde::Serialize;

use elvis_core::dataset::DescriptorDataset;
use elvis_core::descriptor::{project, select_top_m, ProjectedDescriptorSet};
use elvis_core::error::Result;
use elvis_core::model::ModelParams;
use elvis_core::scoring::{refined_similarity, select_votes, vote_strength};

use crate::config::RunConfig;

#[derive(Serialize)]
struct VoteRecord {
    /// Which image the vote belongs to: "query" (row max) or "candidate"
    /// (column max).
    side: &'static str,
    /// Descriptor index within its image.
    index: usize,
    /// Index of the matched descriptor in the other image.
    match_index: usize,
    /// Raw cosine similarity at the matched position.
    raw: f64,
    /// Refined (transport) similarity, i.e. the vote.
    refined: f64,
    /// Vote after the learnable transform.
    strength: f64,
}

#[derive(Serialize)]
struct InspectReport {
    query: String,
    candidate: String,
    score: f64,
    votes: Vec<VoteRecord>,
    query_gains: Vec<f64>,
    candidate_gains: Vec<f64>,
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let descriptors = cfg.require("descriptors", &cfg.descriptors)?;
    let checkpoint = cfg.require("checkpoint", &cfg.checkpoint)?;
    let query_id = cfg
        .query
        .clone()
        .ok_or_else(|| elvis_core::Error::Config("missing required input: query".into()))?;
    let candidate_id = cfg
        .candidate
        .clone()
        .ok_or_else(|| elvis_core::Error::Config("missing required input: candidate".into()))?;

    let ds = DescriptorDataset::open(&descriptors)?;
    let model = ModelParams::load(&checkpoint)?;

    let load = |id: &str| -> Result<ProjectedDescriptorSet> {
        let raw = ds.read_image(id)?;
        let raw = if raw.count() > cfg.m {
            select_top_m(&raw, cfg.m)
        } else {
            raw
        };
        match &model.projection {
            Some(p) => project(&raw, p),
            None => Ok(ProjectedDescriptorSet::from_raw_l2(&raw)),
        }
    };
    let q = load(&query_id)?;
    let x = load(&candidate_id)?;

    let ot = cfg.ot();
    let (s_raw, refined, query_gains, candidate_gains) = refined_similarity(&q, &x, &model, &ot)?;
    let votes = select_votes(&refined);

    let mut records = Vec::with_capacity(votes.row_votes.len() + votes.col_votes.len());
    for (i, (&vote, &j)) in votes.row_votes.iter().zip(&votes.row_argmax).enumerate() {
        records.push(VoteRecord {
            side: "query",
            index: i,
            match_index: j,
            raw: s_raw[(i, j)],
            refined: vote,
            strength: vote_strength(model.vote.as_ref(), vote),
        });
    }
    for (j, (&vote, &i)) in votes.col_votes.iter().zip(&votes.col_argmax).enumerate() {
        records.push(VoteRecord {
            side: "candidate",
            index: j,
            match_index: i,
            raw: s_raw[(i, j)],
            refined: vote,
            strength: vote_strength(model.vote.as_ref(), vote),
        });
    }
    let score: f64 = records.iter().map(|r| r.strength).sum();
    records.sort_by(|a, b| b.strength.partial_cmp(&a.strength).unwrap_or(std::cmp::Ordering::Equal));
    records.truncate(25);

    let report = InspectReport {
        query: query_id,
        candidate: candidate_id,
        score,
        votes: records,
        query_gains,
        candidate_gains,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| elvis_core::Error::Config(e.to_string()))?;
    println!("{json}");
    if let Some(out_dir) = &cfg.out_dir {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("inspect.json"), format!("{json}\n"))?;
        cfg.write_echo(out_dir)?;
    }
    Ok(())
}
