//! Shortlist re-ranking and retrieval metrics.
//!
//! File formats are JSON lines. Rankings: one object per query,
//! `{"query": id, "ranking": [[candidate_id, score], ...]}`. Ground truth:
//! `{"query": id, "positives": [ids]}`. Metric reports are CSV rows of
//! `(dataset, method, metric, value)` written by the CLI.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DescriptorDataset;
use crate::descriptor::{project, select_top_m, ProjectedDescriptorSet};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scoring::{chamfer_ot_similarity, chamfer_similarity, pair_similarity};
use crate::transport::OtConfig;

/// A query's ordered candidates. Scores are non-increasing within the list
/// as produced by retrieval; after re-ranking, the re-scored head and the
/// untouched tail carry scores on different scales, and only order matters.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    /// Validate the retrieval-output invariants: unique candidate ids and
    /// non-increasing scores.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (id, _) in &self.entries {
            if !seen.insert(id.as_str()) {
                return Err(Error::Config(format!(
                    "ranking for {:?} repeats candidate {:?}",
                    self.query_id, id
                )));
            }
        }
        for w in self.entries.windows(2) {
            if w[1].1 > w[0].1 {
                return Err(Error::Config(format!(
                    "ranking for {:?} has increasing scores",
                    self.query_id
                )));
            }
        }
        Ok(())
    }
}

/// Positive candidate ids per query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub positives: BTreeMap<String, BTreeSet<String>>,
}

/// Anything that can score a (query, candidate) pair for re-ranking.
pub trait PairScorer: Sync {
    fn score(&self, query_id: &str, candidate_id: &str) -> Result<f64>;
}

/// Projected (or ℓ2-normalized raw) descriptor sets held in memory for the
/// ids a re-ranking run touches.
#[derive(Debug, Clone, Default)]
pub struct DescriptorStore {
    map: HashMap<String, ProjectedDescriptorSet>,
}

impl DescriptorStore {
    /// Load `ids` from the dataset, keep the `m` strongest descriptors of
    /// each, and either project them with the model's projection or
    /// ℓ2-normalize the raw descriptors when no projection is given.
    pub fn prepare<'a>(
        ds: &DescriptorDataset,
        ids: impl IntoIterator<Item = &'a str>,
        m: usize,
        model: Option<&ModelParams>,
    ) -> Result<Self> {
        let mut map = HashMap::new();
        for id in ids {
            if map.contains_key(id) {
                continue;
            }
            let raw = ds.read_image(id)?;
            let raw = if raw.count() > m { select_top_m(&raw, m) } else { raw };
            let set = match model.and_then(|mp| mp.projection.as_ref()) {
                Some(p) => project(&raw, p)?,
                None => ProjectedDescriptorSet::from_raw_l2(&raw),
            };
            map.insert(id.to_string(), set);
        }
        Ok(DescriptorStore { map })
    }

    pub fn get(&self, id: &str) -> Result<&ProjectedDescriptorSet> {
        self.map.get(id).ok_or_else(|| Error::NotFound(id.to_string()))
    }
}

/// Full-model scorer.
pub struct ModelScorer<'a> {
    pub model: &'a ModelParams,
    pub cfg: OtConfig,
    pub store: &'a DescriptorStore,
}

impl PairScorer for ModelScorer<'_> {
    fn score(&self, query_id: &str, candidate_id: &str) -> Result<f64> {
        let q = self.store.get(query_id)?;
        let x = self.store.get(candidate_id)?;
        Ok(pair_similarity(q, x, self.model, &self.cfg)?.score)
    }
}

/// Parameter-free Chamfer baseline on raw similarities.
pub struct ChamferScorer<'a> {
    pub store: &'a DescriptorStore,
}

impl PairScorer for ChamferScorer<'_> {
    fn score(&self, query_id: &str, candidate_id: &str) -> Result<f64> {
        chamfer_similarity(self.store.get(query_id)?, self.store.get(candidate_id)?)
    }
}

/// Parameter-free Chamfer over the OT-refined matrix with unit gains.
pub struct ChamferOtScorer<'a> {
    pub store: &'a DescriptorStore,
    pub cfg: OtConfig,
}

impl PairScorer for ChamferOtScorer<'_> {
    fn score(&self, query_id: &str, candidate_id: &str) -> Result<f64> {
        chamfer_ot_similarity(
            self.store.get(query_id)?,
            self.store.get(candidate_id)?,
            &self.cfg,
        )
    }
}

/// Re-score the top `min(k, len)` entries and re-sort them by the new score
/// (stable, so the original rank breaks ties). Entries beyond `k` keep both
/// their scores and their order, after the re-scored head.
pub fn rerank(list: &RankedList, k: usize, scorer: &dyn PairScorer) -> Result<RankedList> {
    if k < 1 {
        return Err(Error::Config("rerank depth k must be >= 1".into()));
    }
    let depth = k.min(list.entries.len());
    let mut head: Vec<(String, f64)> = Vec::with_capacity(depth);
    for (id, _) in &list.entries[..depth] {
        let s = scorer.score(&list.query_id, id)?;
        if !s.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite re-ranking score for pair ({}, {id})",
                list.query_id
            )));
        }
        head.push((id.clone(), s));
    }
    head.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    head.extend_from_slice(&list.entries[depth..]);
    Ok(RankedList {
        query_id: list.query_id.clone(),
        entries: head,
    })
}

/// Re-rank every list; queries are processed independently and results come
/// back in input order regardless of the thread count.
pub fn rerank_all(
    lists: &[RankedList],
    k: usize,
    scorer: &(dyn PairScorer + Sync),
    threads: usize,
) -> Result<Vec<RankedList>> {
    if threads <= 1 || lists.len() < 2 {
        return lists.iter().map(|l| rerank(l, k, scorer)).collect();
    }
    let chunk_len = lists.len().div_ceil(threads);
    let results: Vec<Result<Vec<RankedList>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = lists
            .chunks(chunk_len)
            .map(|chunk| scope.spawn(move || chunk.iter().map(|l| rerank(l, k, scorer)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(lists.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Average precision with R equal to the total number of ground-truth
/// positives, retrieved or not.
pub fn average_precision(list: &RankedList, positives: &BTreeSet<String>) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Config(format!(
            "query {:?} has no positives; AP is undefined",
            list.query_id
        )));
    }
    Ok(ap_over(
        list.entries.iter().map(|(id, _)| id.as_str()),
        positives,
        positives.len(),
    ))
}

fn ap_over<'a>(ids: impl Iterator<Item = &'a str>, positives: &BTreeSet<String>, denom: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, id) in ids.enumerate() {
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    sum / denom as f64
}

/// Mean AP over queries that have at least one positive; queries without
/// positives are excluded from the mean.
pub fn mean_average_precision(lists: &[RankedList], gt: &GroundTruth) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for list in lists {
        if let Some(pos) = gt.positives.get(&list.query_id) {
            if !pos.is_empty() {
                total += average_precision(list, pos)?;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Config("no query has ground-truth positives".into()));
    }
    Ok(total / n as f64)
}

/// mAP@K: AP on the list truncated at `k` with denominator `min(R, k)`,
/// averaged over queries with at least one positive.
pub fn map_at_k(lists: &[RankedList], gt: &GroundTruth, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("mAP@K needs k >= 1".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for list in lists {
        if let Some(pos) = gt.positives.get(&list.query_id) {
            if !pos.is_empty() {
                let denom = pos.len().min(k);
                total += ap_over(
                    list.entries.iter().take(k).map(|(id, _)| id.as_str()),
                    pos,
                    denom,
                );
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Config("no query has ground-truth positives".into()));
    }
    Ok(total / n as f64)
}

#[derive(Serialize, Deserialize)]
struct RankingLine {
    query: String,
    ranking: Vec<(String, f64)>,
}

#[derive(Serialize, Deserialize)]
struct GtLine {
    query: String,
    positives: Vec<String>,
}

pub fn write_rankings(lists: &[RankedList], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path.as_ref())?);
    for list in lists {
        let line = RankingLine {
            query: list.query_id.clone(),
            ranking: list.entries.clone(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Config(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rankings(path: impl AsRef<Path>) -> Result<Vec<RankedList>> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RankingLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            detail: e.to_string(),
        })?;
        out.push(RankedList {
            query_id: parsed.query,
            entries: parsed.ranking,
        });
    }
    Ok(out)
}

pub fn write_ground_truth(gt: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path.as_ref())?);
    for (query, positives) in &gt.positives {
        let line = GtLine {
            query: query.clone(),
            positives: positives.iter().cloned().collect(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Config(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut gt = GroundTruth::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: GtLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            detail: e.to_string(),
        })?;
        gt.positives
            .insert(parsed.query, parsed.positives.into_iter().collect());
    }
    Ok(gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn list(query: &str, ids_scores: &[(&str, f64)]) -> RankedList {
        RankedList {
            query_id: query.into(),
            entries: ids_scores.iter().map(|(i, s)| (i.to_string(), *s)).collect(),
        }
    }

    fn positives(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    struct FixedScorer(HashMap<String, f64>);

    impl PairScorer for FixedScorer {
        fn score(&self, _q: &str, c: &str) -> Result<f64> {
            Ok(self.0.get(c).copied().unwrap_or(0.0))
        }
    }

    #[test]
    fn rerank_depth_one_only_rescoring_first() {
        let l = list("q", &[("a", 0.9), ("b", 0.8), ("c", 0.7)]);
        let scorer = FixedScorer(HashMap::from([("a".to_string(), 42.0)]));
        let out = rerank(&l, 1, &scorer).unwrap();
        assert_eq!(out.entries[0], ("a".to_string(), 42.0));
        assert_eq!(out.entries[1], ("b".to_string(), 0.8));
        assert_eq!(out.entries[2], ("c".to_string(), 0.7));
    }

    #[test]
    fn rerank_with_original_scores_is_identity() {
        let l = list("q", &[("a", 0.9), ("b", 0.8), ("c", 0.7)]);
        let scorer = FixedScorer(HashMap::from([
            ("a".to_string(), 0.9),
            ("b".to_string(), 0.8),
            ("c".to_string(), 0.7),
        ]));
        let out = rerank(&l, 3, &scorer).unwrap();
        assert_eq!(out, l);
    }

    #[test]
    fn rerank_moves_strong_candidate_to_front() {
        let l = list("q", &[("a", 0.9), ("b", 0.8), ("pos", 0.7)]);
        let scorer = FixedScorer(HashMap::from([
            ("a".to_string(), 0.1),
            ("b".to_string(), 0.2),
            ("pos".to_string(), 5.0),
        ]));
        let out = rerank(&l, 3, &scorer).unwrap();
        assert_eq!(out.entries[0].0, "pos");
    }

    #[test]
    fn rerank_keeps_topk_set_and_tail() {
        let l = list("q", &[("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.6), ("e", 0.5)]);
        let scorer = FixedScorer(HashMap::from([
            ("a".to_string(), 1.0),
            ("b".to_string(), 3.0),
            ("c".to_string(), 2.0),
        ]));
        let out = rerank(&l, 3, &scorer).unwrap();
        let head: BTreeSet<&str> = out.entries[..3].iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(head, BTreeSet::from(["a", "b", "c"]));
        assert_eq!(out.entries[3], ("d".to_string(), 0.6));
        assert_eq!(out.entries[4], ("e".to_string(), 0.5));
    }

    #[test]
    fn rerank_full_depth_is_idempotent() {
        let l = list("q", &[("a", 0.9), ("b", 0.8), ("c", 0.7)]);
        let scorer = FixedScorer(HashMap::from([
            ("a".to_string(), 0.3),
            ("b".to_string(), 0.6),
            ("c".to_string(), 0.5),
        ]));
        let once = rerank(&l, 3, &scorer).unwrap();
        let twice = rerank(&once, 3, &scorer).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn ap_hand_pattern() {
        // Relevance [1, 0, 1] with R = 2: (1 + 2/3) / 2.
        let l = list("q", &[("p1", 0.9), ("n1", 0.8), ("p2", 0.7)]);
        let ap = average_precision(&l, &positives(&["p1", "p2"])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-6);
    }

    #[test]
    fn ap_all_positives_first_is_one() {
        let l = list("q", &[("p1", 0.9), ("p2", 0.8), ("n", 0.1)]);
        assert!((average_precision(&l, &positives(&["p1", "p2"])).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_nothing_retrieved_is_zero() {
        let l = list("q", &[("n1", 0.9), ("n2", 0.8)]);
        assert_eq!(average_precision(&l, &positives(&["p"])).unwrap(), 0.0);
    }

    #[test]
    fn ap_counts_unretrieved_positives_in_denominator() {
        let l = list("q", &[("p1", 0.9)]);
        // R = 2 but only one positive retrieved.
        assert!((average_precision(&l, &positives(&["p1", "p2"])).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_requires_positives() {
        let l = list("q", &[("a", 0.9)]);
        assert!(average_precision(&l, &BTreeSet::new()).is_err());
    }

    #[test]
    fn map_at_k_cases() {
        let mut gt = GroundTruth::default();
        gt.positives.insert("q1".into(), positives(&["p"]));
        let l1 = list("q1", &[("p", 0.9), ("n", 0.8)]);
        assert!((map_at_k(&[l1.clone()], &gt, 100).unwrap() - 1.0).abs() < 1e-12);

        // Positive at rank 2 only, R = 1, k = 1 → truncated out.
        let l2 = list("q1", &[("n", 0.9), ("p", 0.8)]);
        assert_eq!(map_at_k(&[l2], &gt, 1).unwrap(), 0.0);
    }

    #[test]
    fn map_at_k_matches_brute_force_micro_case() {
        let mut gt = GroundTruth::default();
        gt.positives.insert("q1".into(), positives(&["a", "b"]));
        gt.positives.insert("q2".into(), positives(&["c"]));
        gt.positives.insert("q3".into(), positives(&["d", "e", "f"]));
        let lists = vec![
            list("q1", &[("a", 0.9), ("x", 0.8), ("b", 0.7)]),
            list("q2", &[("x", 0.9), ("c", 0.8)]),
            list("q3", &[("d", 0.9), ("e", 0.8), ("x", 0.7)]),
        ];
        let k = 2;
        // Brute force per definition.
        let ap1 = (1.0 / 1.0) / 2.0_f64.min(2.0); // hits: a at 1; denom min(2,2)=2
        let ap2 = (1.0 / 2.0) / 1.0; // c at rank 2; denom min(1,2)=1
        let ap3 = (1.0 / 1.0 + 2.0 / 2.0) / 2.0; // d,e in top-2; denom min(3,2)=2
        let expect = (ap1 + ap2 + ap3) / 3.0;
        assert!((map_at_k(&lists, &gt, k).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn map_at_large_k_converges_to_map() {
        let mut gt = GroundTruth::default();
        gt.positives.insert("q1".into(), positives(&["a", "b"]));
        gt.positives.insert("q2".into(), positives(&["c"]));
        let lists = vec![
            list("q1", &[("x", 0.9), ("a", 0.8), ("y", 0.7), ("b", 0.6)]),
            list("q2", &[("c", 0.9), ("x", 0.8)]),
        ];
        let map = mean_average_precision(&lists, &gt).unwrap();
        assert!((map_at_k(&lists, &gt, 1_000_000).unwrap() - map).abs() < 1e-12);
    }

    #[test]
    fn queries_without_positives_are_excluded() {
        let mut gt = GroundTruth::default();
        gt.positives.insert("q1".into(), positives(&["a"]));
        let lists = vec![
            list("q1", &[("a", 0.9)]),
            list("q_unlabeled", &[("z", 0.9)]),
        ];
        assert!((mean_average_precision(&lists, &gt).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let lists = vec![
            list("q1", &[("a", 0.9), ("b", 0.25)]),
            list("q2", &[("c", 1.5)]),
        ];
        write_rankings(&lists, &path).unwrap();
        assert_eq!(read_rankings(&path).unwrap(), lists);

        let mut gt = GroundTruth::default();
        gt.positives.insert("q1".into(), positives(&["a"]));
        let gt_path = dir.path().join("gt.jsonl");
        write_ground_truth(&gt, &gt_path).unwrap();
        assert_eq!(read_ground_truth(&gt_path).unwrap(), gt);
    }

    #[test]
    fn malformed_ranking_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"query\":\"q1\",\"ranking\":[[\"a\",0.9]]}\nnot json\n",
        )
        .unwrap();
        match read_rankings(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn ap_is_order_only(scores in proptest::collection::vec(0.0f64..1.0, 5..12)) {
            // Apply a strictly increasing transform to all scores: ranking
            // and AP are unchanged because AP reads order alone.
            let mut entries: Vec<(String, f64)> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| (format!("c{i}"), s))
                .collect();
            entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let base = RankedList { query_id: "q".into(), entries: entries.clone() };
            let transformed = RankedList {
                query_id: "q".into(),
                entries: entries.iter().map(|(i, s)| (i.clone(), s.exp() * 3.0 + 1.0)).collect(),
            };
            let pos = positives(&["c0", "c2"]);
            let a = average_precision(&base, &pos).unwrap();
            let b = average_precision(&transformed, &pos).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
