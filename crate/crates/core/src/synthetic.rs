//! Seeded toy retrieval worlds for desk-scale experiments.
//!
//! Every instance owns a bank of template descriptors. Each of its images
//! carries a noisy copy of that bank (the shared part) plus distractors, all
//! ℓ2-normalized. Distractors cluster around one of a handful of global
//! background directions (each image picks a background type), the way real
//! background patches share appearance: two unrelated images with the same
//! background type exhibit strong many-to-many spurious correspondences,
//! while background membership itself is a signature a descriptor-dependent
//! gain can learn. Detector strengths are biased toward template
//! membership. The first image of every instance acts as the query; the
//! remaining images form the database. Initial rankings come from the
//! cosine similarity of mean descriptors, standing in for a global
//! descriptor.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::descriptor::RawDescriptorSet;
use crate::error::{Error, Result};
use crate::eval::{GroundTruth, RankedList};
use crate::learning::TrainPair;
use crate::linalg::{l2_normalize, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub instance_count: usize,
    /// Images per instance, including the query image.
    pub images_per_instance: usize,
    /// Raw descriptor dimension D'.
    pub descriptor_dim: usize,
    /// Base descriptor budget per image; the shared template part is
    /// `round(shared_fraction × descriptors_per_image)` of it, the rest is
    /// per-image noise.
    pub descriptors_per_image: usize,
    pub shared_fraction: f64,
    /// Stddev of the Gaussian perturbation applied to template descriptors
    /// before re-normalization.
    pub noise_sigma: f64,
    /// Extra fresh distractor descriptors appended to every image on top of
    /// the base budget.
    pub distractor_descriptor_count: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            instance_count: 50,
            images_per_instance: 20,
            descriptor_dim: 32,
            descriptors_per_image: 24,
            shared_fraction: 0.5,
            noise_sigma: 0.25,
            distractor_descriptor_count: 12,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::Config(format!(
                "shared_fraction must be in [0, 1], got {}",
                self.shared_fraction
            )));
        }
        if self.instance_count < 2 || self.images_per_instance < 2 {
            return Err(Error::Config(
                "need at least 2 instances and 2 images per instance".into(),
            ));
        }
        if self.descriptor_dim == 0 || self.descriptors_per_image == 0 {
            return Err(Error::Config("descriptor dim and count must be > 0".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn shared_count(&self) -> usize {
        (self.shared_fraction * self.descriptors_per_image as f64).round() as usize
    }
}

/// A generated toy world.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub sets: Vec<RawDescriptorSet>,
    pub ground_truth: GroundTruth,
    /// Per-query initial ranking over the whole database, by mean-descriptor
    /// cosine.
    pub rankings: Vec<RankedList>,
    pub instance_of: HashMap<String, usize>,
    pub queries: Vec<String>,
    pub database: Vec<String>,
}

/// Distractors are `normalize(background + FRESHNESS · random)`: near-copies
/// of the image's background direction, so images sharing a background type
/// exhibit strong many-to-many spurious correspondences the way real
/// background patches do.
const BACKGROUND_FRESHNESS: f64 = 0.45;

/// Number of global background directions images draw from.
const BACKGROUND_TYPES: usize = 6;

/// Template descriptors cluster around a per-instance direction
/// (`normalize(instance + SPREAD · random)`), giving each instance a
/// coherent appearance the way object patches share structure.
const TEMPLATE_SPREAD: f64 = 0.6;

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        // f32 quantization keeps dataset round trips bit-exact.
        let v: Vec<f64> = (0..dim)
            .map(|_| rng.gen_range(-1.0f32..1.0) as f64)
            .collect();
        let (unit, degenerate) = l2_normalize(&v);
        if !degenerate {
            return unit.iter().map(|&x| x as f32 as f64).collect();
        }
    }
}

/// Strength-weighted mean of an image's descriptors, ℓ2-normalized.
fn weighted_mean(set: &RawDescriptorSet) -> Vec<f64> {
    let dim = set.dim();
    let mut mean = vec![0.0; dim];
    let mut total = 0.0;
    for j in 0..set.count() {
        let w = set.strengths[j];
        total += w;
        for (acc, v) in mean.iter_mut().zip(set.descriptors.col(j)) {
            *acc += w * v;
        }
    }
    if total > 0.0 {
        mean.iter_mut().for_each(|v| *v /= total);
    }
    l2_normalize(&mean).0
}

fn distractor_unit(rng: &mut impl Rng, dim: usize, background: &[f64]) -> Vec<f64> {
    let fresh = random_unit(rng, dim);
    let mixed: Vec<f64> = fresh
        .iter()
        .zip(background)
        .map(|(f, b)| b + BACKGROUND_FRESHNESS * f)
        .collect();
    let (unit, _) = l2_normalize(&mixed);
    unit.iter().map(|&x| x as f32 as f64).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.descriptor_dim;
    let n_shared = spec.shared_count();
    let n_filler = spec.descriptors_per_image - n_shared;
    let m_total = spec.descriptors_per_image + spec.distractor_descriptor_count;
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let backgrounds: Vec<Vec<f64>> = (0..BACKGROUND_TYPES)
        .map(|_| random_unit(&mut rng, dim))
        .collect();

    let mut sets = Vec::with_capacity(spec.instance_count * spec.images_per_instance);
    let mut instance_of = HashMap::new();
    let mut queries = Vec::with_capacity(spec.instance_count);
    let mut database = Vec::new();
    let mut ground_truth = GroundTruth::default();

    for inst in 0..spec.instance_count {
        let instance_dir = random_unit(&mut rng, dim);
        let template: Vec<Vec<f64>> = (0..n_shared)
            .map(|_| {
                let fresh = random_unit(&mut rng, dim);
                let mixed: Vec<f64> = instance_dir
                    .iter()
                    .zip(&fresh)
                    .map(|(b, f)| b + TEMPLATE_SPREAD * f)
                    .collect();
                let (unit, _) = l2_normalize(&mixed);
                unit.iter().map(|&x| x as f32 as f64).collect()
            })
            .collect();
        let mut positives = BTreeSet::new();
        for img in 0..spec.images_per_instance {
            let id = format!("i{inst:04}_{img:03}");
            instance_of.insert(id.clone(), inst);
            if img == 0 {
                queries.push(id.clone());
            } else {
                database.push(id.clone());
                positives.insert(id.clone());
            }

            // Columns: noisy template copies, then per-image filler, then
            // extra distractors; order shuffled afterwards.
            let mut columns: Vec<(Vec<f64>, bool)> = Vec::with_capacity(m_total);
            for t in &template {
                let noisy: Vec<f64> = if spec.noise_sigma > 0.0 {
                    t.iter().map(|&v| v + noise.sample(&mut rng)).collect()
                } else {
                    t.clone()
                };
                let (unit, degenerate) = l2_normalize(&noisy);
                let unit = if degenerate { t.clone() } else { unit };
                columns.push((unit.iter().map(|&x| x as f32 as f64).collect(), true));
            }
            // Filler: unique per-image content. Distractors: clutter around
            // the image's background type.
            for _ in 0..n_filler {
                columns.push((random_unit(&mut rng, dim), false));
            }
            let background = &backgrounds[rng.gen_range(0..BACKGROUND_TYPES)];
            for _ in 0..spec.distractor_descriptor_count {
                columns.push((distractor_unit(&mut rng, dim, background), false));
            }
            columns.shuffle(&mut rng);

            let mut descriptors = Matrix::zeros(dim, m_total);
            let mut strengths = Vec::with_capacity(m_total);
            for (j, (col, is_template)) in columns.iter().enumerate() {
                descriptors.set_col(j, col);
                let s = if *is_template {
                    0.5 + 0.5 * rng.gen_range(0.0f32..1.0) as f64
                } else {
                    0.6 * rng.gen_range(0.0f32..1.0) as f64
                };
                strengths.push(s as f32 as f64);
            }
            sets.push(RawDescriptorSet::new(id, strengths, descriptors)?);
        }
        ground_truth
            .positives
            .insert(format!("i{inst:04}_000"), positives);
    }

    // Initial rankings: cosine of strength-weighted mean descriptors,
    // queries against the whole database. The strength weighting stands in
    // for the attention pooling of a real global descriptor; an unweighted
    // mean is dominated by background clutter.
    let mean_of: HashMap<&str, Vec<f64>> = sets
        .iter()
        .map(|s| (s.image_id.as_str(), weighted_mean(s)))
        .collect();

    let mut rankings = Vec::with_capacity(queries.len());
    for q in &queries {
        let qm = &mean_of[q.as_str()];
        let mut entries: Vec<(String, f64)> = database
            .iter()
            .map(|id| {
                let dm = &mean_of[id.as_str()];
                let cos: f64 = qm.iter().zip(dm).map(|(a, b)| a * b).sum();
                (id.clone(), cos)
            })
            .collect();
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        rankings.push(RankedList {
            query_id: q.clone(),
            entries,
        });
    }

    Ok(SyntheticData {
        sets,
        ground_truth,
        rankings,
        instance_of,
        queries,
        database,
    })
}

/// Mine a labeled training-pair pool from the database images: every anchor
/// gets same-instance positives and its hardest different-instance
/// candidates by mean-descriptor cosine as negatives.
pub fn mine_training_pairs(
    data: &SyntheticData,
    positives_per_anchor: usize,
    negatives_per_anchor: usize,
    seed: u64,
) -> Vec<TrainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Database-to-database similarity by the same global stand-in used for
    // the initial rankings.
    let mean_of: HashMap<&str, Vec<f64>> = data
        .sets
        .iter()
        .filter(|s| data.database.contains(&s.image_id))
        .map(|s| (s.image_id.as_str(), weighted_mean(s)))
        .collect();

    let mut pairs = Vec::new();
    for anchor in &data.database {
        let inst = data.instance_of[anchor];
        let same: Vec<&String> = data
            .database
            .iter()
            .filter(|id| *id != anchor && data.instance_of[*id] == inst)
            .collect();
        for _ in 0..positives_per_anchor.min(same.len()) {
            let pick = same[rng.gen_range(0..same.len())];
            pairs.push(TrainPair {
                query_id: anchor.clone(),
                candidate_id: pick.clone(),
                label: true,
            });
        }

        let am = &mean_of[anchor.as_str()];
        let mut others: Vec<(&String, f64)> = data
            .database
            .iter()
            .filter(|id| data.instance_of[*id] != inst)
            .map(|id| {
                let cos: f64 = am.iter().zip(&mean_of[id.as_str()]).map(|(a, b)| a * b).sum();
                (id, cos)
            })
            .collect();
        others.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        for (id, _) in others.into_iter().take(negatives_per_anchor) {
            pairs.push(TrainPair {
                query_id: anchor.clone(),
                candidate_id: id.clone(),
                label: false,
            });
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::select_top_m;
    use crate::descriptor::ProjectedDescriptorSet;
    use crate::scoring::chamfer_similarity;

    #[test]
    fn fixed_seed_is_bit_identical() {
        let spec = SyntheticSpec {
            instance_count: 3,
            images_per_instance: 3,
            descriptor_dim: 8,
            descriptors_per_image: 6,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.sets, b.sets);
        assert_eq!(a.rankings.len(), b.rankings.len());
        for (x, y) in a.rankings.iter().zip(&b.rankings) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn identical_banks_make_same_instance_chamfer_win() {
        // shared_fraction 1, no noise, no distractors: images of an instance
        // have identical descriptor banks.
        let spec = SyntheticSpec {
            instance_count: 5,
            images_per_instance: 3,
            descriptor_dim: 16,
            descriptors_per_image: 8,
            shared_fraction: 1.0,
            noise_sigma: 0.0,
            distractor_descriptor_count: 0,
            seed: 3,
        };
        let data = generate_synthetic(&spec).unwrap();
        let by_id: HashMap<&str, &RawDescriptorSet> =
            data.sets.iter().map(|s| (s.image_id.as_str(), s)).collect();
        for q in &data.queries {
            let q_set = ProjectedDescriptorSet::from_raw_l2(by_id[q.as_str()]);
            let inst = data.instance_of[q];
            for db in &data.database {
                if data.instance_of[db] == inst {
                    let same = chamfer_similarity(&q_set, &ProjectedDescriptorSet::from_raw_l2(by_id[db.as_str()])).unwrap();
                    for other in data.database.iter().filter(|o| data.instance_of[*o] != inst) {
                        let cross = chamfer_similarity(
                            &q_set,
                            &ProjectedDescriptorSet::from_raw_l2(by_id[other.as_str()]),
                        )
                        .unwrap();
                        assert!(same > cross, "same={same} cross={cross}");
                    }
                }
            }
        }
    }

    #[test]
    fn strengths_bias_selection_toward_templates() {
        let spec = SyntheticSpec {
            instance_count: 2,
            images_per_instance: 2,
            descriptor_dim: 8,
            descriptors_per_image: 10,
            shared_fraction: 0.5,
            noise_sigma: 0.1,
            distractor_descriptor_count: 10,
            seed: 9,
        };
        let data = generate_synthetic(&spec).unwrap();
        // Selecting the 5 strongest keeps mostly template descriptors: their
        // strengths sit in [0.5, 1] vs [0, 0.6).
        let set = &data.sets[0];
        let top = select_top_m(set, 5);
        let strong = top.strengths.iter().filter(|&&s| s >= 0.5).count();
        assert!(strong >= 3, "only {strong} strong descriptors in top-5");
    }

    #[test]
    fn ground_truth_and_rankings_are_consistent() {
        let spec = SyntheticSpec {
            instance_count: 4,
            images_per_instance: 3,
            descriptor_dim: 8,
            descriptors_per_image: 6,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        assert_eq!(data.queries.len(), 4);
        assert_eq!(data.database.len(), 8);
        assert_eq!(data.rankings.len(), 4);
        for r in &data.rankings {
            r.validate().unwrap();
            assert_eq!(r.entries.len(), 8);
        }
        for q in &data.queries {
            assert_eq!(data.ground_truth.positives[q].len(), 2);
        }
    }

    #[test]
    fn mined_pairs_cover_both_labels() {
        let spec = SyntheticSpec {
            instance_count: 4,
            images_per_instance: 4,
            descriptor_dim: 8,
            descriptors_per_image: 6,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let pairs = mine_training_pairs(&data, 1, 2, 7);
        assert!(pairs.iter().any(|p| p.label));
        assert!(pairs.iter().any(|p| !p.label));
        for p in &pairs {
            let same = data.instance_of[&p.query_id] == data.instance_of[&p.candidate_id];
            assert_eq!(same, p.label);
            assert!(data.database.contains(&p.query_id));
            assert!(data.database.contains(&p.candidate_id));
        }
    }
}
