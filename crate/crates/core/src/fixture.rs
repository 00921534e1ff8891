//! Synthetic datasets and simulated annotators.
//!
//! Real relabelling data cannot ship with the crate, so tests, examples and
//! the `make-fixture` command use a generated dataset with a hidden true
//! label set per image. Simulated annotators see the same proposals a human
//! would and make independent, configurable mistakes.
//!
//! Every random draw is seeded from `(seed, purpose, ids...)` through
//! SHA-256, so results do not depend on iteration order.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{ClassEntry, ClassId, ImageRecord, MultiLabelGroundTruth, PredictionRecord};
use crate::workflow::{
    AnnotatorProfile, ExperienceTier, GtStance, Phase, QualityCategory, Stage, Submission, TriageRecord, Workflow,
    WorkflowError,
};

/// A generator seeded from `seed` and a list of string parts.
pub fn keyed_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub n_images: usize,
    pub n_classes: usize,
    pub n_models: usize,
    pub n_standard: usize,
    pub n_experienced: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            n_images: 200,
            n_classes: 10,
            n_models: 6,
            n_standard: 11,
            n_experienced: 3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub catalog: Vec<ClassEntry>,
    pub images: Vec<ImageRecord>,
    pub predictions: Vec<PredictionRecord>,
    /// Multi-label reference used to pick the proposal model.
    pub reference: Vec<MultiLabelGroundTruth>,
    pub roster: Vec<AnnotatorProfile>,
    /// Hidden labels the simulated annotators aim for.
    pub truth: Vec<MultiLabelGroundTruth>,
}

/// Label-count weights for sizes 0..=4.
const SIZE_WEIGHTS: [f64; 5] = [0.02, 0.50, 0.24, 0.16, 0.08];

fn weighted_size(rng: &mut ChaCha8Rng) -> usize {
    let mut u: f64 = rng.random();
    for (size, w) in SIZE_WEIGHTS.iter().enumerate() {
        if u < *w {
            return size;
        }
        u -= w;
    }
    SIZE_WEIGHTS.len() - 1
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

pub fn generate(cfg: &FixtureConfig) -> Fixture {
    let k = cfg.n_classes.max(1);
    let catalog: Vec<ClassEntry> = (0..k)
        .map(|c| ClassEntry {
            class_id: ClassId(c as u32),
            name: format!("class_{c:04}"),
            synonyms: vec![format!("synonym {c}a"), format!("synonym {c}b")],
            exemplar_refs: (0..10).map(|e| format!("exemplars/{c:04}/{e}.jpg")).collect(),
        })
        .collect();

    let mut images = Vec::with_capacity(cfg.n_images);
    let mut truth = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let image_id = format!("img_{i:05}");
        let mut rng = keyed_rng(cfg.seed, &["truth", &image_id]);
        let size = weighted_size(&mut rng).min(k);
        let mut classes: Vec<u32> = (0..k as u32).collect();
        classes.shuffle(&mut rng);
        let labels: BTreeSet<ClassId> = classes[..size].iter().copied().map(ClassId).collect();
        // The dataset's single label is usually one of the true labels.
        let original = match labels.iter().copied().collect::<Vec<_>>().choose(&mut rng) {
            Some(&c) if rng.random_bool(0.9) => c,
            _ => ClassId(rng.random_range(0..k as u32)),
        };
        images.push(ImageRecord {
            image_id: image_id.clone(),
            uri: format!("images/{image_id}.jpg"),
            original_label: original,
        });
        truth.push(MultiLabelGroundTruth {
            image_id,
            label_set: labels,
        });
    }

    let mut predictions = Vec::with_capacity(cfg.n_images * cfg.n_models);
    for m in 0..cfg.n_models {
        let model_id = format!("model_{m:02}");
        let skill = 0.45 + 0.5 * (m as f64 + 0.5) / cfg.n_models.max(1) as f64;
        for (img, gt) in images.iter().zip(&truth) {
            let mut rng = keyed_rng(cfg.seed, &["pred", &model_id, &img.image_id]);
            let mut scores: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 0.2).collect();
            for c in &gt.label_set {
                scores[c.index()] += 0.3 + 0.4 * rng.random::<f64>();
            }
            if rng.random_bool(skill.min(1.0)) {
                let top = if rng.random_bool(0.6) {
                    img.original_label
                } else {
                    gt.label_set
                        .iter()
                        .copied()
                        .collect::<Vec<_>>()
                        .choose(&mut rng)
                        .copied()
                        .unwrap_or(img.original_label)
                };
                scores[top.index()] += 1.0;
            } else {
                let c = rng.random_range(0..k);
                scores[c] += 1.0;
            }
            let total: f64 = scores.iter().sum();
            predictions.push(PredictionRecord::probs(
                &model_id,
                &img.image_id,
                scores.iter().map(|s| round6(s / total)).collect(),
            ));
        }
    }

    let reference = truth.iter().filter(|g| !g.label_set.is_empty()).cloned().collect();

    let mut roster: Vec<AnnotatorProfile> = (0..cfg.n_standard)
        .map(|a| AnnotatorProfile {
            access_key: Some(format!("key-ann{a:02}")),
            ..AnnotatorProfile::new(format!("ann{a:02}"), ExperienceTier::Standard)
        })
        .collect();
    roster.extend((0..cfg.n_experienced).map(|a| AnnotatorProfile {
        access_key: Some(format!("key-exp{a:02}")),
        ..AnnotatorProfile::new(format!("exp{a:02}"), ExperienceTier::Experienced)
    }));

    Fixture {
        catalog,
        images,
        predictions,
        reference,
        roster,
        truth,
    }
}

/// How simulated annotators err.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorModel {
    /// Chance of missing each true label that is on screen.
    pub miss_rate: f64,
    /// Chance of adding one wrong label from the screen.
    pub false_add_rate: f64,
    /// Chance of never submitting for an image.
    pub skip_rate: f64,
}

impl AnnotatorModel {
    pub fn with_error_rate(error_rate: f64) -> Self {
        AnnotatorModel {
            miss_rate: error_rate,
            false_add_rate: error_rate / 2.0,
            skip_rate: error_rate / 20.0,
        }
    }
}

fn simulate_selection(
    rng: &mut ChaCha8Rng,
    on_screen: &[ClassId],
    truth: &BTreeSet<ClassId>,
    model: &AnnotatorModel,
) -> BTreeSet<ClassId> {
    let mut picked: BTreeSet<ClassId> = on_screen
        .iter()
        .filter(|c| truth.contains(c))
        .filter(|_| !rng.random_bool(model.miss_rate))
        .copied()
        .collect();
    let wrong: Vec<ClassId> = on_screen.iter().filter(|c| !truth.contains(c)).copied().collect();
    if rng.random_bool(model.false_add_rate) {
        if let Some(&c) = wrong.choose(rng) {
            picked.insert(c);
        }
    }
    picked
}

/// Submits simulated work for every open task of the current phase.
/// Returns the number of accepted submissions.
pub fn simulate_stage(
    wf: &mut Workflow,
    truth: &BTreeMap<String, BTreeSet<ClassId>>,
    model: AnnotatorModel,
    seed: u64,
) -> Result<usize, WorkflowError> {
    let stage = match wf.phase().open_stage() {
        Some(s) => s,
        None => {
            return Err(WorkflowError::StaleStage {
                phase: wf.phase(),
                stage: Stage::Initial,
            })
        }
    };
    let annotators: Vec<String> = wf.setup().roster.iter().map(|p| p.annotator_id.clone()).collect();
    let mut count = 0;
    for annotator in annotators {
        let Some((_, images)) = wf.task_slice(&annotator) else {
            continue;
        };
        for image_id in images {
            let empty = BTreeSet::new();
            let true_set = truth.get(&image_id).unwrap_or(&empty);
            let mut rng = keyed_rng(seed, &["annotate", &stage.to_string(), &annotator, &image_id]);
            let sub = match stage {
                Stage::Initial => {
                    if rng.random_bool(model.skip_rate) {
                        continue;
                    }
                    let shown: Vec<ClassId> = wf.proposals_for(&image_id).expect("batched").labels().collect();
                    Submission {
                        annotator_id: annotator.clone(),
                        image_id: image_id.clone(),
                        stage,
                        selected_labels: simulate_selection(&mut rng, &shown, true_set, &model),
                        comment: None,
                    }
                }
                Stage::Refinement => {
                    let p = wf.refinement_presentation(&image_id)?;
                    let shown: Vec<ClassId> = p.proposals.labels().collect();
                    let refined = AnnotatorModel {
                        miss_rate: model.miss_rate / 2.0,
                        false_add_rate: model.false_add_rate / 2.0,
                        skip_rate: 0.0,
                    };
                    let selected = simulate_selection(&mut rng, &shown, true_set, &refined);
                    let comment = (selected != p.prechecked).then(|| {
                        let added: Vec<String> =
                            selected.difference(&p.prechecked).map(ToString::to_string).collect();
                        let removed: Vec<String> =
                            p.prechecked.difference(&selected).map(ToString::to_string).collect();
                        format!("added [{}] removed [{}]", added.join(","), removed.join(","))
                    });
                    Submission {
                        annotator_id: annotator.clone(),
                        image_id: image_id.clone(),
                        stage,
                        selected_labels: selected,
                        comment,
                    }
                }
            };
            if wf.submit(sub)?.created {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Triage every zero-label image, spreading the work over the experienced
/// annotators. Requires the final phase.
pub fn simulate_triage(wf: &mut Workflow, seed: u64) -> Result<usize, WorkflowError> {
    if wf.phase() != Phase::Final {
        return Err(WorkflowError::InvalidTransition {
            from: wf.phase(),
            to: Phase::Final,
        });
    }
    let experienced = wf.experienced_annotators();
    if experienced.is_empty() {
        return Err(WorkflowError::NoRefiners);
    }
    let empty: Vec<String> = wf
        .final_labels()?
        .into_iter()
        .filter(|g| g.label_set.is_empty())
        .map(|g| g.image_id)
        .collect();
    let mut count = 0;
    for (i, image_id) in empty.into_iter().enumerate() {
        let mut rng = keyed_rng(seed, &["triage", &image_id]);
        let record = TriageRecord {
            quality_category: *QualityCategory::ALL.choose(&mut rng).expect("non-empty"),
            gt_stance: *GtStance::ALL.choose(&mut rng).expect("non-empty"),
            annotator_id: experienced[i % experienced.len()].clone(),
            image_id,
        };
        if wf.record_triage(record)? {
            count += 1;
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let cfg = FixtureConfig::default();
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        assert_eq!(a.images.len(), 200);
        assert_eq!(a.catalog.len(), 10);
        assert_eq!(a.predictions.len(), 200 * 6);
        for p in &a.predictions {
            p.validate(10).unwrap();
        }
        let b = generate(&FixtureConfig { seed: 8, ..cfg });
        assert_ne!(a.truth, b.truth);
    }

    #[test]
    fn keyed_rng_separates_parts() {
        let x: u64 = keyed_rng(1, &["ab", "c"]).random();
        let y: u64 = keyed_rng(1, &["a", "bc"]).random();
        assert_ne!(x, y);
    }
}
