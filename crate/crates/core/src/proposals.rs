//! ReaL / top-1 accuracy, proposal-model selection and ranked label
//! proposals.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::{ClassId, MultiLabelGroundTruth, PredictionRecord};

/// Number of proposals shown per image unless configured otherwise.
pub const DEFAULT_K: usize = 20;
/// Proposals are shown to annotators in groups of this size.
pub const GROUP_SIZE: usize = 5;

#[derive(Clone, Debug, thiserror::Error, PartialEq)]
pub enum ProposalError {
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("no prediction for image {0:?}")]
    MissingPrediction(String),
    #[error("no original label for image {0:?}")]
    MissingOriginal(String),
    #[error("prediction and label key sets differ ({only_preds} only in predictions, {only_labels} only in labels)")]
    KeyMismatch { only_preds: usize, only_labels: usize },
    #[error("no candidate models")]
    NoCandidates,
    #[error("model {0:?} covers a different image set than the other candidates")]
    CoverageMismatch(String),
    #[error("prediction for image {0:?} has no scores")]
    EmptyScores(String),
    #[error("k must be at least 1")]
    ZeroK,
}

pub type Result<T, E = ProposalError> = std::result::Result<T, E>;

/// How ReaL accuracy treats images whose label set is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptySetPolicy {
    /// Drop them from numerator and denominator.
    #[default]
    Exclude,
    /// Keep them in the denominator as misses.
    CountAsWrong,
}

/// A ratio with its raw counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Fraction of images whose top-1 prediction is in their label set.
pub fn real_accuracy(
    preds: &BTreeMap<String, ClassId>,
    gt: &[MultiLabelGroundTruth],
    policy: EmptySetPolicy,
) -> Result<Accuracy> {
    let mut acc = Accuracy { correct: 0, total: 0 };
    for g in gt {
        let pred = preds
            .get(&g.image_id)
            .ok_or_else(|| ProposalError::MissingPrediction(g.image_id.clone()))?;
        if g.label_set.is_empty() {
            if policy == EmptySetPolicy::CountAsWrong {
                acc.total += 1;
            }
            continue;
        }
        acc.total += 1;
        if g.label_set.contains(pred) {
            acc.correct += 1;
        }
    }
    if acc.total == 0 {
        return Err(ProposalError::UndefinedMetric("every label set is empty"));
    }
    Ok(acc)
}

/// Fraction of images whose prediction equals the original single label.
pub fn top1_accuracy(
    preds: &BTreeMap<String, ClassId>,
    originals: &BTreeMap<String, ClassId>,
) -> Result<Accuracy> {
    if preds.is_empty() && originals.is_empty() {
        return Err(ProposalError::UndefinedMetric("no images"));
    }
    let only_preds = preds.keys().filter(|k| !originals.contains_key(*k)).count();
    let only_labels = originals.keys().filter(|k| !preds.contains_key(*k)).count();
    if only_preds + only_labels > 0 {
        return Err(ProposalError::KeyMismatch { only_preds, only_labels });
    }
    let correct = preds
        .iter()
        .filter(|(id, p)| originals.get(*id) == Some(p))
        .count();
    Ok(Accuracy {
        correct,
        total: preds.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model_id: String,
    pub real_accuracy: f64,
    pub top1_accuracy: f64,
    /// Denominator of the ReaL accuracy.
    pub n_evaluated: usize,
}

/// Scores one model: ReaL over the ground-truth images, top-1 over every
/// image the model predicted.
pub fn score_model(
    model_id: &str,
    preds: &BTreeMap<String, ClassId>,
    gt: &[MultiLabelGroundTruth],
    originals: &BTreeMap<String, ClassId>,
    policy: EmptySetPolicy,
) -> Result<ModelScore> {
    let real = real_accuracy(preds, gt, policy)?;
    let mut own_originals = BTreeMap::new();
    for id in preds.keys() {
        let o = originals
            .get(id)
            .ok_or_else(|| ProposalError::MissingOriginal(id.clone()))?;
        own_originals.insert(id.clone(), *o);
    }
    let top1 = top1_accuracy(preds, &own_originals)?;
    Ok(ModelScore {
        model_id: model_id.to_owned(),
        real_accuracy: real.value(),
        top1_accuracy: top1.value(),
        n_evaluated: real.total,
    })
}

/// Top-1 predictions of one candidate model.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub model_id: String,
    pub predictions: BTreeMap<String, ClassId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub best: ModelScore,
    /// Every candidate, best first.
    pub leaderboard: Vec<ModelScore>,
}

/// Orders by descending ReaL accuracy, then ascending model id.
pub fn rank_scores(scores: &mut [ModelScore]) {
    scores.sort_by(|a, b| {
        b.real_accuracy
            .total_cmp(&a.real_accuracy)
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
}

/// Checks that all candidates predict the same image set.
pub fn check_coverage<'a>(
    mut sets: impl Iterator<Item = (&'a str, BTreeSet<&'a String>)>,
) -> Result<()> {
    let Some((_, first)) = sets.next() else {
        return Err(ProposalError::NoCandidates);
    };
    for (model_id, keys) in sets {
        if keys != first {
            return Err(ProposalError::CoverageMismatch(model_id.to_owned()));
        }
    }
    Ok(())
}

/// Picks the candidate with the highest ReaL accuracy.
pub fn select_model(
    candidates: &[Candidate],
    gt: &[MultiLabelGroundTruth],
    originals: &BTreeMap<String, ClassId>,
    policy: EmptySetPolicy,
) -> Result<Selection> {
    check_coverage(
        candidates
            .iter()
            .map(|c| (c.model_id.as_str(), c.predictions.keys().collect())),
    )?;
    let mut leaderboard = candidates
        .iter()
        .map(|c| score_model(&c.model_id, &c.predictions, gt, originals, policy))
        .collect::<Result<Vec<_>>>()?;
    rank_scores(&mut leaderboard);
    Ok(Selection {
        best: leaderboard[0].clone(),
        leaderboard,
    })
}

/// Ordered candidate labels for one image.
///
/// `ranked_labels` are the model's top-k. `extra_labels` holds labels that
/// must be shown but fall outside the top-k (refinement only); they form
/// their own trailing groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub image_id: String,
    #[serde(rename = "proposals")]
    pub ranked_labels: Vec<ClassId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_labels: Vec<ClassId>,
}

impl ProposalSet {
    /// Display groups: ranked positions `[5g, 5g + 5)`, then the extras.
    pub fn groups(&self) -> Vec<&[ClassId]> {
        self.ranked_labels
            .chunks(GROUP_SIZE)
            .chain(self.extra_labels.chunks(GROUP_SIZE))
            .collect()
    }

    pub fn labels(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.ranked_labels.iter().chain(&self.extra_labels).copied()
    }

    pub fn contains(&self, class_id: ClassId) -> bool {
        self.labels().any(|c| c == class_id)
    }
}

/// The `k` highest-scoring classes, descending, ties by ascending class id.
pub fn generate_proposals(pred: &PredictionRecord, k: usize) -> Result<ProposalSet> {
    if k == 0 {
        return Err(ProposalError::ZeroK);
    }
    if pred.scores.is_empty() {
        return Err(ProposalError::EmptyScores(pred.image_id.clone()));
    }
    let ranked_labels = pred
        .scores
        .ranked()
        .into_iter()
        .take(k)
        .map(|(c, _)| c)
        .collect();
    Ok(ProposalSet {
        image_id: pred.image_id.clone(),
        ranked_labels,
        extra_labels: Vec::new(),
    })
}

/// `model_id,real_accuracy,top1_accuracy,n_evaluated`
pub fn leaderboard_csv(rows: &[ModelScore]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model_id", "real_accuracy", "top1_accuracy", "n_evaluated"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.model_id.clone(),
            format!("{:.6}", r.real_accuracy),
            format!("{:.6}", r.top1_accuracy),
            r.n_evaluated.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Scores;

    fn ids(v: &[(&str, u32)]) -> BTreeMap<String, ClassId> {
        v.iter().map(|(k, c)| (k.to_string(), ClassId(*c))).collect()
    }

    #[test]
    fn real_accuracy_definition() {
        let preds = ids(&[("a", 1), ("b", 2), ("c", 3)]);
        let gt = vec![
            MultiLabelGroundTruth::new("a", [1]),
            MultiLabelGroundTruth::new("b", [2, 5]),
            MultiLabelGroundTruth::new("c", [5]),
        ];
        let acc = real_accuracy(&preds, &gt, EmptySetPolicy::Exclude).unwrap();
        assert_eq!((acc.correct, acc.total), (2, 3));
        assert!((acc.value() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn real_accuracy_empty_sets() {
        let preds = ids(&[("a", 1), ("b", 2)]);
        let gt = vec![MultiLabelGroundTruth::new("a", [1]), MultiLabelGroundTruth::new("b", [])];
        assert_eq!(real_accuracy(&preds, &gt, EmptySetPolicy::Exclude).unwrap().value(), 1.0);
        assert_eq!(real_accuracy(&preds, &gt, EmptySetPolicy::CountAsWrong).unwrap().value(), 0.5);
        let all_empty = vec![MultiLabelGroundTruth::new("a", [])];
        assert!(matches!(
            real_accuracy(&preds, &all_empty, EmptySetPolicy::Exclude),
            Err(ProposalError::UndefinedMetric(_))
        ));
        let missing = vec![MultiLabelGroundTruth::new("zz", [1])];
        assert!(matches!(
            real_accuracy(&preds, &missing, EmptySetPolicy::Exclude),
            Err(ProposalError::MissingPrediction(_))
        ));
    }

    #[test]
    fn top1_examples() {
        let preds = ids(&[("a", 1), ("b", 1)]);
        assert_eq!(top1_accuracy(&preds, &ids(&[("a", 1), ("b", 2)])).unwrap().value(), 0.5);
        assert_eq!(top1_accuracy(&preds, &preds).unwrap().value(), 1.0);
        assert!(matches!(
            top1_accuracy(&BTreeMap::new(), &BTreeMap::new()),
            Err(ProposalError::UndefinedMetric(_))
        ));
        assert!(matches!(
            top1_accuracy(&preds, &ids(&[("a", 1)])),
            Err(ProposalError::KeyMismatch { only_preds: 1, only_labels: 0 })
        ));
    }

    #[test]
    fn selection_prefers_higher_real_then_smaller_id() {
        let gt = vec![
            MultiLabelGroundTruth::new("a", [1]),
            MultiLabelGroundTruth::new("b", [2]),
        ];
        let originals = ids(&[("a", 1), ("b", 2)]);
        let c = |m: &str, p: &[(&str, u32)]| Candidate {
            model_id: m.into(),
            predictions: ids(p),
        };
        let sel = select_model(
            &[c("zeta", &[("a", 1), ("b", 0)]), c("alpha", &[("a", 0), ("b", 2)])],
            &gt,
            &originals,
            EmptySetPolicy::Exclude,
        )
        .unwrap();
        assert_eq!(sel.best.model_id, "alpha");
        assert_eq!(sel.best.real_accuracy, 0.5);

        assert_eq!(
            select_model(&[], &gt, &originals, EmptySetPolicy::Exclude),
            Err(ProposalError::NoCandidates)
        );
        assert_eq!(
            select_model(
                &[c("m1", &[("a", 1), ("b", 2)]), c("m2", &[("a", 1)])],
                &gt,
                &originals,
                EmptySetPolicy::Exclude
            ),
            Err(ProposalError::CoverageMismatch("m2".into()))
        );
    }

    #[test]
    fn proposals_sort_and_ties() {
        let p = PredictionRecord::probs("m", "a", vec![0.1, 0.7, 0.2]);
        assert_eq!(generate_proposals(&p, 2).unwrap().ranked_labels, vec![ClassId(1), ClassId(2)]);
        let p = PredictionRecord::probs("m", "a", vec![0.5, 0.5, 0.0]);
        assert_eq!(generate_proposals(&p, 2).unwrap().ranked_labels, vec![ClassId(0), ClassId(1)]);
        // k larger than K returns K labels.
        assert_eq!(generate_proposals(&p, 20).unwrap().ranked_labels.len(), 3);
        assert_eq!(generate_proposals(&p, 0), Err(ProposalError::ZeroK));
        let empty = PredictionRecord::probs("m", "a", vec![]);
        assert!(matches!(generate_proposals(&empty, 3), Err(ProposalError::EmptyScores(_))));
    }

    #[test]
    fn groups_include_extras_separately() {
        let set = ProposalSet {
            image_id: "a".into(),
            ranked_labels: (0..7).map(ClassId).collect(),
            extra_labels: vec![ClassId(30)],
        };
        let g = set.groups();
        assert_eq!(g.len(), 3);
        assert_eq!(g[1].len(), 2);
        assert_eq!(g[2], &[ClassId(30)]);
        let topk = PredictionRecord {
            model_id: "m".into(),
            image_id: "a".into(),
            scores: Scores::TopK(vec![(ClassId(4), 0.9), (ClassId(2), 0.1)]),
        };
        assert_eq!(generate_proposals(&topk, 20).unwrap().ranked_labels, vec![ClassId(4), ClassId(2)]);
    }

    #[test]
    fn leaderboard_columns() {
        let csv = leaderboard_csv(&[ModelScore {
            model_id: "m1".into(),
            real_accuracy: 0.8,
            top1_accuracy: 0.75,
            n_evaluated: 12,
        }]);
        assert_eq!(csv, "model_id,real_accuracy,top1_accuracy,n_evaluated\nm1,0.800000,0.750000,12\n");
    }
}
