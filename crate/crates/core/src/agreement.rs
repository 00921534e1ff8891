//! Agreement predicate over the initial annotations.
//!
//! An image is exempt from refinement only when every annotator picked the
//! same label set and that set contains the dataset's original label.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::ClassId;

#[derive(Clone, Debug, thiserror::Error, PartialEq)]
pub enum AgreementError {
    #[error("no label sets supplied for image {0:?}")]
    NoSets(String),
    #[error("duplicate agreement result for image {0:?}")]
    DuplicateImage(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementStatus {
    Agreed,
    NeedsRefinement,
}

impl AgreementStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AgreementStatus::Agreed => "agreed",
            AgreementStatus::NeedsRefinement => "needs_refinement",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementReason {
    UnanimousWithOriginal,
    /// Sets differ and at least one of them contains the original label.
    LabelSetsDiffer,
    /// Sets are identical but lack the original label.
    OriginalLabelMissing,
    /// Sets differ and none contains the original label.
    Both,
    /// An assigned annotator never submitted.
    MissingSubmission,
}

impl AgreementReason {
    pub const ALL: [AgreementReason; 5] = [
        AgreementReason::UnanimousWithOriginal,
        AgreementReason::LabelSetsDiffer,
        AgreementReason::OriginalLabelMissing,
        AgreementReason::Both,
        AgreementReason::MissingSubmission,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgreementReason::UnanimousWithOriginal => "unanimous_with_original",
            AgreementReason::LabelSetsDiffer => "label_sets_differ",
            AgreementReason::OriginalLabelMissing => "original_label_missing",
            AgreementReason::Both => "both",
            AgreementReason::MissingSubmission => "missing_submission",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementResult {
    pub image_id: String,
    pub status: AgreementStatus,
    pub reason: AgreementReason,
    pub annotator_sets: Vec<BTreeSet<ClassId>>,
}

/// Classifies one image from its annotators' label sets.
pub fn check_agreement(
    image_id: &str,
    sets: &[BTreeSet<ClassId>],
    original_label: ClassId,
) -> Result<AgreementResult, AgreementError> {
    let first = sets
        .first()
        .ok_or_else(|| AgreementError::NoSets(image_id.to_owned()))?;
    let identical = sets.iter().all(|s| s == first);
    let reason = if identical {
        if first.contains(&original_label) {
            AgreementReason::UnanimousWithOriginal
        } else {
            AgreementReason::OriginalLabelMissing
        }
    } else if sets.iter().any(|s| s.contains(&original_label)) {
        AgreementReason::LabelSetsDiffer
    } else {
        AgreementReason::Both
    };
    let status = if reason == AgreementReason::UnanimousWithOriginal {
        AgreementStatus::Agreed
    } else {
        AgreementStatus::NeedsRefinement
    };
    Ok(AgreementResult {
        image_id: image_id.to_owned(),
        status,
        reason,
        annotator_sets: sets.to_vec(),
    })
}

/// Like [`check_agreement`] but with possibly missing submissions; any gap
/// routes the image to refinement.
pub fn check_submissions(
    image_id: &str,
    submissions: &[Option<BTreeSet<ClassId>>],
    original_label: ClassId,
) -> Result<AgreementResult, AgreementError> {
    if submissions.is_empty() {
        return Err(AgreementError::NoSets(image_id.to_owned()));
    }
    if submissions.iter().any(Option::is_none) {
        return Ok(AgreementResult {
            image_id: image_id.to_owned(),
            status: AgreementStatus::NeedsRefinement,
            reason: AgreementReason::MissingSubmission,
            annotator_sets: submissions.iter().flatten().cloned().collect(),
        });
    }
    let sets: Vec<_> = submissions.iter().flatten().cloned().collect();
    check_agreement(image_id, &sets, original_label)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub n_images: usize,
    pub agreed: usize,
    pub needs_refinement: usize,
    pub agreed_fraction: f64,
    pub needs_refinement_fraction: f64,
    pub by_reason: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementQueue {
    /// Images needing refinement, sorted by image id.
    pub queue: Vec<String>,
    pub summary: AgreementSummary,
}

pub fn build_refinement_queue(results: &[AgreementResult]) -> Result<RefinementQueue, AgreementError> {
    let mut seen = BTreeSet::new();
    let mut by_reason: BTreeMap<String, usize> = AgreementReason::ALL
        .iter()
        .map(|r| (r.as_str().to_owned(), 0))
        .collect();
    let mut queue = Vec::new();
    for r in results {
        if !seen.insert(r.image_id.as_str()) {
            return Err(AgreementError::DuplicateImage(r.image_id.clone()));
        }
        *by_reason.entry(r.reason.as_str().to_owned()).or_default() += 1;
        if r.status == AgreementStatus::NeedsRefinement {
            queue.push(r.image_id.clone());
        }
    }
    queue.sort();
    let n = results.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let summary = AgreementSummary {
        n_images: n,
        agreed: n - queue.len(),
        needs_refinement: queue.len(),
        agreed_fraction: frac(n - queue.len()),
        needs_refinement_fraction: frac(queue.len()),
        by_reason,
    };
    Ok(RefinementQueue { queue, summary })
}

/// `image_id,status,reason`, sorted by image id.
pub fn agreement_csv(results: &[AgreementResult]) -> String {
    let mut sorted: Vec<&AgreementResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "status", "reason"]).expect("in-memory write");
    for r in sorted {
        w.write_record([r.image_id.as_str(), r.status.as_str(), r.reason.as_str()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}
