//! Annotation workflow: batches, assignments, submissions, refinement and
//! zero-label triage, persisted as an append-only event log.
//!
//! The workflow moves through four phases, each advanced by an
//! administrative actor:
//!
//! ```text
//! initial ──► analysis ──► refinement ──► final
//! ```
//!
//! Initial-stage submissions are accepted only in `initial`, refinement
//! submissions only in `refinement`. Entering `analysis` runs the agreement
//! predicate and fixes the refinement queue.

mod batching;
mod events;
mod state;

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::catalog::ClassId;

pub use batching::{assign_refinement, create_batches, Batch};
pub use events::{read_event_log, Event, EventKind, EventSink, FileEventLog};
pub use state::{Progress, RefinementPresentation, SubmitOutcome, Workflow, WorkflowConfig, WorkflowSetup};

#[derive(Debug, thiserror::Error)]
pub enum WorkflowError {
    #[error("unknown annotator {0:?}")]
    UnknownAnnotator(String),
    #[error("duplicate annotator {0:?} in roster")]
    DuplicateAnnotator(String),
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("annotator {annotator_id:?} is not assigned to image {image_id:?} at the {stage} stage")]
    NotAssigned {
        annotator_id: String,
        image_id: String,
        stage: Stage,
    },
    #[error("{stage} submissions are not accepted while the workflow is in the {phase} phase")]
    StaleStage { phase: Phase, stage: Stage },
    #[error("class {class_id} is not among the proposals for image {image_id:?}")]
    LabelNotProposed { image_id: String, class_id: ClassId },
    #[error("a comment is required when refinement changes the pre-checked labels")]
    MissingComment,
    #[error("image {0:?} is not in the refinement queue")]
    NotQueued(String),
    #[error("workflow for image {0:?} is not complete")]
    NotComplete(String),
    #[error("cannot move from {from} to {to}")]
    InvalidTransition { from: Phase, to: Phase },
    #[error("refinement slices have not been assigned")]
    RefinementNotAssigned,
    #[error("refinement slices were already assigned")]
    RefinementAlreadyAssigned,
    #[error("{0} queued images have no refinement submission")]
    IncompleteRefinement(usize),
    #[error("annotator {0:?} is not experienced-tier")]
    NotExperienced(String),
    #[error("image {0:?} has a non-empty final label set and cannot be triaged")]
    TriageNotEligible(String),
    #[error("need {needed} distinct annotators per batch, only {available} available")]
    NotEnoughAnnotators { needed: usize, available: usize },
    #[error("number of batches must be at least 1")]
    ZeroBatches,
    #[error("annotators per batch must be at least 1")]
    ZeroPerBatch,
    #[error("no refinement annotators supplied")]
    NoRefiners,
    #[error("invalid workflow setup: {0}")]
    Setup(String),
    #[error("event log: {0}")]
    Log(#[from] std::io::Error),
    #[error("event {seq}: {message}")]
    Replay { seq: u64, message: String },
}

pub type Result<T, E = WorkflowError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperienceTier {
    #[default]
    Standard,
    Experienced,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub annotator_id: String,
    #[serde(default)]
    pub experience_tier: ExperienceTier,
    /// Operator-provisioned secret exchanged for a session token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub access_key: Option<String>,
}

impl AnnotatorProfile {
    pub fn new(id: impl Into<String>, tier: ExperienceTier) -> Self {
        AnnotatorProfile {
            annotator_id: id.into(),
            experience_tier: tier,
            access_key: None,
        }
    }
}

/// Stage a submission belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Refinement,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Initial => "initial",
            Stage::Refinement => "refinement",
        })
    }
}

/// Workflow-wide phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Analysis,
    Refinement,
    Final,
}

impl Phase {
    pub fn next(self) -> Option<Phase> {
        match self {
            Phase::Initial => Some(Phase::Analysis),
            Phase::Analysis => Some(Phase::Refinement),
            Phase::Refinement => Some(Phase::Final),
            Phase::Final => None,
        }
    }

    /// Stage whose submissions this phase accepts.
    pub fn open_stage(self) -> Option<Stage> {
        match self {
            Phase::Initial => Some(Stage::Initial),
            Phase::Refinement => Some(Stage::Refinement),
            Phase::Analysis | Phase::Final => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Initial => "initial",
            Phase::Analysis => "analysis",
            Phase::Refinement => "refinement",
            Phase::Final => "final",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "initial" => Ok(Phase::Initial),
            "analysis" => Ok(Phase::Analysis),
            "refinement" => Ok(Phase::Refinement),
            "final" => Ok(Phase::Final),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

/// What an annotator sends; revision and timestamp are assigned on accept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub annotator_id: String,
    pub image_id: String,
    pub stage: Stage,
    pub selected_labels: BTreeSet<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub annotator_id: String,
    pub image_id: String,
    pub stage: Stage,
    pub selected_labels: BTreeSet<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub revision: u32,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityCategory {
    NoValidProposal,
    LowResolutionAmbiguous,
    FineGrainedNeedsExpert,
    UncommonOrAtypicalViewpoint,
}

impl QualityCategory {
    pub const ALL: [QualityCategory; 4] = [
        QualityCategory::NoValidProposal,
        QualityCategory::LowResolutionAmbiguous,
        QualityCategory::FineGrainedNeedsExpert,
        QualityCategory::UncommonOrAtypicalViewpoint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QualityCategory::NoValidProposal => "no_valid_proposal",
            QualityCategory::LowResolutionAmbiguous => "low_resolution_ambiguous",
            QualityCategory::FineGrainedNeedsExpert => "fine_grained_needs_expert",
            QualityCategory::UncommonOrAtypicalViewpoint => "uncommon_or_atypical_viewpoint",
        }
    }
}

/// Triage annotator's view of the dataset's original label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtStance {
    Agree,
    Disagree,
    Uncertain,
}

impl GtStance {
    pub const ALL: [GtStance; 3] = [GtStance::Agree, GtStance::Disagree, GtStance::Uncertain];

    pub fn as_str(self) -> &'static str {
        match self {
            GtStance::Agree => "agree",
            GtStance::Disagree => "disagree",
            GtStance::Uncertain => "uncertain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageRecord {
    pub image_id: String,
    pub quality_category: QualityCategory,
    pub gt_stance: GtStance,
    pub annotator_id: String,
}
