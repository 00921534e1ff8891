use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use super::events::{Event, EventKind, EventSink};
use super::{
    AnnotationRecord, AnnotatorProfile, Batch, ExperienceTier, Phase, Result, Stage, Submission, TriageRecord,
    WorkflowError,
};
use crate::agreement::{self, AgreementResult, AgreementStatus};
use crate::catalog::{ClassId, MultiLabelGroundTruth};
use crate::proposals::{ProposalSet, DEFAULT_K};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowConfig {
    /// How many ranked proposals the refinement screen shows before the
    /// appended human-selected extras.
    pub refinement_k: usize,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        WorkflowConfig {
            refinement_k: DEFAULT_K,
        }
    }
}

/// Everything fixed before the first submission arrives.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkflowSetup {
    pub originals: BTreeMap<String, ClassId>,
    pub proposals: BTreeMap<String, ProposalSet>,
    pub batches: Vec<Batch>,
    pub roster: Vec<AnnotatorProfile>,
    pub config: WorkflowConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubmitOutcome {
    pub revision: u32,
    /// False when the submission repeated the latest revision verbatim.
    pub created: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RefinementPresentation {
    pub prechecked: BTreeSet<ClassId>,
    pub proposals: ProposalSet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub stage: Option<Stage>,
    pub done: usize,
    pub total: usize,
}

type RecordKey = (String, String, Stage);

/// In-memory workflow state, derived from the setup plus the event log.
pub struct Workflow {
    setup: WorkflowSetup,
    roster: BTreeMap<String, AnnotatorProfile>,
    image_batch: HashMap<String, usize>,
    image_order: Vec<String>,
    phase: Phase,
    records: BTreeMap<RecordKey, Vec<AnnotationRecord>>,
    agreement: BTreeMap<String, AgreementResult>,
    queue: Vec<String>,
    slices: Option<BTreeMap<String, Vec<String>>>,
    refiner_of: HashMap<String, String>,
    triage: BTreeMap<String, TriageRecord>,
    log: Vec<Event>,
    sink: Option<Box<dyn EventSink>>,
}

impl Workflow {
    pub fn new(setup: WorkflowSetup) -> Result<Self> {
        let mut roster = BTreeMap::new();
        for p in &setup.roster {
            if roster.insert(p.annotator_id.clone(), p.clone()).is_some() {
                return Err(WorkflowError::DuplicateAnnotator(p.annotator_id.clone()));
            }
        }
        let mut image_batch = HashMap::new();
        let mut image_order = Vec::new();
        for (i, b) in setup.batches.iter().enumerate() {
            for a in &b.assigned_annotators {
                if !roster.contains_key(a) {
                    return Err(WorkflowError::UnknownAnnotator(a.clone()));
                }
            }
            let distinct: BTreeSet<&String> = b.assigned_annotators.iter().collect();
            if distinct.len() != b.assigned_annotators.len() || distinct.is_empty() {
                return Err(WorkflowError::Setup(format!(
                    "batch {} needs distinct, non-empty annotators",
                    b.batch_id
                )));
            }
            for img in &b.image_ids {
                if image_batch.insert(img.clone(), i).is_some() {
                    return Err(WorkflowError::Setup(format!("image {img:?} appears in two batches")));
                }
                if !setup.proposals.contains_key(img) {
                    return Err(WorkflowError::Setup(format!("image {img:?} has no proposals")));
                }
                if !setup.originals.contains_key(img) {
                    return Err(WorkflowError::Setup(format!("image {img:?} has no original label")));
                }
                image_order.push(img.clone());
            }
        }
        if image_batch.len() != setup.originals.len() {
            return Err(WorkflowError::Setup(format!(
                "batches cover {} of {} images",
                image_batch.len(),
                setup.originals.len()
            )));
        }
        Ok(Workflow {
            setup,
            roster,
            image_batch,
            image_order,
            phase: Phase::Initial,
            records: BTreeMap::new(),
            agreement: BTreeMap::new(),
            queue: Vec::new(),
            slices: None,
            refiner_of: HashMap::new(),
            triage: BTreeMap::new(),
            log: Vec::new(),
            sink: None,
        })
    }

    /// Persists every future event to `sink` before applying it.
    pub fn with_sink(mut self, sink: Box<dyn EventSink>) -> Self {
        self.sink = Some(sink);
        self
    }

    /// Rebuilds state by re-applying a previously written log.
    pub fn replay(setup: WorkflowSetup, events: impl IntoIterator<Item = Event>) -> Result<Self> {
        let mut wf = Workflow::new(setup)?;
        for event in events {
            let expected = wf.log.len() as u64 + 1;
            if event.seq != expected {
                return Err(WorkflowError::Replay {
                    seq: event.seq,
                    message: format!("expected sequence number {expected}"),
                });
            }
            wf.apply(&event)?;
            wf.log.push(event);
        }
        Ok(wf)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn setup(&self) -> &WorkflowSetup {
        &self.setup
    }

    pub fn events(&self) -> &[Event] {
        &self.log
    }

    /// Images in batch order.
    pub fn image_ids(&self) -> &[String] {
        &self.image_order
    }

    pub fn annotator(&self, id: &str) -> Option<&AnnotatorProfile> {
        self.roster.get(id)
    }

    pub fn proposals_for(&self, image_id: &str) -> Option<&ProposalSet> {
        self.setup.proposals.get(image_id)
    }

    pub fn batch_of(&self, image_id: &str) -> Option<&Batch> {
        self.image_batch.get(image_id).map(|&i| &self.setup.batches[i])
    }

    pub fn history(&self, annotator_id: &str, image_id: &str, stage: Stage) -> &[AnnotationRecord] {
        self.records
            .get(&(annotator_id.to_owned(), image_id.to_owned(), stage))
            .map_or(&[], Vec::as_slice)
    }

    pub fn latest(&self, annotator_id: &str, image_id: &str, stage: Stage) -> Option<&AnnotationRecord> {
        self.history(annotator_id, image_id, stage).last()
    }

    fn commit(&mut self, kind: EventKind) -> Result<()> {
        let event = Event {
            seq: self.log.len() as u64 + 1,
            recorded_at: Utc::now(),
            kind,
        };
        if let Some(sink) = self.sink.as_mut() {
            sink.append(&event)?;
        }
        self.apply(&event)?;
        self.log.push(event);
        Ok(())
    }

    fn apply(&mut self, event: &Event) -> Result<()> {
        let replay_err = |message: String| WorkflowError::Replay {
            seq: event.seq,
            message,
        };
        match &event.kind {
            EventKind::Annotation { record } => {
                let key = (record.annotator_id.clone(), record.image_id.clone(), record.stage);
                let history = self.records.entry(key).or_default();
                let expected = history.len() as u32 + 1;
                if record.revision != expected {
                    return Err(replay_err(format!(
                        "revision {} where {expected} was expected",
                        record.revision
                    )));
                }
                history.push(record.clone());
            }
            EventKind::Triage { record } => {
                self.triage.insert(record.image_id.clone(), record.clone());
            }
            EventKind::RefinementAssigned { slices } => {
                self.refiner_of = slices
                    .iter()
                    .flat_map(|(a, imgs)| imgs.iter().map(move |i| (i.clone(), a.clone())))
                    .collect();
                self.slices = Some(slices.clone());
            }
            EventKind::StageTransition { from, to } => {
                if *from != self.phase || from.next() != Some(*to) {
                    return Err(replay_err(format!("transition {from} -> {to} while in {}", self.phase)));
                }
                if *to == Phase::Analysis {
                    self.run_agreement().map_err(|e| replay_err(e.to_string()))?;
                }
                self.phase = *to;
            }
        }
        Ok(())
    }

    fn run_agreement(&mut self) -> std::result::Result<(), agreement::AgreementError> {
        let mut results = Vec::with_capacity(self.image_order.len());
        for image_id in &self.image_order {
            let batch = &self.setup.batches[self.image_batch[image_id]];
            let submissions: Vec<Option<BTreeSet<ClassId>>> = batch
                .assigned_annotators
                .iter()
                .map(|a| {
                    self.latest(a, image_id, Stage::Initial)
                        .map(|r| r.selected_labels.clone())
                })
                .collect();
            results.push(agreement::check_submissions(
                image_id,
                &submissions,
                self.setup.originals[image_id],
            )?);
        }
        self.queue = agreement::build_refinement_queue(&results)?.queue;
        self.agreement = results.into_iter().map(|r| (r.image_id.clone(), r)).collect();
        Ok(())
    }

    /// Accepts one annotation; returns the authoritative revision.
    pub fn submit(&mut self, sub: Submission) -> Result<SubmitOutcome> {
        if !self.roster.contains_key(&sub.annotator_id) {
            return Err(WorkflowError::UnknownAnnotator(sub.annotator_id));
        }
        let batch = self
            .batch_of(&sub.image_id)
            .ok_or_else(|| WorkflowError::UnknownImage(sub.image_id.clone()))?;
        if self.phase.open_stage() != Some(sub.stage) {
            return Err(WorkflowError::StaleStage {
                phase: self.phase,
                stage: sub.stage,
            });
        }
        let not_assigned = || WorkflowError::NotAssigned {
            annotator_id: sub.annotator_id.clone(),
            image_id: sub.image_id.clone(),
            stage: sub.stage,
        };
        let comment = sub
            .comment
            .as_deref()
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::to_owned);
        match sub.stage {
            Stage::Initial => {
                if !batch.assigned_annotators.contains(&sub.annotator_id) {
                    return Err(not_assigned());
                }
                let proposals = &self.setup.proposals[&sub.image_id];
                self.check_labels(&sub, proposals)?;
            }
            Stage::Refinement => {
                if !self.agreement_needs_refinement(&sub.image_id) {
                    return Err(WorkflowError::NotQueued(sub.image_id.clone()));
                }
                if self.refiner_of.get(&sub.image_id) != Some(&sub.annotator_id) {
                    return Err(not_assigned());
                }
                let presentation = self.refinement_presentation(&sub.image_id)?;
                self.check_labels(&sub, &presentation.proposals)?;
                if sub.selected_labels != presentation.prechecked && comment.is_none() {
                    return Err(WorkflowError::MissingComment);
                }
            }
        }
        if let Some(last) = self.latest(&sub.annotator_id, &sub.image_id, sub.stage) {
            if last.selected_labels == sub.selected_labels && last.comment == comment {
                return Ok(SubmitOutcome {
                    revision: last.revision,
                    created: false,
                });
            }
        }
        let revision = self.history(&sub.annotator_id, &sub.image_id, sub.stage).len() as u32 + 1;
        let record = AnnotationRecord {
            annotator_id: sub.annotator_id,
            image_id: sub.image_id,
            stage: sub.stage,
            selected_labels: sub.selected_labels,
            comment,
            revision,
            submitted_at: Utc::now(),
        };
        self.commit(EventKind::Annotation { record })?;
        Ok(SubmitOutcome {
            revision,
            created: true,
        })
    }

    fn check_labels(&self, sub: &Submission, proposals: &ProposalSet) -> Result<()> {
        match sub.selected_labels.iter().find(|c| !proposals.contains(**c)) {
            Some(&class_id) => Err(WorkflowError::LabelNotProposed {
                image_id: sub.image_id.clone(),
                class_id,
            }),
            None => Ok(()),
        }
    }

    fn agreement_needs_refinement(&self, image_id: &str) -> bool {
        self.agreement
            .get(image_id)
            .is_some_and(|r| r.status == AgreementStatus::NeedsRefinement)
    }

    /// Pre-checked labels (union of the initial selections) and the proposal
    /// list shown to the refining annotator.
    pub fn refinement_presentation(&self, image_id: &str) -> Result<RefinementPresentation> {
        if !self.agreement_needs_refinement(image_id) {
            return Err(WorkflowError::NotQueued(image_id.to_owned()));
        }
        let batch = self.batch_of(image_id).expect("queued images are batched");
        let prechecked: BTreeSet<ClassId> = batch
            .assigned_annotators
            .iter()
            .filter_map(|a| self.latest(a, image_id, Stage::Initial))
            .flat_map(|r| r.selected_labels.iter().copied())
            .collect();
        let full = &self.setup.proposals[image_id];
        let shown: Vec<ClassId> = full
            .ranked_labels
            .iter()
            .take(self.setup.config.refinement_k)
            .copied()
            .collect();
        let rank: HashMap<ClassId, usize> = full.labels().enumerate().map(|(i, c)| (c, i)).collect();
        let mut extra: Vec<ClassId> = prechecked.iter().filter(|c| !shown.contains(c)).copied().collect();
        extra.sort_by_key(|c| (rank.get(c).copied().unwrap_or(usize::MAX), *c));
        Ok(RefinementPresentation {
            prechecked,
            proposals: ProposalSet {
                image_id: image_id.to_owned(),
                ranked_labels: shown,
                extra_labels: extra,
            },
        })
    }

    /// Records the refinement slices. Only valid during analysis.
    pub fn assign_refinement(&mut self, experienced: &[String]) -> Result<BTreeMap<String, Vec<String>>> {
        if self.phase != Phase::Analysis {
            return Err(WorkflowError::InvalidTransition {
                from: self.phase,
                to: Phase::Refinement,
            });
        }
        if self.slices.is_some() {
            return Err(WorkflowError::RefinementAlreadyAssigned);
        }
        for a in experienced {
            let profile = self
                .roster
                .get(a)
                .ok_or_else(|| WorkflowError::UnknownAnnotator(a.clone()))?;
            if profile.experience_tier != ExperienceTier::Experienced {
                return Err(WorkflowError::NotExperienced(a.clone()));
            }
        }
        let slices = super::assign_refinement(&self.queue, experienced)?;
        self.commit(EventKind::RefinementAssigned { slices: slices.clone() })?;
        Ok(slices)
    }

    /// Experienced-tier annotators in roster order.
    pub fn experienced_annotators(&self) -> Vec<String> {
        self.setup
            .roster
            .iter()
            .filter(|p| p.experience_tier == ExperienceTier::Experienced)
            .map(|p| p.annotator_id.clone())
            .collect()
    }

    /// Moves to the next phase.
    pub fn advance(&mut self, to: Phase) -> Result<()> {
        if self.phase.next() != Some(to) {
            return Err(WorkflowError::InvalidTransition { from: self.phase, to });
        }
        match to {
            Phase::Refinement if self.slices.is_none() && !self.queue.is_empty() => {
                return Err(WorkflowError::RefinementNotAssigned);
            }
            Phase::Final => {
                let missing = self
                    .queue
                    .iter()
                    .filter(|img| self.refined_labels(img).is_none())
                    .count();
                if missing > 0 {
                    return Err(WorkflowError::IncompleteRefinement(missing));
                }
            }
            _ => {}
        }
        self.commit(EventKind::StageTransition { from: self.phase, to })
    }

    fn refined_labels(&self, image_id: &str) -> Option<&BTreeSet<ClassId>> {
        let refiner = self.refiner_of.get(image_id)?;
        self.latest(refiner, image_id, Stage::Refinement)
            .map(|r| &r.selected_labels)
    }

    /// Agreement results in batch order; empty before analysis.
    pub fn agreement_results(&self) -> Vec<AgreementResult> {
        self.image_order
            .iter()
            .filter_map(|i| self.agreement.get(i).cloned())
            .collect()
    }

    /// Images needing refinement, sorted by image id.
    pub fn refinement_queue(&self) -> &[String] {
        &self.queue
    }

    pub fn refinement_slices(&self) -> Option<&BTreeMap<String, Vec<String>>> {
        self.slices.as_ref()
    }

    /// `(refiner, image)` pairs where the refiner also annotated the image in
    /// the initial stage.
    pub fn refiner_overlaps(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .refiner_of
            .iter()
            .filter(|(img, refiner)| {
                self.batch_of(img)
                    .is_some_and(|b| b.assigned_annotators.contains(refiner))
            })
            .map(|(img, refiner)| (refiner.clone(), img.clone()))
            .collect();
        out.sort();
        out
    }

    /// Final label set of one image.
    pub fn finalize_labels(&self, image_id: &str) -> Result<MultiLabelGroundTruth> {
        if !self.image_batch.contains_key(image_id) {
            return Err(WorkflowError::UnknownImage(image_id.to_owned()));
        }
        let result = self
            .agreement
            .get(image_id)
            .ok_or_else(|| WorkflowError::NotComplete(image_id.to_owned()))?;
        let label_set = match result.status {
            AgreementStatus::Agreed => result.annotator_sets[0].clone(),
            AgreementStatus::NeedsRefinement => self
                .refined_labels(image_id)
                .cloned()
                .ok_or_else(|| WorkflowError::NotComplete(image_id.to_owned()))?,
        };
        Ok(MultiLabelGroundTruth {
            image_id: image_id.to_owned(),
            label_set,
        })
    }

    /// Final labels for every image, in batch order.
    pub fn final_labels(&self) -> Result<Vec<MultiLabelGroundTruth>> {
        self.image_order.iter().map(|i| self.finalize_labels(i)).collect()
    }

    pub fn record_triage(&mut self, record: TriageRecord) -> Result<bool> {
        let profile = self
            .roster
            .get(&record.annotator_id)
            .ok_or_else(|| WorkflowError::UnknownAnnotator(record.annotator_id.clone()))?;
        if profile.experience_tier != ExperienceTier::Experienced {
            return Err(WorkflowError::NotExperienced(record.annotator_id.clone()));
        }
        if !self.finalize_labels(&record.image_id)?.label_set.is_empty() {
            return Err(WorkflowError::TriageNotEligible(record.image_id.clone()));
        }
        if self.triage.get(&record.image_id) == Some(&record) {
            return Ok(false);
        }
        self.commit(EventKind::Triage { record })?;
        Ok(true)
    }

    /// Latest triage per image, sorted by image id.
    pub fn triage_records(&self) -> Vec<TriageRecord> {
        self.triage.values().cloned().collect()
    }

    /// The images an annotator works through in the current phase.
    pub fn task_slice(&self, annotator_id: &str) -> Option<(Stage, Vec<String>)> {
        match self.phase.open_stage()? {
            Stage::Initial => {
                let images: Vec<String> = self
                    .setup
                    .batches
                    .iter()
                    .filter(|b| b.assigned_annotators.iter().any(|a| a == annotator_id))
                    .flat_map(|b| b.image_ids.iter().cloned())
                    .collect();
                (!images.is_empty()).then_some((Stage::Initial, images))
            }
            Stage::Refinement => {
                let images = self.slices.as_ref()?.get(annotator_id)?.clone();
                Some((Stage::Refinement, images))
            }
        }
    }

    /// First image in the annotator's slice without a submission from them.
    pub fn next_task(&self, annotator_id: &str) -> Option<(String, Stage)> {
        let (stage, images) = self.task_slice(annotator_id)?;
        images
            .into_iter()
            .find(|img| self.latest(annotator_id, img, stage).is_none())
            .map(|img| (img, stage))
    }

    pub fn progress(&self, annotator_id: &str) -> Progress {
        match self.task_slice(annotator_id) {
            Some((stage, images)) => Progress {
                stage: Some(stage),
                done: images
                    .iter()
                    .filter(|img| self.latest(annotator_id, img, stage).is_some())
                    .count(),
                total: images.len(),
            },
            None => Progress {
                stage: None,
                done: 0,
                total: 0,
            },
        }
    }
}
