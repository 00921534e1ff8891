//! Run-directory orchestration for the operator pipeline.
//!
//! A run directory holds the normalized input store, every derived artifact,
//! the workflow event log and `manifest.json`, which records which stages
//! have completed. A stage runs only once every earlier stage is complete;
//! rerunning a completed stage needs `force` and invalidates later stages.
//!
//! ```text
//! <run>/
//!   manifest.json
//!   store/       catalog.jsonl images.jsonl predictions.jsonl reference.jsonl
//!   artifacts/   model_selection.csv proposals.jsonl roster.jsonl batches.json
//!                agreement.csv agreement_summary.json refinement_queue.txt
//!                refinement_slices.json refiner_overlaps.csv final_labels.jsonl
//!   events.jsonl
//!   reports/     label_distribution.{json,csv} leaderboard.csv regression.json
//!                heatmap.csv heatmap_rollup.csv triage.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;

use crate::agreement::{self, AgreementError, AgreementSummary};
use crate::catalog::{
    self, CatalogError, ClassCatalog, ClassId, ImageRegistry, IngestSummary, MultiLabelGroundTruth, PredictionStore,
};
use crate::fixture::{self, AnnotatorModel, Fixture};
use crate::jsonl::{self, JsonlError};
use crate::metrics::{self, Bucketing, MetricsError, MoeMode, SUMMARY_ROLLUP};
use crate::proposals::{self, Candidate, EmptySetPolicy, ProposalError, ProposalSet, Selection, DEFAULT_K};
use crate::workflow::{
    self, AnnotatorProfile, Batch, FileEventLog, Phase, Submission, TriageRecord, Workflow, WorkflowConfig,
    WorkflowError, WorkflowSetup,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: String, message: String },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0} has no manifest.json; run `ingest` first")]
    NotInitialized(String),
    #[error("`{stage}` requires `{missing}` to complete first")]
    OutOfOrder {
        stage: PipelineStage,
        missing: PipelineStage,
    },
    #[error("`{0}` already completed; pass --force to rerun it")]
    AlreadyComplete(PipelineStage),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Gated pipeline stages, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineStage {
    Ingest,
    SelectModel,
    Propose,
    MakeBatches,
    AnalyzeAgreement,
    AssignRefinement,
    Finalize,
    Report,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 8] = [
        PipelineStage::Ingest,
        PipelineStage::SelectModel,
        PipelineStage::Propose,
        PipelineStage::MakeBatches,
        PipelineStage::AnalyzeAgreement,
        PipelineStage::AssignRefinement,
        PipelineStage::Finalize,
        PipelineStage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineStage::Ingest => "ingest",
            PipelineStage::SelectModel => "select-model",
            PipelineStage::Propose => "propose",
            PipelineStage::MakeBatches => "make-batches",
            PipelineStage::AnalyzeAgreement => "analyze-agreement",
            PipelineStage::AssignRefinement => "assign-refinement",
            PipelineStage::Finalize => "finalize",
            PipelineStage::Report => "report",
        }
    }
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k: usize,
    pub num_batches: usize,
    pub per_batch: usize,
    pub moe_mode: MoeMode,
    pub empty_set_policy: EmptySetPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: DEFAULT_K,
            num_batches: 7,
            per_batch: 2,
            moe_mode: MoeMode::Wald,
            empty_set_policy: EmptySetPolicy::Exclude,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: PipelineStage,
    pub completed_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLayout {
    pub batch_id: u32,
    pub n_images: usize,
    pub first_image: Option<String>,
    pub last_image: Option<String>,
    pub annotators: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 prefix over the normalized input store.
    pub run_id: String,
    pub seed: Option<u64>,
    pub config: RunConfig,
    pub selected_model: Option<String>,
    /// Access keys are never copied here.
    pub roster: Vec<AnnotatorProfile>,
    pub batch_layout: Vec<BatchLayout>,
    /// Completed stages in order.
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn is_complete(&self, stage: PipelineStage) -> bool {
        self.stages.iter().any(|s| s.stage == stage)
    }
}

/// Files handed to `ingest`.
#[derive(Clone, Debug)]
pub struct IngestInputs {
    pub catalog: PathBuf,
    pub images: PathBuf,
    pub predictions: Vec<PathBuf>,
    /// Multi-label reference for model selection.
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct BatchOptions {
    pub roster: PathBuf,
    pub num_batches: usize,
    pub per_batch: usize,
    pub seed: u64,
}

/// What `simulate` did in the current phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SimulationOutcome {
    pub phase: Phase,
    pub accepted: usize,
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(jsonl::read_file(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Writes a generated dataset as the input files `ingest` expects.
pub fn write_fixture(dir: &Path, fx: &Fixture) -> Result<()> {
    write_atomic(&dir.join("catalog.jsonl"), jsonl::to_string(&fx.catalog).as_bytes())?;
    write_atomic(&dir.join("images.jsonl"), jsonl::to_string(&fx.images).as_bytes())?;
    write_atomic(&dir.join("predictions.jsonl"), jsonl::to_string(&fx.predictions).as_bytes())?;
    write_atomic(&dir.join("reference.jsonl"), jsonl::to_string(&fx.reference).as_bytes())?;
    write_atomic(&dir.join("roster.jsonl"), jsonl::to_string(&fx.roster).as_bytes())?;
    write_atomic(&dir.join("truth.jsonl"), jsonl::to_string(&fx.truth).as_bytes())
}

/// The validated input store of a run.
pub struct Store {
    pub catalog: ClassCatalog,
    pub registry: ImageRegistry,
    pub predictions: PredictionStore,
    pub reference: Option<Vec<MultiLabelGroundTruth>>,
}

impl Store {
    /// Top-1 predictions per model.
    pub fn candidates(&self) -> Vec<Candidate> {
        self.predictions
            .model_ids()
            .into_iter()
            .map(|m| Candidate {
                predictions: self.predictions.top1_map(&m),
                model_id: m,
            })
            .collect()
    }
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let path = self.path("manifest.json");
        if !path.exists() {
            return Err(PipelineError::NotInitialized(self.root.display().to_string()));
        }
        read_json(&path)
    }

    fn save_manifest(&self, m: &RunManifest) -> Result<()> {
        write_atomic(&self.path("manifest.json"), pretty(m).as_bytes())
    }

    fn begin(&self, stage: PipelineStage, force: bool) -> Result<RunManifest> {
        let m = self.manifest()?;
        if let Some(&missing) = PipelineStage::ALL
            .iter()
            .take_while(|s| **s < stage)
            .find(|s| !m.is_complete(**s))
        {
            return Err(PipelineError::OutOfOrder { stage, missing });
        }
        if m.is_complete(stage) && !force {
            return Err(PipelineError::AlreadyComplete(stage));
        }
        Ok(m)
    }

    fn complete(&self, mut m: RunManifest, stage: PipelineStage) -> Result<()> {
        m.stages.retain(|s| s.stage < stage);
        m.stages.push(StageRecord {
            stage,
            completed_at: Utc::now(),
        });
        if stage <= PipelineStage::MakeBatches {
            let log = self.path("events.jsonl");
            if log.exists() {
                let old = self.path("events.superseded.jsonl");
                fs::rename(&log, &old).map_err(io_err(&log))?;
                tracing::warn!(path = %old.display(), "annotation log superseded by rerun");
            }
        }
        self.save_manifest(&m)?;
        info!(%stage, "stage complete");
        Ok(())
    }

    fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        write_atomic(&self.path(rel), contents.as_ref())
    }

    pub fn load_store(&self) -> Result<Store> {
        let catalog = catalog::load_catalog(&self.path("store/catalog.jsonl"))?;
        let registry = ImageRegistry::load(&self.path("store/images.jsonl"), &catalog)?;
        let mut predictions = PredictionStore::new();
        catalog::ingest_predictions(&self.path("store/predictions.jsonl"), &catalog, &registry, &mut predictions)?;
        let ref_path = self.path("store/reference.jsonl");
        let reference = if ref_path.exists() {
            Some(catalog::load_ground_truth(&ref_path, &catalog, &registry)?)
        } else {
            None
        };
        Ok(Store {
            catalog,
            registry,
            predictions,
            reference,
        })
    }

    /// Validates the inputs and writes the normalized store. Starts a fresh
    /// manifest; with `force` every later stage is invalidated.
    pub fn ingest(&self, inputs: &IngestInputs, force: bool) -> Result<IngestSummary> {
        let prior = match self.manifest() {
            Ok(m) if m.is_complete(PipelineStage::Ingest) && !force => {
                return Err(PipelineError::AlreadyComplete(PipelineStage::Ingest))
            }
            Ok(m) => Some(m),
            Err(PipelineError::NotInitialized(_)) => None,
            Err(e) => return Err(e),
        };
        let catalog = catalog::load_catalog(&inputs.catalog)?;
        let registry = ImageRegistry::load(&inputs.images, &catalog)?;
        let mut store = PredictionStore::new();
        let mut summary = IngestSummary::default();
        for p in &inputs.predictions {
            let s = catalog::ingest_predictions(p, &catalog, &registry, &mut store)?;
            summary.inserted += s.inserted;
            summary.unchanged += s.unchanged;
            summary.replaced += s.replaced;
        }
        let reference = inputs
            .reference
            .as_deref()
            .map(|p| catalog::load_ground_truth(p, &catalog, &registry))
            .transpose()?;

        let files = [
            ("store/catalog.jsonl", catalog.to_jsonl()),
            ("store/images.jsonl", registry.to_jsonl()),
            ("store/predictions.jsonl", store.to_jsonl()),
        ];
        let mut digest = Sha256::new();
        for (rel, text) in &files {
            digest.update(rel.as_bytes());
            digest.update(text.as_bytes());
            self.write(rel, text)?;
        }
        let ref_path = self.path("store/reference.jsonl");
        match &reference {
            Some(r) => {
                let text = catalog::ground_truth_to_jsonl(r);
                digest.update(b"store/reference.jsonl");
                digest.update(text.as_bytes());
                self.write("store/reference.jsonl", text)?;
            }
            None if ref_path.exists() => fs::remove_file(&ref_path).map_err(io_err(&ref_path))?,
            None => {}
        }
        let manifest = RunManifest {
            run_id: hex::encode(&digest.finalize()[..8]),
            seed: None,
            config: prior.map(|m| m.config).unwrap_or_default(),
            selected_model: None,
            roster: Vec::new(),
            batch_layout: Vec::new(),
            stages: Vec::new(),
        };
        self.complete(manifest, PipelineStage::Ingest)?;
        Ok(summary)
    }

    /// Scores every ingested model against the reference and records the
    /// best one.
    pub fn select_model(&self, policy: EmptySetPolicy, force: bool) -> Result<Selection> {
        let mut m = self.begin(PipelineStage::SelectModel, force)?;
        let store = self.load_store()?;
        let reference = store
            .reference
            .as_ref()
            .ok_or_else(|| PipelineError::Invalid("model selection needs a reference label file at ingest".into()))?;
        let selection =
            proposals::select_model(&store.candidates(), reference, &store.registry.originals(), policy)?;
        self.write("artifacts/model_selection.csv", proposals::leaderboard_csv(&selection.leaderboard))?;
        m.selected_model = Some(selection.best.model_id.clone());
        m.config.empty_set_policy = policy;
        self.complete(m, PipelineStage::SelectModel)?;
        Ok(selection)
    }

    /// Top-`k` proposals of the selected model for every image.
    pub fn propose(&self, k: usize, force: bool) -> Result<usize> {
        let mut m = self.begin(PipelineStage::Propose, force)?;
        let store = self.load_store()?;
        let model = m.selected_model.clone().expect("set by select-model");
        let sets = store
            .registry
            .records()
            .iter()
            .map(|img| {
                let pred = store
                    .predictions
                    .get(&model, &img.image_id)
                    .ok_or_else(|| ProposalError::MissingPrediction(img.image_id.clone()))?;
                proposals::generate_proposals(pred, k)
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.write("artifacts/proposals.jsonl", jsonl::to_string(&sets))?;
        m.config.k = k;
        self.complete(m, PipelineStage::Propose)?;
        Ok(sets.len())
    }

    /// Splits the images into batches and assigns annotators from the roster.
    pub fn make_batches(&self, opts: &BatchOptions, force: bool) -> Result<Vec<Batch>> {
        let mut m = self.begin(PipelineStage::MakeBatches, force)?;
        let store = self.load_store()?;
        let roster: Vec<AnnotatorProfile> = read_records(&opts.roster)?;
        let mut seen = BTreeSet::new();
        if let Some(dup) = roster.iter().find(|p| !seen.insert(p.annotator_id.as_str())) {
            return Err(WorkflowError::DuplicateAnnotator(dup.annotator_id.clone()).into());
        }
        let ids: Vec<String> = roster.iter().map(|p| p.annotator_id.clone()).collect();
        let batches = workflow::create_batches(
            &store.registry.image_ids(),
            opts.num_batches,
            &ids,
            opts.per_batch,
            opts.seed,
        )?;
        self.write("artifacts/roster.jsonl", jsonl::to_string(&roster))?;
        self.write("artifacts/batches.json", pretty(&batches))?;
        m.seed = Some(opts.seed);
        m.config.num_batches = opts.num_batches;
        m.config.per_batch = opts.per_batch;
        m.roster = roster
            .iter()
            .map(|p| AnnotatorProfile {
                access_key: None,
                ..p.clone()
            })
            .collect();
        m.batch_layout = batches
            .iter()
            .map(|b| BatchLayout {
                batch_id: b.batch_id,
                n_images: b.image_ids.len(),
                first_image: b.image_ids.first().cloned(),
                last_image: b.image_ids.last().cloned(),
                annotators: b.assigned_annotators.clone(),
            })
            .collect();
        self.complete(m, PipelineStage::MakeBatches)?;
        Ok(batches)
    }

    /// Rebuilds the workflow from the setup artifacts and the event log, with
    /// new events appended to the same log.
    pub fn open_workflow(&self) -> Result<Workflow> {
        let m = self.manifest()?;
        if !m.is_complete(PipelineStage::MakeBatches) {
            return Err(PipelineError::Invalid(
                "annotation requires `make-batches` to complete first".into(),
            ));
        }
        let store = self.load_store()?;
        let proposals: BTreeMap<String, ProposalSet> = read_records::<ProposalSet>(&self.path("artifacts/proposals.jsonl"))?
            .into_iter()
            .map(|p| (p.image_id.clone(), p))
            .collect();
        let setup = WorkflowSetup {
            originals: store.registry.originals(),
            proposals,
            batches: read_json(&self.path("artifacts/batches.json"))?,
            roster: read_records(&self.path("artifacts/roster.jsonl"))?,
            config: WorkflowConfig { refinement_k: m.config.k },
        };
        let log_path = self.path("events.jsonl");
        let events = workflow::read_event_log(&log_path)?;
        let sink = FileEventLog::open(&log_path).map_err(io_err(&log_path))?;
        Ok(Workflow::replay(setup, events)?.with_sink(Box::new(sink)))
    }

    /// Applies submissions from a line-delimited file. Returns how many
    /// created a new revision.
    pub fn import_annotations(&self, path: &Path) -> Result<usize> {
        let subs: Vec<Submission> = read_records(path)?;
        let mut wf = self.open_workflow()?;
        let mut created = 0;
        for s in subs {
            created += usize::from(wf.submit(s)?.created);
        }
        Ok(created)
    }

    pub fn import_triage(&self, path: &Path) -> Result<usize> {
        let records: Vec<TriageRecord> = read_records(path)?;
        let mut wf = self.open_workflow()?;
        let mut created = 0;
        for r in records {
            created += usize::from(wf.record_triage(r)?);
        }
        Ok(created)
    }

    /// Lets simulated annotators work the current phase: initial or
    /// refinement submissions, or zero-label triage once final.
    pub fn simulate(&self, truth: &Path, error_rate: f64, seed: u64) -> Result<SimulationOutcome> {
        if !(0.0..=1.0).contains(&error_rate) {
            return Err(PipelineError::Invalid(format!("error rate {error_rate} outside [0, 1]")));
        }
        let truth: BTreeMap<String, BTreeSet<ClassId>> = read_records::<MultiLabelGroundTruth>(truth)?
            .into_iter()
            .map(|g| (g.image_id, g.label_set))
            .collect();
        let mut wf = self.open_workflow()?;
        let phase = wf.phase();
        let accepted = match phase {
            Phase::Initial | Phase::Refinement => {
                fixture::simulate_stage(&mut wf, &truth, AnnotatorModel::with_error_rate(error_rate), seed)?
            }
            Phase::Final => fixture::simulate_triage(&mut wf, seed)?,
            Phase::Analysis => {
                return Err(PipelineError::Invalid(
                    "nothing to annotate during analysis; run `assign-refinement`".into(),
                ))
            }
        };
        Ok(SimulationOutcome { phase, accepted })
    }

    /// Closes the initial stage and writes the agreement report and queue.
    pub fn analyze_agreement(&self, force: bool) -> Result<AgreementSummary> {
        let m = self.begin(PipelineStage::AnalyzeAgreement, force)?;
        let mut wf = self.open_workflow()?;
        if wf.phase() == Phase::Initial {
            wf.advance(Phase::Analysis)?;
        }
        let results = wf.agreement_results();
        let queue = agreement::build_refinement_queue(&results)?;
        self.write("artifacts/agreement.csv", agreement::agreement_csv(&results))?;
        self.write("artifacts/agreement_summary.json", pretty(&queue.summary))?;
        let queue_text: String = queue.queue.iter().map(|i| format!("{i}\n")).collect();
        self.write("artifacts/refinement_queue.txt", queue_text)?;
        self.complete(m, PipelineStage::AnalyzeAgreement)?;
        Ok(queue.summary)
    }

    /// Splits the refinement queue over `refiners` (default: every
    /// experienced annotator) and opens the refinement stage.
    pub fn assign_refinement(&self, refiners: Option<&[String]>, force: bool) -> Result<BTreeMap<String, Vec<String>>> {
        let m = self.begin(PipelineStage::AssignRefinement, force)?;
        let mut wf = self.open_workflow()?;
        if wf.phase() == Phase::Analysis {
            if !wf.refinement_queue().is_empty() && wf.refinement_slices().is_none() {
                let chosen = refiners.map(<[String]>::to_vec).unwrap_or_else(|| wf.experienced_annotators());
                wf.assign_refinement(&chosen)?;
            }
            wf.advance(Phase::Refinement)?;
        } else if refiners.is_some() {
            return Err(PipelineError::Invalid(
                "refinement slices are already fixed in the event log".into(),
            ));
        }
        let slices = wf.refinement_slices().cloned().unwrap_or_default();
        self.write("artifacts/refinement_slices.json", pretty(&slices))?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["refiner", "image_id"]).expect("in-memory write");
        for (refiner, image) in wf.refiner_overlaps() {
            w.write_record([refiner, image]).expect("in-memory write");
        }
        self.write("artifacts/refiner_overlaps.csv", w.into_inner().expect("in-memory flush"))?;
        self.complete(m, PipelineStage::AssignRefinement)?;
        Ok(slices)
    }

    /// Closes refinement and writes the final label set of every image.
    pub fn finalize(&self, force: bool) -> Result<Vec<MultiLabelGroundTruth>> {
        let m = self.begin(PipelineStage::Finalize, force)?;
        let mut wf = self.open_workflow()?;
        if wf.phase() == Phase::Refinement {
            wf.advance(Phase::Final)?;
        }
        let labels = wf.final_labels()?;
        self.write("artifacts/final_labels.jsonl", catalog::ground_truth_to_jsonl(&labels))?;
        self.complete(m, PipelineStage::Finalize)?;
        Ok(labels)
    }

    /// Writes every report over the final labels. Returns the files written,
    /// relative to the run directory.
    pub fn report(&self, moe: MoeMode, policy: EmptySetPolicy, force: bool) -> Result<Vec<String>> {
        let mut m = self.begin(PipelineStage::Report, force)?;
        let store = self.load_store()?;
        let wf = self.open_workflow()?;
        let labels: Vec<MultiLabelGroundTruth> = read_records(&self.path("artifacts/final_labels.jsonl"))?;
        let originals = store.registry.originals();
        let mut written = Vec::new();
        let mut put = |rel: &str, text: String| -> Result<()> {
            self.write(rel, text)?;
            written.push(rel.to_owned());
            Ok(())
        };

        let dist = metrics::label_count_distribution(&labels)?;
        put("reports/label_distribution.json", metrics::distribution_json(&dist))?;
        put("reports/label_distribution.csv", metrics::distribution_csv(&dist))?;

        let label_ids: BTreeSet<&String> = labels.iter().map(|g| &g.image_id).collect();
        let models: Vec<Candidate> = store
            .candidates()
            .into_iter()
            .map(|mut c| {
                c.predictions.retain(|img, _| label_ids.contains(img));
                c
            })
            .collect();
        let zoo = metrics::evaluate_model_zoo(&models, &labels, &originals, policy)?;
        put("reports/leaderboard.csv", proposals::leaderboard_csv(&zoo.leaderboard))?;
        put("reports/regression.json", metrics::regression_json(&zoo))?;

        for (rel, bucketing) in [
            ("reports/heatmap.csv", Bucketing::Granular),
            ("reports/heatmap_rollup.csv", SUMMARY_ROLLUP),
        ] {
            let mut cells = Vec::new();
            for c in &models {
                cells.extend(metrics::accuracy_by_label_count(
                    &c.model_id,
                    &c.predictions,
                    &labels,
                    &originals,
                    bucketing,
                    moe,
                )?);
            }
            put(rel, metrics::heatmap_csv(&cells))?;
        }

        let triage = wf.triage_records();
        let triage_path = self.path("reports/triage.json");
        if triage.is_empty() {
            if triage_path.exists() {
                fs::remove_file(&triage_path).map_err(io_err(&triage_path))?;
            }
        } else {
            put("reports/triage.json", metrics::triage_json(&metrics::triage_report(&triage)?))?;
        }

        m.config.moe_mode = moe;
        m.config.empty_set_policy = policy;
        self.complete(m, PipelineStage::Report)?;
        Ok(written)
    }

    /// Loads everything the HTTP service needs.
    pub fn service_state(&self, admin_key: Option<String>) -> Result<crate::api::AppState> {
        let m = self.manifest()?;
        let store = self.load_store()?;
        let wf = self.open_workflow()?;
        Ok(crate::api::AppState::new(wf, store.catalog, store.registry)
            .with_admin_key(admin_key)
            .with_reports(self.root.clone(), Some(m.run_id)))
    }
}

/// Convenience for tests and examples: writes a fixture and ingests it.
pub fn ingest_fixture(dir: &RunDir, inputs_dir: &Path, fx: &Fixture) -> Result<IngestSummary> {
    write_fixture(inputs_dir, fx)?;
    dir.ingest(
        &IngestInputs {
            catalog: inputs_dir.join("catalog.jsonl"),
            images: inputs_dir.join("images.jsonl"),
            predictions: vec![inputs_dir.join("predictions.jsonl")],
            reference: Some(inputs_dir.join("reference.jsonl")),
        },
        false,
    )
}
