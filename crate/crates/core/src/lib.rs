//! Tooling for upgrading single-label image-classification datasets to
//! multi-label ground truth.
//!
//! The crate is organised around the four stages of the relabelling
//! pipeline plus the reporting suite:
//!
//! - [`catalog`]: class catalog, image registry, prediction and ground-truth
//!   ingestion (line-delimited JSON).
//! - [`proposals`]: ReaL / top-1 accuracy, proposal-model selection and the
//!   ranked top-k label proposals shown to annotators.
//! - [`workflow`]: batches, annotator assignments, the append-only event log,
//!   refinement and zero-label triage.
//! - [`agreement`]: the agreement predicate that decides which images need
//!   refinement.
//! - [`metrics`]: label-count distributions, accuracy-by-label-count heatmaps
//!   with Wald half-widths, and the ReaL-vs-top-1 regression.
//! - [`api`]: the HTTP/JSON service used by the annotation frontend.
//! - [`pipeline`]: run-directory orchestration behind the `relabel` binary.
//! - [`fixture`]: synthetic datasets with simulated annotators.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod agreement;
pub mod api;
pub mod catalog;
pub mod fixture;
pub mod jsonl;
pub mod metrics;
pub mod pipeline;
pub mod proposals;
pub mod workflow;

pub use catalog::{ClassCatalog, ClassEntry, ClassId, ImageRecord, ImageRegistry, MultiLabelGroundTruth, PredictionRecord, PredictionStore, Scores};
pub use proposals::{ModelScore, ProposalSet};
