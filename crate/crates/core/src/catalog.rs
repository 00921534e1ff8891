//! Canonical store for the class catalog, image registry, model predictions
//! and multi-label ground truth.
//!
//! Every format is line-delimited JSON. Image bytes are never loaded; only
//! their references are kept. Prediction scores are consumed for their order
//! only, so softmax probabilities and raw logits are equally acceptable as
//! long as they are non-negative and finite.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::jsonl::{self, JsonlError};

/// Index of a class in `[0, K)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for ClassId {
    fn from(v: u32) -> Self {
        ClassId(v)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Number of exemplar images the annotation screen expects per class.
pub const EXPECTED_EXEMPLARS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<CatalogError>,
    },
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("duplicate class_id {0}")]
    DuplicateClassId(ClassId),
    #[error("class_id {class_id} outside [0, {k})")]
    ClassIdOutOfRange { class_id: ClassId, k: usize },
    #[error("class {0} has an empty name")]
    EmptyName(ClassId),
    #[error("duplicate image_id {0:?}")]
    DuplicateImageId(String),
    #[error("unknown image_id {0:?}")]
    UnknownImage(String),
    #[error("prediction for ({model_id}, {image_id}) has {actual} probabilities, expected {expected}")]
    WrongLength {
        model_id: String,
        image_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("prediction for ({model_id}, {image_id}) has a negative score")]
    NegativeScore { model_id: String, image_id: String },
    #[error("prediction for ({model_id}, {image_id}) has a non-finite score")]
    NonFiniteScore { model_id: String, image_id: String },
    #[error("prediction for ({model_id}, {image_id}) has no scores")]
    EmptyScores { model_id: String, image_id: String },
    #[error("top-k list for ({model_id}, {image_id}) is not sorted by non-increasing score")]
    UnsortedTopK { model_id: String, image_id: String },
    #[error("top-k list for ({model_id}, {image_id}) repeats class {class_id}")]
    DuplicateTopKClass {
        model_id: String,
        image_id: String,
        class_id: ClassId,
    },
    #[error("prediction record needs exactly one of `probs` or `topk`")]
    ScoreFieldConflict,
    #[error("duplicate ground-truth record for image {0:?}")]
    DuplicateGroundTruth(String),
}

impl CatalogError {
    fn at(self, line: usize) -> Self {
        CatalogError::AtLine {
            line,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = CatalogError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: ClassId,
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(rename = "exemplars", default)]
    pub exemplar_refs: Vec<String>,
}

/// The K classes, indexed by `class_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCatalog {
    entries: Vec<ClassEntry>,
}

impl ClassCatalog {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(CatalogError::EmptyCatalog);
        }
        let k = entries.len();
        let mut slots: Vec<Option<ClassEntry>> = vec![None; k];
        for entry in entries {
            if entry.class_id.index() >= k {
                return Err(CatalogError::ClassIdOutOfRange {
                    class_id: entry.class_id,
                    k,
                });
            }
            if entry.name.trim().is_empty() {
                return Err(CatalogError::EmptyName(entry.class_id));
            }
            let slot = &mut slots[entry.class_id.index()];
            if slot.is_some() {
                return Err(CatalogError::DuplicateClassId(entry.class_id));
            }
            *slot = Some(entry);
        }
        // K distinct ids in [0, K) fill every slot.
        let entries: Vec<ClassEntry> = slots.into_iter().map(|s| s.expect("slot filled")).collect();
        for e in &entries {
            if e.exemplar_refs.len() != EXPECTED_EXEMPLARS {
                warn!(
                    class_id = e.class_id.0,
                    count = e.exemplar_refs.len(),
                    "class has an unexpected number of exemplars"
                );
            }
        }
        Ok(ClassCatalog { entries })
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let rows: Vec<(usize, ClassEntry)> = jsonl::parse(reader)?;
        let mut seen = BTreeSet::new();
        for (line, entry) in &rows {
            if !seen.insert(entry.class_id) {
                return Err(CatalogError::DuplicateClassId(entry.class_id).at(*line));
            }
        }
        Self::new(rows.into_iter().map(|(_, e)| e).collect())
    }

    /// Number of classes, K.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassEntry> {
        self.entries.get(id.index())
    }

    pub fn contains(&self, id: ClassId) -> bool {
        id.index() < self.entries.len()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn check_class(&self, id: ClassId) -> Result<()> {
        if self.contains(id) {
            Ok(())
        } else {
            Err(CatalogError::ClassIdOutOfRange {
                class_id: id,
                k: self.len(),
            })
        }
    }

    pub fn to_jsonl(&self) -> String {
        jsonl::to_string(&self.entries)
    }
}

pub fn load_catalog(path: &Path) -> Result<ClassCatalog> {
    let file = std::fs::File::open(path).map_err(|source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ClassCatalog::parse(std::io::BufReader::new(file))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub uri: String,
    pub original_label: ClassId,
}

/// Registered images in dataset order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageRegistry {
    records: Vec<ImageRecord>,
    index: HashMap<String, usize>,
}

impl ImageRegistry {
    pub fn new(records: Vec<ImageRecord>, catalog: &ClassCatalog) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            catalog.check_class(r.original_label)?;
            if index.insert(r.image_id.clone(), i).is_some() {
                return Err(CatalogError::DuplicateImageId(r.image_id.clone()));
            }
        }
        Ok(ImageRegistry { records, index })
    }

    pub fn parse<R: BufRead>(reader: R, catalog: &ClassCatalog) -> Result<Self> {
        let rows: Vec<(usize, ImageRecord)> = jsonl::parse(reader)?;
        let mut seen = BTreeSet::new();
        for (line, r) in &rows {
            catalog.check_class(r.original_label).map_err(|e| e.at(*line))?;
            if !seen.insert(r.image_id.as_str()) {
                return Err(CatalogError::DuplicateImageId(r.image_id.clone()).at(*line));
            }
        }
        Self::new(rows.into_iter().map(|(_, r)| r).collect(), catalog)
    }

    pub fn load(path: &Path, catalog: &ClassCatalog) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| JsonlError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(std::io::BufReader::new(file), catalog)
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.index.get(image_id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.image_id.clone()).collect()
    }

    pub fn originals(&self) -> BTreeMap<String, ClassId> {
        self.records
            .iter()
            .map(|r| (r.image_id.clone(), r.original_label))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        jsonl::to_string(&self.records)
    }
}

/// Model output for one image: either a full score vector or a ranked list.
#[derive(Clone, Debug, PartialEq)]
pub enum Scores {
    Probs(Vec<f64>),
    TopK(Vec<(ClassId, f64)>),
}

impl Scores {
    /// `(class_id, score)` pairs ordered by descending score, ties broken by
    /// ascending class id.
    pub fn ranked(&self) -> Vec<(ClassId, f64)> {
        let mut pairs: Vec<(ClassId, f64)> = match self {
            Scores::Probs(p) => p
                .iter()
                .enumerate()
                .map(|(i, &s)| (ClassId(i as u32), s))
                .collect(),
            Scores::TopK(t) => t.clone(),
        };
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        pairs
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Scores::Probs(p) => p.is_empty(),
            Scores::TopK(t) => t.is_empty(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PredictionWire", into = "PredictionWire")]
pub struct PredictionRecord {
    pub model_id: String,
    pub image_id: String,
    pub scores: Scores,
}

#[derive(Clone, Serialize, Deserialize)]
struct PredictionWire {
    model_id: String,
    image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topk: Option<Vec<(ClassId, f64)>>,
}

impl TryFrom<PredictionWire> for PredictionRecord {
    type Error = CatalogError;

    fn try_from(w: PredictionWire) -> Result<Self> {
        let scores = match (w.probs, w.topk) {
            (Some(p), None) => Scores::Probs(p),
            (None, Some(t)) => Scores::TopK(t),
            _ => return Err(CatalogError::ScoreFieldConflict),
        };
        Ok(PredictionRecord {
            model_id: w.model_id,
            image_id: w.image_id,
            scores,
        })
    }
}

impl From<PredictionRecord> for PredictionWire {
    fn from(r: PredictionRecord) -> Self {
        let (probs, topk) = match r.scores {
            Scores::Probs(p) => (Some(p), None),
            Scores::TopK(t) => (None, Some(t)),
        };
        PredictionWire {
            model_id: r.model_id,
            image_id: r.image_id,
            probs,
            topk,
        }
    }
}

impl PredictionRecord {
    pub fn probs(model_id: &str, image_id: &str, probs: Vec<f64>) -> Self {
        PredictionRecord {
            model_id: model_id.to_owned(),
            image_id: image_id.to_owned(),
            scores: Scores::Probs(probs),
        }
    }

    /// Checks the record against a catalog of `k` classes.
    pub fn validate(&self, k: usize) -> Result<()> {
        let ids = || (self.model_id.clone(), self.image_id.clone());
        let check_score = |s: f64| -> Result<()> {
            if !s.is_finite() {
                let (model_id, image_id) = ids();
                return Err(CatalogError::NonFiniteScore { model_id, image_id });
            }
            if s < 0.0 {
                let (model_id, image_id) = ids();
                return Err(CatalogError::NegativeScore { model_id, image_id });
            }
            Ok(())
        };
        if self.scores.is_empty() {
            let (model_id, image_id) = ids();
            return Err(CatalogError::EmptyScores { model_id, image_id });
        }
        match &self.scores {
            Scores::Probs(p) => {
                if p.len() != k {
                    let (model_id, image_id) = ids();
                    return Err(CatalogError::WrongLength {
                        model_id,
                        image_id,
                        expected: k,
                        actual: p.len(),
                    });
                }
                p.iter().try_for_each(|&s| check_score(s))
            }
            Scores::TopK(t) => {
                let mut seen = BTreeSet::new();
                for (i, &(class_id, s)) in t.iter().enumerate() {
                    check_score(s)?;
                    if class_id.index() >= k {
                        return Err(CatalogError::ClassIdOutOfRange { class_id, k });
                    }
                    if !seen.insert(class_id) {
                        let (model_id, image_id) = ids();
                        return Err(CatalogError::DuplicateTopKClass {
                            model_id,
                            image_id,
                            class_id,
                        });
                    }
                    if i > 0 && s > t[i - 1].1 {
                        let (model_id, image_id) = ids();
                        return Err(CatalogError::UnsortedTopK { model_id, image_id });
                    }
                }
                Ok(())
            }
        }
    }

    /// Highest-scoring class; ties go to the smallest class id.
    pub fn top1(&self) -> Option<ClassId> {
        self.scores.ranked().first().map(|&(c, _)| c)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub inserted: usize,
    pub unchanged: usize,
    pub replaced: usize,
}

/// Predictions keyed by `(model_id, image_id)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionStore {
    records: BTreeMap<(String, String), PredictionRecord>,
}

impl PredictionStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates every record first and only then commits, so a failing batch
    /// leaves the store untouched.
    pub fn ingest(
        &mut self,
        records: Vec<(usize, PredictionRecord)>,
        catalog: &ClassCatalog,
        registry: &ImageRegistry,
    ) -> Result<IngestSummary> {
        for (line, r) in &records {
            r.validate(catalog.len()).map_err(|e| e.at(*line))?;
            if !registry.contains(&r.image_id) {
                return Err(CatalogError::UnknownImage(r.image_id.clone()).at(*line));
            }
        }
        let mut summary = IngestSummary::default();
        for (_, r) in records {
            let key = (r.model_id.clone(), r.image_id.clone());
            match self.records.get(&key) {
                Some(existing) if *existing == r => summary.unchanged += 1,
                Some(_) => {
                    warn!(model_id = %key.0, image_id = %key.1, "replacing existing prediction");
                    summary.replaced += 1;
                    self.records.insert(key, r);
                }
                None => {
                    summary.inserted += 1;
                    self.records.insert(key, r);
                }
            }
        }
        Ok(summary)
    }

    pub fn get(&self, model_id: &str, image_id: &str) -> Option<&PredictionRecord> {
        self.records.get(&(model_id.to_owned(), image_id.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn model_ids(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.keys().map(|(m, _)| m).collect();
        set.into_iter().cloned().collect()
    }

    pub fn for_model<'a>(&'a self, model_id: &'a str) -> impl Iterator<Item = &'a PredictionRecord> + 'a {
        self.records
            .iter()
            .filter(move |((m, _), _)| m == model_id)
            .map(|(_, r)| r)
    }

    /// Top-1 class per image for one model.
    pub fn top1_map(&self, model_id: &str) -> BTreeMap<String, ClassId> {
        self.for_model(model_id)
            .filter_map(|r| r.top1().map(|c| (r.image_id.clone(), c)))
            .collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &PredictionRecord> {
        self.records.values()
    }

    pub fn to_jsonl(&self) -> String {
        jsonl::to_string(self.records.values())
    }
}

pub fn ingest_predictions(
    path: &Path,
    catalog: &ClassCatalog,
    registry: &ImageRegistry,
    store: &mut PredictionStore,
) -> Result<IngestSummary> {
    let rows: Vec<(usize, PredictionRecord)> = jsonl::read_file(path)?;
    store.ingest(rows, catalog, registry)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiLabelGroundTruth {
    pub image_id: String,
    #[serde(rename = "labels")]
    pub label_set: BTreeSet<ClassId>,
}

impl MultiLabelGroundTruth {
    pub fn new(image_id: impl Into<String>, labels: impl IntoIterator<Item = u32>) -> Self {
        MultiLabelGroundTruth {
            image_id: image_id.into(),
            label_set: labels.into_iter().map(ClassId).collect(),
        }
    }
}

/// Parses multi-label ground truth, checking class ids and image membership.
pub fn parse_ground_truth<R: BufRead>(
    reader: R,
    catalog: &ClassCatalog,
    registry: &ImageRegistry,
) -> Result<Vec<MultiLabelGroundTruth>> {
    let rows: Vec<(usize, MultiLabelGroundTruth)> = jsonl::parse(reader)?;
    let mut seen = BTreeSet::new();
    for (line, gt) in &rows {
        if !registry.contains(&gt.image_id) {
            return Err(CatalogError::UnknownImage(gt.image_id.clone()).at(*line));
        }
        if !seen.insert(gt.image_id.as_str()) {
            return Err(CatalogError::DuplicateGroundTruth(gt.image_id.clone()).at(*line));
        }
        for &c in &gt.label_set {
            catalog.check_class(c).map_err(|e| e.at(*line))?;
        }
    }
    Ok(rows.into_iter().map(|(_, g)| g).collect())
}

pub fn load_ground_truth(
    path: &Path,
    catalog: &ClassCatalog,
    registry: &ImageRegistry,
) -> Result<Vec<MultiLabelGroundTruth>> {
    let file = std::fs::File::open(path).map_err(|source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_ground_truth(std::io::BufReader::new(file), catalog, registry)
}

pub fn ground_truth_to_jsonl(records: &[MultiLabelGroundTruth]) -> String {
    jsonl::to_string(records)
}
