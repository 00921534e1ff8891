//! Statistics over finalized labels: label-count distribution,
//! accuracy-by-label-count heatmaps with 95% half-widths, the ReaL-vs-top-1
//! regression across a model zoo, and zero-label triage summaries.
//!
//! Every fraction is kept in `[0, 1]`; percentages are produced only by
//! [`format_percent`] and the report writers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Serialize, Serializer};
use serde_json::json;

use crate::catalog::{ClassId, MultiLabelGroundTruth};
use crate::proposals::{self, Candidate, EmptySetPolicy, ModelScore, ProposalError};
use crate::workflow::{GtStance, QualityCategory, TriageRecord};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

#[derive(Clone, Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("proportion {0} outside [0, 1]")]
    ProportionOutOfRange(f64),
    #[error("regression needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("regression is degenerate: every x value is equal")]
    DegenerateX,
    #[error("duplicate record for image {0:?}")]
    DuplicateImage(String),
    #[error("model {model_id:?} has no prediction for image {image_id:?}")]
    MissingPrediction { model_id: String, image_id: String },
    #[error("no original label for image {0:?}")]
    MissingOriginal(String),
    #[error("model {0:?} does not cover the labelled image set")]
    CoverageMismatch(String),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Which half-width formula to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeMode {
    /// `1.96 * sqrt(p (1 - p) / n)`.
    #[default]
    Wald,
    /// Divides by `sqrt(n)` twice: `1.96 * sqrt(p (1 - p)) / n`.
    AsWritten,
}

/// Half-width of the 95% interval for a proportion `p` observed over `n`
/// trials. `None` when `n <= 1`.
pub fn margin_of_error(p: f64, n: usize, mode: MoeMode) -> Result<Option<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MetricsError::ProportionOutOfRange(p));
    }
    if n <= 1 {
        return Ok(None);
    }
    let n = n as f64;
    let sd = (p * (1.0 - p) / n).sqrt();
    Ok(Some(match mode {
        MoeMode::Wald => Z_95 * sd,
        MoeMode::AsWritten => Z_95 * sd / n.sqrt(),
    }))
}

/// Rounds a fraction to a percentage with two decimals, half-up.
pub fn percent_2dp(fraction: f64) -> f64 {
    // The epsilon absorbs binary representation error on exact halves.
    (fraction * 1e4 + 0.5 + 1e-9).floor() / 100.0
}

pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}", percent_2dp(fraction))
}

/// A label-count bucket: an exact count, or a "this many or more" rollup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LabelBucket {
    Exact(usize),
    AtLeast(usize),
}

impl fmt::Display for LabelBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelBucket::Exact(n) => write!(f, "{n}"),
            LabelBucket::AtLeast(n) => write!(f, "{n}+"),
        }
    }
}

impl Serialize for LabelBucket {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// How label counts map onto buckets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bucketing {
    Granular,
    /// Counts at or above `cap` share one bucket.
    Rollup { cap: usize },
}

/// Rollup used for the summary views: 0, 1, 2, 3+.
pub const SUMMARY_ROLLUP: Bucketing = Bucketing::Rollup { cap: 3 };

impl Bucketing {
    pub fn bucket(self, count: usize) -> LabelBucket {
        match self {
            Bucketing::Rollup { cap } if count >= cap => LabelBucket::AtLeast(cap),
            _ => LabelBucket::Exact(count),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Share {
    pub count: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelCountDistribution {
    pub n_total: usize,
    pub counts: BTreeMap<usize, usize>,
    pub percentages: BTreeMap<usize, f64>,
    /// Buckets 0, 1, 2 and 3+.
    pub rollup: BTreeMap<LabelBucket, Share>,
    /// Fraction of images with two or more labels.
    pub at_least_two: f64,
}

pub fn label_count_distribution(labels: &[MultiLabelGroundTruth]) -> Result<LabelCountDistribution> {
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput("no label records"));
    }
    let mut seen = BTreeSet::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for g in labels {
        if !seen.insert(g.image_id.as_str()) {
            return Err(MetricsError::DuplicateImage(g.image_id.clone()));
        }
        *counts.entry(g.label_set.len()).or_default() += 1;
    }
    let n = labels.len();
    let frac = |c: usize| c as f64 / n as f64;
    let percentages = counts.iter().map(|(&k, &c)| (k, frac(c))).collect();
    let mut rollup: BTreeMap<LabelBucket, Share> = [0, 1, 2, 3]
        .into_iter()
        .map(|k| (SUMMARY_ROLLUP.bucket(k), Share { count: 0, fraction: 0.0 }))
        .collect();
    for (&k, &c) in &counts {
        rollup.get_mut(&SUMMARY_ROLLUP.bucket(k)).expect("bucket present").count += c;
    }
    for share in rollup.values_mut() {
        share.fraction = frac(share.count);
    }
    let multi: usize = counts.range(2..).map(|(_, c)| c).sum();
    Ok(LabelCountDistribution {
        n_total: n,
        counts,
        percentages,
        rollup,
        at_least_two: frac(multi),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapCell {
    pub model_id: String,
    pub label_count: LabelBucket,
    pub n: usize,
    /// `None` when `n <= 1`.
    pub accuracy: Option<f64>,
    pub half_width: Option<f64>,
}

/// Top-1 accuracy against the original labels, grouped by how many labels
/// each image ended up with.
pub fn accuracy_by_label_count(
    model_id: &str,
    preds: &BTreeMap<String, ClassId>,
    labels: &[MultiLabelGroundTruth],
    originals: &BTreeMap<String, ClassId>,
    bucketing: Bucketing,
    mode: MoeMode,
) -> Result<Vec<HeatmapCell>> {
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput("no label records"));
    }
    let mut groups: BTreeMap<LabelBucket, (usize, usize)> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for g in labels {
        if !seen.insert(g.image_id.as_str()) {
            return Err(MetricsError::DuplicateImage(g.image_id.clone()));
        }
        let pred = preds.get(&g.image_id).ok_or_else(|| MetricsError::MissingPrediction {
            model_id: model_id.to_owned(),
            image_id: g.image_id.clone(),
        })?;
        let original = originals
            .get(&g.image_id)
            .ok_or_else(|| MetricsError::MissingOriginal(g.image_id.clone()))?;
        let entry = groups.entry(bucketing.bucket(g.label_set.len())).or_default();
        entry.1 += 1;
        if pred == original {
            entry.0 += 1;
        }
    }
    groups
        .into_iter()
        .map(|(bucket, (correct, n))| {
            let (accuracy, half_width) = if n <= 1 {
                (None, None)
            } else {
                let p = correct as f64 / n as f64;
                (Some(p), margin_of_error(p, n, mode)?)
            };
            Ok(HeatmapCell {
                model_id: model_id.to_owned(),
                label_count: bucket,
                n,
                accuracy,
                half_width,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
    /// `sqrt(SS_res / (n - 2))`; absent for two points.
    pub residual_sd: Option<f64>,
}

impl RegressionFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Least-squares line through `(x, y)` points.
pub fn ols_regression(points: &[(f64, f64)]) -> Result<RegressionFit> {
    let n = points.len();
    if n < 2 {
        return Err(MetricsError::TooFewPoints(n));
    }
    if points.iter().all(|p| p.0 == points[0].0) {
        return Err(MetricsError::DegenerateX);
    }
    let nf = n as f64;
    let x_mean = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in points {
        sxy += (x - x_mean) * (y - y_mean);
        sxx += (x - x_mean).powi(2);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for &(x, y) in points {
        ss_res += (y - (slope * x + intercept)).powi(2);
        ss_tot += (y - y_mean).powi(2);
    }
    // A constant response is fitted exactly by the flat line.
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    let residual_sd = (n > 2).then(|| (ss_res / (nf - 2.0)).sqrt());
    Ok(RegressionFit {
        slope,
        intercept,
        r_squared,
        n_points: n,
        residual_sd,
    })
}

/// Models whose ReaL accuracy strays further than this many residual
/// standard deviations from the fitted line are flagged.
pub const OUTLIER_SD_MULTIPLE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Outlier {
    pub model_id: String,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZooReport {
    /// Sorted by ReaL accuracy, best first.
    pub leaderboard: Vec<ModelScore>,
    /// Fit of ReaL accuracy (y) on top-1 accuracy (x).
    pub regression: Result<RegressionFit>,
    pub outliers: Vec<Outlier>,
}

/// Scores every model against the finalized labels and fits ReaL on top-1.
pub fn evaluate_model_zoo(
    models: &[Candidate],
    labels: &[MultiLabelGroundTruth],
    originals: &BTreeMap<String, ClassId>,
    policy: EmptySetPolicy,
) -> Result<ZooReport> {
    if models.is_empty() {
        return Err(MetricsError::EmptyInput("no models"));
    }
    let image_set: BTreeSet<&String> = labels.iter().map(|g| &g.image_id).collect();
    if image_set.len() != labels.len() {
        let mut seen = BTreeSet::new();
        let dup = labels.iter().find(|g| !seen.insert(&g.image_id)).expect("duplicate exists");
        return Err(MetricsError::DuplicateImage(dup.image_id.clone()));
    }
    let mut leaderboard = Vec::with_capacity(models.len());
    for m in models {
        if m.predictions.keys().collect::<BTreeSet<_>>() != image_set {
            return Err(MetricsError::CoverageMismatch(m.model_id.clone()));
        }
        leaderboard.push(proposals::score_model(&m.model_id, &m.predictions, labels, originals, policy)?);
    }
    proposals::rank_scores(&mut leaderboard);
    let points: Vec<(f64, f64)> = leaderboard
        .iter()
        .map(|s| (s.top1_accuracy, s.real_accuracy))
        .collect();
    let regression = ols_regression(&points);
    let mut outliers = Vec::new();
    if let Ok(fit) = &regression {
        if let Some(sd) = fit.residual_sd.filter(|&sd| sd > 0.0) {
            for s in &leaderboard {
                let residual = s.real_accuracy - fit.predict(s.top1_accuracy);
                if residual.abs() > OUTLIER_SD_MULTIPLE * sd {
                    outliers.push(Outlier {
                        model_id: s.model_id.clone(),
                        residual,
                    });
                }
            }
        }
    }
    Ok(ZooReport {
        leaderboard,
        regression,
        outliers,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TriageReport {
    pub n: usize,
    pub quality_categories: BTreeMap<QualityCategory, Share>,
    pub gt_stances: BTreeMap<GtStance, Share>,
}

pub fn triage_report(records: &[TriageRecord]) -> Result<TriageReport> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput("no triage records"));
    }
    let n = records.len();
    let mut quality_categories: BTreeMap<QualityCategory, Share> = QualityCategory::ALL
        .into_iter()
        .map(|c| (c, Share { count: 0, fraction: 0.0 }))
        .collect();
    let mut gt_stances: BTreeMap<GtStance, Share> = GtStance::ALL
        .into_iter()
        .map(|c| (c, Share { count: 0, fraction: 0.0 }))
        .collect();
    for r in records {
        quality_categories.get_mut(&r.quality_category).expect("all categories").count += 1;
        gt_stances.get_mut(&r.gt_stance).expect("all stances").count += 1;
    }
    for share in quality_categories.values_mut().chain(gt_stances.values_mut()) {
        share.fraction = share.count as f64 / n as f64;
    }
    Ok(TriageReport {
        n,
        quality_categories,
        gt_stances,
    })
}

fn share_json<K: fmt::Display>(shares: impl IntoIterator<Item = (K, Share)>) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = shares
        .into_iter()
        .map(|(k, s)| {
            (
                k.to_string(),
                json!({"count": s.count, "fraction": s.fraction, "percent": format_percent(s.fraction)}),
            )
        })
        .collect();
    serde_json::Value::Object(map)
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value");
    s.push('\n');
    s
}

pub fn distribution_json(d: &LabelCountDistribution) -> String {
    let granular = share_json(d.counts.iter().map(|(&k, &c)| {
        (
            k,
            Share {
                count: c,
                fraction: d.percentages[&k],
            },
        )
    }));
    pretty(&json!({
        "n_total": d.n_total,
        "granular": granular,
        "rollup": share_json(d.rollup.iter().map(|(k, s)| (k, *s))),
        "at_least_two": {"fraction": d.at_least_two, "percent": format_percent(d.at_least_two)},
    }))
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Plot-ready `label_count,count,fraction,percent`, granular rows then rollup
/// rows with a `bucket` marker.
pub fn distribution_csv(d: &LabelCountDistribution) -> String {
    let granular = d.counts.iter().map(|(&k, &c)| {
        let f = d.percentages[&k];
        vec!["granular".into(), k.to_string(), c.to_string(), format!("{f:.6}"), format_percent(f)]
    });
    let rollup = d.rollup.iter().map(|(k, s)| {
        vec![
            "rollup".into(),
            k.to_string(),
            s.count.to_string(),
            format!("{:.6}", s.fraction),
            format_percent(s.fraction),
        ]
    });
    csv_string(
        &["view", "label_count", "count", "fraction", "percent"],
        granular.chain(rollup),
    )
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_owned(), |x| format!("{x:.6}"))
}

/// `model_id,label_count,n,accuracy,half_width`; undefined cells are `NaN`.
pub fn heatmap_csv(cells: &[HeatmapCell]) -> String {
    csv_string(
        &["model_id", "label_count", "n", "accuracy", "half_width"],
        cells.iter().map(|c| {
            vec![
                c.model_id.clone(),
                c.label_count.to_string(),
                c.n.to_string(),
                opt(c.accuracy),
                opt(c.half_width),
            ]
        }),
    )
}

pub fn regression_json(report: &ZooReport) -> String {
    let regression = match &report.regression {
        Ok(fit) => json!({
            "slope": fit.slope,
            "intercept": fit.intercept,
            "r_squared": fit.r_squared,
            "r_squared_percent": format_percent(fit.r_squared),
            "n_points": fit.n_points,
            "residual_sd": fit.residual_sd,
        }),
        Err(e) => json!({"error": e.to_string()}),
    };
    pretty(&json!({
        "x": "top1_accuracy",
        "y": "real_accuracy",
        "regression": regression,
        "outlier_rule": format!("|residual| > {OUTLIER_SD_MULTIPLE} * residual_sd"),
        "outliers": report.outliers,
    }))
}

pub fn triage_json(r: &TriageReport) -> String {
    pretty(&json!({
        "n": r.n,
        "quality_categories": share_json(r.quality_categories.iter().map(|(k, s)| (k.as_str(), *s))),
        "gt_stances": share_json(r.gt_stances.iter().map(|(k, s)| (k.as_str(), *s))),
    }))
}
