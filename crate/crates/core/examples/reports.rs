//! Produce the reporting suite over a set of final labels: label-count
//! distribution, accuracy by label count with half-widths, the ReaL-on-top-1
//! regression across a model zoo, and triage shares.
//!
//! cargo run --example reports

use relabel::catalog::{ClassCatalog, ImageRegistry, PredictionStore};
use relabel::fixture::{generate, FixtureConfig};
use relabel::metrics::{
    accuracy_by_label_count, distribution_json, evaluate_model_zoo, heatmap_csv, label_count_distribution,
    regression_json, triage_json, triage_report, MoeMode, SUMMARY_ROLLUP,
};
use relabel::proposals::{Candidate, EmptySetPolicy};
use relabel::workflow::{GtStance, QualityCategory, TriageRecord};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = generate(&FixtureConfig {
        n_images: 1000,
        n_models: 12,
        ..FixtureConfig::default()
    });
    let catalog = ClassCatalog::new(fx.catalog.clone())?;
    let registry = ImageRegistry::new(fx.images.clone(), &catalog)?;
    let mut store = PredictionStore::new();
    store.ingest(fx.predictions.iter().cloned().enumerate().collect(), &catalog, &registry)?;
    let originals = registry.originals();
    // The hidden truth stands in for finalized labels here.
    let labels = &fx.truth;

    print!("{}", distribution_json(&label_count_distribution(labels)?));

    let models: Vec<Candidate> = store
        .model_ids()
        .into_iter()
        .map(|m| Candidate {
            predictions: store.top1_map(&m),
            model_id: m,
        })
        .collect();
    let mut cells = Vec::new();
    for m in &models[..2] {
        cells.extend(accuracy_by_label_count(&m.model_id, &m.predictions, labels, &originals, SUMMARY_ROLLUP, MoeMode::Wald)?);
    }
    print!("\n{}", heatmap_csv(&cells));

    let zoo = evaluate_model_zoo(&models, labels, &originals, EmptySetPolicy::Exclude)?;
    print!("\n{}", regression_json(&zoo));

    let empties: Vec<TriageRecord> = labels
        .iter()
        .filter(|g| g.label_set.is_empty())
        .enumerate()
        .map(|(i, g)| TriageRecord {
            image_id: g.image_id.clone(),
            quality_category: QualityCategory::ALL[i % 4],
            gt_stance: GtStance::ALL[i % 3],
            annotator_id: "exp00".into(),
        })
        .collect();
    if !empties.is_empty() {
        print!("\n{}", triage_json(&triage_report(&empties)?));
    }
    Ok(())
}
