//! Rank candidate models by ReaL accuracy, pick the best and build the
//! grouped label proposals annotators see.
//!
//! cargo run --example proposals

use relabel::catalog::{ClassCatalog, ImageRegistry, PredictionStore};
use relabel::fixture::{generate, FixtureConfig};
use relabel::proposals::{generate_proposals, leaderboard_csv, select_model, Candidate, EmptySetPolicy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = generate(&FixtureConfig {
        n_classes: 40,
        ..FixtureConfig::default()
    });
    let catalog = ClassCatalog::new(fx.catalog.clone())?;
    let registry = ImageRegistry::new(fx.images.clone(), &catalog)?;
    let mut store = PredictionStore::new();
    store.ingest(fx.predictions.iter().cloned().enumerate().collect(), &catalog, &registry)?;

    let candidates: Vec<Candidate> = store
        .model_ids()
        .into_iter()
        .map(|m| Candidate {
            predictions: store.top1_map(&m),
            model_id: m,
        })
        .collect();
    let selection = select_model(&candidates, &fx.reference, &registry.originals(), EmptySetPolicy::Exclude)?;
    print!("{}", leaderboard_csv(&selection.leaderboard));
    println!("selected: {}", selection.best.model_id);

    let image = &registry.records()[0];
    let pred = store.get(&selection.best.model_id, &image.image_id).expect("full coverage");
    let proposals = generate_proposals(pred, 20)?;
    println!("{} (original label {}):", image.image_id, image.original_label);
    for (g, group) in proposals.groups().iter().enumerate() {
        let names: Vec<&str> = group
            .iter()
            .map(|c| catalog.get(*c).map(|e| e.name.as_str()).unwrap_or("?"))
            .collect();
        println!("  group {}: {}", g + 1, names.join(", "));
    }
    Ok(())
}
