//! Load a class catalog, image registry and model predictions, and show how
//! malformed records are rejected with their line number.
//!
//! cargo run --example ingest_catalog

use relabel::catalog::{self, ImageRegistry, PredictionStore};
use relabel::fixture::{generate, FixtureConfig};
use relabel::pipeline::write_fixture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    write_fixture(dir.path(), &generate(&FixtureConfig::default()))?;

    let catalog = catalog::load_catalog(&dir.path().join("catalog.jsonl"))?;
    let registry = ImageRegistry::load(&dir.path().join("images.jsonl"), &catalog)?;
    let mut store = PredictionStore::new();
    let summary = catalog::ingest_predictions(&dir.path().join("predictions.jsonl"), &catalog, &registry, &mut store)?;
    println!("{} classes, {} images, models {:?}", catalog.len(), registry.len(), store.model_ids());
    println!("first ingest: {summary:?}");

    let again = catalog::ingest_predictions(&dir.path().join("predictions.jsonl"), &catalog, &registry, &mut store)?;
    println!("re-ingest:    {again:?}");

    let entry = catalog.get(relabel::ClassId(3)).expect("class 3");
    println!("class 3 = {:?}, {} exemplars", entry.name, entry.exemplar_refs.len());

    let bad = "{\"model_id\":\"m\",\"image_id\":\"img_00000\",\"probs\":[0.5,0.5]}\n";
    std::fs::write(dir.path().join("bad.jsonl"), bad)?;
    match catalog::ingest_predictions(&dir.path().join("bad.jsonl"), &catalog, &registry, &mut store) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!("a two-entry probability vector cannot match a ten-class catalog"),
    }
    Ok(())
}
