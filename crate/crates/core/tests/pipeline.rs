use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use relabel::catalog::{ground_truth_to_jsonl, parse_ground_truth, CatalogError};
use relabel::fixture::{generate, FixtureConfig};
use relabel::pipeline::{write_fixture, IngestInputs, PipelineError, PipelineStage, RunDir};
use relabel::{ClassCatalog, ImageRegistry, PredictionRecord, PredictionStore};

fn relabel(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_relabel")).args(args).output().unwrap()
}

fn inputs(dir: &Path) -> IngestInputs {
    IngestInputs {
        catalog: dir.join("catalog.jsonl"),
        images: dir.join("images.jsonl"),
        predictions: vec![dir.join("predictions.jsonl")],
        reference: Some(dir.join("reference.jsonl")),
    }
}

#[test]
fn out_of_order_commands_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = relabel(&["--run", run.to_str().unwrap(), "propose"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest"));

    let inp = tmp.path().join("in");
    assert!(relabel(&["make-fixture", "--out", inp.to_str().unwrap(), "--images", "20"]).status.success());
    let f = |n: &str| inp.join(n).display().to_string();
    let r = run.to_str().unwrap();
    let ok = relabel(&["--run", r, "ingest", "--catalog", &f("catalog.jsonl"), "--images", &f("images.jsonl"), "--predictions", &f("predictions.jsonl")]);
    assert!(ok.status.success());
    let out = relabel(&["--run", r, "propose"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("select-model"));
    let out = relabel(&["--run", r, "select-model"]);
    assert!(!out.status.success(), "selection without reference labels must fail");
}

#[test]
fn reingest_with_force_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = generate(&FixtureConfig { n_images: 25, ..FixtureConfig::default() });
    write_fixture(&tmp.path().join("in"), &fx).unwrap();
    let run = RunDir::new(tmp.path().join("run"));
    run.ingest(&inputs(&tmp.path().join("in")), false).unwrap();
    let read = |rel: &str| std::fs::read(run.path(rel)).unwrap();
    let before: Vec<Vec<u8>> = ["store/catalog.jsonl", "store/images.jsonl", "store/predictions.jsonl", "store/reference.jsonl", "manifest.json"]
        .iter()
        .map(|r| read(r))
        .collect();
    let run_id = run.manifest().unwrap().run_id;

    assert!(matches!(
        run.ingest(&inputs(&tmp.path().join("in")), false),
        Err(PipelineError::AlreadyComplete(PipelineStage::Ingest))
    ));
    run.ingest(&inputs(&tmp.path().join("in")), true).unwrap();
    for (rel, old) in ["store/catalog.jsonl", "store/images.jsonl", "store/predictions.jsonl", "store/reference.jsonl"].iter().zip(&before) {
        assert_eq!(&read(rel), old, "{rel}");
    }
    assert_eq!(run.manifest().unwrap().run_id, run_id);
}

#[test]
fn store_round_trips_through_its_own_format() {
    let fx = generate(&FixtureConfig { n_images: 40, ..FixtureConfig::default() });
    let catalog = ClassCatalog::new(fx.catalog.clone()).unwrap();
    let again = ClassCatalog::parse(catalog.to_jsonl().as_bytes()).unwrap();
    assert_eq!(again.entries(), catalog.entries());

    let registry = ImageRegistry::new(fx.images.clone(), &catalog).unwrap();
    let text = registry.to_jsonl();
    assert_eq!(ImageRegistry::parse(text.as_bytes(), &catalog).unwrap().to_jsonl(), text);

    let mut store = PredictionStore::new();
    let rows: Vec<(usize, PredictionRecord)> = fx.predictions.iter().cloned().enumerate().collect();
    let first = store.ingest(rows.clone(), &catalog, &registry).unwrap();
    let bytes = store.to_jsonl();
    let second = store.ingest(rows, &catalog, &registry).unwrap();
    assert_eq!((first.inserted, second.unchanged, second.inserted), (fx.predictions.len(), fx.predictions.len(), 0));
    assert_eq!(store.to_jsonl(), bytes);

    let gt_text = ground_truth_to_jsonl(&fx.reference);
    let parsed = parse_ground_truth(gt_text.as_bytes(), &catalog, &registry).unwrap();
    assert_eq!(parsed, fx.reference);
}

#[test]
fn bad_prediction_batches_leave_the_store_untouched() {
    let fx = generate(&FixtureConfig { n_images: 5, ..FixtureConfig::default() });
    let catalog = ClassCatalog::new(fx.catalog.clone()).unwrap();
    let registry = ImageRegistry::new(fx.images.clone(), &catalog).unwrap();
    let mut store = PredictionStore::new();
    let rows = vec![
        (1, PredictionRecord::probs("m", "img_00000", vec![0.1; 10])),
        (2, PredictionRecord::probs("m", "img_00001", vec![0.1; 9])),
    ];
    let err = store.ingest(rows, &catalog, &registry).unwrap_err();
    assert!(matches!(err, CatalogError::AtLine { line: 2, .. }), "{err}");
    assert!(store.is_empty());
    let unknown = vec![(7, PredictionRecord::probs("m", "ghost", vec![0.1; 10]))];
    assert!(store.ingest(unknown, &catalog, &registry).unwrap_err().to_string().contains("line 7"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn ingest_is_idempotent_for_any_fixture(seed in any::<u64>(), n in 1usize..30) {
        let fx = generate(&FixtureConfig { n_images: n, seed, ..FixtureConfig::default() });
        let catalog = ClassCatalog::new(fx.catalog.clone()).unwrap();
        let registry = ImageRegistry::new(fx.images.clone(), &catalog).unwrap();
        let rows: Vec<(usize, PredictionRecord)> = fx.predictions.iter().cloned().enumerate().collect();
        let mut once = PredictionStore::new();
        once.ingest(rows.clone(), &catalog, &registry).unwrap();
        let mut twice = once.clone();
        twice.ingest(rows, &catalog, &registry).unwrap();
        prop_assert_eq!(once.to_jsonl(), twice.to_jsonl());
        let reparsed: Vec<(usize, PredictionRecord)> = relabel::jsonl::parse(once.to_jsonl().as_bytes()).unwrap();
        let mut third = PredictionStore::new();
        third.ingest(reparsed, &catalog, &registry).unwrap();
        prop_assert_eq!(third.to_jsonl(), once.to_jsonl());
    }
}
