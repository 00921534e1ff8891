//! Drive the annotation workflow in memory: batching, initial submissions,
//! agreement analysis, refinement with pre-checked labels, finalization and
//! zero-label triage. Every accepted action lands in the event log, and
//! replaying that log rebuilds the same state.
//!
//! cargo run --example annotation_workflow

use std::collections::BTreeMap;

use relabel::fixture::{generate, simulate_stage, simulate_triage, AnnotatorModel, FixtureConfig};
use relabel::proposals::generate_proposals;
use relabel::workflow::{create_batches, Phase, Workflow, WorkflowConfig, WorkflowSetup};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = generate(&FixtureConfig {
        n_images: 120,
        n_classes: 30,
        ..FixtureConfig::default()
    });
    let images: Vec<String> = fx.images.iter().map(|i| i.image_id.clone()).collect();
    let roster: Vec<String> = fx.roster.iter().map(|p| p.annotator_id.clone()).collect();
    let batches = create_batches(&images, 7, &roster, 2, 42)?;
    let proposals = fx
        .predictions
        .iter()
        .filter(|p| p.model_id == "model_05")
        .map(|p| Ok((p.image_id.clone(), generate_proposals(p, 20)?)))
        .collect::<Result<BTreeMap<_, _>, relabel::proposals::ProposalError>>()?;
    let setup = WorkflowSetup {
        originals: fx.images.iter().map(|i| (i.image_id.clone(), i.original_label)).collect(),
        proposals,
        batches,
        roster: fx.roster.clone(),
        config: WorkflowConfig::default(),
    };
    let truth = fx.truth.iter().map(|g| (g.image_id.clone(), g.label_set.clone())).collect();
    let annotators = AnnotatorModel::with_error_rate(0.15);

    let mut wf = Workflow::new(setup.clone())?;
    println!("initial submissions: {}", simulate_stage(&mut wf, &truth, annotators, 1)?);
    wf.advance(Phase::Analysis)?;
    println!("refinement queue: {} of {} images", wf.refinement_queue().len(), images.len());

    let refiners = wf.experienced_annotators();
    let slices = wf.assign_refinement(&refiners)?;
    for (who, slice) in &slices {
        println!("  {who}: {} images", slice.len());
    }
    wf.advance(Phase::Refinement)?;
    let first = &wf.refinement_queue()[0];
    let screen = wf.refinement_presentation(first)?;
    println!("{first}: pre-checked {:?}, {} groups on screen", screen.prechecked, screen.proposals.groups().len());
    println!("refinement submissions: {}", simulate_stage(&mut wf, &truth, annotators, 1)?);
    wf.advance(Phase::Final)?;
    println!("triage records: {}", simulate_triage(&mut wf, 1)?);
    println!("refiners who also saw the image initially: {}", wf.refiner_overlaps().len());

    let replayed = Workflow::replay(setup, wf.events().to_vec())?;
    assert_eq!(replayed.final_labels()?, wf.final_labels()?);
    println!("{} events replay to identical final labels", wf.events().len());
    Ok(())
}
