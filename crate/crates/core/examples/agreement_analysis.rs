//! Classify hand-written annotation outcomes with the agreement predicate
//! and build the refinement queue.
//!
//! cargo run --example agreement_analysis

use std::collections::BTreeSet;

use relabel::agreement::{agreement_csv, build_refinement_queue, check_agreement, check_submissions};
use relabel::ClassId;

fn set(ids: &[u32]) -> BTreeSet<ClassId> {
    ids.iter().copied().map(ClassId).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let original = ClassId(5);
    let results = vec![
        check_agreement("cat_on_sofa", &[set(&[5, 9]), set(&[5, 9])], original)?,
        check_agreement("street_scene", &[set(&[5, 9]), set(&[5])], original)?,
        check_agreement("mislabelled", &[set(&[2]), set(&[2])], original)?,
        check_agreement("confusing", &[set(&[1]), set(&[2, 3])], original)?,
        check_agreement("nothing_fits", &[set(&[]), set(&[])], original)?,
        check_submissions("half_done", &[Some(set(&[5])), None], original)?,
    ];
    for r in &results {
        println!("{:<14} {:<17} {}", r.image_id, r.status.as_str(), r.reason.as_str());
    }
    let queue = build_refinement_queue(&results)?;
    println!("\nqueue: {:?}", queue.queue);
    println!("summary: {}", serde_json::to_string_pretty(&queue.summary)?);
    print!("\n{}", agreement_csv(&results));
    Ok(())
}
