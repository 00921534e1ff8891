use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, WorkflowError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: u32,
    pub image_ids: Vec<String>,
    pub assigned_annotators: Vec<String>,
}

/// Sizes of `n` items split into `parts` contiguous chunks differing by at
/// most one, larger chunks first.
fn chunk_sizes(n: usize, parts: usize) -> impl Iterator<Item = usize> {
    let (base, rem) = (n / parts, n % parts);
    (0..parts).map(move |i| base + usize::from(i < rem))
}

fn dedup_preserving_order(ids: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    ids.iter().filter(|a| seen.insert(a.as_str())).cloned().collect()
}

/// Splits `image_ids` into `num_batches` contiguous batches and assigns
/// `per_batch` distinct annotators to each.
///
/// The roster is shuffled with `seed` and then dealt round-robin, so batch
/// `b` receives roster positions `b * per_batch .. b * per_batch + per_batch`
/// (mod roster size). Image order is never shuffled.
pub fn create_batches(
    image_ids: &[String],
    num_batches: usize,
    annotators: &[String],
    per_batch: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if num_batches == 0 {
        return Err(WorkflowError::ZeroBatches);
    }
    if per_batch == 0 {
        return Err(WorkflowError::ZeroPerBatch);
    }
    let mut roster = dedup_preserving_order(annotators);
    if roster.len() < per_batch {
        return Err(WorkflowError::NotEnoughAnnotators {
            needed: per_batch,
            available: roster.len(),
        });
    }
    roster.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut offset = 0;
    let batches = chunk_sizes(image_ids.len(), num_batches)
        .enumerate()
        .map(|(b, size)| {
            let images = image_ids[offset..offset + size].to_vec();
            offset += size;
            let assigned = (0..per_batch)
                .map(|j| roster[(b * per_batch + j) % roster.len()].clone())
                .collect();
            Batch {
                batch_id: b as u32,
                image_ids: images,
                assigned_annotators: assigned,
            }
        })
        .collect();
    Ok(batches)
}

/// Splits the refinement queue into near-equal contiguous slices, one per
/// experienced annotator, in the given annotator order. Annotators whose
/// slice would be empty are left out.
pub fn assign_refinement(queue: &[String], experienced: &[String]) -> Result<BTreeMap<String, Vec<String>>> {
    let refiners = dedup_preserving_order(experienced);
    if refiners.is_empty() {
        return Err(WorkflowError::NoRefiners);
    }
    let mut offset = 0;
    let mut slices = BTreeMap::new();
    let sizes = chunk_sizes(queue.len(), refiners.len());
    for (annotator, size) in refiners.into_iter().zip(sizes) {
        if size > 0 {
            slices.insert(annotator, queue[offset..offset + size].to_vec());
        }
        offset += size;
    }
    Ok(slices)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize, prefix: &str) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:05}")).collect()
    }

    #[test]
    fn ten_thousand_into_seven() {
        let images = names(10_000, "img");
        let annotators = names(14, "ann");
        let batches = create_batches(&images, 7, &annotators, 2, 42).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.image_ids.len()).collect();
        // 10_000 = 7 * 1428 + 4
        assert_eq!(sizes, vec![1429, 1429, 1429, 1429, 1428, 1428, 1428]);
        let all: Vec<&String> = batches.iter().flat_map(|b| &b.image_ids).collect();
        assert_eq!(all, images.iter().collect::<Vec<_>>());
        let assigned: BTreeSet<&String> = batches.iter().flat_map(|b| &b.assigned_annotators).collect();
        assert_eq!(assigned.len(), 14, "seven batches of two use the whole pool");
        for b in &batches {
            assert_eq!(b.assigned_annotators.len(), 2);
            assert_ne!(b.assigned_annotators[0], b.assigned_annotators[1]);
        }
    }

    #[test]
    fn single_batch_and_errors() {
        let images = names(10, "i");
        let ab = vec!["a".to_string(), "b".to_string()];
        let batches = create_batches(&images, 1, &ab, 2, 0).unwrap();
        assert_eq!(batches.len(), 1);
        let mut who = batches[0].assigned_annotators.clone();
        who.sort();
        assert_eq!(who, ab);
        assert!(matches!(
            create_batches(&images, 1, &ab[..1], 2, 0),
            Err(WorkflowError::NotEnoughAnnotators { needed: 2, available: 1 })
        ));
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(create_batches(&images, 1, &dup, 2, 0).is_err());
        assert!(matches!(create_batches(&images, 0, &ab, 2, 0), Err(WorkflowError::ZeroBatches)));
    }

    #[test]
    fn seed_is_deterministic() {
        let images = names(50, "i");
        let annotators = names(5, "a");
        let a = create_batches(&images, 4, &annotators, 2, 9).unwrap();
        let b = create_batches(&images, 4, &annotators, 2, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refinement_slices() {
        let queue = names(6425, "q");
        let refiners = names(5, "e");
        let slices = assign_refinement(&queue, &refiners).unwrap();
        assert!(slices.values().all(|s| s.len() == 1285));

        let slices = assign_refinement(&names(7, "q"), &names(3, "e")).unwrap();
        let sizes: Vec<usize> = slices.values().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2]);

        assert!(assign_refinement(&[], &names(3, "e")).unwrap().is_empty());
        assert!(matches!(assign_refinement(&queue, &[]), Err(WorkflowError::NoRefiners)));
    }
}
