//! Seeded minibatch shuffling.

use super::windows::WindowedDataset;
use super::DataError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which chronological split a consumer draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Cuts a seeded permutation of the split's window indices into batches of
/// `batch_size`. A trailing batch with fewer than 2 windows is dropped (the
/// training algorithms halve each batch). The result is a pure function of
/// the dataset's split layout and `epoch_seed`.
///
/// `batch_size` must be even and at least 2.
pub fn shuffled_batches(
    dataset: &WindowedDataset,
    split: Split,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    assert!(
        batch_size >= 2 && batch_size % 2 == 0,
        "batch size must be even and at least 2, got {batch_size}"
    );
    let rows = dataset.rows_of(split);
    let split_len = rows.len();
    if batch_size > split_len {
        return Err(DataError::BatchTooLarge {
            batch: batch_size,
            split_len,
        });
    }
    let mut indices: Vec<usize> = rows.collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    indices.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = indices
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect();
    if batches.last().is_some_and(|b| b.len() < 2) {
        batches.pop();
    }
    Ok(batches)
}
