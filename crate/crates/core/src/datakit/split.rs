use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DatasetManifest, SourceKind, Split};

/// Seeded shuffle of the OPG samples into train/test at `train_fraction`.
/// Periapical and bitewing samples always go to test.
pub fn split_dataset(m: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<DatasetManifest, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Parameter(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut opg: Vec<&str> = m.samples.iter().filter(|s| s.source_kind == SourceKind::Opg).map(|s| s.id.as_str()).collect();
    opg.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * opg.len() as f64).round() as usize;
    let train: Vec<&str> = opg[..n_train].to_vec();

    let split: BTreeMap<String, Split> = m
        .samples
        .iter()
        .map(|s| {
            let side = if train.contains(&s.id.as_str()) { Split::Train } else { Split::Test };
            (s.id.clone(), side)
        })
        .collect();
    Ok(DatasetManifest { samples: m.samples.clone(), split })
}
