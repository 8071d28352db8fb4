//! Seeded fixtures shared by the benchmarks.

use gapcascade_core::fusion::ModelOpinion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `[model][sample][class]` standard-normal-ish logits.
pub fn random_logits(seed: u64, models: usize, batch: usize, classes: usize) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..models)
        .map(|_| {
            (0..batch)
                .map(|_| (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect()
        })
        .collect()
}

/// One opinion per model for a single sample.
pub fn random_opinions(seed: u64, models: usize, classes: usize) -> Vec<ModelOpinion> {
    random_logits(seed, models, 1, classes)
        .into_iter()
        .enumerate()
        .map(|(m, rows)| ModelOpinion::from_logits(format!("m{m}"), &rows[0]).expect("finite logits"))
        .collect()
}

pub fn random_labels(seed: u64, batch: usize, classes: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch).map(|_| rng.random_range(0..classes)).collect()
}
