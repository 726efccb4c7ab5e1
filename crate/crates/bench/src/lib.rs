//! Shared inputs for the criterion benchmarks.

use std::sync::Arc;

use ecrank_core::dataset::sample_sato_tate;
use ecrank_core::{primes_up_to, CurveRecord, FeatureMatrix, Result};

/// Sato–Tate rows with labels cycling through `classes`.
pub fn synthetic_features(rows: usize, bound: u64, classes: usize, seed: u64) -> Result<FeatureMatrix> {
    let batch = sample_sato_tate(rows, Arc::new(primes_up_to(bound)?), seed)?;
    let m = batch.feature_matrix(None)?;
    FeatureMatrix::new(m.width(), batch.normalized().to_vec(), (0..rows).map(|i| i % classes).collect())
}

/// A few curves of small conductor with known ranks.
pub fn sample_curves() -> Result<Vec<CurveRecord>> {
    [
        ("11a1", [0, -1, 1, -10, -20], 11, 0),
        ("37a1", [0, 0, 1, -1, 0], 37, 1),
        ("389a1", [0, 1, 1, -2, 0], 389, 2),
        ("5077a1", [0, 0, 1, -7, 6], 5077, 3),
    ]
    .into_iter()
    .map(|(label, ainvs, n, r)| CurveRecord::new(label, ainvs, n, r))
    .collect()
}
