//! Shared helpers for the integration tests.
#![allow(dead_code)]

use cdfcut_core::loss::Batch;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn unit_rows(rows: usize, n: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut m: Array2<f64> = Array2::zeros((rows, n));
    for i in 0..rows {
        loop {
            let v: Array1<f64> = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
            let norm = v.dot(&v).sqrt();
            if norm > 1e-3 {
                m.row_mut(i).assign(&(v / norm));
                break;
            }
        }
    }
    m
}

pub fn random_batch(b: usize, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries = unit_rows(b, n, &mut rng);
    let positives = unit_rows(b, n, &mut rng);
    let tau = Array1::from_shape_fn(b, |_| rng.gen_range(0.05..0.8));
    Batch::new(queries, positives, tau).unwrap()
}

/// Flattens a batch to [queries | positives | tau] for finite-difference
/// probing; `rebuild` inverts it.
pub fn flatten(batch: &Batch) -> Vec<f64> {
    let mut x: Vec<f64> = Vec::new();
    x.extend(batch.queries.iter());
    x.extend(batch.positives.iter());
    x.extend(batch.tau.iter());
    x
}

pub fn rebuild(x: &[f64], b: usize, n: usize) -> Batch {
    let queries = Array2::from_shape_vec((b, n), x[..b * n].to_vec()).unwrap();
    let positives = Array2::from_shape_vec((b, n), x[b * n..2 * b * n].to_vec()).unwrap();
    let tau = Array1::from_vec(x[2 * b * n..2 * b * n + b].to_vec());
    Batch::new_unchecked(queries, positives, tau)
}
