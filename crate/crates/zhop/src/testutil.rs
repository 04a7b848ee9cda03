//! Helpers shared by unit tests across modules.

use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::C64;

/// Seeded random complex unitary via Gram-Schmidt on a dense random matrix.
pub fn random_unitary(n: usize, seed: u64) -> Array2<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Array1<C64>> = Vec::new();
    while rows.len() < n {
        let mut v: Array1<C64> = Array1::from_iter(
            (0..n).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)),
        );
        for r in &rows {
            let overlap: C64 = r.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum();
            v = &v - &r.mapv(|x| x * overlap);
        }
        let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        rows.push(v.mapv(|x| x / norm));
    }
    let mut u = Array2::zeros((n, n));
    for (i, r) in rows.iter().enumerate() {
        u.row_mut(i).assign(r);
    }
    u
}

/// Seeded random complex vector with entries in the centered unit square.
pub fn random_cvec(n: usize, seed: u64) -> Array1<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array1::from_iter((0..n).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)))
}

/// Seeded random real vector with entries in (lo, hi).
pub fn random_rvec(n: usize, seed: u64, lo: f64, hi: f64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array1::from_iter((0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()))
}
