//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `m` random unit rows of width `d`, in groups of `group` consecutive rows.
pub fn unit_batch(m: usize, d: usize, group: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::from_shape_fn((m, d), |_| rng.random_range(-1.0f64..1.0));
    for mut row in x.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    (x, (0..m).map(|i| i / group).collect())
}

/// `n` flattened patches of `side * side` normalized pixels.
pub fn patch_batch(n: usize, side: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, side * side), |_| rng.random_range(-1.5..1.5))
}
