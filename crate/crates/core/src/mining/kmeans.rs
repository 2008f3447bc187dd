use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centers: Array2<f64>,
    /// Sum of squared distances to assigned centers after each assignment step.
    pub distortion: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center and squared distance for every point; ties go to the lower center index.
fn assign(x: ArrayView2<'_, f64>, centers: &Array2<f64>) -> Vec<(usize, f64)> {
    (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.outer_iter().enumerate() {
                let d = sq_dist(x.row(i), center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

/// Seeded k-means++ initialization followed by Lloyd iterations until the
/// assignment stops changing or `max_iter` is reached. A cluster that loses
/// all its points is moved onto the point farthest from its center.
pub fn kmeans(x: ArrayView2<'_, f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = x.nrows();
    if k == 0 || n < k {
        return Err(Error::Config(format!("k-means needs 1 <= K <= N, got K = {k}, N = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(sq_dist(x.row(i), x.row(pick)));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    let mut distortion = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let mut fresh = assign(x, &centers);
        // Reseed empty clusters onto the currently worst-served points.
        let mut counts = vec![0usize; k];
        fresh.iter().for_each(|&(c, _)| counts[c] += 1);
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[fresh[i].0] > 1)
                .max_by(|&a, &b| fresh[a].1.total_cmp(&fresh[b].1).then(b.cmp(&a)))
                .expect("some cluster holds two points when one is empty");
            counts[fresh[far].0] -= 1;
            counts[c] = 1;
            centers.row_mut(c).assign(&x.row(far));
            fresh[far] = (c, 0.0);
        }
        distortion.push(fresh.iter().map(|p| p.1).sum());
        let next: Vec<usize> = fresh.iter().map(|p| p.0).collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        for (i, &c) in assignments.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += &x.row(i);
        }
        for (c, mut row) in sums.axis_iter_mut(Axis(0)).enumerate() {
            row /= counts[c] as f64;
            centers.row_mut(c).assign(&row);
        }
    }
    Ok(KMeans {
        assignments,
        centers,
        distortion,
        converged,
    })
}
