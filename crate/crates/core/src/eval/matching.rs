use ndarray::ArrayView2;

use super::{cross_distances, rank_by, EvalReport, Metric};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        // strict comparison keeps the lowest index among ties
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Pairs that are each other's nearest neighbor across the two sets, in
/// increasing order of the row of `a`.
pub fn mutual_nn_match(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, metric: Metric) -> Result<Vec<Match>> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Range("mutual matching needs two non-empty descriptor sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("descriptor sizes differ: {} vs {}", a.ncols(), b.ncols())));
    }
    let d = cross_distances(a, b, metric);
    let best_b: Vec<usize> = d.rows().into_iter().map(|r| argmin(r.iter().copied())).collect();
    let best_a: Vec<usize> = d.columns().into_iter().map(|c| argmin(c.iter().copied())).collect();
    Ok(best_b
        .iter()
        .enumerate()
        .filter(|&(i, &j)| best_a[j] == i)
        .map(|(i, &j)| Match { a: i, b: j, distance: d[[i, j]] })
        .collect())
}

/// Precision-recall curve of matches accepted in order of increasing
/// distance, and its trapezoidal area over recall. `correct[k]` labels
/// `matches[k]`; recall is relative to `ground_truth` correspondences.
///
/// The curve starts at recall 0 with the precision of the first accepted
/// match.
pub fn matching_pr_map(matches: &[Match], correct: &[bool], ground_truth: usize) -> Result<EvalReport> {
    if ground_truth == 0 {
        return Err(Error::UndefinedMetric("no ground-truth correspondences".into()));
    }
    if matches.len() != correct.len() {
        return Err(Error::Shape("matches and labels differ in length".into()));
    }
    let order = rank_by(&matches.iter().map(|m| m.distance).collect::<Vec<_>>());
    let mut curve = Vec::with_capacity(matches.len() + 1);
    let mut hits = 0usize;
    for (k, &i) in order.iter().enumerate() {
        hits += usize::from(correct[i]);
        curve.push((hits as f64 / ground_truth as f64, hits as f64 / (k + 1) as f64));
    }
    if let Some(&(_, p)) = curve.first() {
        curve.insert(0, (0.0, p));
    }
    let area = curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum::<f64>();
    let mut report = EvalReport::new("matching");
    report.set("map", area);
    report.set("matches", matches.len() as f64);
    report.set("correct", hits as f64);
    report.pr_curve = curve;
    Ok(report)
}
