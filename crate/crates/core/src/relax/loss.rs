//! Batch AP loss: every row queries the other rows of the batch.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::binning::{accumulate_ramps, BinningConfig, DistanceKind};
use super::distance::unit_distance;
use super::histogram::{histogram_ap_with_grad, DistanceHistogram};
use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;
const MIN_DISTANCE: f64 = 1e-6;

/// How a database item relates to a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Positive,
    Negative,
    /// Left out of the query's list entirely.
    Ignore,
}

/// Pairwise supervision over the rows of a batch.
pub trait Supervision: Sync {
    fn len(&self) -> usize;

    fn relation(&self, query: usize, item: usize) -> Relation;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Same label is a match, different label is a non-match.
#[derive(Debug, Clone, Copy)]
pub struct GroupLabels<'a>(pub &'a [usize]);

impl Supervision for GroupLabels<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn relation(&self, query: usize, item: usize) -> Relation {
        if self.0[query] == self.0[item] {
            Relation::Positive
        } else {
            Relation::Negative
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LossCounters {
    /// Kernel (clamped ramp) evaluations during soft binning.
    pub kernel_evals: u64,
    /// Pairwise distances computed.
    pub distance_evals: u64,
}

#[derive(Debug, Clone)]
pub struct ApLossResult {
    /// `1 - mean(per_query_ap)`.
    pub loss: f64,
    pub per_query_ap: Vec<f64>,
    /// Gradient of `loss` with respect to the embedding rows passed in.
    pub grad_embeddings: Array2<f64>,
    pub counters: LossCounters,
}

/// Relaxed-AP loss and its gradient for a batch of embeddings.
///
/// For Hamming binning the rows are relaxed codes in `(-1, 1)`; for
/// Euclidean binning they must be unit-normalized, and the gradient is
/// taken with respect to the normalized rows (see [`ap_loss_from_activations`]
/// for the gradient through the normalization).
pub fn ap_loss_batch(embeddings: ArrayView2<'_, f64>, supervision: &dyn Supervision, cfg: &BinningConfig) -> Result<ApLossResult> {
    let (m, dim) = embeddings.dim();
    validate(embeddings, supervision, cfg)?;

    let gram = embeddings.dot(&embeddings.t());
    let distances = gram.mapv(|g| match cfg.kind() {
        DistanceKind::Hamming => (0.5 * (dim as f64 - g)).clamp(0.0, cfg.max_distance()),
        DistanceKind::Euclidean => unit_distance(g),
    });

    let rows: Vec<Result<QueryRow>> = (0..m)
        .into_par_iter()
        .map(|q| query_row(q, distances.row(q).as_slice().expect("standard layout"), supervision, cfg))
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let mut counters = LossCounters {
        distance_evals: (m * m) as u64,
        ..LossCounters::default()
    };
    let mut per_query_ap = Vec::with_capacity(m);
    let mut coeff = Array2::<f64>::zeros((m, m));
    for (q, row) in rows.into_iter().enumerate() {
        counters.kernel_evals += row.kernel_evals;
        per_query_ap.push(row.ap);
        coeff.row_mut(q).assign(&ndarray::ArrayView1::from(&row.d_ap_d_dist));
    }

    // dLoss/dD_ij for the unordered pair, times dD_ij/d(F_i . F_j).
    let scale = -1.0 / m as f64;
    let mut pair = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let d_loss_d_dist = scale * (coeff[[i, j]] + coeff[[j, i]]);
            let d_dist_d_inner = match cfg.kind() {
                DistanceKind::Hamming => -0.5,
                DistanceKind::Euclidean => -1.0 / distances[[i, j]].max(MIN_DISTANCE),
            };
            pair[[i, j]] = d_loss_d_dist * d_dist_d_inner;
        }
    }
    let grad_embeddings = pair.dot(&embeddings);

    let mean_ap = per_query_ap.iter().sum::<f64>() / m as f64;
    Ok(ApLossResult {
        loss: 1.0 - mean_ap,
        per_query_ap,
        grad_embeddings,
        counters,
    })
}

/// Euclidean AP loss on raw activations: rows are L2-normalized first and
/// the returned gradient is with respect to the unnormalized rows.
pub fn ap_loss_from_activations(activations: ArrayView2<'_, f64>, supervision: &dyn Supervision, cfg: &BinningConfig) -> Result<ApLossResult> {
    if cfg.kind() != DistanceKind::Euclidean {
        return Err(Error::Config("activation-level loss requires Euclidean binning".into()));
    }
    let (unit, norms) = crate::model::head::l2_normalize_rows(activations);
    let mut result = ap_loss_batch(unit.view(), supervision, cfg)?;
    result.grad_embeddings = crate::model::head::l2_normalize_backward(unit.view(), &norms, result.grad_embeddings.view());
    Ok(result)
}

fn validate(embeddings: ArrayView2<'_, f64>, supervision: &dyn Supervision, cfg: &BinningConfig) -> Result<()> {
    let (m, dim) = embeddings.dim();
    if supervision.len() != m {
        return Err(Error::Shape(format!("{m} embeddings but supervision for {}", supervision.len())));
    }
    if m < 2 {
        return Err(Error::Precondition("a batch needs at least two rows".into()));
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("embedding batch contains a non-finite value".into()));
    }
    match cfg.kind() {
        DistanceKind::Hamming => {
            if dim != cfg.bins() {
                return Err(Error::Shape(format!("code length {dim} but Hamming binning for {} bits", cfg.bins())));
            }
            if embeddings.iter().any(|v| v.abs() > 1.0) {
                return Err(Error::Precondition("relaxed codes must lie in [-1, 1]".into()));
            }
        }
        DistanceKind::Euclidean => {
            for (i, row) in embeddings.axis_iter(Axis(0)).enumerate() {
                let norm = row.dot(&row).sqrt();
                if (norm - 1.0).abs() > UNIT_TOL {
                    return Err(Error::Precondition(format!("row {i} is not unit length (norm {norm})")));
                }
            }
        }
    }
    Ok(())
}

struct QueryRow {
    ap: f64,
    d_ap_d_dist: Vec<f64>,
    kernel_evals: u64,
}

fn query_row(q: usize, distances: &[f64], supervision: &dyn Supervision, cfg: &BinningConfig) -> Result<QueryRow> {
    let m = distances.len();
    let bins = cfg.bins();
    let mut pos = vec![0.0; bins + 1];
    let mut neg = vec![0.0; bins + 1];
    let mut scratch = vec![0.0; bins + 1];
    let mut kernel_evals = 0;
    let mut relations = Vec::with_capacity(m);

    // Dense pass over the whole distance row; the diagonal and ignored items
    // are binned and then dropped.
    for (x, &d) in distances.iter().enumerate() {
        scratch.iter_mut().for_each(|v| *v = 0.0);
        kernel_evals += accumulate_ramps(cfg.position(d), bins, 1.0, &mut scratch);
        let rel = if x == q { Relation::Ignore } else { supervision.relation(q, x) };
        let target = match rel {
            Relation::Positive => &mut pos,
            Relation::Negative => &mut neg,
            Relation::Ignore => {
                relations.push(rel);
                continue;
            }
        };
        for (t, s) in target.iter_mut().zip(&scratch) {
            *t += s;
        }
        relations.push(rel);
    }

    if !relations.contains(&Relation::Positive) {
        return Err(Error::Precondition(format!("query row {q} has no match in the batch")));
    }

    let hist = DistanceHistogram::new(pos, neg)?;
    let (ap, grad) = histogram_ap_with_grad(&hist)?;
    let inv_delta = 1.0 / cfg.delta();
    let d_ap_d_dist = distances
        .iter()
        .zip(&relations)
        .map(|(&d, rel)| {
            let g = match rel {
                Relation::Positive => &grad.pos,
                Relation::Negative => &grad.neg,
                Relation::Ignore => return 0.0,
            };
            let k = cfg.active_ramp(d);
            (g[k] - g[k - 1]) * inv_delta
        })
        .collect();

    Ok(QueryRow {
        ap,
        d_ap_d_dist,
        kernel_evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::{exact_ap, RankedList};
    use ndarray::array;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn batch(rows: &[Vec<f64>]) -> Array2<f64> {
        let d = rows[0].len();
        Array2::from_shape_vec((rows.len(), d), rows.concat()).unwrap()
    }

    #[test]
    fn separated_duplicates_are_a_plateau() {
        let a = unit(&[1.0, 0.2, 0.0]);
        let b: Vec<f64> = a.iter().map(|x| -x).collect();
        let e = batch(&[a.clone(), a.clone(), b.clone(), b.clone()]);
        let labels = [0, 0, 1, 1];
        let cfg = BinningConfig::euclidean(10).unwrap();
        let r = ap_loss_batch(e.view(), &GroupLabels(&labels), &cfg).unwrap();
        assert!(r.per_query_ap.iter().all(|&ap| (ap - 1.0).abs() < 1e-12));
        assert!(r.loss.abs() < 1e-12);
        let norm = r.grad_embeddings.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm <= 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn hamming_plateau_on_separated_codes() {
        let e = array![
            [0.9, 0.9, -0.9, 0.9],
            [0.9, 0.9, -0.9, 0.9],
            [-0.9, -0.9, 0.9, -0.9],
            [-0.9, -0.9, 0.9, -0.9],
        ];
        let cfg = BinningConfig::hamming(4).unwrap();
        let r = ap_loss_batch(e.view(), &GroupLabels(&[0, 0, 1, 1]), &cfg).unwrap();
        assert!(r.loss.abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let cfg = BinningConfig::euclidean(5).unwrap();
        let e = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert!(matches!(
            ap_loss_batch(e.view(), &GroupLabels(&[0, 0, 1]), &cfg),
            Err(Error::Precondition(_))
        ));
        let bad = array![[1.0, 0.0], [f64::NAN, 1.0]];
        assert!(matches!(ap_loss_batch(bad.view(), &GroupLabels(&[0, 0]), &cfg), Err(Error::Numeric(_))));
        let not_unit = array![[2.0, 0.0], [1.0, 0.0]];
        assert!(matches!(
            ap_loss_batch(not_unit.view(), &GroupLabels(&[0, 0]), &cfg),
            Err(Error::Precondition(_))
        ));
        let h = BinningConfig::hamming(3).unwrap();
        assert!(matches!(ap_loss_batch(e.view(), &GroupLabels(&[0, 0, 1]), &h), Err(Error::Shape(_))));
    }

    #[test]
    fn hard_hamming_codes_give_tie_aware_ap() {
        // +-1 codes: distances are integers and binning is exact.
        let e = array![
            [1.0, 1.0, 1.0, 1.0],
            [1.0, 1.0, -1.0, 1.0],
            [1.0, -1.0, 1.0, 1.0],
            [-1.0, -1.0, -1.0, 1.0],
        ];
        let labels = [0, 0, 1, 1];
        let cfg = BinningConfig::hamming(4).unwrap();
        let r = ap_loss_batch(e.view(), &GroupLabels(&labels), &cfg).unwrap();
        // Query 0: match at distance 1, non-matches at 1 and 3 -> tie in bin 1.
        assert!((r.per_query_ap[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ap_is_one_iff_matches_are_strictly_closer() {
        let cfg = BinningConfig::euclidean(1000).unwrap();
        let angles = [0.0, 0.1, 1.2, 1.35, 2.5, 2.65];
        let rows: Vec<Vec<f64>> = angles.iter().map(|a: &f64| vec![a.cos(), a.sin()]).collect();
        let e = batch(&rows);
        let r = ap_loss_batch(e.view(), &GroupLabels(&[0, 0, 1, 1, 2, 2]), &cfg).unwrap();
        assert!(r.per_query_ap.iter().all(|&ap| (ap - 1.0).abs() < 1e-9));

        let r = ap_loss_batch(e.view(), &GroupLabels(&[0, 1, 0, 1, 2, 2]), &cfg).unwrap();
        for (q, &ap) in r.per_query_ap.iter().enumerate() {
            let exact = {
                let labels = [0, 1, 0, 1, 2, 2];
                let mut order: Vec<usize> = (0..6).filter(|&x| x != q).collect();
                let d = |x: usize| (angles[q] - angles[x]).abs();
                order.sort_by(|&a, &b| d(a).partial_cmp(&d(b)).unwrap());
                exact_ap(&RankedList::new(order.iter().map(|&x| labels[x] == labels[q]).collect()).unwrap()).unwrap()
            };
            assert!((ap - exact).abs() < 1e-9, "query {q}");
            if q < 4 {
                assert!(ap < 1.0);
            }
        }
    }

    #[test]
    fn kernel_counter_is_dense() {
        let cfg = BinningConfig::euclidean(7).unwrap();
        let rows: Vec<Vec<f64>> = (0..12).map(|i| unit(&[1.0, i as f64 * 0.3, 0.5])).collect();
        let labels: Vec<usize> = (0..12).map(|i| i / 3).collect();
        let r = ap_loss_batch(batch(&rows).view(), &GroupLabels(&labels), &cfg).unwrap();
        assert_eq!(r.counters.kernel_evals, 12 * 12 * 7);
        assert_eq!(r.counters.distance_evals, 144);
    }

    struct Mask<'a> {
        labels: &'a [usize],
        ignored: (usize, usize),
    }

    impl Supervision for Mask<'_> {
        fn len(&self) -> usize {
            self.labels.len()
        }
        fn relation(&self, q: usize, x: usize) -> Relation {
            let (a, b) = self.ignored;
            if (q, x) == (a, b) || (q, x) == (b, a) {
                Relation::Ignore
            } else {
                GroupLabels(self.labels).relation(q, x)
            }
        }
    }

    #[test]
    fn ignored_items_leave_the_list() {
        // Query 0's only non-match sits closest; ignoring it makes the list perfect.
        let angles = [0.0, 0.5, 0.1, 3.0];
        let rows: Vec<Vec<f64>> = angles.iter().map(|a: &f64| vec![a.cos(), a.sin()]).collect();
        let labels = [0, 0, 1, 1];
        let cfg = BinningConfig::euclidean(100).unwrap();
        let full = ap_loss_batch(batch(&rows).view(), &GroupLabels(&labels), &cfg).unwrap();
        assert!(full.per_query_ap[0] < 0.9);
        let masked = ap_loss_batch(batch(&rows).view(), &Mask { labels: &labels, ignored: (0, 2) }, &cfg).unwrap();
        assert!((masked.per_query_ap[0] - 1.0).abs() < 1e-12);
    }
}
