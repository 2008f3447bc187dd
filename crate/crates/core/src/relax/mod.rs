//! Differentiable AP: soft histogram binning of distances, tie-aware AP on
//! histograms, and gradients back to descriptor outputs.

mod binning;
mod distance;
mod histogram;
mod loss;

pub use binning::{soft_bin, soft_bin_grad, BinningConfig, DistanceKind, DEFAULT_EUCLIDEAN_BINS};
pub use distance::{euclidean_distance, hamming_distance};
pub use histogram::{histogram_ap, histogram_ap_grad, histogram_ap_with_grad, DistanceHistogram, HistogramApGrad};
pub use loss::{ap_loss_batch, ap_loss_from_activations, ApLossResult, GroupLabels, LossCounters, Relation, Supervision};

/// Soft histogram of one query's distances, split by relevance.
pub fn soft_histogram(distances: &[f64], relevant: &[bool], cfg: &BinningConfig) -> crate::Result<DistanceHistogram> {
    if distances.len() != relevant.len() {
        return Err(crate::Error::Shape("distances and relevance flags differ in length".into()));
    }
    let mut pos = vec![0.0; cfg.num_centers()];
    let mut neg = vec![0.0; cfg.num_centers()];
    for (&d, &r) in distances.iter().zip(relevant) {
        let target = if r { &mut pos } else { &mut neg };
        binning::accumulate_ramps(cfg.position(d), cfg.bins(), 1.0, target);
    }
    DistanceHistogram::new(pos, neg)
}
