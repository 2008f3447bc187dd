//! Tie-aware Average Precision computed directly from distance histograms.
//!
//! Items that share a bin are treated as tied, and AP is the expectation
//! under a uniformly random order inside each bin. For a bin holding
//! `a` relevant out of `n` items, preceded by `H` relevant out of `N` items,
//! the item at local slot `t` is relevant with probability `a/n`; given that,
//! the relevant items above it within the bin are hypergeometric with mean
//! `(t-1)(a-1)/(n-1)`, while its position `N + t` is fixed. Summing over
//! slots gives the exact per-bin contribution
//!
//! ```text
//! C = (a/n) * [ (H + 1) * S1 + (a - 1) * S2 / (n - 1) ]
//! S1 = sum_t 1/(N + t)        = psi(N + n + 1) - psi(N + 1)
//! S2 = sum_t (t - 1)/(N + t)  = n - (N + 1) * S1
//! ```
//!
//! and `AP = sum_k C_k / sum_k a_k`. Writing the harmonic sums with the
//! digamma function extends the formula to fractional bin masses, which is
//! what soft binning produces. `S2 / (n - 1)` has a removable singularity at
//! `n = 1` that is evaluated by a Taylor expansion in a narrow band.

use crate::error::{Error, Result};
use crate::special::polygamma;

/// Soft (or hard) counts of relevant and irrelevant items per distance bin.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceHistogram {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl DistanceHistogram {
    pub fn new(pos: Vec<f64>, neg: Vec<f64>) -> Result<Self> {
        if pos.len() != neg.len() || pos.is_empty() {
            return Err(Error::Shape(format!(
                "histogram halves must be non-empty and equal length ({} vs {})",
                pos.len(),
                neg.len()
            )));
        }
        if let Some(v) = pos.iter().chain(&neg).find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Range(format!("histogram mass must be finite and non-negative, got {v}")));
        }
        Ok(Self { pos, neg })
    }

    /// Hard histogram from integer counts.
    pub fn from_counts(bins: &[(usize, usize)]) -> Result<Self> {
        Self::new(
            bins.iter().map(|&(r, _)| r as f64).collect(),
            bins.iter().map(|&(_, i)| i as f64).collect(),
        )
    }

    pub fn pos(&self) -> &[f64] {
        &self.pos
    }

    pub fn neg(&self) -> &[f64] {
        &self.neg
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.pos.iter().sum::<f64>() + self.neg.iter().sum::<f64>()
    }
}

/// Gradients of [`histogram_ap`] with respect to each bin of `h+` and `h-`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramApGrad {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

pub fn histogram_ap(h: &DistanceHistogram) -> Result<f64> {
    ap_and_grad(&h.pos, &h.neg, false).map(|(ap, _)| ap)
}

pub fn histogram_ap_grad(h: &DistanceHistogram) -> Result<HistogramApGrad> {
    ap_and_grad(&h.pos, &h.neg, true).map(|(_, g)| g)
}

pub fn histogram_ap_with_grad(h: &DistanceHistogram) -> Result<(f64, HistogramApGrad)> {
    ap_and_grad(&h.pos, &h.neg, true)
}

const TAYLOR_BAND: f64 = 1e-4;

/// Per-bin contribution and its partials with respect to the bin's relevant
/// mass `a`, total mass `n`, and the preceding relevant / total masses.
#[derive(Debug, Clone, Copy, Default)]
struct BinTerm {
    value: f64,
    d_a: f64,
    d_n: f64,
    d_prev_pos: f64,
    d_prev_all: f64,
}

/// `g = S2 / (n - 1)` and its partials in `n` and `N`.
fn ratio_terms(prev_all: f64, n: f64, s1: f64, tri_hi: f64, tri_lo: f64) -> (f64, f64, f64) {
    let c = prev_all + 1.0;
    let e = n - 1.0;
    if e.abs() > TAYLOR_BAND {
        let f = n - c * s1;
        let f_n = 1.0 - c * tri_hi;
        let f_prev = -s1 - c * (tri_hi - tri_lo);
        (f / e, f_n / e - f / (e * e), f_prev / e)
    } else {
        let z = prev_all + 2.0;
        let (p1, p2, p3) = (polygamma(1, z), polygamma(2, z), polygamma(3, z));
        let f1 = 1.0 - c * p1;
        let f2 = -c * p2;
        let f3 = -c * p3;
        let g = f1 + 0.5 * f2 * e + f3 * e * e / 6.0;
        let g_n = 0.5 * f2 + f3 * e / 3.0;
        let g_prev = (-p1 - c * p2) + 0.5 * e * (-p2 - c * p3);
        (g, g_n, g_prev)
    }
}

fn bin_term(a: f64, n: f64, prev_pos: f64, prev_all: f64) -> BinTerm {
    if n <= 0.0 {
        // Limit of the contribution as mass enters an empty bin.
        return BinTerm {
            d_a: 1.0 + (prev_pos - prev_all) * polygamma(1, prev_all + 1.0),
            ..BinTerm::default()
        };
    }
    let tri_hi = polygamma(1, prev_all + n + 1.0);
    let tri_lo = polygamma(1, prev_all + 1.0);
    let s1 = polygamma(0, prev_all + n + 1.0) - polygamma(0, prev_all + 1.0);
    let (g, g_n, g_prev) = ratio_terms(prev_all, n, s1, tri_hi, tri_lo);

    let share = a / n;
    let inner = (prev_pos + 1.0) * s1 + (a - 1.0) * g;
    let value = share * inner;
    BinTerm {
        value,
        d_a: inner / n + share * g,
        d_n: -value / n + share * ((prev_pos + 1.0) * tri_hi + (a - 1.0) * g_n),
        d_prev_pos: share * s1,
        d_prev_all: share * ((prev_pos + 1.0) * (tri_hi - tri_lo) + (a - 1.0) * g_prev),
    }
}

fn ap_and_grad(pos: &[f64], neg: &[f64], want_grad: bool) -> Result<(f64, HistogramApGrad)> {
    let total_pos: f64 = pos.iter().sum();
    if !(total_pos > 0.0) {
        return Err(Error::UndefinedMetric("histogram has no relevant mass".into()));
    }

    let mut terms = Vec::with_capacity(pos.len());
    let (mut prev_pos, mut prev_all) = (0.0, 0.0);
    let mut sum = 0.0;
    for (&a, &b) in pos.iter().zip(neg) {
        let n = a + b;
        let t = bin_term(a, n, prev_pos, prev_all);
        sum += t.value;
        terms.push(t);
        prev_pos += a;
        prev_all += n;
    }
    let ap = sum / total_pos;

    let mut grad = HistogramApGrad {
        pos: vec![0.0; pos.len()],
        neg: vec![0.0; pos.len()],
    };
    if want_grad {
        // Suffix sums of the partials with respect to preceding mass.
        let (mut later_pos, mut later_all) = (0.0, 0.0);
        for k in (0..terms.len()).rev() {
            let t = &terms[k];
            let through_all = t.d_n + later_all;
            grad.neg[k] = through_all / total_pos;
            grad.pos[k] = (t.d_a + through_all + later_pos) / total_pos - ap / total_pos;
            later_pos += t.d_prev_pos;
            later_all += t.d_prev_all;
        }
    }
    Ok((ap, grad))
}
