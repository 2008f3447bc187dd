use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// Relaxed Hamming distance `(b - u.v) / 2` on codes in `[-1, 1]^b`.
    Hamming,
    /// Euclidean distance between unit vectors, range `[0, 2]`.
    Euclidean,
}

/// Histogram layout: `bins + 1` centers `c_k = k * delta`, `k = 0..=bins`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    bins: usize,
    kind: DistanceKind,
}

pub const DEFAULT_EUCLIDEAN_BINS: usize = 25;

impl BinningConfig {
    /// Hamming binning for codes of `code_length` bits: one bin per integer distance.
    pub fn hamming(code_length: usize) -> Result<Self> {
        if code_length == 0 {
            return Err(Error::Config("code length must be positive".into()));
        }
        Ok(Self {
            bins: code_length,
            kind: DistanceKind::Hamming,
        })
    }

    /// Uniform quantization of `[0, 2]` into `bins + 1` bins.
    pub fn euclidean(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Config("number of bins must be positive".into()));
        }
        Ok(Self {
            bins,
            kind: DistanceKind::Euclidean,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn num_centers(&self) -> usize {
        self.bins + 1
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    /// Present only for Hamming binning, where it equals `bins`.
    pub fn code_length(&self) -> Option<usize> {
        match self.kind {
            DistanceKind::Hamming => Some(self.bins),
            DistanceKind::Euclidean => None,
        }
    }

    pub fn delta(&self) -> f64 {
        match self.kind {
            DistanceKind::Hamming => 1.0,
            DistanceKind::Euclidean => 2.0 / self.bins as f64,
        }
    }

    pub fn center(&self, k: usize) -> f64 {
        k as f64 * self.delta()
    }

    pub fn max_distance(&self) -> f64 {
        match self.kind {
            DistanceKind::Hamming => self.bins as f64,
            DistanceKind::Euclidean => 2.0,
        }
    }

    /// Distance in units of `delta`, clamped to `[0, bins]`.
    pub(crate) fn position(&self, d: f64) -> f64 {
        (d / self.delta()).clamp(0.0, self.bins as f64)
    }

    /// Index `m` of the ramp whose slope is active at `d`: the interval
    /// `(c_{m-1}, c_m]`, using the left derivative at centers and the only
    /// in-domain (right) derivative at `d = 0`.
    pub(crate) fn active_ramp(&self, d: f64) -> usize {
        let u = self.position(d);
        (u.ceil() as usize).max(1)
    }
}

/// Triangular kernel weights `max(0, 1 - |d - c_k| / delta)` for every bin.
///
/// The kernel is built as differences of `bins` clamped ramps
/// `r_k(d) = clamp((d - c_{k-1}) / delta, 0, 1)`, so the weights telescope to 1.
pub fn soft_bin(d: f64, cfg: &BinningConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.num_centers()];
    accumulate_ramps(cfg.position(d), cfg.bins, 1.0, &mut out);
    out
}

/// Adds `weight * delta(d, k)` to `out[k]` for every bin, given the scaled
/// position `u = d / delta`. Returns the number of ramp evaluations.
#[inline]
pub(crate) fn accumulate_ramps(u: f64, bins: usize, weight: f64, out: &mut [f64]) -> u64 {
    let mut prev = 1.0;
    for k in 1..=bins {
        let r = (u - (k - 1) as f64).clamp(0.0, 1.0);
        out[k - 1] += weight * (prev - r);
        prev = r;
    }
    out[bins] += weight * prev;
    bins as u64
}

/// `d delta(d, k) / d d` for every bin: `-1/delta` and `+1/delta` on the two
/// flanks of the active interval, zero elsewhere.
pub fn soft_bin_grad(d: f64, cfg: &BinningConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.num_centers()];
    let m = cfg.active_ramp(d);
    let slope = 1.0 / cfg.delta();
    out[m - 1] = -slope;
    out[m] = slope;
    out
}
