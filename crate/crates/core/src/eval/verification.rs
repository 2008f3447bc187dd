use rand::Rng;

use super::{rank_by, Descriptors};
use crate::ranking::{exact_ap, RankedList};
use crate::{Error, Result};

/// Labeled descriptor pairs; indices refer to rows of a [`Descriptors`] matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationSet {
    pairs: Vec<(usize, usize, bool)>,
}

impl VerificationSet {
    pub fn new(pairs: Vec<(usize, usize, bool)>) -> Result<Self> {
        if !pairs.iter().any(|p| p.2) || pairs.iter().all(|p| p.2) {
            return Err(Error::Precondition("a verification set needs both matching and non-matching pairs".into()));
        }
        Ok(Self { pairs })
    }

    /// Every within-group pair as a match, plus as many uniformly drawn
    /// cross-group pairs as non-matches.
    pub fn from_labels(labels: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut pairs = Vec::new();
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                if labels[i] == labels[j] {
                    pairs.push((i, j, true));
                }
            }
        }
        let wanted = pairs.len();
        if labels.iter().any(|&l| l != labels[0]) {
            while pairs.len() < 2 * wanted {
                let (i, j) = (rng.random_range(0..labels.len()), rng.random_range(0..labels.len()));
                if labels[i] != labels[j] {
                    pairs.push((i.min(j), i.max(j), false));
                }
            }
        }
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[(usize, usize, bool)] {
        &self.pairs
    }

    /// `(match distances, non-match distances)`.
    pub fn split_distances(&self, desc: &Descriptors) -> (Vec<f64>, Vec<f64>) {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for &(a, b, m) in &self.pairs {
            let d = desc.distance(a, b);
            if m {
                pos.push(d)
            } else {
                neg.push(d)
            }
        }
        (pos, neg)
    }
}

/// False positive rate at 95% recall. The threshold is the smallest match
/// distance that accepts at least 95% of matches; pairs at exactly the
/// threshold count as accepted.
pub fn fpr95(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Range("fpr95 needs both match and non-match distances".into()));
    }
    let mut sorted = pos.to_vec();
    sorted.sort_by(f64::total_cmp);
    // ceil(0.95 * P) without floating-point rounding
    let need = (95 * sorted.len()).div_ceil(100);
    let tau = sorted[need - 1];
    Ok(neg.iter().filter(|&&d| d <= tau).count() as f64 / neg.len() as f64)
}

/// AP of the pair list ranked by increasing distance, matches relevant.
pub fn verification_map_from_distances(distances: &[f64], is_match: &[bool]) -> Result<f64> {
    if distances.len() != is_match.len() {
        return Err(Error::Shape("distances and labels differ in length".into()));
    }
    let order = rank_by(distances);
    exact_ap(&RankedList::new(order.iter().map(|&i| is_match[i]).collect())?)
}

pub fn verification_map(set: &VerificationSet, desc: &Descriptors) -> Result<f64> {
    let d: Vec<f64> = set.pairs.iter().map(|&(a, b, _)| desc.distance(a, b)).collect();
    let m: Vec<bool> = set.pairs.iter().map(|p| p.2).collect();
    verification_map_from_distances(&d, &m)
}
