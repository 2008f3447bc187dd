//! Exact, non-differentiable ranking metrics.
//!
//! These are the ground truth for the relaxed machinery in [`crate::relax`]:
//! `exact_ap` on a strict ranking, and an exhaustive oracle for rankings with
//! tied distances.

use crate::error::{Error, Result};

/// Binary relevance flags ordered by increasing distance to the query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList(Vec<bool>);

impl RankedList {
    pub fn new(relevance: Vec<bool>) -> Result<Self> {
        if relevance.is_empty() {
            return Err(Error::Range("ranked list must be non-empty".into()));
        }
        Ok(Self(relevance))
    }

    /// Builds a list from 0/1 flags, rejecting anything else.
    pub fn from_flags(flags: &[u8]) -> Result<Self> {
        let relevance = flags
            .iter()
            .map(|&f| match f {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Range(format!("relevance flag must be 0 or 1, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(relevance)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn relevance(&self) -> &[bool] {
        &self.0
    }

    pub fn num_relevant(&self) -> usize {
        self.0.iter().filter(|&&r| r).count()
    }
}

/// Per-bin `(relevant, irrelevant)` counts ordered by increasing distance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TiedRankedList(Vec<(usize, usize)>);

impl TiedRankedList {
    pub fn new(bins: Vec<(usize, usize)>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::Range("tied ranked list needs at least one bin".into()));
        }
        Ok(Self(bins))
    }

    pub fn bins(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn total_items(&self) -> usize {
        self.0.iter().map(|&(r, i)| r + i).sum()
    }

    pub fn total_relevant(&self) -> usize {
        self.0.iter().map(|&(r, _)| r).sum()
    }
}

/// Fraction of relevant items among the first `k`.
pub fn prec_at_k(list: &RankedList, k: usize) -> Result<f64> {
    if k == 0 || k > list.len() {
        return Err(Error::Range(format!("K = {k} outside 1..={}", list.len())));
    }
    let hits = list.relevance()[..k].iter().filter(|&&r| r).count();
    Ok(hits as f64 / k as f64)
}

/// Average of `Prec@K` over the positions `K` holding relevant items.
pub fn exact_ap(list: &RankedList) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in list.relevance().iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::UndefinedMetric("AP of a list with no relevant items".into()));
    }
    Ok(sum / hits as f64)
}

/// Unweighted mean of [`exact_ap`] over a set of queries.
pub fn mean_ap(lists: &[RankedList]) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::Range("mean AP over an empty query set".into()));
    }
    let mut total = 0.0;
    for list in lists {
        total += exact_ap(list)?;
    }
    Ok(total / lists.len() as f64)
}

pub const DEFAULT_EXHAUSTIVE_LIMIT: usize = 8;

/// Expected AP under uniformly random ordering inside each tie bin, by
/// enumerating every placement of relevant items within every bin.
pub fn tie_aware_ap_oracle(list: &TiedRankedList) -> Result<f64> {
    tie_aware_ap_oracle_with_limit(list, DEFAULT_EXHAUSTIVE_LIMIT)
}

pub fn tie_aware_ap_oracle_with_limit(list: &TiedRankedList, limit: usize) -> Result<f64> {
    let items = list.total_items();
    if items > limit {
        return Err(Error::Capacity { items, limit });
    }
    if list.total_relevant() == 0 {
        return Err(Error::UndefinedMetric("tied list has no relevant items".into()));
    }

    // Every bin's arrangements are the masks over its n slots with exactly r bits set.
    let per_bin: Vec<(usize, Vec<u32>)> = list
        .bins()
        .iter()
        .map(|&(r, i)| {
            let n = r + i;
            let masks = (0u32..(1u32 << n))
                .filter(|m| m.count_ones() as usize == r)
                .collect();
            (n, masks)
        })
        .collect();

    let mut buf = Vec::with_capacity(items);
    let mut total = 0.0;
    let mut count = 0usize;
    enumerate(&per_bin, 0, &mut buf, &mut total, &mut count);
    Ok(total / count as f64)
}

fn enumerate(bins: &[(usize, Vec<u32>)], at: usize, buf: &mut Vec<bool>, total: &mut f64, count: &mut usize) {
    if at == bins.len() {
        let list = RankedList(buf.clone());
        *total += exact_ap(&list).expect("oracle lists always hold a relevant item");
        *count += 1;
        return;
    }
    let (n, masks) = &bins[at];
    for &mask in masks {
        let start = buf.len();
        buf.extend((0..*n).map(|slot| mask & (1 << slot) != 0));
        enumerate(bins, at + 1, buf, total, count);
        buf.truncate(start);
    }
}
