//! In-sequence distractor mining by appearance clustering.
//!
//! Patches of one sequence are clustered on handcrafted features. Patches
//! from clusters whose centers lie farther apart than a percentile of all
//! center distances become distractors for each other, unless they share a
//! group.

mod hog;
mod kmeans;

pub use hog::{hog, CHANNELS as HOG_CHANNELS};
pub use kmeans::{kmeans, KMeans};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PatchDataset;
use crate::patch::resize_bilinear;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub clusters: usize,
    /// Percentile of center distances used as the threshold, in `[0, 100]`.
    pub percentile: f64,
    pub hog_resize: usize,
    pub hog_cell: usize,
    pub raw_resize: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            clusters: 100,
            percentile: 20.0,
            hog_resize: 64,
            hog_cell: 8,
            raw_resize: 16,
            max_iter: 100,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn feature_dim(&self) -> usize {
        let cells = self.hog_resize / self.hog_cell;
        cells * cells * HOG_CHANNELS + self.raw_resize * self.raw_resize
    }

    pub fn validate(&self) -> Result<()> {
        if self.hog_cell == 0 || self.hog_resize % self.hog_cell != 0 {
            return Err(Error::Config("mining.hog_cell must divide mining.hog_resize".into()));
        }
        if self.raw_resize == 0 || self.clusters == 0 {
            return Err(Error::Config("mining.raw_resize and mining.clusters must be positive".into()));
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::Config(format!("mining.percentile {} outside [0, 100]", self.percentile)));
        }
        Ok(())
    }
}

/// Gradient histograms of the patch resized to `hog_resize`, followed by the
/// patch resized to `raw_resize` with intensities scaled to `[0, 1]`.
pub fn mining_feature(pixels: &[f64], side: usize, cfg: &MiningConfig) -> Vec<f64> {
    let big = resize_bilinear(pixels, side, cfg.hog_resize);
    let mut out = hog(&big, cfg.hog_resize, cfg.hog_cell);
    out.extend(resize_bilinear(pixels, side, cfg.raw_resize).into_iter().map(|v| v / 255.0));
    out
}

/// Unordered pairs of patch indices marked as mutual distractors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DistractorSet {
    pairs: BTreeSet<(usize, usize)>,
}

impl DistractorSet {
    pub fn insert(&mut self, a: usize, b: usize) {
        if a != b {
            self.pairs.insert((a.min(b), a.max(b)));
        }
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.pairs.contains(&(a.min(b), a.max(b)))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs as `(smaller, larger)`, sorted.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn extend(&mut self, other: &DistractorSet) {
        self.pairs.extend(other.iter());
    }
}

/// Nearest-rank percentile: the `ceil(p/100 * L)`-th smallest value (at least the first).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Distractor pairs of one sequence and the threshold that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedSequence {
    pub sequence: usize,
    pub tau: f64,
    pub set: DistractorSet,
}

/// `patches[i]` (a dataset index) belongs to `groups[i]` and sits in
/// cluster `assignments[i]`. A pair is marked when its clusters' centers are
/// strictly farther apart than the `p`-th percentile of all center distances
/// and the two patches belong to different groups.
pub fn mine_distractors(patches: &[usize], groups: &[usize], assignments: &[usize], centers: ArrayView2<'_, f64>, p: f64) -> Result<(f64, DistractorSet)> {
    if patches.len() != groups.len() || patches.len() != assignments.len() {
        return Err(Error::Shape("patch, group and assignment lists differ in length".into()));
    }
    let k = centers.nrows();
    if k < 2 {
        log::warn!("fewer than two clusters; no distractors mined");
        return Ok((0.0, DistractorSet::default()));
    }
    let mut dist = Array2::zeros((k, k));
    let mut all = Vec::with_capacity(k * (k - 1) / 2);
    for a in 0..k {
        for b in a + 1..k {
            let d = centers.row(a).iter().zip(centers.row(b).iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            dist[[a, b]] = d;
            dist[[b, a]] = d;
            all.push(d);
        }
    }
    let tau = percentile(&all, p);
    let mut set = DistractorSet::default();
    for i in 0..patches.len() {
        for j in i + 1..patches.len() {
            if groups[i] != groups[j] && dist[[assignments[i], assignments[j]]] > tau {
                set.insert(patches[i], patches[j]);
            }
        }
    }
    Ok((tau, set))
}

/// Clusters and mines one sequence of `ds`.
pub fn mine_sequence(ds: &PatchDataset, sequence: usize, cfg: &MiningConfig) -> Result<MinedSequence> {
    cfg.validate()?;
    let patches: Vec<usize> = ds.sequence_groups(sequence).iter().flat_map(|&g| ds.members(g).iter().copied()).collect();
    let feats: Vec<Vec<f64>> = patches.par_iter().map(|&i| mining_feature(&ds.patch(i).pixels, ds.side(), cfg)).collect();
    let dim = cfg.feature_dim();
    let x = Array2::from_shape_vec((patches.len(), dim), feats.concat()).expect("feature length");
    let km = kmeans(x.view(), cfg.clusters, cfg.seed.wrapping_add(sequence as u64), cfg.max_iter)?;
    let groups: Vec<usize> = patches.iter().map(|&i| ds.group_of(i)).collect();
    let (tau, set) = mine_distractors(&patches, &groups, &km.assignments, km.centers.view(), cfg.percentile)?;
    Ok(MinedSequence { sequence, tau, set })
}

/// Mines the given sequences in parallel; results follow the input order.
pub fn mine_dataset(ds: &PatchDataset, sequences: &[usize], cfg: &MiningConfig) -> Result<Vec<MinedSequence>> {
    sequences.par_iter().map(|&s| mine_sequence(ds, s, cfg)).collect()
}

/// Header lines (`# key = value`) echoing the configuration and threshold,
/// then one sorted `a b` pair per line.
pub fn mined_labels_text(name: &str, cfg: &MiningConfig, mined: &MinedSequence) -> String {
    let mut s = String::new();
    writeln!(s, "# sequence = {name}").unwrap();
    writeln!(s, "# config = {}", serde_json::to_string(cfg).expect("config serializes")).unwrap();
    writeln!(s, "# tau = {}", mined.tau).unwrap();
    writeln!(s, "# pairs = {}", mined.set.len()).unwrap();
    for (a, b) in mined.set.iter() {
        writeln!(s, "{a} {b}").unwrap();
    }
    s
}

pub fn read_mined_labels(path: &Path) -> Result<DistractorSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut set = DistractorSet::default();
    let mut offset = 0u64;
    for line in text.lines() {
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            let mut it = t.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => set.insert(a, b),
                _ => return Err(Error::format(path, Some(offset), format!("expected two patch indices, got {t:?}"))),
            }
        }
        offset += line.len() as u64 + 1;
    }
    Ok(set)
}
