//! Minibatch samplers that always keep patch groups whole.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PatchDataset, Split};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BatchMode {
    /// Each epoch partitions a shuffled list of groups into batches.
    UniformGroups,
    /// One batch per pair of sequences, half of it from each.
    TwoSequence,
    /// `epoch_batches` batches per epoch; batch `k` always holds group `k mod G`.
    SmallDatasetCycling { epoch_batches: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub mode: BatchMode,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    /// Whole groups, in sampling order.
    pub groups: Vec<usize>,
    /// Dataset patch indices, grouped as in `groups`.
    pub patches: Vec<usize>,
}

impl Batch {
    fn push_group(&mut self, ds: &PatchDataset, g: usize) {
        self.groups.push(g);
        self.patches.extend_from_slice(ds.members(g));
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Groups of `split` with at least two patches; singletons cannot form a query.
pub fn eligible_groups(ds: &PatchDataset, split: Split) -> Vec<usize> {
    ds.groups_in(split).into_iter().filter(|&g| ds.members(g).len() >= 2).collect()
}

fn check_capacity(ds: &PatchDataset, groups: &[usize], m: usize) -> Result<()> {
    let largest = groups.iter().map(|&g| ds.members(g).len()).max().unwrap_or(0);
    if m < largest {
        return Err(Error::Config(format!("batch size {m} is smaller than the largest group ({largest} patches)")));
    }
    if groups.len() < 2 {
        return Err(Error::Config("need at least two groups to form a batch".into()));
    }
    Ok(())
}

/// Adds groups from `order` while they fit in `capacity` more patches,
/// stopping at the first that does not.
fn fill(ds: &PatchDataset, batch: &mut Batch, order: impl IntoIterator<Item = usize>, capacity: usize) {
    let limit = batch.len() + capacity;
    for g in order {
        if batch.len() + ds.members(g).len() > limit {
            break;
        }
        batch.push_group(ds, g);
    }
}

/// One batch of whole groups drawn without replacement.
pub fn sample_uniform_groups(ds: &PatchDataset, groups: &[usize], m: usize, rng: &mut impl Rng) -> Result<Batch> {
    check_capacity(ds, groups, m)?;
    let mut order = groups.to_vec();
    order.shuffle(rng);
    let mut batch = Batch::default();
    fill(ds, &mut batch, order, m);
    Ok(batch)
}

/// Every group once per epoch; batches hold as many whole groups as fit.
/// A trailing batch with fewer than two groups is dropped.
pub fn uniform_epoch(ds: &PatchDataset, groups: &[usize], m: usize, rng: &mut impl Rng) -> Result<Vec<Batch>> {
    check_capacity(ds, groups, m)?;
    let mut order = groups.to_vec();
    order.shuffle(rng);
    let mut out = Vec::new();
    let mut cur = Batch::default();
    for g in order {
        if cur.len() + ds.members(g).len() > m {
            out.push(std::mem::take(&mut cur));
        }
        cur.push_group(ds, g);
    }
    if cur.groups.len() >= 2 {
        out.push(cur);
    }
    Ok(out)
}

/// One batch per unordered pair of sequences, each sequence filling half
/// of the batch. Pairs where either sequence cannot contribute a group are
/// skipped with a warning. `groups` restricts the candidate groups.
pub fn two_sequence_epoch(ds: &PatchDataset, groups: &[usize], m: usize, rng: &mut impl Rng) -> Result<Vec<Batch>> {
    check_capacity(ds, groups, m)?;
    let mut by_seq: Vec<Vec<usize>> = vec![Vec::new(); ds.num_sequences()];
    for &g in groups {
        by_seq[ds.groups()[g].sequence].push(g);
    }
    let seqs: Vec<usize> = (0..by_seq.len()).filter(|&s| !by_seq[s].is_empty()).collect();
    if seqs.len() < 2 {
        return Err(Error::Config("two-sequence batches need at least two sequences".into()));
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, &a) in seqs.iter().enumerate() {
        for &b in &seqs[i + 1..] {
            pairs.push((a, b));
        }
    }
    pairs.shuffle(rng);
    let half = m / 2;
    let mut out = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let mut batch = Batch::default();
        let mut ok = true;
        for s in [a, b] {
            let before = batch.groups.len();
            let mut order = by_seq[s].clone();
            order.shuffle(rng);
            fill(ds, &mut batch, order, half);
            ok &= batch.groups.len() > before;
        }
        if ok {
            out.push(batch);
        } else {
            log::warn!("skipping sequence pair ({}, {}): a sequence has no group that fits half a batch", ds.sequences()[a].name, ds.sequences()[b].name);
        }
    }
    Ok(out)
}

/// `epoch_batches` batches; batch `k` starts with `groups[k % groups.len()]`
/// and is topped up with other groups in random order.
pub fn small_dataset_epoch(ds: &PatchDataset, groups: &[usize], m: usize, epoch_batches: usize, rng: &mut impl Rng) -> Result<Vec<Batch>> {
    check_capacity(ds, groups, m)?;
    let mut out = Vec::with_capacity(epoch_batches);
    for k in 0..epoch_batches {
        let anchor = groups[k % groups.len()];
        let mut batch = Batch::default();
        batch.push_group(ds, anchor);
        let mut order: Vec<usize> = groups.iter().copied().filter(|&g| g != anchor).collect();
        order.shuffle(rng);
        fill(ds, &mut batch, order, m - ds.members(anchor).len());
        out.push(batch);
    }
    Ok(out)
}

pub fn epoch_batches(ds: &PatchDataset, groups: &[usize], spec: &BatchSpec, rng: &mut impl Rng) -> Result<Vec<Batch>> {
    match spec.mode {
        BatchMode::UniformGroups => uniform_epoch(ds, groups, spec.size, rng),
        BatchMode::TwoSequence => two_sequence_epoch(ds, groups, spec.size, rng),
        BatchMode::SmallDatasetCycling { epoch_batches } => small_dataset_epoch(ds, groups, spec.size, epoch_batches, rng),
    }
}

/// Triplets implied by the listwise constraints of a batch: each query from
/// a group of `n` among `M` patches ranks `n - 1` matches above `M - n`
/// non-matches, i.e. `(n - 1)(M - n)` triplets.
pub fn induced_triplets(group_sizes: &[usize]) -> u64 {
    let m: usize = group_sizes.iter().sum();
    group_sizes.iter().map(|&n| (n * (n - 1) * (m - n)) as u64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, DatasetBuilder, SyntheticConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synthetic(seqs: usize, groups: usize, n: usize) -> PatchDataset {
        generate_synthetic(&SyntheticConfig {
            num_sequences: seqs,
            groups_per_sequence: groups,
            group_size: n,
            side: 4,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    fn assert_whole(ds: &PatchDataset, b: &Batch) {
        let mut expect = Vec::new();
        for &g in &b.groups {
            expect.extend_from_slice(ds.members(g));
        }
        assert_eq!(b.patches, expect);
        let mut gs = b.groups.clone();
        gs.sort();
        gs.dedup();
        assert_eq!(gs.len(), b.groups.len());
    }

    #[test]
    fn sixteen_per_group_gives_sixty_four_groups() {
        let ds = synthetic(2, 50, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_uniform_groups(&ds, &eligible_groups(&ds, Split::Train), 1024, &mut rng).unwrap();
        assert_eq!(b.groups.len(), 64);
        assert_eq!(b.len(), 1024);
        assert_whole(&ds, &b);
    }

    #[test]
    fn batch_smaller_than_group_is_rejected() {
        let ds = synthetic(1, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_uniform_groups(&ds, &eligible_groups(&ds, Split::Train), 4, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn leftover_capacity_stays_empty() {
        let ds = synthetic(1, 10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let epoch = uniform_epoch(&ds, &eligible_groups(&ds, Split::Train), 8, &mut rng).unwrap();
        assert!(epoch.iter().all(|b| b.len() == 6));
        assert_eq!(epoch.len(), 5);
    }

    #[test]
    fn two_sequence_pairs() {
        let ds = synthetic(4, 40, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let epoch = two_sequence_epoch(&ds, &eligible_groups(&ds, Split::Train), 1024, &mut rng).unwrap();
        assert_eq!(epoch.len(), 6);
        let mut seen = std::collections::BTreeSet::new();
        for b in &epoch {
            assert_whole(&ds, b);
            let seqs: Vec<usize> = b.groups.iter().map(|&g| ds.groups()[g].sequence).collect();
            let first = seqs[0];
            let a = seqs.iter().filter(|&&s| s == first).count();
            assert_eq!(a, 32);
            assert_eq!(seqs.len(), 64);
            let other = *seqs.iter().find(|&&s| s != first).unwrap();
            seen.insert((first.min(other), first.max(other)));
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn two_sequence_skips_unusable_pairs() {
        // Sequence 1 only has a group too large for half a batch.
        let mut b = DatasetBuilder::new(1);
        for (s, n) in [(0, 2), (1, 5), (2, 2)] {
            let seq = b.add_sequence(format!("s{s}"), None);
            for _ in 0..2 {
                let g = b.add_group(seq, Split::Train);
                for _ in 0..n {
                    b.add_patch(g, &[0], None);
                }
            }
        }
        let ds = b.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let epoch = two_sequence_epoch(&ds, &eligible_groups(&ds, Split::Train), 8, &mut rng).unwrap();
        assert_eq!(epoch.len(), 1);
    }

    #[test]
    fn small_dataset_anchor_rule() {
        let ds = synthetic(1, 10, 2);
        let groups = eligible_groups(&ds, Split::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let epoch = small_dataset_epoch(&ds, &groups, 8, 1000, &mut rng).unwrap();
        assert_eq!(epoch.len(), 1000);
        assert_eq!(epoch[7].groups[0], 7);
        assert_eq!(epoch[12].groups[0], 2);
        for b in &epoch {
            assert_whole(&ds, b);
            assert_eq!(b.len(), 8);
        }
    }

    #[test]
    fn triplet_count() {
        assert_eq!(induced_triplets(&[16; 64]), 1024 * 15 * 1008);
        assert_eq!(induced_triplets(&[2, 3]), 2 * 3 + 3 * 2 * 2);
    }
}
