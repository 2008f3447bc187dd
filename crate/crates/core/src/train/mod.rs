//! SGD training of descriptor models on the batch AP loss.

mod augment;
mod sampler;

pub use augment::{augment, random_dihedral};
pub use sampler::{
    eligible_groups, epoch_batches, induced_triplets, sample_uniform_groups, small_dataset_epoch, two_sequence_epoch, uniform_epoch, Batch, BatchMode, BatchSpec,
};

use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PatchDataset, Split};
use crate::eval::{retrieval_map, Descriptors, DistractorPolicy, RetrievalProtocol};
use crate::mining::DistractorSet;
use crate::model::{DescriptorModel, Head};
use crate::patch::normalize_input;
use crate::relax::{ap_loss_batch, BinningConfig, DistanceKind, Relation, Supervision};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    /// `lr0 * (1 - e / epochs)` at epoch `e`.
    LinearToZero { epochs: usize },
    /// `lr0 / factor^(e / every)`.
    StepDecay { factor: f64, every: usize, epochs: usize },
}

impl Schedule {
    pub fn epochs(&self) -> usize {
        match *self {
            Schedule::LinearToZero { epochs } | Schedule::StepDecay { epochs, .. } => epochs,
        }
    }

    pub fn lr(&self, lr0: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::LinearToZero { epochs } => lr0 * (1.0 - epoch as f64 / epochs as f64),
            Schedule::StepDecay { factor, every, .. } => lr0 / factor.powi((epoch / every.max(1)) as i32),
        }
    }

    /// Divide by 10 every 10 epochs for 32 epochs.
    pub fn step_default() -> Self {
        Schedule::StepDecay { factor: 10.0, every: 10, epochs: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl SgdConfig {
    /// 0.1 at a batch size of 1024, scaled linearly with the batch size.
    pub fn default_lr0(batch_size: usize) -> f64 {
        0.1 * batch_size as f64 / 1024.0
    }

    pub fn new(batch_size: usize, schedule: Schedule, seed: u64) -> Self {
        Self {
            lr0: Self::default_lr0(batch_size),
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule,
            seed,
        }
    }
}

/// Heavy-ball momentum with weight decay folded into the gradient:
/// `v <- mu v - lr s (g + wd w)`, `w <- w + v`, where `s` is the
/// per-parameter learning-rate multiplier.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    scales: Vec<f64>,
    velocity: Vec<f64>,
    last_step: Vec<f64>,
}

impl Sgd {
    pub fn new(cfg: &SgdConfig, scales: Vec<f64>) -> Self {
        let n = scales.len();
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            scales,
            velocity: vec![0.0; n],
            last_step: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for i in 0..params.len() {
            let g = grad[i] + self.weight_decay * params[i];
            self.velocity[i] = self.momentum * self.velocity[i] - lr * self.scales[i] * g;
            params[i] += self.velocity[i];
            self.last_step[i] = self.velocity[i];
        }
    }

    /// Parameter change made by the most recent step.
    pub fn last_step(&self) -> &[f64] {
        &self.last_step
    }
}

/// Supervision of a training batch: same group is a match, other sequences
/// are non-matches. Within a sequence, other groups are non-matches unless a
/// mined distractor set is given, in which case only mined pairs are.
pub struct BatchSupervision<'a> {
    patches: &'a [usize],
    groups: Vec<usize>,
    sequences: Vec<usize>,
    mined: Option<&'a DistractorSet>,
}

impl<'a> BatchSupervision<'a> {
    pub fn new(ds: &PatchDataset, patches: &'a [usize], mined: Option<&'a DistractorSet>) -> Self {
        Self {
            patches,
            groups: patches.iter().map(|&p| ds.group_of(p)).collect(),
            sequences: patches.iter().map(|&p| ds.sequence_of(p)).collect(),
            mined,
        }
    }
}

impl Supervision for BatchSupervision<'_> {
    fn len(&self) -> usize {
        self.patches.len()
    }

    fn relation(&self, q: usize, x: usize) -> Relation {
        if self.groups[q] == self.groups[x] {
            Relation::Positive
        } else if self.sequences[q] != self.sequences[x] {
            Relation::Negative
        } else {
            match self.mined {
                None => Relation::Negative,
                Some(set) if set.contains(self.patches[q], self.patches[x]) => Relation::Negative,
                Some(_) => Relation::Ignore,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch: BatchSpec,
    pub binning: BinningConfig,
    pub augment: bool,
    /// Evaluate retrieval mAP on the validation split after every epoch.
    pub validate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub val_map: Option<f64>,
    pub seconds: f64,
    pub batches: usize,
    pub mean_triplets: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let val = self.val_map.map_or_else(|| "na".to_string(), |v| format!("{v:.6}"));
        format!(
            "epoch={} lr={:.6e} loss={:.6} val_map={val} batches={} triplets={:.0} seconds={:.3}",
            self.epoch, self.lr, self.loss, self.batches, self.mean_triplets, self.seconds
        )
    }
}

fn check_compatible(model: &DescriptorModel, cfg: &TrainConfig) -> Result<()> {
    match (model.spec().head, cfg.binning.kind()) {
        (Head::UnitNorm, DistanceKind::Euclidean) => Ok(()),
        (Head::TanhCode, DistanceKind::Hamming) if cfg.binning.bins() == model.dim() => Ok(()),
        (head, kind) => Err(Error::Config(format!("{head:?} head with {kind:?} binning of {} bins and dim {}", cfg.binning.bins(), model.dim()))),
    }
}

/// Retrieval mAP over the patches of `split`, every other patch a candidate.
pub fn split_map(model: &DescriptorModel, ds: &PatchDataset, split: Split) -> Result<Option<f64>> {
    let idx = ds.patches_in(split);
    let groups: Vec<usize> = idx.iter().map(|&i| ds.group_of(i)).collect();
    let seqs: Vec<usize> = idx.iter().map(|&i| ds.sequence_of(i)).collect();
    let Ok(protocol) = RetrievalProtocol::all_queries(&groups, &seqs, DistractorPolicy::All) else {
        return Ok(None);
    };
    let desc = Descriptors::from_model(model, ds, &idx)?;
    Ok(retrieval_map(&protocol, &desc)?.metric("map"))
}

/// Runs the configured schedule on the training split. `on_epoch` sees
/// every record as it is produced.
pub fn train(
    model: &mut DescriptorModel,
    ds: &PatchDataset,
    cfg: &TrainConfig,
    mined: Option<&DistractorSet>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    check_compatible(model, cfg)?;
    if ds.side() != model.spec().input_side() {
        return Err(Error::Shape(format!("dataset patches are {}x{}, model expects {}", ds.side(), ds.side(), model.spec().input_side())));
    }
    if !(cfg.sgd.lr0 >= 0.0) {
        return Err(Error::Config("sgd.lr0 must be non-negative".into()));
    }
    let groups = eligible_groups(ds, Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sgd.seed);
    let mut sgd = Sgd::new(&cfg.sgd, model.lr_scales());
    let side = ds.side();
    let mut history = Vec::new();
    for epoch in 0..cfg.sgd.schedule.epochs() {
        let start = Instant::now();
        let lr = cfg.sgd.schedule.lr(cfg.sgd.lr0, epoch);
        let batches = epoch_batches(ds, &groups, &cfg.batch, &mut rng)?;
        let (mut loss_sum, mut triplets) = (0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let mut x = Array2::zeros((batch.len(), side * side));
            for (&p, mut row) in batch.patches.iter().zip(x.rows_mut()) {
                let mut px = ds.patch(p).pixels;
                if cfg.augment {
                    px = augment(&px, side, &mut rng);
                }
                row.iter_mut().zip(normalize_input(&px)).for_each(|(d, v)| *d = v);
            }
            let (emb, cache) = model.forward(x.view())?;
            let sup = BatchSupervision::new(ds, &batch.patches, mined);
            let res = ap_loss_batch(emb.view(), &sup, &cfg.binning)?;
            if !res.loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at epoch {epoch}, batch {b}")));
            }
            let grad = model.backward(&cache, res.grad_embeddings.view())?;
            model.update_params(|p| sgd.step(p, &grad, lr));
            if model.params().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("parameters diverged at epoch {epoch}, batch {b} (lr {lr})")));
            }
            loss_sum += res.loss;
            let sizes: Vec<usize> = batch.groups.iter().map(|&g| ds.members(g).len()).collect();
            triplets += induced_triplets(&sizes) as f64;
        }
        let n = batches.len().max(1) as f64;
        let val_map = if cfg.validate { split_map(model, ds, Split::Val)? } else { None };
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / n,
            val_map,
            seconds: start.elapsed().as_secs_f64(),
            batches: batches.len(),
            mean_triplets: triplets / n,
        };
        log::info!("{}", record.log_line());
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::model::{Architecture, ModelSpec};
    use crate::transformer::StConfig;

    #[test]
    fn linear_schedule_values() {
        let s = Schedule::LinearToZero { epochs: 30 };
        for e in 0..30 {
            assert_eq!(s.lr(0.5, e), 0.5 * (1.0 - e as f64 / 30.0));
        }
        let s = Schedule::step_default();
        assert_eq!(s.lr(1.0, 9), 1.0);
        assert_eq!(s.lr(1.0, 10), 0.1);
        assert!((s.lr(1.0, 31) - 1e-3).abs() < 1e-18);
        assert_eq!(s.epochs(), 32);
    }

    #[test]
    fn lr_scales_with_batch_size() {
        assert_eq!(SgdConfig::default_lr0(1024), 0.1);
        assert_eq!(SgdConfig::default_lr0(64), 0.1 * 64.0 / 1024.0);
    }

    #[test]
    fn heavy_ball_update() {
        let cfg = SgdConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.5,
            schedule: Schedule::LinearToZero { epochs: 1 },
            seed: 0,
        };
        let mut sgd = Sgd::new(&cfg, vec![1.0, 0.01]);
        let mut w = vec![2.0, 2.0];
        sgd.step(&mut w, &[1.0, 1.0], 0.1);
        // v = -0.1 * s * (1 + 0.5 * 2)
        assert!((sgd.last_step()[0] + 0.2).abs() < 1e-15);
        assert!((sgd.last_step()[1] + 0.002).abs() < 1e-15);
        let v0 = sgd.last_step()[0];
        let w0 = w[0];
        sgd.step(&mut w, &[0.0, 0.0], 0.1);
        assert!((sgd.last_step()[0] - (0.9 * v0 - 0.1 * 0.5 * w0)).abs() < 1e-15);
    }

    fn tiny_setup(st: bool) -> (DescriptorModel, PatchDataset, TrainConfig) {
        let mut spec = ModelSpec::new(Architecture::Linear, 4, Head::UnitNorm);
        let mut syn = SyntheticConfig {
            num_sequences: 3,
            groups_per_sequence: 6,
            group_size: 3,
            val_sequences: 1,
            seed: 5,
            ..SyntheticConfig::default()
        };
        if st {
            spec = spec.with_st(StConfig::default());
            syn.side = 42;
        }
        let model = DescriptorModel::new(spec, 1).unwrap();
        let ds = generate_synthetic(&syn).unwrap();
        let cfg = TrainConfig {
            sgd: SgdConfig::new(12, Schedule::LinearToZero { epochs: 2 }, 3),
            batch: BatchSpec { mode: BatchMode::UniformGroups, size: 12 },
            binning: BinningConfig::euclidean(10).unwrap(),
            augment: true,
            validate: true,
        };
        (model, ds, cfg)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut model, ds, mut cfg) = tiny_setup(false);
        cfg.sgd.lr0 = 0.0;
        let before = model.params().to_vec();
        let hist = train(&mut model, &ds, &cfg, None, |_| {}).unwrap();
        assert_eq!(model.params(), &before[..]);
        assert_eq!(hist.len(), 2);
        assert!(hist[0].val_map.is_some());
    }

    #[test]
    fn same_seed_same_parameters() {
        let run = || {
            let (mut model, ds, cfg) = tiny_setup(true);
            train(&mut model, &ds, &cfg, None, |_| {}).unwrap();
            model.params().to_vec()
        };
        let a = run();
        assert_eq!(a, run());
    }

    #[test]
    fn mismatched_head_and_binning() {
        let (mut model, ds, mut cfg) = tiny_setup(false);
        cfg.binning = BinningConfig::hamming(4).unwrap();
        assert!(matches!(train(&mut model, &ds, &cfg, None, |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_aborts() {
        let (mut model, ds, mut cfg) = tiny_setup(false);
        cfg.sgd.lr0 = 1e300;
        cfg.sgd.weight_decay = 1e10;
        assert!(matches!(train(&mut model, &ds, &cfg, None, |_| {}), Err(Error::Numeric(_))));
    }

    #[test]
    fn mined_supervision_ignores_unmarked_in_sequence_pairs() {
        let (_, ds, _) = tiny_setup(false);
        // patches 0..3 are group 0, 3..6 group 1 (same sequence), last group in sequence 1
        let other_seq = ds.members(ds.sequence_groups(1)[0])[0];
        let patches = vec![0, 1, 3, 4, other_seq];
        let mut set = DistractorSet::default();
        set.insert(0, 4);
        let sup = BatchSupervision::new(&ds, &patches, Some(&set));
        assert_eq!(sup.relation(0, 1), Relation::Positive);
        assert_eq!(sup.relation(0, 2), Relation::Ignore);
        assert_eq!(sup.relation(0, 3), Relation::Negative);
        assert_eq!(sup.relation(0, 4), Relation::Negative);
        let plain = BatchSupervision::new(&ds, &patches, None);
        assert_eq!(plain.relation(0, 2), Relation::Negative);
    }
}
