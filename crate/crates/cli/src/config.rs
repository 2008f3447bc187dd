//! The run configuration file. Every section is optional; omitted keys take
//! the defaults below. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use aplearn_core::data::SyntheticConfig;
use aplearn_core::mining::MiningConfig;
use aplearn_core::model::{Architecture, Head, ModelSpec};
use aplearn_core::relax::{BinningConfig, DEFAULT_EUCLIDEAN_BINS};
use aplearn_core::train::{BatchMode, BatchSpec, Schedule, SgdConfig, TrainConfig};
use aplearn_core::transformer::StConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub st: StSection,
    pub loss: LossSection,
    pub batch: BatchSection,
    pub sgd: SgdSection,
    pub aug: AugSection,
    pub mining: MiningSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Ubc,
    Hpatches,
    Synthetic,
    /// A dataset written by `write_container`.
    Container,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: Source,
    /// Directory (ubc, hpatches) or file (container). Relative paths resolve
    /// against the config file.
    pub path: Option<PathBuf>,
    /// HPatches sequence names assigned to the test split.
    pub test_sequences: Vec<String>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            path: None,
            test_sequences: Vec::new(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    Linear,
    Mlp2,
    SmallConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchName,
    /// Hidden width of `mlp2`.
    pub hidden: usize,
    pub dim: usize,
    pub head: Head,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: ArchName::SmallConv,
            hidden: 256,
            dim: 128,
            head: Head::UnitNorm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StSection {
    pub enabled: bool,
    pub input_size: usize,
    pub output_size: usize,
    pub localization_lr_scale: f64,
}

impl Default for StSection {
    fn default() -> Self {
        let st = StConfig::default();
        Self {
            enabled: false,
            input_size: st.input_size,
            output_size: st.output_size,
            localization_lr_scale: st.localization_lr_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// Euclidean bins; binary codes always use one bin per bit.
    pub bins: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { bins: DEFAULT_EUCLIDEAN_BINS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchModeName {
    UniformGroups,
    TwoSequence,
    SmallDatasetCycling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSection {
    pub mode: BatchModeName,
    pub size: usize,
    /// Batches per epoch in `small_dataset_cycling` mode.
    pub epoch_batches: usize,
}

impl Default for BatchSection {
    fn default() -> Self {
        Self {
            mode: BatchModeName::UniformGroups,
            size: 1024,
            epoch_batches: 5000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    Linear,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSection {
    /// Defaults to `0.1 * batch.size / 1024`.
    pub lr0: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleName,
    pub epochs: usize,
    pub step_factor: f64,
    pub step_every: usize,
    /// Seeds model initialization, batch sampling and augmentation.
    pub seed: u64,
}

impl Default for SgdSection {
    fn default() -> Self {
        Self {
            lr0: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: ScheduleName::Linear,
            epochs: 30,
            step_factor: 10.0,
            step_every: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugSection {
    pub enabled: bool,
}

impl Default for AugSection {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningSection {
    /// Use mined in-sequence distractors as the only in-sequence negatives during training.
    pub enabled: bool,
    #[serde(rename = "K")]
    pub clusters: usize,
    #[serde(rename = "p")]
    pub percentile: f64,
    pub hog_resize: usize,
    pub hog_cell: usize,
    pub raw_resize: usize,
    pub max_iter: usize,
    /// Directory of label files from `aplearn mine`; mined in-process when absent.
    pub labels: Option<PathBuf>,
}

impl Default for MiningSection {
    fn default() -> Self {
        let m = MiningConfig::default();
        Self {
            enabled: false,
            clusters: m.clusters,
            percentile: m.percentile,
            hog_resize: m.hog_resize,
            hog_cell: m.hog_cell,
            raw_resize: m.raw_resize,
            max_iter: m.max_iter,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Verification,
    Retrieval,
    Matching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: Vec<Task>,
    pub split: SplitName,
    pub distractors: aplearn_core::eval::DistractorPolicy,
    /// Seeds the draw of non-matching verification pairs.
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: vec![Task::Verification, Task::Retrieval, Task::Matching],
            split: SplitName::Test,
            distractors: aplearn_core::eval::DistractorPolicy::All,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.path, &mut cfg.mining.labels].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), Failure> {
        if self.data.source != Source::Synthetic && self.data.path.is_none() {
            return Err(Failure::usage(format!("data.path is required for source {:?}", self.data.source)));
        }
        if self.model.dim == 0 {
            return Err(Failure::usage("model.dim must be positive"));
        }
        if self.batch.size < 2 {
            return Err(Failure::usage("batch.size must be at least 2"));
        }
        if self.sgd.epochs == 0 {
            return Err(Failure::usage("sgd.epochs must be positive"));
        }
        if self.sgd.lr0.is_some_and(|lr| !(lr >= 0.0 && lr.is_finite())) {
            return Err(Failure::usage("sgd.lr0 must be a finite non-negative number"));
        }
        if self.eval.tasks.is_empty() {
            return Err(Failure::usage("eval.tasks is empty"));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let arch = match self.model.arch {
            ArchName::Linear => Architecture::Linear,
            ArchName::Mlp2 => Architecture::Mlp2 { hidden: self.model.hidden },
            ArchName::SmallConv => Architecture::SmallConv,
        };
        let spec = ModelSpec::new(arch, self.model.dim, self.model.head);
        if self.st.enabled {
            spec.with_st(StConfig {
                input_size: self.st.input_size,
                output_size: self.st.output_size,
                localization_lr_scale: self.st.localization_lr_scale,
            })
        } else {
            spec
        }
    }

    pub fn binning(&self) -> Result<BinningConfig, Failure> {
        match self.model.head {
            Head::UnitNorm => BinningConfig::euclidean(self.loss.bins),
            Head::TanhCode => BinningConfig::hamming(self.model.dim),
        }
        .map_err(|e| Failure::usage(format!("loss: {e}")))
    }

    pub fn mining_config(&self) -> MiningConfig {
        MiningConfig {
            clusters: self.mining.clusters,
            percentile: self.mining.percentile,
            hog_resize: self.mining.hog_resize,
            hog_cell: self.mining.hog_cell,
            raw_resize: self.mining.raw_resize,
            max_iter: self.mining.max_iter,
            seed: self.sgd.seed,
        }
    }

    pub fn train_config(&self, validate: bool) -> Result<TrainConfig, Failure> {
        let s = &self.sgd;
        let schedule = match s.schedule {
            ScheduleName::Linear => Schedule::LinearToZero { epochs: s.epochs },
            ScheduleName::Step => Schedule::StepDecay {
                factor: s.step_factor,
                every: s.step_every,
                epochs: s.epochs,
            },
        };
        let mode = match self.batch.mode {
            BatchModeName::UniformGroups => BatchMode::UniformGroups,
            BatchModeName::TwoSequence => BatchMode::TwoSequence,
            BatchModeName::SmallDatasetCycling => BatchMode::SmallDatasetCycling {
                epoch_batches: self.batch.epoch_batches,
            },
        };
        Ok(TrainConfig {
            sgd: SgdConfig {
                lr0: s.lr0.unwrap_or_else(|| SgdConfig::default_lr0(self.batch.size)),
                momentum: s.momentum,
                weight_decay: s.weight_decay,
                schedule,
                seed: s.seed,
            },
            batch: BatchSpec { mode, size: self.batch.size },
            binning: self.binning()?,
            augment: self.aug.enabled,
            validate,
        })
    }

    /// The configuration as embedded in every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig, toml::de::Error> {
        toml::from_str(s)
    }

    #[test]
    fn documented_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.loss.bins, 25);
        assert_eq!(c.sgd.momentum, 0.9);
        assert_eq!(c.sgd.weight_decay, 1e-4);
        assert_eq!(c.train_config(false).unwrap().sgd.lr0, 0.1);
        assert_eq!(c.mining.clusters, 100);
        assert_eq!(c.mining.percentile, 20.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("[sgd]\nlr = 0.1\n").is_err());
        assert!(parse("[nope]\n").is_err());
        assert!(parse("[data.synthetic]\nsides = 3\n").is_err());
    }

    #[test]
    fn spec_key_names() {
        let c = parse("[mining]\nenabled = true\nK = 7\np = 35.0\n[model]\narch = \"mlp2\"\nhead = \"tanh_code\"\ndim = 16\n[st]\nenabled = true\n").unwrap();
        assert_eq!(c.mining.clusters, 7);
        assert_eq!(c.mining.percentile, 35.0);
        let spec = c.model_spec();
        assert_eq!(spec.input_side(), 42);
        assert_eq!(c.binning().unwrap(), BinningConfig::hamming(16).unwrap());
    }

    #[test]
    fn echo_round_trips() {
        let c = parse("[batch]\nsize = 64\n[sgd]\nepochs = 3\n").unwrap();
        let back: RunConfig = serde_json::from_value(c.echo()).unwrap();
        assert_eq!(back, c);
    }
}
