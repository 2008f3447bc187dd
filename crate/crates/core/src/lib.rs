mod error;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod mining;
pub mod model;
pub mod patch;
pub mod ranking;
pub mod relax;
pub mod special;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};

pub use data::{PatchDataset, Split};
pub use eval::{DistractorPolicy, EvalReport, Metric};
pub use mining::{DistractorSet, MiningConfig};
pub use model::{Architecture, DescriptorModel, Head, ModelSpec};
pub use relax::BinningConfig;
pub use train::{TrainConfig, EpochRecord};
pub use transformer::StConfig;
