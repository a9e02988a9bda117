pub mod ablation;
pub mod agda;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pooling;
pub mod tensor;
pub mod texture;
pub mod train;
pub mod visualize;

pub use ablation::{run_ablation_grid, AblationTable, GridCell};
pub use agda::{AgdaConfig, AgdaMode};
pub use attention::{AttentionMaps, SpliceMode};
pub use backbone::{Backbone, StageSpec, TinyBackbone};
pub use checkpoint::Checkpoint;
pub use config::{AgdaPass, AuxLoss, TrainConfig};
pub use data::{Dataset, DatasetManifest, Split, SynthConfig};
pub use error::{Error, Result};
pub use losses::{CenterGrad, CenterUpdate, FeatureCenters, LossConfig};
pub use metrics::EvalReport;
pub use model::{ModelOutput, MultiAttentionModel};
pub use tensor::Tensor;
pub use train::{StepStats, Trainer};
