//! Task-decomposed semantic segmentation: one network trained jointly on
//! pixel segmentation, foreground class presence and scene classification,
//! with a sync term tying the segmentation output to the class head.

pub mod checkpoint;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{ConvOpts, Graph, Var};
pub use losses::{LossBreakdown, LossWeights, ProjectionMode};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
pub use metrics::{evaluate, MetricReport, Segmenter};
pub use model::{ModelConfig, Prediction, TaskDecompModel};
pub use synthdata::{Dataset, Sample, WorldSpec};
pub use trainer::{train, History, HistoryRecord, TrainConfig, Trainer};
