//! Mean-teacher semi-supervised slice quality assessment with stack-level
//! brain ROI consistency.

pub mod backbone;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod grid;
pub mod losses;
pub mod reacq;
pub mod roi;
pub mod trainer;

pub use backbone::{Architecture, ForwardOutput, ModelParams, Network};
pub use config::FileConfig;
pub use datamodel::{Dataset, Label, Slice, Split, SynthConfig};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use grid::{Grid, Mask};
pub use losses::{LossBreakdown, LossWeights};
pub use reacq::{ReacqConfig, ReacqResult};
pub use roi::{RoiCircle, RoiConfig, StackRoi};
pub use trainer::{PerturbConfig, Perturbation, TrainConfig};
