//! Chest radiograph segmentation from scratch: a small reverse-mode
//! autodiff core, miniature U-Net / U-Net++ / FPN models, training with
//! Adam and a plateau schedule, mask post-processing, COVID-19 detection and
//! infection quantification, evaluation with confidence intervals, and an
//! event-sourced human-in-the-loop annotation workflow.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod error;
pub mod io;
pub mod mask;
pub mod maskops;
pub mod metrics;
pub mod models;
pub mod quantify;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod workflow;

pub use error::{Error, LineDiagnostic, Result};
pub use io::{Class, DatasetRecord, GrayImage, Split};
pub use mask::{BinaryMask, ProbMap};
pub use maskops::{LabeledRegions, PostprocessConfig, Region};
pub use metrics::{CIParams, ConfusionCounts, MetricsReport, Task};
pub use models::{build_model, Arch, ModelConfig, SegModel};
pub use quantify::{Detection, PipelineMode, QuantReport};
pub use scalar::{Precision, Scalar};
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{train, Sample, TrainConfig};
pub use workflow::{Workflow, WorkflowConfig, WorkflowState};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type SegModel32 = SegModel<f32>;
pub type SegModel64 = SegModel<f64>;
pub type ProbMap32 = ProbMap<f32>;
pub type ProbMap64 = ProbMap<f64>;
