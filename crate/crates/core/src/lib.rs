//! Linear Poisson modelling of paired-timepoint ADC histograms for detecting
//! and quantifying treatment response.
//!
//! Histograms over (ADC bin x timepoint) are modelled as non-negative
//! combinations of shared component PMFs. Components learnt from control
//! tumors are frozen, extra components are learnt from treated tumors, and the
//! fitted quantity of the extra components measures the responding volume.

pub mod baseline;
pub mod error;
pub mod histograms;
pub mod inference;
pub mod lpm;
pub mod selection;
pub mod stats;
pub mod svg;
pub mod synth;
pub mod validation;

pub use error::{Error, Result};
pub use histograms::{BinningConfig, Cohort, Histogram2D, Timepoint, VoxelRecord};
pub use inference::{CohortSummary, QuantityCovariance, ResponseResult};
pub use lpm::{ComponentPmf, FitDiagnostics, LpmModel, Phase, QuantityVector, TrainOptions, TrainOutput};
pub use selection::{GoodnessOfFit, SelectionCurve};
pub use synth::{GroundTruth, SynthSpec};
pub use validation::LooReport;
