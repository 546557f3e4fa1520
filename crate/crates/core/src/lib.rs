//! Cross-day hand-gesture recognition from high-density surface EMG.
//!
//! The crate covers the whole pipeline: record ingestion and synthetic
//! two-day datasets ([`dataset`]), the causal filter chain and windowing
//! ([`dsp`]), a small autograd core ([`numcore`]), the time-patch vision
//! transformer ([`model`]), pre-training ([`train`]), projection-only
//! few-shot calibration ([`calibrate`]), the adaptive LDA baseline
//! ([`alda`]), and accuracy/significance reporting ([`evalstats`]).
//! [`experiment`] wires these stages together behind one config file.

pub mod alda;
pub mod calibrate;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod evalstats;
pub mod experiment;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod train;

pub use error::{Error, ErrorKind, Result};

pub use calibrate::{CalibrationPlan, FoldRow};
pub use dataset::{Day, Provenance, Recording, SplitPlan, SyntheticShiftConfig};
pub use dsp::{PreprocessConfig, WindowSet, WindowSpec, WindowTensor};
pub use evalstats::{ExperimentReport, GroupId, ReportRow};
pub use experiment::ExperimentConfig;
pub use model::{ModelConfig, ModelParams, ParamSubset};
pub use train::{Strategy, TrainConfig, TrainLog};
