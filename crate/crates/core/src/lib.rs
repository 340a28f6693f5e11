//! Breathing-state identification from seismocardiogram (SCG) beats.
//!
//! AO instants are found by projecting the SCG onto the span of delayed
//! copies of a concurrent ECG and peak-picking the projection. Each heart
//! cycle between consecutive AOs yields fifteen features, which a stacked
//! sparse autoencoder with a softmax output maps to one of three breathing
//! states: stopped (SB), normal (NB) or long/laboured (LB).

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod beats;
pub mod error;
pub mod eval;
pub mod features;
pub mod osp;
pub mod pipeline;
pub mod sae;
pub mod signal_io;
pub mod synth;

pub use beats::{BeatConfig, InterpolatedBeat, RawBeat};
pub use error::{Error, Result};
pub use eval::{ConfusionMatrix, EvalConfig, EvalReport, SplitMode};
pub use features::{FeatureConfig, FeatureMatrix, FeatureVector, FEATURE_COUNT, FEATURE_NAMES};
pub use osp::{AoPeaks, OspConfig};
pub use pipeline::{run_pipeline, PipelineConfig};
pub use sae::{SaeModel, TrainConfig};
pub use signal_io::{LabelClass, RecordFormat, SignalRecord};
pub use synth::{CorpusConfig, SynthConfig};
