//! Hypertension screening from single-channel ECG.
//!
//! The pipeline runs in fixed stages: wavelet denoising of each record,
//! non-overlapping fixed-length segmentation, Empirical Mode Decomposition of
//! every segment into five intrinsic mode functions, nine measures per IMF
//! (45 features per segment), and a Gini decision tree evaluated with
//! stratified k-fold cross-validation.
//!
//! Segment-level work is data parallel. With the default `parallel` feature
//! it fans out over a rayon pool; without it every map runs sequentially and
//! produces identical output.

pub mod dataset;
pub mod denoise;
pub mod emd;
pub mod error;
pub mod eval;
pub mod features;
pub mod par;
pub mod pipeline;
pub mod segment;
pub mod spline;
pub mod tree;

pub use dataset::{ClassLabel, EcgRecord, RecordMetadata};
pub use error::{Error, Result};
