//! Dual-graph pseudo-label correction for semi-supervised segmentation.

pub mod clg;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod npy;
pub mod refine;
pub mod slg;
pub mod sparse;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureMatrix, GridShape, LabelMap, Matrix, ProbMatrix, IGNORE};
