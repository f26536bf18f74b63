//! Leaf-disease image classification with explainability, CPU only.
//!
//! * [`preprocess`]: HSV leaf masking, morphology and resizing.
//! * [`dataset`]: corpus scanning, stratified split, batch loading.
//! * [`layers`], [`adam`], [`resize`]: the numerical primitives.
//! * [`model`]: the CNN graph, training, evaluation and the LSW1 weight format.
//! * [`xai`]: GradCAM, GradCAM++, LayerCAM, ScoreCAM and Faster-ScoreCAM.
//! * [`metrics`]: confusion matrix and macro-averaged report.

pub mod adam;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod resize;
pub mod synth;
pub mod tensor;
pub mod xai;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
