//! Multi-view collaborative self-supervised hand pose estimation.
//!
//! The pipeline runs a small single-view estimator on every camera, lets the
//! views exchange information through a cross-view interaction network, fuses
//! the refined skeletons in a canonical frame and uses the fused result to
//! supervise both stages. Classical triangulation baselines, evaluation metrics
//! and a synthetic multi-view data generator are included.

pub mod align;
pub mod autodiff;
pub mod camera;
pub mod config;
pub mod cvi;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod fusion;
pub mod handmodel;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod triangulate;

pub use autodiff::{Graph, Gradients, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
