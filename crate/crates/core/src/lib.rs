//! Sparse coarse-to-fine TSDF and semantic reconstruction from posed RGB
//! frames, with 2D-to-3D depth and semantic refinements.

pub mod backbone;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fragments;
pub mod fusion;
pub mod generate;
pub mod gradcheck;
mod mc_table;
pub mod mesh;
pub mod metrics;
pub mod mvs;
pub mod objectives;
pub mod pipeline;
pub mod refine;
pub mod supervision;
pub mod synth;
pub mod train;
pub mod volume;

pub use cdr_tensor::ParamStore;
pub use error::{CdrError, Result};
