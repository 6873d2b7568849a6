//! Minimal reverse-mode differentiable runtime.
//!
//! Dense feature maps are `[C, H, W]`, per-row features `[N, C]`, and sparse
//! volumes pair a [`CoordSet`] with an `[N, C]` value node. All ops record on
//! a [`Tape`]; [`Tape::backward`] walks the tape in reverse.

pub mod dense;
pub mod error;
pub mod gather;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod sparse;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gather::GatherMap;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::log_transform;
pub use optim::Adam;
pub use params::{Bindings, ParamStore};
pub use sparse::{kernel_offsets, trilinear_weights, Coord, CoordSet, GruParams, Rulebook, SparseTensor3D};
pub use tape::{CustomOp, Gradients, Precision, Tape, Var};
pub use tensor::Tensor;
