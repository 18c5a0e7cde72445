//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! Graphs are built eagerly (each op computes its value on insertion) and
//! differentiated with [`Graph::backward`]. All reductions and gradient
//! accumulations run in a fixed order, so results are bit-reproducible.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_FLOOR};
pub use graph::{Crop, CustomOp, Gradients, Graph, Var};
pub use params::{checkpoint_bytes, clip_weights, load_checkpoint, parse_checkpoint, save_checkpoint, ParamStore, RmsProp};
pub use tensor::{Real, Tensor};
