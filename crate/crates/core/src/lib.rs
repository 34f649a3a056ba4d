//! Monocular depth estimation with patch-wise EdgeConv and EdgeConv
//! attention, built on a small CPU reverse-mode autodiff engine.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad_suite;
pub mod loss;
pub mod net;
pub mod nn;
pub mod params;
pub mod patch_graph;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
