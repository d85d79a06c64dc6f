//! Mobile-Former: a MobileNet branch and a small transformer over a handful
//! of global tokens, run in parallel and joined by two-way light-weight
//! cross attention.
//!
//! The crate is self-contained: a tape-based autodiff over dense tensors,
//! the layers and blocks of the network, a declarative architecture format
//! with the seven published variants, exact parameter and multiply-add
//! accounting, and a toy training harness.

pub mod arch;
pub mod autodiff;
pub mod blocks;
pub mod bridge;
pub mod cli;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use arch::{builtin_spec, parse_spec, BlockKind, BlockSpec, ModelSpec, Resolution};
pub use autodiff::{NormMode, Tape, Var};
pub use cost::{analytic_block_cost, budget_report, count_madds, count_params, CostReport, Pillar};
pub use error::{Error, Result};
pub use model::{build_model, Model};
pub use tensor::{Scalar, Tensor};
