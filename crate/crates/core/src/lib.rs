//! Subsampled Gauss-Newton (Hessian-free Newton-CG) training for
//! convolutional neural networks.
//!
//! The crate covers the whole pipeline: architecture description and
//! parameter layout ([`config`]), the index maps that lower convolution,
//! padding and pooling to gathers ([`index`]), forward evaluation
//! ([`forward`]), gradients ([`backward`]), Jacobian blocks and the
//! Gauss-Newton product ([`gauss_newton`]), the Newton-CG driver
//! ([`solver`]), dataset handling ([`data`]) and the command-line front end
//! ([`cli`]).

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

// Batched index offsets are computed in `usize`; 32-bit targets would
// overflow them on realistic layer sizes.
const _: () = assert!(usize::BITS >= 64);

pub mod backward;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod forward;
pub mod gauss_newton;
pub mod index;
pub mod linalg;
pub mod solver;

pub use config::{init_params, param_count, LayerSpec, ModelConfig, ParamLayout, ParamVector};
pub use data::Dataset;
pub use error::{Error, Result};
pub use forward::{objective, BatchPlan, Network};
pub use gauss_newton::GNContext;

pub use solver::{newton_train, SolverConfig};
