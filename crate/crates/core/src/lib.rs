//! Data-driven min-max model predictive control for linear parameter-varying
//! systems whose scheduling signal is unknown but bounded by a quadratic
//! matrix inequality.

// `!(x > y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

// Links the system OpenBLAS used by the conic solver's dense kernels.
use openblas_src as _;

pub mod config;
pub mod consistency;
pub mod data;
mod error;
pub mod experiment;
pub mod hexfloat;
pub mod io;
pub mod linalg;
pub mod lpv_model;
pub mod mpc;
pub mod sdp;
pub mod solver;
pub mod verification;

pub use error::{Error, Result};
