//! Time-varying, frequency-specific Granger causality with a variational
//! Bayes state-space VAR and multiscale (à trous Haar) lag designs.

// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod atrous;
pub mod causality;
pub mod design;
pub mod dist;
pub mod error;
pub mod estep;
pub mod io;
pub mod linalg;
pub mod model;
pub mod mstep;
pub mod pipeline;
pub mod selection;
pub mod simulate;
pub mod vbem;

pub use error::{Error, Result};
