//! Population inference in the presence of selection effects.
//!
//! Two routes to the intrinsic population are implemented side by side on
//! one-dimensional synthetic populations: including the detection
//! probability in the hierarchical likelihood (with its `α(Λ)`
//! normalisation), or inferring the observed distribution first and removing
//! the selection function afterwards, either through the conjugate parameter
//! map or by dividing a density estimate by `p_det`.

pub mod cli;
pub mod config;
pub mod dpgmm;
pub mod error;
pub mod figures;
pub mod fit;
pub mod io;
pub mod likelihood;
pub mod population;
pub mod presets;
pub mod quad;
pub mod sampler;
pub mod simulate;
pub mod stats;
pub mod validate;

pub use error::{Error, Result};
