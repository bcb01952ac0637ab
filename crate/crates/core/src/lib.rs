//! Numerical laboratory for slowly driven nonlinear Schrödinger-type
//! evolutions `iε ∂ₜv = H(t, [v]) v`, where `[v] = (|v₁|², …, |v_p|²)`.

pub mod eigenpath;
pub mod error;
pub mod io;
pub mod linalg;
pub mod linearized;
pub mod model;
pub mod numerics;
pub mod propagator;
pub mod scalar_fn;
pub mod transport;

pub use error::{LabError, Result};
