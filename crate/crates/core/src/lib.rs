//! Spline-based neural operator surrogates for long-horizon safety and
//! recovery probabilities of stochastic systems, together with the Monte
//! Carlo, finite-difference and closed-form oracles used to generate data
//! and check every learned surface.

pub mod basis;
pub mod error;
pub mod format;
pub mod functional;
pub mod network;
pub mod pde;
pub mod quadrature;
pub mod stochastic;
pub mod surrogate;
pub mod tensor;
pub mod training;

pub use basis::{BasisSpec, Interval, KnotVector};
pub use error::{Error, Result};
pub use surrogate::{ControlTensor, FaceMask, ProblemKind, SurfacePartials};
pub use stochastic::{Drift, McResult, SafeBox, SineParams, SystemSpec};
