//! Variational conditional normalizing flows (VCNF) for second-order mean-field
//! control problems.
//!
//! A time-conditioned autoregressive rational-quadratic spline flow
//! `f(., t)` pushes the standard normal onto a density path `p(., t)`. Kinetic
//! energies, score functions and boundary penalties are estimated by Monte
//! Carlo sampling and central differences, and the flow parameters are fitted
//! with Adam. The [`oracles`] module carries independent reference solutions
//! (closed forms, kernel quadrature, exact assignment) used to check results.

pub mod conditioner;
pub mod config;
pub mod diffkit;
pub mod error;
pub mod flow;
pub mod oracles;
pub mod problems;
pub mod spline;
pub mod trainer;
pub mod verify;

pub use conditioner::{ConditionerNet, ParamVector};
pub use error::{Result, VcnfError};
pub use flow::{FlowArch, FlowModel};
pub use problems::{Distribution, DriftField, Potential, ProblemSpec};

pub use spline::{RQSplineParams, RawTheta, SplineConfig};
pub use trainer::{RunMetrics, TrainConfig};


static MAX_THREADS: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(1);

/// Caps the worker threads used for loss evaluation (at least 1). Results are
/// bit-identical for every setting.
pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n.max(1), std::sync::atomic::Ordering::Relaxed);
}

pub fn max_threads() -> usize {
    MAX_THREADS.load(std::sync::atomic::Ordering::Relaxed)
}
