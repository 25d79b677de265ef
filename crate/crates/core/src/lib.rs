//! Kernel models and a query-only attack that reconstructs their training data.
//!
//! * [`kernels`]: Laplace, RBF, polynomial, NTK and bandwidth-Gaussian kernels
//!   with analytic gradients.
//! * [`models`]: kernel ridge regression, hinge-loss SVM, KDE, and the
//!   [`models::ModelOracle`] facade the attack is restricted to.
//! * [`optim`]: Adam and the OneCycle schedule.
//! * [`attack`]: the reconstruction attack, canonicalization and the
//!   uniqueness checks.
//! * [`metrics`]: DSSIM, L2 and mutual-nearest-neighbor recovery.

pub mod attack;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod synthetic;

pub use error::{Error, Result};
