//! gradalign: a training laboratory for studying when gradient-based
//! learning of dense networks can reach global optima.
//!
//! The crate trains small softplus networks, tests at every step whether the
//! (modified) target matrix lies in the column space of the output Jacobian
//! — the alignment certificate — and evaluates the optimality-gap bounds
//! that the certificate implies. It also implements an
//! exploration-exploitation training wrapper: free training of all layers up
//! to a switch step, a Gaussian parameter perturbation, freezing of the
//! head's activation gates, then convex training of the penultimate layer
//! only, together with the rank certificate (safe exploration) that makes
//! the second phase provably sufficient.
//!
//! Modules:
//! - [`linalg`]: dense SVD / QR / least-squares core (no external backend);
//! - [`model`]: plain and gated-head networks, analytic gradients, Jacobians;
//! - [`losses`]: squared / binary CE / multiclass CE with smoothness facts;
//! - [`data`]: synthetic dataset generators and CSV persistence;
//! - [`diagnostics`]: alignment records, Gram drift, rank certificates,
//!   bound reports;
//! - [`training`]: optimizers, plain training, and the
//!   exploration-exploitation wrapper.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
