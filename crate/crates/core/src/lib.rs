//! Gaussian ensemble belief propagation.
//!
//! Structured (diagonal plus low-rank) Gaussian algebra, ensemble
//! conditioning and conformation, loopy message passing over factor graphs
//! built from structural equation models, a dense Gaussian BP baseline and
//! the transport system-identification benchmark.

pub mod benchmarks;
pub mod dlr;
pub mod ensemble;
pub mod error;
pub mod factor_graph;
pub mod gabp;
pub mod gaussian;
pub mod linalg;
pub mod oracle;
pub mod rng;
pub mod selftest;
pub mod sem;

pub use dlr::{CapacitanceFactor, DlrMatrix, Sign, SignedDlr};
pub use ensemble::{Ensemble, NuggetSpec};
pub use error::{Error, Result};
pub use gaussian::{CanonicalGaussian, GaussianPotential, MomentsGaussian};
