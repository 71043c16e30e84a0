//! Optimal control of a positive scalar state driven by a distributed delay.
//!
//! The crate covers the forward model, its Hilbert-space embedding, the
//! Hamiltonian, numerical value-function estimates, closed-loop feedback,
//! the approximation pipelines for degenerate data and a small Dini
//! derivative toolkit.

pub mod approx;
pub mod dini;
pub mod error;
pub mod experiments;
pub mod feedback;
pub mod hamiltonian;
pub mod hilbert;
pub mod dynamics;
pub mod model;
pub mod value;

pub use error::{Error, Result};
