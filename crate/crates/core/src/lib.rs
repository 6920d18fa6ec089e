//! State-based quantum simulation.
//!
//! Generators are expanded as weighted sums of density matrices and each
//! term is applied through density-matrix exponentiation, either as the
//! ideal channel or through the controlled-SWAP circuit with heralded
//! post-selection.

pub mod amplifier;
pub mod cdopt;
pub mod decompose;
pub mod dme;
pub mod error;
pub mod evolve;
pub mod io;
pub mod nld;
pub mod nonlinear;
pub mod openquantum;
pub mod oracle;
pub mod scenario;
pub mod tensor;

pub use error::{Result, SbqsError};
