//! Unconstrained features model for the supervised contrastive loss.
//!
//! Losses and gradients, a projected-gradient solver for the ball-constrained
//! embedding problem, a solver for its convex Gram relaxation, geometry
//! analyzers, the balanced closed form and a brute-force oracle for tiny
//! instances.

pub mod acceptance;
pub mod balanced_lp;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod gram_solver;
pub mod io;
pub mod loss;
pub mod model;
pub mod numdiff;
pub mod oracle;
pub mod ufm_solver;

pub use error::{Error, Result};
pub use model::{DatasetSpec, Embeddings, GramMatrix, StepImbalanceSpec, Temperature};
