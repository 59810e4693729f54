//! Spatiotemporal tomographic reconstruction with mass-preserving
//! diffeomorphic motion.
//!
//! A nonnegative template image is transported by a time-dependent velocity
//! field; the transported images must explain gated sparse-view projection
//! data. Template and velocity are recovered jointly by alternating projected
//! gradient descent on the template and kernel-smoothed gradient descent on
//! the velocity.

pub mod bench;
pub mod error;
pub mod experiment;
pub mod field;
pub mod flow;
pub mod io;
pub mod projector;
pub mod rkhs;
pub mod solver;

pub use error::{Error, Result};
