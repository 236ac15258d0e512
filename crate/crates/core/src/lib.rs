//! Projection-based reduced-order modelling of transient thermal problems
//! with neural time steppers in the reduced space.
//!
//! The pipeline runs in four stages: full-order simulation of sampled
//! parameter configurations ([`fom`], [`sampling`]), a POD basis from the
//! snapshots ([`pod`]), surrogate training on the projected trajectories
//! ([`surrogate`]) and error evaluation against reference runs ([`eval`]).

pub mod error;
pub mod eval;
pub mod fom;
pub mod linalg;
pub mod metrics;
pub mod pod;
pub mod sampling;
pub mod surrogate;

pub use error::{Error, Result};
