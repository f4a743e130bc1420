//! Periodic motion estimation with neural velocity fields.
//!
//! A sine-activated coordinate network models a time-periodic velocity
//! field; explicit Euler integration turns it into trajectories, and the
//! whole unrolled flow is differentiated to fit a 4D image sequence.

pub mod autodiff;
pub mod flow;
pub mod mesh;
pub mod metrics;
pub mod neural_field;
pub mod real;
mod sgemm;
pub mod training;
pub mod volume;

pub use real::Real;
