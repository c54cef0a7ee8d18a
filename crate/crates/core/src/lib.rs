//! Joint calibration of networks of asynchronous microphone arrays.
//!
//! Estimates per-array positions, orientations, clock offsets, and clock
//! drift rates together with the trajectory of a moving sound source, from
//! three measurement streams: time differences of arrival across the sound
//! events of each array (TDOA-S), time differences between arrays per event
//! (TDOA-M), and per-array direction-of-arrival unit vectors, tied together
//! by source odometry. A reduced nonlinear least-squares pass plus point-set
//! registration produces initial values; a damped Gauss-Newton pass on the
//! full model refines them.

pub mod error;
pub mod io;
pub mod ive;
pub mod model;
pub mod pipeline;
pub mod so3;
pub mod solver;
pub mod synth;

pub use error::{CalibError, PipelineError};
