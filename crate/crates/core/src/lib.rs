//! Time-optimal nonlinear model predictive control with spectral vibration
//! constraints.
//!
//! Modules build on one another bottom-up: plant models and RK4 integration,
//! frequency estimation, admissible frequency bands, optimal control
//! transcription, the SQP solver, terminal ingredients and finally the
//! receding-horizon loop.

pub mod freqband;
pub mod model;
pub mod mpc;
pub mod nlp;
pub mod ocp;
pub mod spectral;
pub mod terminal;
