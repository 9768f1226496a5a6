//! Streaming multichannel mixer-limiter built on per-frame quadratic
//! programs.
//!
//! The crate couples channel mixing and peak limiting: every audio frame
//! (plus look-ahead) yields a small convex QP over per-channel gains with
//! per-sample mixture-limit rows, and the frame-wise gain solutions are
//! overlap-added through optimized constant-overlap-add (COLA) windows
//! into smooth limiter envelopes. Pre-mixing and occlusion culling shrink
//! the per-frame problems to real-time-friendly sizes.
//!
//! Modules:
//! - [`qp`] dense convex QP solver (dual active set + KKT polish)
//! - [`objective`] distortion objective and its PSD/rate-bound analysis
//! - [`window`] dynamics-constrained COLA window design
//! - [`reduction`] pre-mixers, presolve and occlusion culling
//! - [`engine`] the streaming frame processor
//! - [`experiments`] signal generators and benchmark runners
//! - [`wav`] minimal WAV front end for the CLI

pub mod engine;
pub mod experiments;
pub mod objective;
pub mod qp;
pub mod reduction;
pub mod wav;
pub mod window;

pub use qp::{solve, ConstraintId, QpProblem, QpSolution, SolveStatus, SolverConfig};
