//! Weight-space analysis of fine-tuned networks.
//!
//! The crate evaluates small dense networks, linearly interpolates between a
//! "zero-shot" checkpoint `theta0` and a "fine-tuned" checkpoint `theta1`,
//! and measures what happens along the path:
//!
//! - [`interp`] builds global and layer-wise interpolations and sweeps them
//!   over an α grid. The convention is `α·theta0 + (1 − α)·theta1`, so α = 1
//!   is the zero-shot end.
//! - [`metrics`] turns sweep curves into loss-barrier, instability and
//!   accuracy-gain verdicts, and scans layers for stragglers.
//! - [`sharpness`] estimates adaptive average-case sharpness by Monte Carlo
//!   and carries a finite-difference Hessian-diagonal oracle for the
//!   small-radius expansion.
//! - [`prune`] sparsifies near-zero-sharpness layers of `theta1` before
//!   interpolating.
//! - [`expkit`] generates synthetic in-distribution / shifted datasets and
//!   trains the checkpoint pairs used by the demos.

// `!(x > 0.0)` is used on purpose so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod expkit;
pub mod interp;
pub mod metrics;
pub mod objective;
pub mod prune;
pub mod rng;
pub mod sharpness;

pub use checkpoint::Checkpoint;
pub use engine::{Activation, LabeledBatch, Layer, LayerSpec, ModelSpec, ParameterSet};
pub use error::{Error, ErrorKind, Result};
pub use interp::{AlphaGrid, SweepCurve, SweepKind};
pub use metrics::{BarrierReport, Regime, RegimeVerdict, StragglerReport};
pub use objective::{ModelObjective, Objective, QuadraticSurrogate};
pub use sharpness::{Scaling, SharpnessConfig, SharpnessEstimate, SharpnessScope};
