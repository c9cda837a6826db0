//! Barrier, instability and accuracy-gain verdicts over sweep curves.
//!
//! Suprema over α are grid maxima; every report carries the number of grid
//! points it was computed on. [`refine_sweep`] re-scans around the loss
//! maximum on a 10× finer local grid when a sharper estimate is wanted.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{self, LabeledBatch, ModelSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::interp::{sweep, AlphaGrid, SweepCurve, SweepKind};

pub const DEFAULT_DELTA: f64 = 0.1;
pub const DEFAULT_XI: f64 = 0.01;
pub const REFINE_FACTOR: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierReport {
    /// `max_α L_α − ½(L(θ₀) + L(θ₁))`.
    pub instability: f64,
    /// `max_α L_α − L(θ₀)`; negative when the path only descends.
    pub depth: f64,
    pub delta: f64,
    pub barrier_present: bool,
    /// Grid α attaining the loss maximum (smallest α on ties).
    pub arg_sup_alpha: f64,
    pub grid_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    FailureMode,
    Gain,
    HighGain,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::FailureMode => "FailureMode",
            Regime::Gain => "Gain",
            Regime::HighGain => "HighGain",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeVerdict {
    pub regime: Regime,
    /// α of maximum accuracy; ties resolve to the largest α (zero-shot side).
    pub alpha_star: f64,
    /// `max_α A_α − A(θ₀)`.
    pub max_gain: f64,
    pub xi_threshold: f64,
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFinding {
    pub layer: String,
    pub instability: f64,
    pub max_gain: f64,
    pub alpha_star: f64,
    pub regime: Regime,
    pub is_straggler: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StragglerReport {
    pub loss0: f64,
    pub loss1: f64,
    pub acc0: f64,
    pub xi: f64,
    pub grid_points: usize,
    pub layers: Vec<LayerFinding>,
}

impl StragglerReport {
    pub fn stragglers(&self) -> impl Iterator<Item = &str> {
        self.layers
            .iter()
            .filter(|l| l.is_straggler)
            .map(|l| l.layer.as_str())
    }
}

/// Report plus the per-layer curves it was computed from, in layer order.
#[derive(Debug, Clone)]
pub struct LayerwiseScan {
    pub report: StragglerReport,
    pub curves: Vec<SweepCurve>,
}

/// Index of the first maximum.
fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Index of the last maximum.
fn last_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v >= values[best] {
            best = k;
        }
    }
    best
}

/// Linear interpolation instability against the endpoint average.
pub fn instability(curve: &SweepCurve, loss0: f64, loss1: f64) -> f64 {
    curve.loss[first_argmax(&curve.loss)] - 0.5 * (loss0 + loss1)
}

pub fn barrier(curve: &SweepCurve, loss0: f64, loss1: f64, delta: f64) -> Result<BarrierReport> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta", format!("{delta} must be > 0")));
    }
    let k = first_argmax(&curve.loss);
    let depth = curve.loss[k] - loss0;
    Ok(BarrierReport {
        instability: instability(curve, loss0, loss1),
        depth,
        delta,
        barrier_present: depth >= delta,
        arg_sup_alpha: curve.alphas()[k],
        grid_points: curve.grid.len(),
    })
}

/// FailureMode when no α beats `acc0`, HighGain when the best gain reaches
/// `xi` (closed threshold), Gain otherwise.
pub fn classify_regime(curve: &SweepCurve, acc0: f64, xi: f64) -> Result<RegimeVerdict> {
    if !(xi > 0.0) {
        return Err(Error::invalid("xi", format!("{xi} must be > 0")));
    }
    let k = last_argmax(&curve.acc);
    let max_gain = curve.acc[k] - acc0;
    let regime = if max_gain <= 0.0 {
        Regime::FailureMode
    } else if max_gain >= xi {
        Regime::HighGain
    } else {
        Regime::Gain
    };
    Ok(RegimeVerdict {
        regime,
        alpha_star: curve.alphas()[k],
        max_gain,
        xi_threshold: xi,
        grid_points: curve.grid.len(),
    })
}

/// Layer-wise sweep of every layer with instability and regime per layer.
///
/// A layer is a straggler when its layer-wise path is a failure mode (no α
/// gains accuracy over `theta0`) and the path actually loses accuracy
/// somewhere; a path that never moves off `A(θ₀)` is not flagged.
pub fn layerwise_scan(
    spec: &ModelSpec,
    theta0: &ParameterSet,
    theta1: &ParameterSet,
    grid: &AlphaGrid,
    batch: &LabeledBatch,
    xi: f64,
) -> Result<LayerwiseScan> {
    if !(xi > 0.0) {
        return Err(Error::invalid("xi", format!("{xi} must be > 0")));
    }
    let (loss0, acc0) = engine::evaluate(spec, theta0, batch)?;
    let (loss1, _) = engine::evaluate(spec, theta1, batch)?;
    let results: Vec<(LayerFinding, SweepCurve)> = spec
        .layers()
        .par_iter()
        .map(|ls| {
            let kind = SweepKind::Layerwise(ls.name.clone());
            let curve = sweep(spec, theta0, theta1, grid, batch, kind, "layerwise")?;
            let verdict = classify_regime(&curve, acc0, xi)?;
            let degrades = curve.acc.iter().any(|&a| a < acc0);
            let finding = LayerFinding {
                layer: ls.name.clone(),
                instability: instability(&curve, loss0, loss1),
                max_gain: verdict.max_gain,
                alpha_star: verdict.alpha_star,
                regime: verdict.regime,
                is_straggler: verdict.regime == Regime::FailureMode && degrades,
            };
            Ok((finding, curve))
        })
        .collect::<Result<_>>()?;
    let (layers, curves) = results.into_iter().unzip();
    Ok(LayerwiseScan {
        report: StragglerReport {
            loss0,
            loss1,
            acc0,
            xi,
            grid_points: grid.len(),
            layers,
        },
        curves,
    })
}

/// Re-sweep `curve`'s path on its grid refined 10× around the loss maximum.
pub fn refine_sweep(
    spec: &ModelSpec,
    theta0: &ParameterSet,
    theta1: &ParameterSet,
    curve: &SweepCurve,
    batch: &LabeledBatch,
) -> Result<SweepCurve> {
    let k = first_argmax(&curve.loss);
    let grid = curve.grid.refined_near(curve.alphas()[k], REFINE_FACTOR)?;
    sweep(spec, theta0, theta1, &grid, batch, curve.kind.clone(), &curve.dataset_tag)
}
