//! Straggler layer pruning.
//!
//! Layers of `theta1` whose adaptive sharpness is indistinguishable from zero
//! are sparsified with a Bernoulli mask before interpolating with `theta0`.

use indexmap::IndexMap;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{LabeledBatch, ModelSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::interp::{self, AlphaGrid, SweepCurve, SweepKind};
use crate::metrics::{self, RegimeVerdict};
use crate::objective::ModelObjective;
use crate::rng;
use crate::sharpness::{self, NearZeroRule, SharpnessConfig, DEFAULT_ITERS, DEFAULT_RHO};

pub const DEFAULT_P: f64 = 0.5;
pub const DEFAULT_SCREEN_ITERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Probability that an entry of a flagged layer is zeroed.
    pub p: f64,
    pub rho: f64,
    pub near_zero: NearZeroRule,
    /// Independent sharpness estimates per layer; a layer is flagged only if
    /// every one of them is near zero.
    pub screen_iters: usize,
    pub seed: u64,
    /// Monte Carlo draws inside each screening estimate.
    pub sharpness_iters: usize,
    /// Rows per draw; `None` uses every row.
    pub m: Option<usize>,
}

impl PruneConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            p: DEFAULT_P,
            rho: DEFAULT_RHO,
            near_zero: NearZeroRule::default(),
            screen_iters: DEFAULT_SCREEN_ITERS,
            seed,
            sharpness_iters: DEFAULT_ITERS,
            m: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::invalid("p", format!("{} must lie in (0, 1]", self.p)));
        }
        if self.screen_iters == 0 {
            return Err(Error::invalid("screen_iters", "must be >= 1"));
        }
        Ok(())
    }
}

/// One layer's screening result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScreen {
    pub layer: String,
    /// Sharpness mean of each repetition.
    pub means: Vec<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub flagged_layers: Vec<String>,
    /// Per flagged layer, `true` marks a zeroed entry (weights row-major, then bias).
    pub masks: IndexMap<String, Vec<bool>>,
    pub pruned_theta1: ParameterSet,
    pub curve_before: SweepCurve,
    pub curve_after: SweepCurve,
    pub screens: Vec<LayerScreen>,
}

impl PruneOutcome {
    /// Fraction of entries zeroed in each flagged layer.
    pub fn zeroed_fractions(&self) -> IndexMap<String, f64> {
        self.masks
            .iter()
            .map(|(name, m)| {
                let hits = m.iter().filter(|&&z| z).count();
                (name.clone(), hits as f64 / m.len().max(1) as f64)
            })
            .collect()
    }
}

/// `n` independent draws, each `true` with probability `p`.
pub fn bernoulli_mask(n: usize, p: f64, seed: u64, stream: u64) -> Vec<bool> {
    let mut rng = rng::substream(seed, "mask", stream);
    (0..n).map(|_| rng.random_bool(p)).collect()
}

/// Screen every layer of `theta1` at the fine-tuned end of the path.
pub fn screen_layers(
    spec: &ModelSpec,
    theta1: &ParameterSet,
    data: &LabeledBatch,
    cfg: &PruneConfig,
) -> Result<Vec<LayerScreen>> {
    cfg.validate()?;
    theta1.validate(spec)?;
    let objective = ModelObjective::new(spec, data)?;
    let m = cfg.m.unwrap_or(data.len());
    let names: Vec<String> = theta1.names().map(str::to_string).collect();
    let reps: Vec<Vec<f64>> = (0..cfg.screen_iters)
        .into_par_iter()
        .map(|r| {
            let scfg = SharpnessConfig::new(m, rng::derive_seed(cfg.seed, &format!("screen/{r}")))
                .with_rho(cfg.rho)
                .with_iters(cfg.sharpness_iters);
            names
                .iter()
                .map(|name| {
                    // the endpoint of the path is theta1 itself
                    sharpness::estimate_layerwise(&objective, theta1, theta1, name, 0.0, &scfg)
                        .map(|e| e.mean)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let flags: Vec<Vec<bool>> = reps.iter().map(|means| cfg.near_zero.flags(means)).collect();
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(k, layer)| LayerScreen {
            layer,
            means: reps.iter().map(|r| r[k]).collect(),
            flagged: flags.iter().all(|f| f[k]),
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn straggler_prune(
    theta0: &ParameterSet,
    theta1: &ParameterSet,
    spec: &ModelSpec,
    data: &LabeledBatch,
    grid: &AlphaGrid,
    dataset_tag: &str,
    cfg: &PruneConfig,
) -> Result<PruneOutcome> {
    theta0.validate(spec)?;
    theta0.same_layout(theta1)?;
    let screens = screen_layers(spec, theta1, data, cfg)?;

    let mut pruned = theta1.clone();
    let mut masks = IndexMap::new();
    let mut flagged_layers = Vec::new();
    for (k, screen) in screens.iter().enumerate() {
        if !screen.flagged {
            continue;
        }
        let layer = pruned.get_mut(&screen.layer).expect("screened layer exists");
        let mask = bernoulli_mask(layer.len(), cfg.p, cfg.seed, k as u64);
        for (v, &zero) in layer.values_mut().zip(&mask) {
            if zero {
                *v = 0.0;
            }
        }
        flagged_layers.push(screen.layer.clone());
        masks.insert(screen.layer.clone(), mask);
    }

    let curve_before = interp::sweep(spec, theta0, theta1, grid, data, SweepKind::Global, dataset_tag)?;
    let curve_after = if flagged_layers.is_empty() {
        curve_before.clone()
    } else {
        interp::sweep(spec, theta0, &pruned, grid, data, SweepKind::Global, dataset_tag)?
    };
    Ok(PruneOutcome {
        flagged_layers,
        masks,
        pruned_theta1: pruned,
        curve_before,
        curve_after,
        screens,
    })
}

/// Regime verdicts for the curve before and after pruning.
pub fn compare_outcomes(outcome: &PruneOutcome, acc0: f64, xi: f64) -> Result<(RegimeVerdict, RegimeVerdict)> {
    Ok((
        metrics::classify_regime(&outcome.curve_before, acc0, xi)?,
        metrics::classify_regime(&outcome.curve_after, acc0, xi)?,
    ))
}
