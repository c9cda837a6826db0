//! Adaptive average-case sharpness.
//!
//! For weights `w`, radius `ρ` and scale vector `c`, the estimator targets
//!
//! ```text
//! E_{S ~ P_m, δ ~ N(0, ρ² diag(c²))} [ L_S(w + δ) − L_S(w) ]
//! ```
//!
//! with `c = |w|` (elementwise adaptive) or `c = 1` (uniform). Each Monte-Carlo
//! draw samples a subsample `S` of `m` rows without replacement and one
//! normalized Gaussian vector `γ`, sets `δ = ρ·c ⊙ γ`, and evaluates the pair
//! `±δ`; the draw's value is `½(L_S(w+δ) + L_S(w−δ)) − L_S(w)`, in which the
//! first-order term cancels exactly. Draw `i` uses its own ChaCha stream
//! `(seed, i)`, and the mean is reduced in draw order, so results do not
//! depend on the thread count.
//!
//! [`hessian_diag_fd`] and [`asymptotic_check`] compare the estimate against
//! the small-radius limit `(ρ²/2) Σᵢ Hᵢᵢ cᵢ²`, which for `c = |w|` is
//! `(ρ²/2)·tr(∇²L ⊙ |w||w|ᵀ)`.

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{LabeledBatch, ModelSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::interp::interpolate_global;
use crate::objective::{ModelObjective, Objective};
use crate::rng;

pub const DEFAULT_RHO: f64 = 1.0;
pub const DEFAULT_ITERS: usize = 20;
pub const DEFAULT_FD_CAP: usize = 20_000;
pub const DEFAULT_FD_RELATIVE_STEP: f64 = 1e-3;
/// Taylor values below this are treated as zero when forming ratios.
pub const RATIO_GUARD: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// `c = |w|`
    ElementwiseAbsW,
    /// `c = 1`
    Uniform,
}

impl std::str::FromStr for Scaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elementwise_abs_w" | "elementwise" => Ok(Scaling::ElementwiseAbsW),
            "uniform" => Ok(Scaling::Uniform),
            other => Err(Error::invalid("scaling", format!("unknown scaling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessConfig {
    pub rho: f64,
    pub iters: usize,
    /// Rows per draw; equal to the dataset size means every draw uses all rows.
    pub m: usize,
    pub seed: u64,
    pub scaling: Scaling,
}

impl SharpnessConfig {
    /// Defaults `ρ = 1.0`, 20 draws, elementwise scaling.
    pub fn new(m: usize, seed: u64) -> Self {
        Self {
            rho: DEFAULT_RHO,
            iters: DEFAULT_ITERS,
            m,
            seed,
            scaling: Scaling::ElementwiseAbsW,
        }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.iters = iters;
        self
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, num_rows: usize) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::invalid("rho", format!("{} must be > 0", self.rho)));
        }
        if self.iters == 0 {
            return Err(Error::invalid("iters", "must be >= 1"));
        }
        if self.m == 0 || self.m > num_rows {
            return Err(Error::invalid(
                "m",
                format!("{} must lie in [1, {num_rows}]", self.m),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharpnessScope {
    Global,
    Layer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessEstimate {
    pub mean: f64,
    /// Sample standard deviation of the per-draw values over `√iters`.
    pub stderr: f64,
    pub config: SharpnessConfig,
    pub scope: SharpnessScope,
    pub interpolation_alpha: Option<f64>,
}

/// Losses seen by one antithetic draw, all on the same subsample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawRecord {
    pub base: f64,
    pub plus: f64,
    pub minus: f64,
}

impl DrawRecord {
    pub fn value(&self) -> f64 {
        0.5 * (self.plus + self.minus) - self.base
    }
}

/// Where the noise goes and how the perturbed anchor becomes the evaluated point.
struct DrawPlan<'a> {
    anchor: &'a ParameterSet,
    /// Layer indices receiving noise, in model order.
    targets: Vec<usize>,
    to_point: &'a (dyn Fn(&ParameterSet) -> Result<ParameterSet> + Sync),
}

fn perturbed(
    anchor: &ParameterSet,
    targets: &[usize],
    noise: &[f64],
    sign: f64,
) -> ParameterSet {
    let mut out = anchor.clone();
    let mut it = noise.iter();
    for (k, (_, layer)) in out.iter_mut().enumerate() {
        if targets.contains(&k) {
            for v in layer.values_mut() {
                *v += sign * it.next().expect("noise sized to targets");
            }
        }
    }
    out
}

fn run_draws(objective: &dyn Objective, plan: &DrawPlan<'_>, cfg: &SharpnessConfig) -> Result<Vec<DrawRecord>> {
    let n = objective.num_rows();
    cfg.validate(n)?;
    let scales: Vec<f64> = plan
        .targets
        .iter()
        .flat_map(|&k| plan.anchor.layer_at(k).expect("target exists").1.values())
        .map(|&w| match cfg.scaling {
            Scaling::ElementwiseAbsW => cfg.rho * w.abs(),
            Scaling::Uniform => cfg.rho,
        })
        .collect();
    let base_point = (plan.to_point)(plan.anchor)?;
    let full_base = if cfg.m == n {
        Some(objective.loss(&base_point, None)?)
    } else {
        None
    };

    (0..cfg.iters)
        .into_par_iter()
        .map(|draw| {
            let mut rng = rng::substream(cfg.seed, "sharpness-draw", draw as u64);
            let rows = (cfg.m < n).then(|| index::sample(&mut rng, n, cfg.m).into_vec());
            let noise: Vec<f64> = scales
                .iter()
                .map(|s| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    s * g
                })
                .collect();
            let rows = rows.as_deref();
            let base = match full_base {
                Some(b) => b,
                None => objective.loss(&base_point, rows)?,
            };
            let plus = objective.loss(
                &(plan.to_point)(&perturbed(plan.anchor, &plan.targets, &noise, 1.0))?,
                rows,
            )?;
            let minus = objective.loss(
                &(plan.to_point)(&perturbed(plan.anchor, &plan.targets, &noise, -1.0))?,
                rows,
            )?;
            if !(base.is_finite() && plus.is_finite() && minus.is_finite()) {
                return Err(Error::NonFiniteDraw { draw });
            }
            Ok(DrawRecord { base, plus, minus })
        })
        .collect()
}

fn summarize(draws: &[DrawRecord]) -> (f64, f64) {
    let n = draws.len() as f64;
    let mean = draws.iter().map(DrawRecord::value).sum::<f64>() / n;
    if draws.len() < 2 {
        return (mean, 0.0);
    }
    let var = draws
        .iter()
        .map(|d| (d.value() - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn identity(p: &ParameterSet) -> Result<ParameterSet> {
    Ok(p.clone())
}

/// Per-draw losses of the whole-model estimate.
pub fn global_draws(
    objective: &dyn Objective,
    params: &ParameterSet,
    cfg: &SharpnessConfig,
) -> Result<Vec<DrawRecord>> {
    let plan = DrawPlan {
        anchor: params,
        targets: (0..params.num_layers()).collect(),
        to_point: &identity,
    };
    run_draws(objective, &plan, cfg)
}

/// Whole-model adaptive average sharpness of `params` under `objective`.
pub fn estimate_global(
    objective: &dyn Objective,
    params: &ParameterSet,
    cfg: &SharpnessConfig,
) -> Result<SharpnessEstimate> {
    let draws = global_draws(objective, params, cfg)?;
    let (mean, stderr) = summarize(&draws);
    Ok(SharpnessEstimate {
        mean,
        stderr,
        config: cfg.clone(),
        scope: SharpnessScope::Global,
        interpolation_alpha: None,
    })
}

pub fn adaptive_avg_sharpness(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &LabeledBatch,
    cfg: &SharpnessConfig,
) -> Result<SharpnessEstimate> {
    params.validate(spec)?;
    let objective = ModelObjective::new(spec, data)?;
    estimate_global(&objective, params, cfg)
}

/// Per-draw losses of the layer-wise estimate; see [`estimate_layerwise`].
pub fn layerwise_draws(
    objective: &dyn Objective,
    theta0: &ParameterSet,
    theta1: &ParameterSet,
    layer: &str,
    alpha: f64,
    cfg: &SharpnessConfig,
) -> Result<Vec<DrawRecord>> {
    theta0.same_layout(theta1)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", format!("{alpha} is outside [0, 1]")));
    }
    let target = theta1
        .names()
        .position(|n| n == layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    let to_point = |p: &ParameterSet| interpolate_global(theta0, p, alpha);
    let plan = DrawPlan {
        anchor: theta1,
        targets: vec![target],
        to_point: &to_point,
    };
    run_draws(objective, &plan, cfg)
}

/// Perturb only `layer` of `theta1` (scale taken from `theta1`), interpolate
/// globally with `theta0` at `alpha`, and average the loss increase over the
/// unperturbed interpolation on the same rows.
pub fn estimate_layerwise(
    objective: &dyn Objective,
    theta0: &ParameterSet,
    theta1: &ParameterSet,
    layer: &str,
    alpha: f64,
    cfg: &SharpnessConfig,
) -> Result<SharpnessEstimate> {
    let draws = layerwise_draws(objective, theta0, theta1, layer, alpha, cfg)?;
    let (mean, stderr) = summarize(&draws);
    Ok(SharpnessEstimate {
        mean,
        stderr,
        config: cfg.clone(),
        scope: SharpnessScope::Layer(layer.to_string()),
        interpolation_alpha: Some(alpha),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn layerwise_sharpness(
    spec: &ModelSpec,
    theta0: &ParameterSet,
    theta1: &ParameterSet,
    layer: &str,
    alpha: f64,
    data: &LabeledBatch,
    cfg: &SharpnessConfig,
) -> Result<SharpnessEstimate> {
    theta0.validate(spec)?;
    theta1.validate(spec)?;
    let objective = ModelObjective::new(spec, data)?;
    estimate_layerwise(&objective, theta0, theta1, layer, alpha, cfg)
}

/// Finite-difference step per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdStep {
    /// `ε = eps`
    Absolute(f64),
    /// `ε = eps · max(1, |wᵢ|)`
    Relative(f64),
}

impl Default for FdStep {
    fn default() -> Self {
        FdStep::Relative(DEFAULT_FD_RELATIVE_STEP)
    }
}

impl FdStep {
    fn at(&self, w: f64) -> f64 {
        match *self {
            FdStep::Absolute(eps) => eps,
            FdStep::Relative(eps) => eps * w.abs().max(1.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let (FdStep::Absolute(eps) | FdStep::Relative(eps)) = *self;
        if eps > 0.0 && eps.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid("eps", format!("{eps} must be > 0")))
        }
    }
}

/// Central second differences `(L(w+εeᵢ) − 2L(w) + L(w−εeᵢ)) / ε²` on all rows,
/// one per parameter in canonical order.
pub fn hessian_diag_fd(
    objective: &dyn Objective,
    params: &ParameterSet,
    step: FdStep,
    cap: usize,
) -> Result<Vec<f64>> {
    step.validate()?;
    let count = params.param_count();
    if count > cap {
        return Err(Error::FdCapExceeded { count, cap });
    }
    let center = objective.loss(params, None)?;
    let flat = params.to_flat();
    (0..count)
        .into_par_iter()
        .map_init(
            || params.clone(),
            |scratch, i| {
                let w = flat[i];
                let eps = step.at(w);
                let mut eval = |x: f64| -> Result<f64> {
                    *scratch.values_mut().nth(i).expect("index < count") = x;
                    objective.loss(scratch, None)
                };
                let plus = eval(w + eps)?;
                let minus = eval(w - eps)?;
                *scratch.values_mut().nth(i).expect("index < count") = w;
                let h = (plus - 2.0 * center + minus) / (eps * eps);
                if h.is_finite() {
                    Ok(h)
                } else {
                    Err(Error::NonFinite(format!("second difference at parameter {i}")))
                }
            },
        )
        .collect()
}

/// `(ρ²/2) Σᵢ Hᵢᵢ cᵢ²` with `c` chosen by `scaling`.
pub fn taylor_sharpness(hdiag: &[f64], params: &ParameterSet, rho: f64, scaling: Scaling) -> f64 {
    let weighted: f64 = hdiag
        .iter()
        .zip(params.values())
        .map(|(h, w)| match scaling {
            Scaling::ElementwiseAbsW => h * w * w,
            Scaling::Uniform => *h,
        })
        .sum();
    0.5 * rho * rho * weighted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticRow {
    pub rho: f64,
    pub s_mc: f64,
    pub s_mc_stderr: f64,
    pub s_taylor: f64,
    /// `s_mc / s_taylor`, absent when `|s_taylor|` is below the guard.
    pub ratio: Option<f64>,
}

/// Monte-Carlo sharpness against its second-order Taylor value for each radius.
///
/// Every radius reuses `cfg.seed`, so all rows see the same normalized draws
/// and differ only through `ρ`.
pub fn asymptotic_check_objective(
    objective: &dyn Objective,
    params: &ParameterSet,
    rhos: &[f64],
    cfg: &SharpnessConfig,
    step: FdStep,
    cap: usize,
) -> Result<Vec<AsymptoticRow>> {
    if rhos.is_empty() {
        return Err(Error::invalid("rhos", "need at least one radius"));
    }
    let hdiag = hessian_diag_fd(objective, params, step, cap)?;
    rhos.iter()
        .map(|&rho| {
            let cfg = cfg.clone().with_rho(rho);
            let est = estimate_global(objective, params, &cfg)?;
            let s_taylor = taylor_sharpness(&hdiag, params, rho, cfg.scaling);
            let ratio = (s_taylor.abs() >= RATIO_GUARD).then(|| est.mean / s_taylor);
            Ok(AsymptoticRow {
                rho,
                s_mc: est.mean,
                s_mc_stderr: est.stderr,
                s_taylor,
                ratio,
            })
        })
        .collect()
}

pub fn asymptotic_check(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &LabeledBatch,
    rhos: &[f64],
    cfg: &SharpnessConfig,
) -> Result<Vec<AsymptoticRow>> {
    params.validate(spec)?;
    let objective = ModelObjective::new(spec, data)?;
    asymptotic_check_objective(&objective, params, rhos, cfg, FdStep::default(), DEFAULT_FD_CAP)
}

/// Thresholds for calling a sharpness value "nearly zero".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearZeroRule {
    pub tau_abs: f64,
    pub tau_rel: f64,
}

impl Default for NearZeroRule {
    fn default() -> Self {
        Self {
            tau_abs: 1e-4,
            tau_rel: 0.01,
        }
    }
}

impl NearZeroRule {
    /// `|meanᵢ| ≤ max(τ_abs, τ_rel · maxⱼ |meanⱼ|)` for each entry.
    pub fn flags(&self, means: &[f64]) -> Vec<bool> {
        let largest = means.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let threshold = self.tau_abs.max(self.tau_rel * largest);
        means.iter().map(|v| v.abs() <= threshold).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Activation, Layer, LayerSpec};
    use crate::objective::QuadraticSurrogate;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(w: f64, b: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("l", Layer::new(array![[w]], array![b]));
        p
    }

    #[test]
    fn quadratic_closed_form() {
        // w = (1, 2), h = (3, 1), rho = 0.1: exact value 0.035
        let params = single(1.0, 2.0);
        let surrogate = QuadraticSurrogate::new(vec![3.0, 1.0]);
        let cfg = SharpnessConfig::new(1, 42).with_rho(0.1).with_iters(2000);
        let est = estimate_global(&surrogate, &params, &cfg).unwrap();
        assert!(
            (est.mean - 0.035).abs() <= 3.0 * est.stderr,
            "{} ± {}",
            est.mean,
            est.stderr
        );
        assert!(est.stderr > 0.0);
    }

    #[test]
    fn zero_weights_give_zero_sharpness() {
        let spec = ModelSpec::parse(2, "h:3:relu,out:2:identity").unwrap();
        let params = ParameterSet::zeros(&spec);
        let batch = LabeledBatch::new(array![[1.0, 2.0], [0.5, -1.0]], vec![0, 1]).unwrap();
        let cfg = SharpnessConfig::new(2, 1).with_rho(5.0);
        let est = adaptive_avg_sharpness(&spec, &params, &batch, &cfg).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn config_validation() {
        let spec = ModelSpec::parse(2, "out:2:identity").unwrap();
        let params = ParameterSet::zeros(&spec);
        let batch = LabeledBatch::new(array![[1.0, 2.0]], vec![0]).unwrap();
        for cfg in [
            SharpnessConfig::new(2, 0),
            SharpnessConfig::new(0, 0),
            SharpnessConfig::new(1, 0).with_rho(0.0),
            SharpnessConfig::new(1, 0).with_iters(0),
        ] {
            assert!(matches!(
                adaptive_avg_sharpness(&spec, &params, &batch, &cfg),
                Err(Error::InvalidArgument { .. })
            ));
        }
    }

    #[test]
    fn non_finite_draw_reports_index() {
        struct Explodes;
        impl Objective for Explodes {
            fn num_rows(&self) -> usize {
                1
            }
            fn loss(&self, p: &ParameterSet, _: Option<&[usize]>) -> Result<f64> {
                let w = *p.values().next().unwrap();
                Ok(if w > 1.0 { f64::INFINITY } else { 0.0 })
            }
        }
        let cfg = SharpnessConfig::new(1, 0).with_iters(50);
        let err = estimate_global(&Explodes, &single(1.0, 0.0), &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteDraw { .. }));
    }

    fn linear_model(seed: u64) -> (ModelSpec, ParameterSet, LabeledBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::parse(3, "out:3:identity").unwrap();
        let mut params = ParameterSet::zeros(&spec);
        for v in params.values_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let x = Array2::from_shape_fn((40, 3), |_| rng.random_range(-2.0..2.0));
        let labels = (0..40).map(|_| rng.random_range(0..3)).collect();
        (spec, params, LabeledBatch::new(x, labels).unwrap())
    }

    #[test]
    fn convex_model_is_not_negative() {
        let (spec, params, batch) = linear_model(8);
        let cfg = SharpnessConfig::new(20, 3).with_rho(0.5).with_iters(200);
        let est = adaptive_avg_sharpness(&spec, &params, &batch, &cfg).unwrap();
        assert!(est.mean >= -3.0 * est.stderr);
    }

    #[test]
    fn seed_determinism() {
        let (spec, params, batch) = linear_model(2);
        let cfg = SharpnessConfig::new(10, 77).with_iters(64);
        let a = adaptive_avg_sharpness(&spec, &params, &batch, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| adaptive_avg_sharpness(&spec, &params, &batch, &cfg).unwrap());
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
        let c = adaptive_avg_sharpness(&spec, &params, &batch, &cfg.clone().with_seed(78)).unwrap();
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn antithetic_pairs_cancel_linear_loss() {
        struct Linear(Vec<f64>);
        impl Objective for Linear {
            fn num_rows(&self) -> usize {
                1
            }
            fn loss(&self, p: &ParameterSet, _: Option<&[usize]>) -> Result<f64> {
                Ok(p.values().zip(&self.0).map(|(w, g)| w * g).sum())
            }
        }
        let spec = ModelSpec::parse(3, "h:4:relu,out:2:identity").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParameterSet::zeros(&spec);
        for v in params.values_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let grads = (0..params.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let obj = Linear(grads);
        let draws = global_draws(&obj, &params, &SharpnessConfig::new(1, 5).with_iters(100)).unwrap();
        for d in draws {
            assert!(d.value().abs() < 1e-12);
            assert!((d.plus - d.base).abs() > 1e-6);
        }
    }

    #[test]
    fn rho_squared_scaling_on_quadratics() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = ModelSpec::parse(2, "h:3:relu,out:2:identity").unwrap();
        let mut params = ParameterSet::zeros(&spec);
        for v in params.values_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let h: Vec<f64> = (0..params.param_count()).map(|_| rng.random_range(0.1..3.0)).collect();
        let obj = QuadraticSurrogate::new(h);
        let cfg = SharpnessConfig::new(1, 9).with_iters(500);
        let small = estimate_global(&obj, &params, &cfg.clone().with_rho(0.05)).unwrap();
        let large = estimate_global(&obj, &params, &cfg.clone().with_rho(0.1)).unwrap();
        // same seed, exact quadratic: the ratio is 4 up to rounding
        assert!((large.mean / small.mean - 4.0).abs() < 1e-9);
    }

    #[test]
    fn layerwise_at_alpha_one_is_zero() {
        let (spec, t0, batch) = linear_model(3);
        let (_, t1, _) = linear_model(4);
        let cfg = SharpnessConfig::new(40, 1).with_iters(30);
        let est = layerwise_sharpness(&spec, &t0, &t1, "out", 1.0, &batch, &cfg).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.interpolation_alpha, Some(1.0));
    }

    #[test]
    fn layerwise_reduces_to_global_on_single_layer() {
        let (spec, t0, batch) = linear_model(5);
        let (_, t1, _) = linear_model(6);
        let cfg = SharpnessConfig::new(25, 12).with_iters(40);
        let lw = layerwise_sharpness(&spec, &t0, &t1, "out", 0.0, &batch, &cfg).unwrap();
        let gl = adaptive_avg_sharpness(&spec, &t1, &batch, &cfg).unwrap();
        assert!((lw.mean - gl.mean).abs() < 1e-12);
        assert!((lw.stderr - gl.stderr).abs() < 1e-12);
    }

    #[test]
    fn layerwise_quadratic_closed_form() {
        // two layers, perturb layer "b" at alpha = 0.5
        let spec = ModelSpec::new(
            2,
            vec![
                LayerSpec::new("a", 2, Activation::Relu),
                LayerSpec::new("b", 2, Activation::Identity),
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut t0 = ParameterSet::zeros(&spec);
        let mut t1 = ParameterSet::zeros(&spec);
        for v in t0.values_mut().chain(t1.values_mut()) {
            *v = rng.random_range(-2.0..2.0);
        }
        let h: Vec<f64> = (0..t0.param_count()).map(|_| rng.random_range(0.5..2.0)).collect();
        let obj = QuadraticSurrogate::new(h.clone());
        let (rho, alpha) = (0.2, 0.5);
        let cfg = SharpnessConfig::new(1, 4).with_rho(rho).with_iters(4000);
        let est = estimate_layerwise(&obj, &t0, &t1, "b", alpha, &cfg).unwrap();
        let offset = t0.get("a").unwrap().len();
        let exact: f64 = t1
            .get("b")
            .unwrap()
            .values()
            .zip(&h[offset..])
            .map(|(w, hi)| hi * w * w)
            .sum::<f64>()
            * (1.0 - alpha) * (1.0 - alpha)
            * 0.5
            * rho
            * rho;
        assert!((est.mean - exact).abs() <= 3.0 * est.stderr, "{} vs {exact} ± {}", est.mean, est.stderr);
        assert!(matches!(
            estimate_layerwise(&obj, &t0, &t1, "zz", alpha, &cfg),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn fd_diag_of_quadratic_is_exact() {
        // L = w1² + 2 w2²
        let obj = QuadraticSurrogate::new(vec![2.0, 4.0]);
        let params = single(0.7, -1.3);
        let h = hessian_diag_fd(&obj, &params, FdStep::default(), DEFAULT_FD_CAP).unwrap();
        assert!((h[0] - 2.0).abs() < 1e-6 && (h[1] - 4.0).abs() < 1e-6, "{h:?}");
        let h = hessian_diag_fd(&obj, &params, FdStep::Absolute(0.5), DEFAULT_FD_CAP).unwrap();
        assert!((h[0] - 2.0).abs() < 1e-12 && (h[1] - 4.0).abs() < 1e-12, "{h:?}");
    }

    #[test]
    fn fd_guards() {
        let obj = QuadraticSurrogate::new(vec![2.0, 4.0]);
        let params = single(0.7, -1.3);
        assert!(matches!(
            hessian_diag_fd(&obj, &params, FdStep::default(), 1),
            Err(Error::FdCapExceeded { count: 2, cap: 1 })
        ));
        assert!(hessian_diag_fd(&obj, &params, FdStep::Absolute(0.0), 10).is_err());
    }

    /// Hessian diagonal of mean softmax cross-entropy for a linear model:
    /// ∂²L/∂W_kj² = mean_i p_ik (1 − p_ik) x_ij², ∂²L/∂b_k² = mean_i p_ik (1 − p_ik).
    fn softmax_regression_hdiag(params: &ParameterSet, batch: &LabeledBatch) -> Vec<f64> {
        let layer = params.get("out").unwrap();
        let x = batch.features();
        let (k, d) = layer.weight.dim();
        let n = batch.len() as f64;
        let mut hw = Array2::<f64>::zeros((k, d));
        let mut hb = vec![0.0; k];
        for row in x.outer_iter() {
            let z: Vec<f64> = (0..k)
                .map(|c| layer.bias[c] + (0..d).map(|j| layer.weight[[c, j]] * row[j]).sum::<f64>())
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let p = e[c] / s;
                let q = p * (1.0 - p) / n;
                hb[c] += q;
                for j in 0..d {
                    hw[[c, j]] += q * row[j] * row[j];
                }
            }
        }
        hw.iter().copied().chain(hb).collect()
    }

    #[test]
    fn fd_diag_matches_softmax_regression() {
        let (spec, params, batch) = linear_model(13);
        let obj = ModelObjective::new(&spec, &batch).unwrap();
        let fd = hessian_diag_fd(&obj, &params, FdStep::default(), DEFAULT_FD_CAP).unwrap();
        let exact = softmax_regression_hdiag(&params, &batch);
        for (a, b) in fd.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn fd_converges_at_second_order() {
        let (spec, params, batch) = linear_model(14);
        let obj = ModelObjective::new(&spec, &batch).unwrap();
        let exact = softmax_regression_hdiag(&params, &batch);
        let err = |eps: f64| {
            let fd = hessian_diag_fd(&obj, &params, FdStep::Absolute(eps), DEFAULT_FD_CAP).unwrap();
            fd.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (coarse, fine) = (err(0.2), err(0.1));
        // halving ε cuts the O(ε²) error by about 4
        assert!(fine < coarse / 3.0, "{coarse} -> {fine}");
        let fd1 = hessian_diag_fd(&obj, &params, FdStep::Absolute(0.02), DEFAULT_FD_CAP).unwrap();
        let fd2 = hessian_diag_fd(&obj, &params, FdStep::Absolute(0.01), DEFAULT_FD_CAP).unwrap();
        for (a, b) in fd1.iter().zip(&fd2) {
            assert!((a - b).abs() < 10.0 * 0.02 * 0.02);
        }
    }

    #[test]
    fn asymptotic_rows_on_quadratic_and_zero_weights() {
        let obj = QuadraticSurrogate::new(vec![3.0, 1.0]);
        let params = single(1.0, 2.0);
        let cfg = SharpnessConfig::new(1, 2).with_iters(2000);
        let rows =
            asymptotic_check_objective(&obj, &params, &[0.5, 0.1, 0.01], &cfg, FdStep::default(), 100).unwrap();
        for row in &rows {
            let r = row.ratio.unwrap();
            assert!((row.s_mc - row.s_taylor).abs() <= 3.0 * row.s_mc_stderr, "{row:?}");
            assert!((r - 1.0).abs() < 0.1);
        }

        let zeros = single(0.0, 0.0);
        let rows =
            asymptotic_check_objective(&obj, &zeros, &[0.1], &cfg, FdStep::default(), 100).unwrap();
        assert_eq!(rows[0].s_mc, 0.0);
        assert_eq!(rows[0].s_taylor, 0.0);
        assert_eq!(rows[0].ratio, None);
    }

    #[test]
    fn near_zero_rule() {
        let rule = NearZeroRule::default();
        assert_eq!(rule.flags(&[1.0, 0.009, 0.02, -0.005]), vec![false, true, false, true]);
        assert_eq!(rule.flags(&[5e-5, 2e-5]), vec![true, true]);
        assert_eq!(rule.flags(&[0.0, 0.0]), vec![true, true]);
    }
}
