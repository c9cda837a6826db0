//! Linear paths between two parameter sets.
//!
//! The path is `α·theta0 + (1 − α)·theta1`: α = 1 is `theta0` (zero-shot),
//! α = 0 is `theta1` (fine-tuned). Layer-wise paths hold every layer at
//! `theta0` except the target layer.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{LabeledBatch, ModelSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::objective::{ModelObjective, Objective};

pub const DEFAULT_GRID_POINTS: usize = 21;
pub const DENSE_GRID_POINTS: usize = 1001;

/// Strictly increasing α values in [0, 1] including both endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AlphaGrid {
    values: Vec<f64>,
}

impl TryFrom<Vec<f64>> for AlphaGrid {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<AlphaGrid> for Vec<f64> {
    fn from(grid: AlphaGrid) -> Self {
        grid.values
    }
}

impl AlphaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("alphas", "grid needs at least 2 points"));
        }
        if values.first() != Some(&0.0) || values.last() != Some(&1.0) {
            return Err(Error::invalid("alphas", "grid must start at 0 and end at 1"));
        }
        if values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("alphas", "grid must be strictly increasing"));
        }
        Ok(Self { values })
    }

    /// `points` evenly spaced values from 0 to 1.
    pub fn uniform(points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::invalid("alphas", "grid needs at least 2 points"));
        }
        let last = (points - 1) as f64;
        Self::new((0..points).map(|k| k as f64 / last).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Superset of this grid with `factor`× finer spacing in the cells
    /// adjacent to `alpha`.
    pub fn refined_near(&self, alpha: f64, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::invalid("factor", "refinement factor must be >= 2"));
        }
        let idx = self
            .values
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - alpha).abs().total_cmp(&(b.1 - alpha).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        let lo = idx.saturating_sub(1);
        let hi = (idx + 1).min(self.values.len() - 1);
        let mut values = self.values.clone();
        for k in lo..hi {
            let (a, b) = (self.values[k], self.values[k + 1]);
            for j in 1..factor {
                values.push(a + (b - a) * j as f64 / factor as f64);
            }
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Self::new(values)
    }
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self::uniform(DEFAULT_GRID_POINTS).expect("default grid is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Global,
    Layerwise(String),
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepKind::Global => write!(f, "global"),
            SweepKind::Layerwise(name) => write!(f, "layerwise:{name}"),
        }
    }
}

/// Loss and accuracy at every grid point of one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub grid: AlphaGrid,
    pub loss: Vec<f64>,
    pub acc: Vec<f64>,
    pub kind: SweepKind,
    pub dataset_tag: String,
}

impl SweepCurve {
    pub fn new(
        grid: AlphaGrid,
        loss: Vec<f64>,
        acc: Vec<f64>,
        kind: SweepKind,
        dataset_tag: impl Into<String>,
    ) -> Result<Self> {
        if loss.len() != grid.len() || acc.len() != grid.len() {
            return Err(Error::invalid(
                "curve",
                format!(
                    "grid has {} points, loss {} and acc {}",
                    grid.len(),
                    loss.len(),
                    acc.len()
                ),
            ));
        }
        if loss.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::NonFinite("curve losses".into()));
        }
        if acc.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("curve", "accuracy outside [0, 1]"));
        }
        Ok(Self {
            grid,
            loss,
            acc,
            kind,
            dataset_tag: dataset_tag.into(),
        })
    }

    pub fn alphas(&self) -> &[f64] {
        self.grid.values()
    }

    /// Values at α = 1 (the `theta0` end).
    pub fn theta0_end(&self) -> (f64, f64) {
        let k = self.grid.len() - 1;
        (self.loss[k], self.acc[k])
    }

    /// Values at α = 0 (the `theta1` end).
    pub fn theta1_end(&self) -> (f64, f64) {
        (self.loss[0], self.acc[0])
    }

    /// `alpha,loss,acc` with a header row, one line per grid point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,loss,acc\n");
        for ((a, l), c) in self.grid.values().iter().zip(&self.loss).zip(&self.acc) {
            out.push_str(&format!("{a:?},{l:?},{c:?}\n"));
        }
        out
    }

    pub fn from_csv(text: &str, kind: SweepKind, dataset_tag: &str) -> Result<Self> {
        let bad = |detail: String| Error::Csv {
            path: "<curve>".into(),
            detail,
        };
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| bad(e.to_string()))?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if headers != "alpha,loss,acc" {
            return Err(bad(format!("expected header alpha,loss,acc, got {headers}")));
        }
        let (mut alphas, mut loss, mut acc) = (Vec::new(), Vec::new(), Vec::new());
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let parse = |i: usize| -> Result<f64> {
                record
                    .get(i)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| bad(format!("row {}: bad field {i}", line + 1)))
            };
            alphas.push(parse(0)?);
            loss.push(parse(1)?);
            acc.push(parse(2)?);
        }
        Self::new(AlphaGrid::new(alphas)?, loss, acc, kind, dataset_tag)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid("alpha", format!("{alpha} is outside [0, 1]")))
    }
}

/// `α·a + (1 − α)·b`, returning the shared value exactly when `a == b`.
fn mix(alpha: f64, a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else {
        alpha * a + (1.0 - alpha) * b
    }
}

/// `α·theta0 + (1 − α)·theta1` elementwise.
pub fn interpolate_global(theta0: &ParameterSet, theta1: &ParameterSet, alpha: f64) -> Result<ParameterSet> {
    check_alpha(alpha)?;
    theta0.zip_with(theta1, |a, b| mix(alpha, a, b))
}

/// `theta0` everywhere except `layer`, which is interpolated as in
/// [`interpolate_global`].
pub fn interpolate_layerwise(
    theta0: &ParameterSet,
    theta1: &ParameterSet,
    layer: &str,
    alpha: f64,
) -> Result<ParameterSet> {
    check_alpha(alpha)?;
    theta0.same_layout(theta1)?;
    let (Some(a), Some(b)) = (theta0.get(layer), theta1.get(layer)) else {
        return Err(Error::UnknownLayer(layer.to_string()));
    };
    let mut mixed = a.clone();
    for (dst, (&x, &y)) in mixed.values_mut().zip(a.values().zip(b.values())) {
        *dst = mix(alpha, x, y);
    }
    let mut out = theta0.clone();
    *out.get_mut(layer).expect("layer exists") = mixed;
    Ok(out)
}

/// Parameters at `alpha` along the path named by `kind`.
pub fn point_on_path(
    theta0: &ParameterSet,
    theta1: &ParameterSet,
    kind: &SweepKind,
    alpha: f64,
) -> Result<ParameterSet> {
    match kind {
        SweepKind::Global => interpolate_global(theta0, theta1, alpha),
        SweepKind::Layerwise(layer) => interpolate_layerwise(theta0, theta1, layer, alpha),
    }
}

/// Full-data loss of `objective` at every grid point; evaluated in parallel,
/// stored by grid index.
pub fn loss_path(
    objective: &dyn Objective,
    theta0: &ParameterSet,
    theta1: &ParameterSet,
    grid: &AlphaGrid,
    kind: &SweepKind,
) -> Result<Vec<f64>> {
    grid.values()
        .par_iter()
        .map(|&alpha| objective.loss(&point_on_path(theta0, theta1, kind, alpha)?, None))
        .collect()
}

/// Loss and accuracy of the model along one path.
pub fn sweep(
    spec: &ModelSpec,
    theta0: &ParameterSet,
    theta1: &ParameterSet,
    grid: &AlphaGrid,
    batch: &LabeledBatch,
    kind: SweepKind,
    dataset_tag: &str,
) -> Result<SweepCurve> {
    theta0.validate(spec)?;
    theta1.validate(spec)?;
    if let SweepKind::Layerwise(layer) = &kind {
        if spec.layer_index(layer).is_none() {
            return Err(Error::UnknownLayer(layer.clone()));
        }
    }
    let objective = ModelObjective::new(spec, batch)?;
    let points: Vec<(f64, f64)> = grid
        .values()
        .par_iter()
        .map(|&alpha| objective.evaluate(&point_on_path(theta0, theta1, &kind, alpha)?))
        .collect::<Result<_>>()?;
    let (loss, acc) = points.into_iter().unzip();
    SweepCurve::new(grid.clone(), loss, acc, kind, dataset_tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Layer;
    use crate::objective::QuadraticSurrogate;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(seed: u64) -> (ModelSpec, ParameterSet, ParameterSet) {
        let spec = ModelSpec::parse(2, "h:4:relu,out:3:identity").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = ParameterSet::zeros(&spec);
        let mut b = ParameterSet::zeros(&spec);
        for v in a.values_mut().chain(b.values_mut()) {
            *v = rng.random_range(-2.0..2.0);
        }
        (spec, a, b)
    }

    #[test]
    fn grid_validation() {
        assert!(AlphaGrid::new(vec![0.0, 0.5]).is_err());
        assert!(AlphaGrid::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(AlphaGrid::new(vec![1.0]).is_err());
        assert!(AlphaGrid::new(vec![-0.1, 1.0]).is_err());
        let g = AlphaGrid::default();
        assert_eq!(g.len(), 21);
        assert_eq!(g.values()[1], 0.05);
        assert_eq!(*g.values().last().unwrap(), 1.0);
    }

    #[test]
    fn refined_grid_is_superset() {
        let g = AlphaGrid::default();
        let r = g.refined_near(0.4, 10).unwrap();
        assert_eq!(r.len(), 21 + 2 * 9);
        for v in g.values() {
            assert!(r.values().contains(v));
        }
        let edge = g.refined_near(1.0, 10).unwrap();
        assert_eq!(edge.len(), 21 + 9);
    }

    #[test]
    fn endpoints_and_arithmetic() {
        let (_, a, b) = pair(1);
        assert_eq!(interpolate_global(&a, &b, 1.0).unwrap(), a);
        assert_eq!(interpolate_global(&a, &b, 0.0).unwrap(), b);
        assert!(interpolate_global(&a, &b, 1.5).is_err());

        let mut x = ParameterSet::new();
        x.insert("l", Layer::new(array![[2.0]], array![0.0]));
        let mut y = ParameterSet::new();
        y.insert("l", Layer::new(array![[4.0]], array![0.0]));
        let mid = interpolate_global(&x, &y, 0.25).unwrap();
        assert_eq!(mid.get("l").unwrap().weight[[0, 0]], 3.5);
    }

    #[test]
    fn layerwise_construction() {
        let (_, a, b) = pair(2);
        for layer in ["h", "out"] {
            assert_eq!(interpolate_layerwise(&a, &b, layer, 1.0).unwrap(), a);
        }
        let end = interpolate_layerwise(&a, &b, "h", 0.0).unwrap();
        assert_eq!(end.get("h"), b.get("h"));
        assert_eq!(end.get("out"), a.get("out"));

        let mid = interpolate_layerwise(&a, &b, "out", 0.5).unwrap();
        assert_eq!(mid.get("h"), a.get("h"));
        let (la, lb, lm) = (a.get("out").unwrap(), b.get("out").unwrap(), mid.get("out").unwrap());
        for ((x, y), m) in la.values().zip(lb.values()).zip(lm.values()) {
            assert_eq!(*m, 0.5 * x + 0.5 * y);
        }
        assert!(matches!(
            interpolate_layerwise(&a, &b, "nope", 0.5),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn incompatible_sets_rejected() {
        let (_, a, _) = pair(3);
        let other = ModelSpec::parse(2, "h:5:relu,out:3:identity").unwrap();
        let b = ParameterSet::zeros(&other);
        assert!(matches!(interpolate_global(&a, &b, 0.5), Err(Error::Incompatible(_))));
    }

    #[test]
    fn quadratic_surrogate_path_is_closed_form() {
        // loss = w², theta0 = -1, theta1 = +1  =>  L_α = (1 - 2α)²
        let mut t0 = ParameterSet::new();
        t0.insert("w", Layer::new(array![[-1.0]], array![0.0]));
        let mut t1 = ParameterSet::new();
        t1.insert("w", Layer::new(array![[1.0]], array![0.0]));
        let surrogate = QuadraticSurrogate::new(vec![2.0, 0.0]);
        let grid = AlphaGrid::uniform(DENSE_GRID_POINTS).unwrap();
        let path = loss_path(&surrogate, &t0, &t1, &grid, &SweepKind::Global).unwrap();
        for (a, l) in grid.values().iter().zip(&path) {
            assert!((l - (1.0 - 2.0 * a).powi(2)).abs() < 1e-12);
        }
        let (k, min) = path
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .unwrap();
        assert_eq!(grid.values()[k], 0.5);
        assert!(*min < 1e-24);
    }

    #[test]
    fn sweep_endpoints_match_direct_evaluation() {
        let (spec, a, b) = pair(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = ndarray::Array2::from_shape_fn((30, 2), |_| rng.random_range(-2.0..2.0));
        let labels = (0..30).map(|i| i % 3).collect();
        let batch = LabeledBatch::new(x, labels).unwrap();
        let grid = AlphaGrid::default();
        let curve = sweep(&spec, &a, &b, &grid, &batch, SweepKind::Global, "t").unwrap();
        let l0 = crate::engine::evaluate(&spec, &a, &batch).unwrap();
        let l1 = crate::engine::evaluate(&spec, &b, &batch).unwrap();
        assert!((curve.theta0_end().0 - l0.0).abs() < 1e-12);
        assert!((curve.theta1_end().0 - l1.0).abs() < 1e-12);

        let same = sweep(&spec, &a, &a, &grid, &batch, SweepKind::Global, "t").unwrap();
        assert!(same.loss.iter().all(|&l| l == same.loss[0]));
        assert!(same.acc.iter().all(|&c| c == same.acc[0]));

        for layer in ["h", "out"] {
            let c = sweep(&spec, &a, &b, &grid, &batch, SweepKind::Layerwise(layer.into()), "t").unwrap();
            assert!((c.theta0_end().0 - l0.0).abs() < 1e-12);
        }
    }

    #[test]
    fn curve_csv_round_trip() {
        let grid = AlphaGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let curve = SweepCurve::new(grid, vec![0.1, 2.0, 1e-20], vec![0.5, 0.75, 1.0], SweepKind::Global, "x").unwrap();
        let csv = curve.to_csv();
        assert!(csv.starts_with("alpha,loss,acc\n0.0,0.1,0.5\n"));
        let back = SweepCurve::from_csv(&csv, SweepKind::Global, "x").unwrap();
        assert_eq!(back, curve);
    }

    proptest::proptest! {
        #[test]
        fn complementary_alphas_sum_to_endpoints(seed in 0u64..1000, alpha in 0.0f64..=1.0) {
            let (_, a, b) = pair(seed);
            let p = interpolate_global(&a, &b, alpha).unwrap();
            let q = interpolate_global(&a, &b, 1.0 - alpha).unwrap();
            for (((x, y), u), v) in p.values().zip(q.values()).zip(a.values()).zip(b.values()) {
                proptest::prop_assert!((x + y - (u + v)).abs() < 1e-12);
            }
        }
    }
}
