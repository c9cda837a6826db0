//! Loss functions over a [`ParameterSet`].
//!
//! Sweeps, sharpness and the finite-difference oracle only need "loss of these
//! parameters on these rows". [`ModelObjective`] answers it with the dense
//! engine; [`QuadraticSurrogate`] answers it in closed form so that Gaussian
//! expectations can be checked exactly.

use crate::engine::{self, LabeledBatch, ModelSpec, ParameterSet};
use crate::error::{Error, Result};

pub trait Objective: Sync {
    /// Number of data rows the objective averages over.
    fn num_rows(&self) -> usize;

    /// Mean loss over `rows`, or over every row when `rows` is `None`.
    fn loss(&self, params: &ParameterSet, rows: Option<&[usize]>) -> Result<f64>;

    /// Accuracy on every row, when the objective has a notion of it.
    fn accuracy(&self, _params: &ParameterSet) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Cross-entropy of a dense model on a fixed batch.
#[derive(Debug, Clone)]
pub struct ModelObjective<'a> {
    spec: &'a ModelSpec,
    batch: &'a LabeledBatch,
}

impl<'a> ModelObjective<'a> {
    pub fn new(spec: &'a ModelSpec, batch: &'a LabeledBatch) -> Result<Self> {
        batch.check_for(spec)?;
        Ok(Self { spec, batch })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn batch(&self) -> &LabeledBatch {
        self.batch
    }

    /// Loss and accuracy on the full batch from one forward pass.
    pub fn evaluate(&self, params: &ParameterSet) -> Result<(f64, f64)> {
        let logits = engine::forward(self.spec, params, self.batch)?;
        Ok((
            engine::loss(&logits, self.batch.labels())?,
            engine::accuracy(&logits, self.batch.labels())?,
        ))
    }
}

impl Objective for ModelObjective<'_> {
    fn num_rows(&self) -> usize {
        self.batch.len()
    }

    fn loss(&self, params: &ParameterSet, rows: Option<&[usize]>) -> Result<f64> {
        match rows {
            None => {
                let logits = engine::forward(self.spec, params, self.batch)?;
                engine::loss(&logits, self.batch.labels())
            }
            Some(rows) => {
                let sub = self.batch.select(rows)?;
                let logits = engine::forward(self.spec, params, &sub)?;
                engine::loss(&logits, sub.labels())
            }
        }
    }

    fn accuracy(&self, params: &ParameterSet) -> Result<Option<f64>> {
        Ok(Some(self.evaluate(params)?.1))
    }
}

/// `L(w) = ½ Σᵢ hᵢ wᵢ²` over the canonical parameter order, independent of data.
#[derive(Debug, Clone)]
pub struct QuadraticSurrogate {
    curvature: Vec<f64>,
}

impl QuadraticSurrogate {
    pub fn new(curvature: Vec<f64>) -> Self {
        Self { curvature }
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }
}

impl Objective for QuadraticSurrogate {
    fn num_rows(&self) -> usize {
        1
    }

    fn loss(&self, params: &ParameterSet, _rows: Option<&[usize]>) -> Result<f64> {
        if params.param_count() != self.curvature.len() {
            return Err(Error::invalid(
                "params",
                format!(
                    "surrogate has {} coefficients, parameter set has {} values",
                    self.curvature.len(),
                    params.param_count()
                ),
            ));
        }
        Ok(params
            .values()
            .zip(&self.curvature)
            .map(|(w, h)| 0.5 * h * w * w)
            .sum())
    }
}
