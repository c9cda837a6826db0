//! Dense-network evaluation over named layer parameters.
//!
//! All arithmetic is `f64`. A model is a chain of dense layers, each followed
//! by ReLU or identity; the last layer produces logits and must be identity.
//! Forward, loss and accuracy are pure functions of their inputs.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::InvalidSpec(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, out_dim: usize, activation: Activation) -> Self {
        Self {
            name: name.into(),
            out_dim,
            activation,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawModelSpec {
    input_dim: usize,
    layers: Vec<LayerSpec>,
}

/// Architecture shared by both checkpoints of a pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec")]
pub struct ModelSpec {
    input_dim: usize,
    layers: Vec<LayerSpec>,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = Error;

    fn try_from(raw: RawModelSpec) -> Result<Self> {
        ModelSpec::new(raw.input_dim, raw.layers)
    }
}

impl ModelSpec {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        let Some(last) = layers.last() else {
            return Err(Error::InvalidSpec("model has no layers".into()));
        };
        if last.activation != Activation::Identity {
            return Err(Error::InvalidSpec(format!(
                "last layer `{}` must use identity activation (logits)",
                last.name
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for layer in &layers {
            if layer.name.is_empty() {
                return Err(Error::InvalidSpec("layer names must be nonempty".into()));
            }
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::InvalidSpec(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
            if layer.out_dim == 0 {
                return Err(Error::InvalidSpec(format!(
                    "layer `{}` has zero width",
                    layer.name
                )));
            }
        }
        Ok(Self { input_dim, layers })
    }

    /// Parse `name:width:activation` entries separated by commas.
    pub fn parse(input_dim: usize, layers: &str) -> Result<Self> {
        let layers = layers
            .split(',')
            .map(|entry| {
                let parts: Vec<&str> = entry.trim().split(':').collect();
                if parts.len() != 3 {
                    return Err(Error::InvalidSpec(format!(
                        "expected name:width:activation, got `{entry}`"
                    )));
                }
                let width = parts[1].parse::<usize>().map_err(|_| {
                    Error::InvalidSpec(format!("bad width `{}` in `{entry}`", parts[1]))
                })?;
                Ok(LayerSpec::new(parts[0], width, parts[2].parse()?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(input_dim, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    /// Fan-in of layer `k`.
    pub fn layer_input_dim(&self, k: usize) -> usize {
        if k == 0 {
            self.input_dim
        } else {
            self.layers[k - 1].out_dim
        }
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        (0..self.layers.len())
            .map(|k| self.layers[k].out_dim * (self.layer_input_dim(k) + 1))
            .sum()
    }
}

/// Weights `[out_dim × in_dim]` and bias `[out_dim]` of one dense layer,
/// treated together as the layer's parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        Self { weight, bias }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self::new(Array2::zeros((out_dim, in_dim)), Array1::zeros(out_dim))
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weights row-major, then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    fn zip_with(&self, other: &Layer, f: impl Fn(f64, f64) -> f64 + Copy) -> Layer {
        Layer {
            weight: ndarray::Zip::from(&self.weight)
                .and(&other.weight)
                .map_collect(|&a, &b| f(a, b)),
            bias: ndarray::Zip::from(&self.bias)
                .and(&other.bias)
                .map_collect(|&a, &b| f(a, b)),
        }
    }
}

/// Ordered layer name → parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    layers: IndexMap<String, Layer>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let mut params = Self::new();
        for (k, layer) in spec.layers().iter().enumerate() {
            params.insert(
                layer.name.clone(),
                Layer::zeros(layer.out_dim, spec.layer_input_dim(k)),
            );
        }
        params
    }

    pub fn insert(&mut self, name: impl Into<String>, layer: Layer) {
        self.layers.insert(name.into(), layer);
    }

    pub fn get(&self, name: &str) -> Option<&Layer> {
        self.layers.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.get_mut(name)
    }

    pub fn layer_at(&self, index: usize) -> Option<(&str, &Layer)> {
        self.layers.get_index(index).map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Layer)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Layer)> {
        self.layers.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.values().map(Layer::len).sum()
    }

    /// All parameters in canonical order: layer order, weights row-major, then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.values().flat_map(Layer::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.values_mut().flat_map(Layer::values_mut)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    /// Overwrite every parameter from `flat`, which must have `param_count()` entries.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(
                "flat",
                format!("expected {} values, got {}", self.param_count(), flat.len()),
            ));
        }
        for (dst, src) in self.values_mut().zip(flat) {
            *dst = *src;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Check layer order and shapes against `spec`, and that all values are finite.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        self.check_shapes(spec)?;
        for (name, layer) in self.iter() {
            if !layer.values().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("layer `{name}`")));
            }
        }
        Ok(())
    }

    pub(crate) fn check_shapes(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.layers().len() {
            return Err(Error::ShapeMismatch {
                layer: spec
                    .layers()
                    .get(self.layers.len())
                    .map(|l| l.name.clone())
                    .unwrap_or_else(|| self.layers.keys().last().cloned().unwrap_or_default()),
                detail: format!(
                    "parameter set has {} layers, spec has {}",
                    self.layers.len(),
                    spec.layers().len()
                ),
            });
        }
        for (k, (ls, (name, layer))) in spec.layers().iter().zip(self.layers.iter()).enumerate() {
            if &ls.name != name {
                return Err(Error::ShapeMismatch {
                    layer: ls.name.clone(),
                    detail: format!("found layer `{name}` at position {k}"),
                });
            }
            let expected = (ls.out_dim, spec.layer_input_dim(k));
            if layer.weight.dim() != expected || layer.bias.len() != ls.out_dim {
                return Err(Error::ShapeMismatch {
                    layer: ls.name.clone(),
                    detail: format!(
                        "weight {:?} / bias {} vs expected {:?} / {}",
                        layer.weight.dim(),
                        layer.bias.len(),
                        expected,
                        ls.out_dim
                    ),
                });
            }
        }
        Ok(())
    }

    /// Same names and shapes, layer by layer.
    pub fn same_layout(&self, other: &ParameterSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Incompatible(format!(
                "{} layers vs {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for ((na, a), (nb, b)) in self.layers.iter().zip(other.layers.iter()) {
            if na != nb {
                return Err(Error::Incompatible(format!(
                    "layer `{na}` vs layer `{nb}`"
                )));
            }
            if a.weight.dim() != b.weight.dim() || a.bias.len() != b.bias.len() {
                return Err(Error::Incompatible(format!(
                    "layer `{na}` shapes {:?} vs {:?}",
                    a.weight.dim(),
                    b.weight.dim()
                )));
            }
        }
        Ok(())
    }

    /// Elementwise combination of two sets with identical layout.
    pub fn zip_with(&self, other: &ParameterSet, f: impl Fn(f64, f64) -> f64 + Copy) -> Result<Self> {
        self.same_layout(other)?;
        let layers = self
            .layers
            .iter()
            .zip(other.layers.values())
            .map(|((name, a), b)| (name.clone(), a.zip_with(b, f)))
            .collect();
        Ok(Self { layers })
    }
}

/// Features `[n × input_dim]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if features.nrows() != labels.len() {
            return Err(Error::invalid(
                "labels",
                format!("{} rows but {} labels", features.nrows(), labels.len()),
            ));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("batch features".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows in the given order (duplicates allowed).
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let features = self.features.select(Axis(0), rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Ok(Self { features, labels })
    }

    /// Concatenate batches with equal feature dimensionality.
    pub fn concat(parts: &[&LabeledBatch]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|b| b.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::invalid("batches", e.to_string()))?;
        let labels = parts.iter().flat_map(|b| b.labels.iter().copied()).collect();
        Self::new(features, labels)
    }

    pub(crate) fn check_for(&self, spec: &ModelSpec) -> Result<()> {
        if self.dim() != spec.input_dim() {
            return Err(Error::InputDim {
                expected: spec.input_dim(),
                got: self.dim(),
            });
        }
        check_labels(&self.labels, spec.num_classes())
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= num_classes) {
        Some(row) => Err(Error::LabelOutOfRange {
            row,
            label: labels[row],
            num_classes,
        }),
        None => Ok(()),
    }
}

/// Logits for every row of `batch`.
pub fn forward(spec: &ModelSpec, params: &ParameterSet, batch: &LabeledBatch) -> Result<Array2<f64>> {
    if batch.dim() != spec.input_dim() {
        return Err(Error::InputDim {
            expected: spec.input_dim(),
            got: batch.dim(),
        });
    }
    forward_features(spec, params, batch.features())
}

pub fn forward_features(
    spec: &ModelSpec,
    params: &ParameterSet,
    features: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    params.check_shapes(spec)?;
    if features.ncols() != spec.input_dim() {
        return Err(Error::InputDim {
            expected: spec.input_dim(),
            got: features.ncols(),
        });
    }
    let mut act = features.to_owned();
    for (ls, (_, layer)) in spec.layers().iter().zip(params.iter()) {
        act = dense(act.view(), layer, ls.activation);
    }
    Ok(act)
}

pub(crate) fn dense(input: ArrayView2<'_, f64>, layer: &Layer, activation: Activation) -> Array2<f64> {
    let mut z = input.dot(&layer.weight.t());
    z += &layer.bias;
    if activation == Activation::Relu {
        z.mapv_inplace(|v| v.max(0.0));
    }
    z
}

/// Mean cross-entropy of `logits` against `labels`, via log-sum-exp.
pub fn loss(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::invalid(
            "labels",
            format!("{} logit rows but {} labels", logits.nrows(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_labels(labels, logits.ncols())?;
    let total: f64 = logits
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            // (max - row[y]) >= 0 and ln(sum) >= 0 keep each term nonnegative
            (max - row[y]) + sum.ln()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::invalid(
            "labels",
            format!("{} logit rows but {} labels", logits.nrows(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_labels(labels, logits.ncols())?;
    let correct = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// `(loss, accuracy)` of `params` on `batch`.
pub fn evaluate(spec: &ModelSpec, params: &ParameterSet, batch: &LabeledBatch) -> Result<(f64, f64)> {
    batch.check_for(spec)?;
    let logits = forward(spec, params, batch)?;
    Ok((loss(&logits, batch.labels())?, accuracy(&logits, batch.labels())?))
}
