//! Minibatch gradient descent on cross-entropy.
//!
//! Gradients come from an analytic backward pass through the dense/ReLU
//! chain; tests cross-check it against central finite differences. Training
//! is single-threaded and fully determined by the config seed.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::engine::{self, Activation, LabeledBatch, Layer, ModelSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::rng;

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Gaussian weights with std `scale / √fan_in`, zero bias.
    Random { scale: f64 },
    /// Start from existing parameters (fine-tuning).
    From(ParameterSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init: Init,
    /// Heavy-ball momentum coefficient; 0 is plain SGD.
    pub momentum: f64,
}

impl TrainConfig {
    pub fn new(lr: f64, epochs: usize, batch_size: usize, seed: u64, init: Init) -> Self {
        Self {
            lr,
            epochs,
            batch_size,
            seed,
            init,
            momentum: 0.0,
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr", format!("{} must be >= 0", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Record of the settings a checkpoint was trained with, stored in its meta.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainRecord {
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    momentum: f64,
    init: String,
    final_train_loss: f64,
}

pub fn init_params(spec: &ModelSpec, scale: f64, seed: u64) -> Result<ParameterSet> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::invalid("scale", format!("{scale} must be >= 0")));
    }
    let mut rng = rng::substream(seed, "init", 0);
    let mut params = ParameterSet::zeros(spec);
    for (k, (_, layer)) in params.iter_mut().enumerate() {
        let std = scale / (spec.layer_input_dim(k) as f64).sqrt();
        for w in layer.weight.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *w = std * g;
        }
    }
    Ok(params)
}

/// Mean cross-entropy and its gradient with respect to every parameter.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &ParameterSet,
    batch: &LabeledBatch,
) -> Result<(f64, ParameterSet)> {
    params.check_shapes(spec)?;
    batch.check_for(spec)?;
    let n = batch.len() as f64;

    // forward, keeping each layer's input
    let mut inputs: Vec<Array2<f64>> = Vec::with_capacity(spec.layers().len());
    let mut act = batch.features().to_owned();
    for (ls, (_, layer)) in spec.layers().iter().zip(params.iter()) {
        let next = engine::dense(act.view(), layer, ls.activation);
        inputs.push(act);
        act = next;
    }
    let logits = act;
    let loss = engine::loss(&logits, batch.labels())?;

    // d loss / d logits = (softmax - onehot) / n
    let mut delta = logits;
    for (mut row, &y) in delta.outer_iter_mut().zip(batch.labels()) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        row[y] -= 1.0;
    }
    delta.mapv_inplace(|v| v / n);

    let mut grads: Vec<Layer> = Vec::with_capacity(spec.layers().len());
    for k in (0..spec.layers().len()).rev() {
        let (_, layer) = params.layer_at(k).expect("checked shapes");
        let input = &inputs[k];
        let gw = delta.t().dot(input);
        let gb: Array1<f64> = delta.sum_axis(Axis(0));
        grads.push(Layer::new(gw, gb));
        if k > 0 {
            let mut back = delta.dot(&layer.weight);
            if spec.layers()[k - 1].activation == Activation::Relu {
                // input[k] = relu(z[k-1]); the relu is active where its output is positive
                back.zip_mut_with(input, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = back;
        }
    }
    grads.reverse();
    let mut out = ParameterSet::new();
    for (ls, g) in spec.layers().iter().zip(grads) {
        out.insert(ls.name.clone(), g);
    }
    Ok((loss, out))
}

/// Train on `data` and return the checkpoint with its config recorded in meta.
pub fn train(spec: &ModelSpec, data: &LabeledBatch, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    data.check_for(spec)?;
    let (mut params, init_desc) = match &cfg.init {
        Init::Random { scale } => (init_params(spec, *scale, cfg.seed)?, format!("random(scale={scale})")),
        Init::From(p) => {
            p.validate(spec)?;
            (p.clone(), "from_checkpoint".to_string())
        }
    };
    let mut velocity = ParameterSet::zeros(spec);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::substream(cfg.seed, "shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let mini = data.select(chunk)?;
            let (loss, grad) = loss_and_gradient(spec, &params, &mini)?;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged { epoch, loss });
            }
            for ((p, v), g) in params
                .values_mut()
                .zip(velocity.values_mut())
                .zip(grad.values())
            {
                *v = cfg.momentum * *v + g;
                *p -= cfg.lr * *v;
            }
        }
    }
    let (final_loss, _) = engine::evaluate(spec, &params, data)?;
    if !final_loss.is_finite() || final_loss > DIVERGENCE_LOSS || !params.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            loss: final_loss,
        });
    }
    let record = TrainRecord {
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        momentum: cfg.momentum,
        init: init_desc,
        final_train_loss: final_loss,
    };
    Ok(Checkpoint::new(spec.clone(), params)?
        .with_meta("train", serde_json::to_string(&record).expect("plain struct")))
}
