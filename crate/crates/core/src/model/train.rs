use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bundle::{TrainingMeta, WeightBundle};
use super::net::Model;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seed::{self, derive_seed};
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Images `[N, C, H, W]` in `[0, 1]` with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        images.dims4("labeled images")?;
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "labeled images",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(self.images.narrow_batch(0, n)?, self.labels[..n].to_vec())
    }
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 5,
            batch: 32,
            seed: 0,
            momentum: default_momentum(),
        }
    }
}

/// Minibatch SGD with momentum on mean cross-entropy. Updates `model` in
/// place and returns the resulting bundle.
pub fn train(
    model: &mut Model,
    data: &LabeledImages,
    val: Option<&LabeledImages>,
    hp: &TrainConfig,
) -> Result<WeightBundle> {
    let classes = model
        .num_classes()
        .ok_or_else(|| Error::invalid("cannot train a model without num_classes"))?;
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    if hp.batch == 0 || data.is_empty() {
        return Err(Error::invalid("training needs a positive batch size and a non-empty dataset"));
    }
    if !(hp.lr > 0.0 && hp.lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", hp.lr)));
    }

    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut loss_curve = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng(derive_seed(hp.seed, SHUFFLE_STREAM, epoch as u64)));
        let mut total = 0.0;
        for (batch_idx, idx) in order.chunks(hp.batch).enumerate() {
            let x = data.images.select_batch(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let params = model.bind(&mut g, true);
            let xv = g.constant(x);
            let logits = model.forward_graph(&mut g, &params, xv)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: lv,
                });
            }
            total += lv * idx.len() as f64;
            let grads = g.backward(loss)?;
            let mut updated = Vec::with_capacity(params.len());
            for ((p, (_, cur)), vel) in params.iter().zip(model.params()).zip(velocity.iter_mut()) {
                let gr = grads.wrt(*p)?.data();
                let mut next = cur.data().to_vec();
                for i in 0..next.len() {
                    vel[i] = hp.momentum * vel[i] + gr[i];
                    next[i] -= hp.lr * vel[i];
                }
                updated.push(Tensor::new(cur.shape().to_vec(), next)?);
            }
            model.set_params(updated);
        }
        loss_curve.push(total / data.len() as f64);
    }

    let train_accuracy = Some(model.accuracy(&data.images, &data.labels)?);
    let val_accuracy = val.map(|v| model.accuracy(&v.images, &v.labels)).transpose()?;
    Ok(model.to_bundle(TrainingMeta {
        seed: hp.seed,
        epochs: hp.epochs,
        train_accuracy,
        val_accuracy,
        loss_curve,
    }))
}
