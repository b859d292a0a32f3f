//! Shared mini-batch training loop.
//!
//! Per-sample gradients are computed in parallel and summed in sample order,
//! so a fixed seed gives bit-identical weights whatever the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::optim::Sgd;
use crate::nn::{Grads, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `lr_gamma` every `lr_step_epochs` epochs
    /// (0 disables the schedule).
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    /// Rescale the batch gradient to at most this norm (0 disables).
    pub grad_clip: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_step_epochs: 4,
            lr_gamma: 0.3,
            grad_clip: 2.0,
        }
    }
}

impl Hyper {
    /// Segmenter defaults: fewer, larger images per epoch, so smaller batches
    /// and a later learning-rate step.
    pub fn segmenter() -> Self {
        Self {
            batch_size: 8,
            epochs: 12,
            lr_step_epochs: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {}", self.momentum)));
        }
        if self.lr_gamma.is_nan()
            || self.lr_gamma <= 0.0
            || self.weight_decay < 0.0
            || self.grad_clip.is_nan()
            || self.grad_clip < 0.0
        {
            return Err(Error::InvalidConfig(
                "lr_gamma must be positive, weight_decay and grad_clip non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.lr_step_epochs == 0 {
            return self.learning_rate;
        }
        self.learning_rate * self.lr_gamma.powi((epoch / self.lr_step_epochs) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation accuracy for the classifier, aggregate IoU for the segmenter.
    pub val_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub score_name: String,
    pub records: Vec<EpochRecord>,
    pub hyper: Hyper,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.records[self.best_epoch]
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("epoch,train_loss,val_loss,val_{}\n", self.score_name);
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch,
                sig6(r.train_loss),
                sig6(r.val_loss),
                sig6(r.val_score)
            ));
        }
        out
    }
}

/// Six significant digits, the report precision.
pub fn sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float")
}

/// A model that can produce a loss and gradient for one prepared sample.
pub trait Trainable: Sync {
    type Input: Send;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Loss and gradient for one sample. When `trainable` masks out a
    /// tensor the model may leave its gradient at zero.
    fn loss_and_grad(&self, input: &Self::Input, trainable: &[bool]) -> (f64, Grads);
}

/// Per-sample RNG for augmentation draws, keyed by (seed, epoch, index).
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

pub(crate) struct FitSpec<'a> {
    pub hyper: &'a Hyper,
    pub n_train: usize,
    pub score_name: &'a str,
}

/// Runs the loop: `prepare` builds a training input from a sample index and
/// its RNG, `trainable` gives the per-epoch tensor mask and `evaluate`
/// returns (validation loss, validation score). The parameters of the
/// best-scoring epoch (earliest on ties) are restored at the end.
pub(crate) fn fit<M, P, T, E>(
    model: &mut M,
    spec: FitSpec<'_>,
    prepare: P,
    trainable: T,
    mut evaluate: E,
) -> Result<TrainHistory>
where
    M: Trainable,
    P: Fn(usize, &mut ChaCha8Rng) -> M::Input + Sync,
    T: Fn(usize) -> Vec<bool>,
    E: FnMut(&M) -> (f64, f64),
{
    let hyper = spec.hyper;
    hyper.validate()?;
    if spec.n_train == 0 {
        return Err(Error::Empty("training set"));
    }
    let mut opt = Sgd::new(model.params(), hyper.momentum, hyper.weight_decay);
    let mut records = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut order: Vec<usize> = (0..spec.n_train).collect();

    for epoch in 0..hyper.epochs {
        let mask = trainable(epoch);
        let lr = hyper.learning_rate_at(epoch);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        shuffle_rng.set_stream(u64::MAX - epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let model_ref = &*model;
            let results: Vec<(f64, Grads)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = sample_rng(hyper.seed, epoch, i);
                    let input = prepare(i, &mut rng);
                    model_ref.loss_and_grad(&input, &mask)
                })
                .collect();
            let mut grads = model.params().zero_grads();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                grads.add_assign(g);
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    loss: batch_loss / chunk.len() as f64,
                });
            }
            grads.scale(1.0 / chunk.len() as f64);
            let norm = grads.norm();
            if hyper.grad_clip > 0.0 && norm > hyper.grad_clip {
                grads.scale(hyper.grad_clip / norm);
            }
            opt.step(model.params_mut(), &grads, lr, &mask);
            loss_sum += batch_loss;
        }

        let (val_loss, val_score) = evaluate(model);
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / spec.n_train as f64,
            val_loss,
            val_score,
        });
        if best.as_ref().is_none_or(|(_, s, _)| val_score > *s) {
            best = Some((epoch, val_score, model.params().clone()));
        }
    }

    let (best_epoch, _, params) = best.expect("at least one epoch");
    model
        .params_mut()
        .copy_from(&params)
        .expect("same architecture");
    Ok(TrainHistory {
        score_name: spec.score_name.to_string(),
        records,
        hyper: hyper.clone(),
        best_epoch,
    })
}
