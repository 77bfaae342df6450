//! Backpropagation, Bayes by Backprop and Stein variational gradient descent.
//!
//! All three minimise the same summed Huber negative log-likelihood over
//! shuffled minibatches with Adam and a step learning-rate decay.

mod adam;
mod backprop;
mod bbb;
mod svgd;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use backprop::train_backprop;
pub use bbb::{bbb_elbo, train_bbb, ElboTerms, ElboWeights, GaussianSurrogate};
pub use svgd::{
    median_bandwidth, rbf_kernel, svgd_direction, svgd_step, train_svgd, ParticleSet, RbfKernel,
};

use crate::autodiff::{Graph, ParamVector, Var};
use crate::error::{Error, Result};

/// Trainer hyperparameters. Defaults reproduce the reference protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// First (0-based) epoch trained with the decayed learning rate.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub huber_delta: f64,
    /// Monte Carlo samples per Bayes-by-Backprop step.
    pub mc_samples: usize,
    /// SVGD particle count.
    pub particles: usize,
    /// Per-dimension standard deviation of the zero-mean Gaussian prior.
    pub prior_std: f64,
    /// Drop probability of the backprop trainer.
    pub dropout: f64,
    /// Initial `rho` of the Bayes-by-Backprop surrogate (std = softplus(rho)).
    pub surrogate_rho: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 512,
            learning_rate: 0.01,
            decay_epoch: 40,
            decay_factor: 0.1,
            huber_delta: 100.0,
            mc_samples: 10,
            particles: 10,
            prior_std: 0.1,
            dropout: 0.2,
            surrogate_rho: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("mc_samples", self.mc_samples as f64),
            ("particles", self.particles as f64),
            ("huber_delta", self.huber_delta),
            ("prior_std", self.prior_std),
            ("decay_factor", self.decay_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.decay_epoch > self.epochs {
            return Err(Error::Config(format!(
                "decay_epoch {} exceeds epochs {}",
                self.decay_epoch, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !self.surrogate_rho.is_finite() {
            return Err(Error::Config("surrogate_rho must be finite".into()));
        }
        Ok(())
    }

    /// Learning rate in force during 0-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }
}

/// Isotropic zero-mean Gaussian prior over all weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub std: f64,
}

impl PriorSpec {
    pub fn new(std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::Config(format!("prior std must be > 0, got {std}")));
        }
        Ok(PriorSpec { std })
    }

    pub fn log_density(&self, w: &[f64]) -> f64 {
        let c = -0.5 * (2.0 * std::f64::consts::PI).ln() - self.std.ln();
        w.iter()
            .map(|x| c - 0.5 * (x / self.std).powi(2))
            .sum()
    }

    /// Closed-form `d/dw log p(w) = -w / std^2`.
    pub fn grad_log_density(&self, w: &[f64]) -> Vec<f64> {
        let inv_var = 1.0 / (self.std * self.std);
        w.iter().map(|x| -x * inv_var).collect()
    }
}

/// Summed Huber penalty of `predictions - targets`, i.e. the negative
/// log-likelihood of a batch up to an additive constant.
pub fn huber_nll(predictions: &[f64], targets: &[f64], delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("huber delta must be > 0, got {delta}")));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape {
            op: "huber_nll",
            lhs: vec![predictions.len()],
            rhs: vec![targets.len()],
        });
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| crate::autodiff::huber(p - t, delta))
        .sum())
}

/// A fresh random partition of `0..n` into batches of `batch_size`; the last
/// batch keeps the remainder.
pub fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Per-epoch training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean per-sample objective over each epoch.
    pub epoch_loss: Vec<f64>,
}

impl TrainTrace {
    fn record(&mut self, trainer: &str, epoch: usize, loss: f64) {
        log::info!("{trainer} epoch {:>3}: loss {loss:.6}", epoch + 1);
        self.epoch_loss.push(loss);
    }
}

#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub result: T,
    pub trace: TrainTrace,
}

pub(crate) fn flat_grad(g: &Graph, nodes: &[Var], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for &v in nodes {
        match g.grad(v) {
            Some(t) => out.extend_from_slice(t.data()),
            None => out.extend(std::iter::repeat_n(0.0, g.shape(v).iter().product())),
        }
    }
    out
}

pub(crate) fn check_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            batch,
            msg: format!("loss is {loss}"),
        })
    }
}

pub(crate) fn check_params(p: &ParamVector, epoch: usize, batch: usize) -> Result<()> {
    if p.values().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            batch,
            msg: "non-finite parameter after update".into(),
        })
    }
}
