use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    batches_per_epoch, check_finite, flat_grad, shuffled_batches, Adam, PriorSpec, TrainConfig,
    TrainTrace, Trained,
};
use crate::autodiff::{sigmoid, softplus, Graph, ParamLayout, ParamVector, Tensor};
use crate::data::SampleSource;
use crate::error::{Error, Result};
use crate::models::{param_nodes, Architecture, Dropout};
use crate::rng::{standard_normal_vec, SeedStreams, Stream, StreamRng};

/// Fully factorised Gaussian `q(w) = N(mu, softplus(rho)^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSurrogate {
    pub layout: Arc<ParamLayout>,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl GaussianSurrogate {
    pub fn new(layout: Arc<ParamLayout>, mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        let d = layout.dim();
        if mu.len() != d || rho.len() != d {
            return Err(Error::Shape {
                op: "gaussian_surrogate",
                lhs: vec![mu.len(), rho.len()],
                rhs: vec![d, d],
            });
        }
        Ok(GaussianSurrogate { layout, mu, rho })
    }

    pub fn constant(layout: Arc<ParamLayout>, mu: f64, rho: f64) -> Self {
        let d = layout.dim();
        GaussianSurrogate {
            layout,
            mu: vec![mu; d],
            rho: vec![rho; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    /// `mu + softplus(rho) * eps`.
    pub fn weights_for(&self, eps: &[f64]) -> ParamVector {
        let w = self
            .mu
            .iter()
            .zip(&self.rho)
            .zip(eps)
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect();
        ParamVector::new(Arc::clone(&self.layout), w).expect("surrogate matches its layout")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let eps = standard_normal_vec(rng, self.dim());
        self.weights_for(&eps)
    }

    /// `log q(w)` summed over dimensions.
    pub fn log_density(&self, w: &[f64]) -> f64 {
        let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
        self.mu
            .iter()
            .zip(&self.rho)
            .zip(w)
            .map(|((m, r), x)| {
                let s = softplus(*r);
                c - s.ln() - 0.5 * ((x - m) / s).powi(2)
            })
            .sum()
    }
}

/// Relative weights of the two ELBO terms for one minibatch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboWeights {
    /// Multiplier of `log q - log p`.
    pub complexity: f64,
    /// Multiplier of the batch NLL.
    pub likelihood: f64,
}

impl Default for ElboWeights {
    fn default() -> Self {
        ElboWeights {
            complexity: 1.0,
            likelihood: 1.0,
        }
    }
}

/// Monte Carlo ELBO estimate and its reparameterised gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboTerms {
    /// Weighted objective being minimised.
    pub loss: f64,
    /// Unweighted mean of `log q(w_i) - log p(w_i)`.
    pub complexity: f64,
    /// Unweighted mean batch NLL.
    pub nll: f64,
    pub grad_mu: Vec<f64>,
    pub grad_rho: Vec<f64>,
}

struct SampleTerms {
    complexity: f64,
    nll: f64,
    grad_mu: Vec<f64>,
    grad_rho: Vec<f64>,
}

pub(super) fn nll_and_grad<A: Architecture>(
    arch: &A,
    w: &ParamVector,
    x: &Tensor,
    y: &[f64],
    delta: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let nodes = param_nodes(&mut g, w, true);
    let input = g.constant(x.clone());
    let target = g.constant(Tensor::vector(y.to_vec()));
    let pred = arch.build::<StreamRng>(&mut g, &nodes, input, None::<&mut Dropout<'_, StreamRng>>)?;
    let loss = g.huber(pred, target, delta)?;
    let v = g.forward(loss)?.item();
    g.backward(loss)?;
    Ok((v, flat_grad(&g, &nodes, w.len())))
}

#[allow(clippy::too_many_arguments)]
fn sample_terms<A: Architecture>(
    arch: &A,
    q: &GaussianSurrogate,
    prior: &PriorSpec,
    x: &Tensor,
    y: &[f64],
    eps: &[f64],
    weights: ElboWeights,
    delta: f64,
) -> Result<SampleTerms> {
    let w = q.weights_for(eps);
    let (nll, g_net) = if weights.likelihood != 0.0 {
        nll_and_grad(arch, &w, x, y, delta)?
    } else {
        (0.0, vec![0.0; q.dim()])
    };
    // log q(mu + s*eps) = sum(-0.5 ln 2pi - ln s - eps^2/2), so its total derivative
    // is zero in mu and -s'/s in rho. The prior contributes w/s_p^2 through w.
    let complexity = q.log_density(w.values()) - prior.log_density(w.values());
    let inv_var = 1.0 / (prior.std * prior.std);
    let d = q.dim();
    let mut grad_mu = Vec::with_capacity(d);
    let mut grad_rho = Vec::with_capacity(d);
    for k in 0..d {
        let r = q.rho[k];
        let s = softplus(r);
        let ds = sigmoid(r);
        let dw = weights.complexity * w.values()[k] * inv_var + weights.likelihood * g_net[k];
        grad_mu.push(dw);
        grad_rho.push(dw * ds * eps[k] - weights.complexity * ds / s);
    }
    Ok(SampleTerms {
        complexity,
        nll,
        grad_mu,
        grad_rho,
    })
}

/// Evaluate `(1/M) sum_i [c (log q(w_i) - log p(w_i)) + l NLL(w_i)]` with
/// `w_i = mu + softplus(rho) eps_i` for the supplied `eps` draws, and its
/// gradient in `(mu, rho)`. Samples are evaluated in parallel and reduced in order.
#[allow(clippy::too_many_arguments)]
pub fn bbb_elbo<A: Architecture>(
    arch: &A,
    q: &GaussianSurrogate,
    prior: &PriorSpec,
    x: &Tensor,
    y: &[f64],
    eps: &[Vec<f64>],
    weights: ElboWeights,
    delta: f64,
) -> Result<ElboTerms> {
    if eps.is_empty() {
        return Err(Error::Config("bbb_elbo needs at least one Monte Carlo sample".into()));
    }
    if let Some(e) = eps.iter().find(|e| e.len() != q.dim()) {
        return Err(Error::Shape {
            op: "bbb_elbo",
            lhs: vec![e.len()],
            rhs: vec![q.dim()],
        });
    }
    let per_sample: Vec<SampleTerms> = eps
        .par_iter()
        .map(|e| sample_terms(arch, q, prior, x, y, e, weights, delta))
        .collect::<Result<_>>()?;

    let m = eps.len() as f64;
    let d = q.dim();
    let mut out = ElboTerms {
        loss: 0.0,
        complexity: 0.0,
        nll: 0.0,
        grad_mu: vec![0.0; d],
        grad_rho: vec![0.0; d],
    };
    for s in &per_sample {
        out.complexity += s.complexity / m;
        out.nll += s.nll / m;
        for k in 0..d {
            out.grad_mu[k] += s.grad_mu[k] / m;
            out.grad_rho[k] += s.grad_rho[k] / m;
        }
    }
    out.loss = weights.complexity * out.complexity + weights.likelihood * out.nll;
    Ok(out)
}

/// Bayes by Backprop: Adam on `(mu, rho)` with `mu = 0`, `rho = surrogate_rho`
/// at start and the complexity term spread evenly over the batches of an epoch.
pub fn train_bbb<A: Architecture>(
    arch: &A,
    data: &dyn SampleSource,
    cfg: &TrainConfig,
) -> Result<Trained<GaussianSurrogate>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let prior = PriorSpec::new(cfg.prior_std)?;
    let mut q = GaussianSurrogate::constant(Arc::clone(arch.layout()), 0.0, cfg.surrogate_rho);
    let d = q.dim();
    let streams = SeedStreams::new(cfg.seed);
    let mut shuffle = streams.stream(Stream::Shuffle);
    let mut eps_rng = streams.stream(Stream::Epsilon);
    let mut adam_mu = Adam::new(d);
    let mut adam_rho = Adam::new(d);
    let weights = ElboWeights {
        complexity: 1.0 / batches_per_epoch(data.len(), cfg.batch_size) as f64,
        likelihood: 1.0,
    };
    let mut trace = TrainTrace::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut total = 0.0;
        for (b, idx) in shuffled_batches(data.len(), cfg.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let (x, y) = data.gather(&idx);
            let eps: Vec<Vec<f64>> = (0..cfg.mc_samples)
                .map(|_| standard_normal_vec(&mut eps_rng, d))
                .collect();
            let terms = bbb_elbo(arch, &q, &prior, &x, &y, &eps, weights, cfg.huber_delta).map_err(
                |e| match e {
                    Error::NonFinite { op } => Error::Diverged {
                        epoch,
                        batch: b,
                        msg: format!("non-finite value in {op}"),
                    },
                    e => e,
                },
            )?;
            check_finite(terms.loss, epoch, b)?;
            adam_mu.step(&mut q.mu, &terms.grad_mu, lr);
            adam_rho.step(&mut q.rho, &terms.grad_rho, lr);
            if !q.mu.iter().chain(&q.rho).all(|v| v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    msg: "non-finite surrogate parameter after update".into(),
                });
            }
            total += terms.loss;
        }
        trace.record("bbb", epoch, total / data.len() as f64);
    }
    Ok(Trained { result: q, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamRole;
    use crate::models::{ModelKind, ModelSpec, Network};
    use rand::SeedableRng;

    fn layout(d: usize) -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new([("w", vec![d], ParamRole::Bias)]))
    }

    #[test]
    fn softplus_of_initial_rho() {
        assert!((softplus(1.0) - 1.3132617).abs() < 1e-7);
    }

    #[test]
    fn identical_densities_cancel() {
        // q = p = N(0, 1), w = 0
        let rho1 = (1f64.exp() - 1.0).ln();
        let q = GaussianSurrogate::constant(layout(1), 0.0, rho1);
        let p = PriorSpec::new(1.0).unwrap();
        let w = q.weights_for(&[0.0]);
        assert!((q.log_density(w.values()) - p.log_density(w.values())).abs() < 1e-12);
    }

    #[test]
    fn complexity_term_vanishes_in_expectation_when_q_equals_p() {
        let prior = PriorSpec::new(0.1).unwrap();
        let rho = (0.1f64.exp_m1()).ln();
        let q = GaussianSurrogate::constant(layout(4), 0.0, rho);
        let mut rng = StreamRng::seed_from_u64(3);
        let draws: Vec<f64> = (0..1000)
            .map(|_| {
                let w = q.sample(&mut rng);
                q.log_density(w.values()) - prior.log_density(w.values())
            })
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 3.0 * (var / n).sqrt() + 1e-12, "mean {mean}");
    }

    fn toy_batch() -> (Network, Tensor, Vec<f64>) {
        let net = Network::new(ModelSpec::new(ModelKind::Dense3, 1, 2)).unwrap();
        let x = Tensor::new(vec![3, 1, 2], vec![0.1, -0.4, 0.7, 0.2, -0.9, 0.5]).unwrap();
        (net, x, vec![1.0, -0.5, 0.3])
    }

    #[test]
    fn likelihood_weight_is_linear() {
        let (net, x, y) = toy_batch();
        let mut rng = StreamRng::seed_from_u64(5);
        let q = GaussianSurrogate::constant(Arc::clone(net.layout()), 0.0, -3.0);
        let eps = vec![standard_normal_vec(&mut rng, q.dim())];
        let prior = PriorSpec::new(0.1).unwrap();
        let one = ElboWeights {
            complexity: 0.0,
            likelihood: 1.0,
        };
        let two = ElboWeights {
            complexity: 0.0,
            likelihood: 2.0,
        };
        let a = bbb_elbo(&net, &q, &prior, &x, &y, &eps, one, 100.0).unwrap();
        let b = bbb_elbo(&net, &q, &prior, &x, &y, &eps, two, 100.0).unwrap();
        assert_eq!(b.loss, 2.0 * a.loss);
    }

    #[test]
    fn kl_only_descent_reaches_prior() {
        let l = layout(2);
        let mut q = GaussianSurrogate::constant(Arc::clone(&l), 0.0, 1.0);
        q.mu = vec![0.8, -0.5];
        let prior = PriorSpec::new(0.1).unwrap();
        let net = Network::new(ModelSpec::new(ModelKind::Dense3, 1, 1)).unwrap();
        let x = Tensor::zeros(&[1, 1, 1]);
        let kl_only = ElboWeights {
            complexity: 1.0,
            likelihood: 0.0,
        };
        let mut rng = StreamRng::seed_from_u64(11);
        let mut am = Adam::new(2);
        let mut ar = Adam::new(2);
        for step in 0..6000 {
            let eps: Vec<Vec<f64>> = (0..10).map(|_| standard_normal_vec(&mut rng, 2)).collect();
            let t = bbb_elbo(&net, &q, &prior, &x, &[0.0], &eps, kl_only, 1.0).unwrap();
            let lr = if step < 4000 { 0.01 } else { 0.001 };
            am.step(&mut q.mu, &t.grad_mu, lr);
            ar.step(&mut q.rho, &t.grad_rho, lr);
        }
        for (m, s) in q.mu.iter().zip(q.std()) {
            assert!(m.abs() < 0.02, "mu {m}");
            assert!((s - 0.1).abs() < 0.02, "std {s}");
        }
    }
}
