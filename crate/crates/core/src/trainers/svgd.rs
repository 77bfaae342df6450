use std::sync::Arc;

use rayon::prelude::*;

use super::{check_finite, shuffled_batches, Adam, PriorSpec, TrainConfig, TrainTrace, Trained};
use crate::autodiff::{ParamLayout, ParamVector};
use crate::data::SampleSource;
use crate::error::{Error, Result};
use crate::models::Architecture;
use crate::rng::{standard_normal_vec, SeedStreams, Stream};

/// A non-empty set of parameter vectors sharing one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    particles: Vec<ParamVector>,
}

impl ParticleSet {
    pub fn new(particles: Vec<ParamVector>) -> Result<Self> {
        let Some(first) = particles.first() else {
            return Err(Error::Config("a particle set needs at least one particle".into()));
        };
        if particles.iter().any(|p| p.layout() != first.layout()) {
            return Err(Error::Usage("particles must share one parameter layout".into()));
        }
        Ok(ParticleSet { particles })
    }

    /// `m` independent draws from the prior, one RNG substream per particle.
    pub fn from_prior(layout: &Arc<ParamLayout>, prior: &PriorSpec, m: usize, streams: &SeedStreams) -> Result<Self> {
        let particles = (0..m)
            .map(|i| {
                let mut rng = streams.substream(Stream::Init, i as u32);
                let w = standard_normal_vec(&mut rng, layout.dim())
                    .into_iter()
                    .map(|z| prior.std * z)
                    .collect();
                ParamVector::new(Arc::clone(layout), w)
            })
            .collect::<Result<Vec<_>>>()?;
        ParticleSet::new(particles)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        self.particles[0].layout()
    }

    pub fn particles(&self) -> &[ParamVector] {
        &self.particles
    }

    pub fn into_particles(self) -> Vec<ParamVector> {
        self.particles
    }
}

/// RBF kernel matrix over a particle set. `bandwidth` is `None` for a single
/// particle, where no pairwise distance exists.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfKernel {
    /// `matrix[j][i] = k(w_j, w_i)`.
    pub matrix: Vec<Vec<f64>>,
    pub bandwidth: Option<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `h = med^2 / ln(M + 1)` where `med` is the median pairwise Euclidean
/// distance. `None` for `M = 1`; `1` when all particles coincide.
pub fn median_bandwidth<P: AsRef<[f64]>>(particles: &[P]) -> Option<f64> {
    let m = particles.len();
    if m < 2 {
        return None;
    }
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(sq_dist(particles[i].as_ref(), particles[j].as_ref()).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if med == 0.0 {
        return Some(1.0);
    }
    Some(med * med / ((m + 1) as f64).ln())
}

pub fn rbf_kernel<P: AsRef<[f64]>>(particles: &[P]) -> Result<RbfKernel> {
    let m = particles.len();
    if m == 0 {
        return Err(Error::Config("rbf_kernel needs at least one particle".into()));
    }
    let d = particles[0].as_ref().len();
    if let Some(p) = particles.iter().find(|p| p.as_ref().len() != d) {
        return Err(Error::Shape {
            op: "rbf_kernel",
            lhs: vec![d],
            rhs: vec![p.as_ref().len()],
        });
    }
    let bandwidth = median_bandwidth(particles);
    let h = bandwidth.unwrap_or(1.0);
    let mut matrix = vec![vec![1.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let k = (-sq_dist(particles[i].as_ref(), particles[j].as_ref()) / h).exp();
            matrix[i][j] = k;
            matrix[j][i] = k;
        }
    }
    Ok(RbfKernel { matrix, bandwidth })
}

impl RbfKernel {
    /// `d/dw_j k(w_j, w_i) = -(2/h) (w_j - w_i) k(w_j, w_i)`.
    pub fn grad_first<P: AsRef<[f64]>>(&self, particles: &[P], j: usize, i: usize) -> Vec<f64> {
        let Some(h) = self.bandwidth else {
            return vec![0.0; particles[0].as_ref().len()];
        };
        let k = self.matrix[j][i];
        particles[j]
            .as_ref()
            .iter()
            .zip(particles[i].as_ref())
            .map(|(a, b)| -2.0 / h * (a - b) * k)
            .collect()
    }
}

/// Stein direction `phi(w_i) = (1/M) sum_j [k(w_j, w_i) g_j + d/dw_j k(w_j, w_i)]`
/// for log-posterior gradients `g`. Returns the directions and the kernel used.
pub fn svgd_direction<P: AsRef<[f64]> + Sync, G: AsRef<[f64]> + Sync>(
    particles: &[P],
    grads: &[G],
) -> Result<(Vec<Vec<f64>>, RbfKernel)> {
    let m = particles.len();
    if grads.len() != m {
        return Err(Error::Shape {
            op: "svgd_direction",
            lhs: vec![m],
            rhs: vec![grads.len()],
        });
    }
    let kernel = rbf_kernel(particles)?;
    let d = particles[0].as_ref().len();
    if let Some(g) = grads.iter().find(|g| g.as_ref().len() != d) {
        return Err(Error::Shape {
            op: "svgd_direction",
            lhs: vec![m, d],
            rhs: vec![m, g.as_ref().len()],
        });
    }
    if m == 1 {
        return Ok((vec![grads[0].as_ref().to_vec()], kernel));
    }
    let h = kernel.bandwidth.expect("bandwidth exists for M >= 2");
    let inv_m = 1.0 / m as f64;
    let phi = (0..m)
        .into_par_iter()
        .map(|i| {
            let wi = particles[i].as_ref();
            let mut out = vec![0.0; d];
            for j in 0..m {
                let k = kernel.matrix[j][i];
                let wj = particles[j].as_ref();
                let gj = grads[j].as_ref();
                let c = -2.0 / h * k;
                for t in 0..d {
                    out[t] += k * gj[t] + c * (wj[t] - wi[t]);
                }
            }
            out.iter_mut().for_each(|v| *v *= inv_m);
            out
        })
        .collect();
    Ok((phi, kernel))
}

/// One plain SVGD ascent step `w_i += lr * phi(w_i)`.
pub fn svgd_step<G: AsRef<[f64]> + Sync>(particles: &mut [Vec<f64>], grads: &[G], lr: f64) -> Result<RbfKernel> {
    let (phi, kernel) = svgd_direction(particles, grads)?;
    for (w, p) in particles.iter_mut().zip(&phi) {
        for (a, b) in w.iter_mut().zip(p) {
            *a += lr * b;
        }
    }
    Ok(kernel)
}

/// SVGD over network weights: particles drawn from the prior, the minibatch
/// likelihood gradient rescaled by `N / B`, and Adam (one state per particle)
/// fed with `-phi`.
pub fn train_svgd<A: Architecture>(
    arch: &A,
    data: &dyn SampleSource,
    cfg: &TrainConfig,
) -> Result<Trained<ParticleSet>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let prior = PriorSpec::new(cfg.prior_std)?;
    let streams = SeedStreams::new(cfg.seed);
    let set = ParticleSet::from_prior(arch.layout(), &prior, cfg.particles, &streams)?;
    let mut particles = set.into_particles();
    let mut shuffle = streams.stream(Stream::Shuffle);
    let mut adams: Vec<Adam> = particles.iter().map(|p| Adam::new(p.len())).collect();
    let n = data.len() as f64;
    let mut trace = TrainTrace::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut total = 0.0;
        for (b, idx) in shuffled_batches(data.len(), cfg.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let (x, y) = data.gather(&idx);
            let scale = n / idx.len() as f64;
            let per_particle: Vec<(f64, Vec<f64>)> = particles
                .par_iter()
                .map(|w| {
                    let (nll, g) = super::bbb::nll_and_grad(arch, w, &x, &y, cfg.huber_delta)?;
                    let prior_grad = prior.grad_log_density(w.values());
                    let g = g.iter().zip(prior_grad).map(|(gn, gp)| -scale * gn + gp).collect();
                    Ok((nll, g))
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::Diverged {
                        epoch,
                        batch: b,
                        msg: format!("non-finite value in {op}"),
                    },
                    e => e,
                })?;
            let nll = per_particle.iter().map(|(l, _)| l).sum::<f64>() / particles.len() as f64;
            check_finite(nll, epoch, b)?;
            let grads: Vec<&[f64]> = per_particle.iter().map(|(_, g)| g.as_slice()).collect();
            let values: Vec<&[f64]> = particles.iter().map(ParamVector::values).collect();
            let (phi, _) = svgd_direction(&values, &grads)?;
            for ((w, adam), p) in particles.iter_mut().zip(&mut adams).zip(&phi) {
                let neg: Vec<f64> = p.iter().map(|v| -v).collect();
                adam.step(w.values_mut(), &neg, lr);
                super::check_params(w, epoch, b)?;
            }
            total += nll;
        }
        trace.record("svgd", epoch, total / n);
    }
    Ok(Trained {
        result: ParticleSet::new(particles)?,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn two_particle_example() {
        let p = [vec![0.0, 0.0], vec![2.0, 0.0]];
        let k = rbf_kernel(&p).unwrap();
        let h = k.bandwidth.unwrap();
        assert!((h - 4.0 / 3f64.ln()).abs() < 1e-12);
        assert!((h - 3.6410).abs() < 1e-4);
        assert!((k.matrix[0][1] - 0.3334).abs() < 1e-4);
        assert_eq!(k.matrix[0][0], 1.0);
    }

    #[test]
    fn single_particle_is_gradient_ascent() {
        let p = [vec![0.3, -1.2, 7.0]];
        let g = [vec![1e-3, -4.0, 0.1 + 0.2]];
        let (phi, k) = svgd_direction(&p, &g).unwrap();
        assert_eq!(k.matrix, vec![vec![1.0]]);
        assert_eq!(k.bandwidth, None);
        assert_eq!(phi[0], g[0]);
        assert_eq!(k.grad_first(&p, 0, 0), vec![0.0; 3]);
    }

    #[test]
    fn coincident_particles_have_no_repulsion() {
        let p = [vec![1.0, 2.0], vec![1.0, 2.0]];
        let g = [vec![0.0, 0.0], vec![0.0, 0.0]];
        let (phi, _) = svgd_direction(&p, &g).unwrap();
        assert!(phi.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn brute_force_three_particles() {
        let p = [vec![0.0, 1.0], vec![1.5, -0.5], vec![-0.7, 0.2]];
        let g = [vec![1.0, -2.0], vec![0.5, 0.25], vec![-3.0, 1.0]];
        let (phi, _) = svgd_direction(&p, &g).unwrap();

        let mut d = Vec::new();
        for i in 0..3 {
            for j in i + 1..3 {
                let s: f64 = (0..2).map(|t| (p[i][t] - p[j][t]).powi(2)).sum();
                d.push(s.sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let h = d[1] * d[1] / 4f64.ln();
        for i in 0..3 {
            for t in 0..2 {
                let mut acc = 0.0;
                for j in 0..3 {
                    let s: f64 = (0..2).map(|u| (p[j][u] - p[i][u]).powi(2)).sum();
                    let k = (-s / h).exp();
                    acc += k * g[j][t] - 2.0 / h * (p[j][t] - p[i][t]) * k;
                }
                assert!((phi[i][t] - acc / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let p: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let k = rbf_kernel(&p).unwrap();
        let h = k.bandwidth.unwrap();
        let kf = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / h).exp();
        let eps = 1e-6;
        for j in 0..4 {
            for i in 0..4 {
                let g = k.grad_first(&p, j, i);
                for t in 0..5 {
                    let mut up = p[j].clone();
                    let mut dn = p[j].clone();
                    up[t] += eps;
                    dn[t] -= eps;
                    let fd = (kf(&up, &p[i]) - kf(&dn, &p[i])) / (2.0 * eps);
                    assert!((g[t] - fd).abs() < 1e-6, "j {j} i {i} t {t}: {} vs {fd}", g[t]);
                }
            }
        }
    }

    #[test]
    fn kernel_is_symmetric_and_scale_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let p: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let k = rbf_kernel(&p).unwrap();
        let scaled: Vec<Vec<f64>> = p.iter().map(|w| w.iter().map(|v| 7.5 * v).collect()).collect();
        let ks = rbf_kernel(&scaled).unwrap();
        let h = k.bandwidth.unwrap();
        assert!((ks.bandwidth.unwrap() - 56.25 * h).abs() < 1e-9 * h * 56.25);
        for i in 0..6 {
            assert_eq!(k.matrix[i][i], 1.0);
            for j in 0..6 {
                assert_eq!(k.matrix[i][j], k.matrix[j][i]);
                assert!(k.matrix[i][j] > 0.0 && k.matrix[i][j] <= 1.0);
                assert!((k.matrix[i][j] - ks.matrix[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_dimensions_error() {
        let p = [vec![0.0, 1.0], vec![1.0, 0.0]];
        let g = [vec![0.0], vec![1.0]];
        assert!(matches!(svgd_direction(&p, &g), Err(Error::Shape { .. })));
    }
}
