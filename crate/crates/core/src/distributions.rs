//! Latent distributions with differentiable (reparameterized) sampling.
//!
//! Three Gaussian parameterizations share one interface: axis-aligned
//! (diagonal covariance), full covariance via an unconstrained lower-triangular
//! factor, and low-rank-plus-diagonal whose factor is recovered with a
//! differentiable Cholesky factorization. A Gaussian mixture layers a
//! Gumbel-softmax over any of them. Every distribution lives on a [`Tape`],
//! so sampling and densities backpropagate into the parameters that produced
//! them.

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::normal_vec;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian with mean `mu` and covariance `scale scaleᵀ`.
#[derive(Clone, Debug)]
pub struct Gaussian {
    pub mu: NodeId,
    cov: Cov,
}

#[derive(Clone, Debug)]
enum Cov {
    /// Diagonal: `sigma = exp(log_sigma)` per dimension.
    Diag { sigma: NodeId, log_sigma: NodeId },
    /// Lower-triangular factor with positive diagonal.
    Full { scale: NodeId },
}

impl Gaussian {
    /// Axis-aligned Gaussian from a mean and per-dimension log standard
    /// deviations, both `[z]`.
    pub fn diag(tape: &mut Tape, mu: NodeId, log_sigma: NodeId) -> Result<Self> {
        let d = vector_dim(tape, mu, "mean")?;
        let ds = vector_dim(tape, log_sigma, "log_sigma")?;
        if d != ds {
            return Err(Error::shape(format!(
                "mean has {d} dims but log_sigma has {ds}"
            )));
        }
        let sigma = tape.exp(log_sigma)?;
        Ok(Gaussian {
            mu,
            cov: Cov::Diag { sigma, log_sigma },
        })
    }

    /// Full-covariance Gaussian from an unconstrained `[z, z]` matrix: its
    /// strictly-lower triangle is used as-is and the diagonal is
    /// exponentiated, giving a valid Cholesky factor for any input.
    pub fn full(tape: &mut Tape, mu: NodeId, raw: NodeId) -> Result<Self> {
        let d = vector_dim(tape, mu, "mean")?;
        if tape.shape(raw) != [d, d] {
            return Err(Error::shape(format!(
                "covariance factor must be [{d}, {d}], got {:?}",
                tape.shape(raw)
            )));
        }
        let scale = tape.lower_tri_exp_diag(raw)?;
        Ok(Gaussian {
            mu,
            cov: Cov::Full { scale },
        })
    }

    /// Low-rank Gaussian with covariance `P Pᵀ + diag(exp(log_diag))` for a
    /// `[z, r]` factor `P`, `1 <= r < z`. The Cholesky factor of the
    /// assembled covariance is differentiable, so gradients reach both `P`
    /// and the diagonal.
    pub fn low_rank(tape: &mut Tape, mu: NodeId, factor: NodeId, log_diag: NodeId) -> Result<Self> {
        let d = vector_dim(tape, mu, "mean")?;
        let fsh = tape.shape(factor).to_vec();
        if fsh.len() != 2 || fsh[0] != d {
            return Err(Error::shape(format!(
                "low-rank factor must be [{d}, r], got {fsh:?}"
            )));
        }
        let r = fsh[1];
        if r == 0 || r >= d {
            return Err(Error::config(format!(
                "low-rank factor rank must satisfy 1 <= r < {d}, got {r}"
            )));
        }
        if vector_dim(tape, log_diag, "log_diag")? != d {
            return Err(Error::shape(format!(
                "log_diag must be [{d}], got {:?}",
                tape.shape(log_diag)
            )));
        }
        let ft = tape.transpose(factor)?;
        let ppt = tape.matmul(factor, ft)?;
        let diag = tape.exp(log_diag)?;
        let diag_m = tape.diag_embed(diag)?;
        let cov = tape.add(ppt, diag_m)?;
        let scale = tape.cholesky_factor(cov)?;
        Ok(Gaussian {
            mu,
            cov: Cov::Full { scale },
        })
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.shape(self.mu)[0]
    }

    pub fn is_diag(&self) -> bool {
        matches!(self.cov, Cov::Diag { .. })
    }

    /// Reparameterized sample `mu + scale * eps` for injected standard-normal
    /// noise; the path from parameters to sample stays differentiable.
    pub fn sample_with_noise(&self, tape: &mut Tape, eps: &[f64]) -> Result<NodeId> {
        let d = self.dim(tape);
        if eps.len() != d {
            return Err(Error::shape(format!(
                "noise must have {d} dims, got {}",
                eps.len()
            )));
        }
        let eps_n = tape.constant_values(vec![d], eps.to_vec());
        match &self.cov {
            Cov::Diag { sigma, .. } => {
                let scaled = tape.mul(*sigma, eps_n)?;
                tape.add(self.mu, scaled)
            }
            Cov::Full { scale } => {
                let eps_m = tape.reshape(eps_n, vec![d, 1])?;
                let prod = tape.matmul(*scale, eps_m)?;
                let flat = tape.reshape(prod, vec![d])?;
                tape.add(self.mu, flat)
            }
        }
    }

    pub fn sample<R: Rng>(&self, tape: &mut Tape, rng: &mut R) -> Result<NodeId> {
        let eps = normal_vec(rng, self.dim(tape));
        self.sample_with_noise(tape, &eps)
    }

    /// Log density at `z` (`[z]`-shaped node), differentiable in both the
    /// parameters and `z`.
    pub fn log_prob(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let d = self.dim(tape);
        if tape.shape(z) != [d] {
            return Err(Error::shape(format!(
                "log_prob point must be [{d}], got {:?}",
                tape.shape(z)
            )));
        }
        let diff = tape.sub(z, self.mu)?;
        let quad = match &self.cov {
            Cov::Diag { sigma, .. } => {
                let ratio = tape.div(diff, *sigma)?;
                let sq = tape.mul(ratio, ratio)?;
                tape.sum(sq)?
            }
            Cov::Full { scale } => {
                let y = tape.tri_solve_lower(*scale, diff)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)?
            }
        };
        let half = tape.mul_scalar(quad, -0.5)?;
        let log_det_factor = self.log_diag_sum(tape)?;
        let centered = tape.sub(half, log_det_factor)?;
        tape.add_scalar(centered, -0.5 * d as f64 * LN_2PI)
    }

    /// Sum of the log diagonal of the Cholesky factor (half the log
    /// determinant of the covariance).
    fn log_diag_sum(&self, tape: &mut Tape) -> Result<NodeId> {
        match &self.cov {
            Cov::Diag { log_sigma, .. } => tape.sum(*log_sigma),
            Cov::Full { scale } => {
                let diag = tape.diag_part(*scale)?;
                let ld = tape.log(diag)?;
                tape.sum(ld)
            }
        }
    }

    /// Cholesky factor as an `[z, z]` matrix node (diagonal embedding for the
    /// axis-aligned case).
    fn scale_matrix(&self, tape: &mut Tape) -> Result<NodeId> {
        match &self.cov {
            Cov::Diag { sigma, .. } => tape.diag_embed(*sigma),
            Cov::Full { scale } => Ok(*scale),
        }
    }
}

/// Closed-form KL(q || p) between Gaussians of equal dimension:
/// `0.5 (||Lp⁻¹ Lq||_F² + ||Lp⁻¹ (mu_q - mu_p)||² - d) + log|Lp| - log|Lq|`.
pub fn kl_closed_form(tape: &mut Tape, q: &Gaussian, p: &Gaussian) -> Result<NodeId> {
    let d = q.dim(tape);
    if p.dim(tape) != d {
        return Err(Error::shape(format!(
            "KL endpoints disagree: {d} vs {} dims",
            p.dim(tape)
        )));
    }
    let lq = q.scale_matrix(tape)?;
    let lp = p.scale_matrix(tape)?;
    let m = tape.tri_solve_lower(lp, lq)?;
    let msq = tape.mul(m, m)?;
    let trace = tape.sum(msq)?;
    let dmu = tape.sub(q.mu, p.mu)?;
    let v = tape.tri_solve_lower(lp, dmu)?;
    let vsq = tape.mul(v, v)?;
    let quad = tape.sum(vsq)?;
    let t = tape.add(trace, quad)?;
    let t = tape.add_scalar(t, -(d as f64))?;
    let t = tape.mul_scalar(t, 0.5)?;
    let ldp = p.log_diag_sum(tape)?;
    let ldq = q.log_diag_sum(tape)?;
    let t = tape.add(t, ldp)?;
    tape.sub(t, ldq)
}

/// Mixture of Gaussians with logit weights and a Gumbel-softmax relaxation
/// for component choice.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub logits: NodeId,
    pub components: Vec<Gaussian>,
    pub temperature: f64,
}

impl Mixture {
    pub fn new(
        tape: &Tape,
        logits: NodeId,
        components: Vec<Gaussian>,
        temperature: f64,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::config("mixture needs at least one component".to_string()));
        }
        let d = tape.shape(components[0].mu)[0];
        for (k, c) in components.iter().enumerate() {
            if tape.shape(c.mu)[0] != d {
                return Err(Error::shape(format!(
                    "component {k} has {} dims, expected {d}",
                    tape.shape(c.mu)[0]
                )));
            }
        }
        if tape.shape(logits) != [components.len()] {
            return Err(Error::shape(format!(
                "logits must be [{}], got {:?}",
                components.len(),
                tape.shape(logits)
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::config(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        Ok(Mixture {
            logits,
            components,
            temperature,
        })
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.shape(self.components[0].mu)[0]
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Component weights from Gumbel-perturbed logits at the mixture
    /// temperature. With `straight_through` the forward value is the exact
    /// one-hot argmax while gradients follow the soft weights. Returns the
    /// weights node and the selected component index.
    pub fn gumbel_softmax_with_noise(
        &self,
        tape: &mut Tape,
        gumbels: &[f64],
        straight_through: bool,
    ) -> Result<(NodeId, usize)> {
        let n = self.n_components();
        if gumbels.len() != n {
            return Err(Error::shape(format!(
                "need {n} gumbel draws, got {}",
                gumbels.len()
            )));
        }
        let g = tape.constant_values(vec![n], gumbels.to_vec());
        let noisy = tape.add(self.logits, g)?;
        let scaled = tape.mul_scalar(noisy, 1.0 / self.temperature)?;
        let soft = softmax(tape, scaled)?;
        let soft_vals = tape.values(soft).to_vec();
        let argmax = argmax(&soft_vals);
        if !straight_through {
            return Ok((soft, argmax));
        }
        // forward becomes the exact one-hot; the correction is constant so
        // gradients still flow through the soft weights
        let delta: Vec<f64> = soft_vals
            .iter()
            .enumerate()
            .map(|(i, &s)| if i == argmax { 1.0 - s } else { -s })
            .collect();
        let delta_n = tape.constant_values(vec![n], delta);
        let hard = tape.add(soft, delta_n)?;
        Ok((hard, argmax))
    }

    pub fn gumbel_softmax<R: Rng>(
        &self,
        tape: &mut Tape,
        rng: &mut R,
        straight_through: bool,
    ) -> Result<(NodeId, usize)> {
        let g = gumbel_vec(rng, self.n_components());
        self.gumbel_softmax_with_noise(tape, &g, straight_through)
    }

    /// Two-step reparameterized sample: pick a component with the
    /// straight-through Gumbel-softmax, then sample it. The forward value is
    /// exactly the chosen component's sample; every component and the logits
    /// receive gradients.
    pub fn sample_with_noise(
        &self,
        tape: &mut Tape,
        gumbels: &[f64],
        eps: &[f64],
        straight_through: bool,
    ) -> Result<NodeId> {
        let n = self.n_components();
        let d = self.dim(tape);
        if eps.len() != n * d {
            return Err(Error::shape(format!(
                "need {n}x{d} noise values, got {}",
                eps.len()
            )));
        }
        let (w, _) = self.gumbel_softmax_with_noise(tape, gumbels, straight_through)?;
        let mut rows = Vec::with_capacity(n);
        for (k, comp) in self.components.iter().enumerate() {
            rows.push(comp.sample_with_noise(tape, &eps[k * d..(k + 1) * d])?);
        }
        let stacked = tape.stack_rows(&rows)?;
        let w_row = tape.reshape(w, vec![1, n])?;
        let mixed = tape.matmul(w_row, stacked)?;
        tape.reshape(mixed, vec![d])
    }

    pub fn sample<R: Rng>(&self, tape: &mut Tape, rng: &mut R) -> Result<NodeId> {
        let g = gumbel_vec(rng, self.n_components());
        let eps = normal_vec(rng, self.n_components() * self.dim(tape));
        self.sample_with_noise(tape, &g, &eps, true)
    }

    /// Exact mixture log density: `logsumexp_k(log w_k + log N_k(z))`.
    pub fn log_prob(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let log_w = log_softmax(tape, self.logits)?;
        let mut terms = Vec::with_capacity(self.n_components());
        for comp in &self.components {
            terms.push(comp.log_prob(tape, z)?);
        }
        let stacked = tape.stack_rows(&terms)?; // [n, 1]
        let flat = tape.reshape(stacked, vec![self.n_components()])?;
        let total = tape.add(log_w, flat)?;
        logsumexp(tape, total)
    }
}

/// Latent distribution: a single Gaussian or a mixture.
#[derive(Clone, Debug)]
pub enum LatentDistribution {
    Gaussian(Gaussian),
    Mixture(Mixture),
}

impl LatentDistribution {
    pub fn dim(&self, tape: &Tape) -> usize {
        match self {
            LatentDistribution::Gaussian(g) => g.dim(tape),
            LatentDistribution::Mixture(m) => m.dim(tape),
        }
    }

    pub fn sample<R: Rng>(&self, tape: &mut Tape, rng: &mut R) -> Result<NodeId> {
        match self {
            LatentDistribution::Gaussian(g) => g.sample(tape, rng),
            LatentDistribution::Mixture(m) => m.sample(tape, rng),
        }
    }

    pub fn log_prob(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        match self {
            LatentDistribution::Gaussian(g) => g.log_prob(tape, z),
            LatentDistribution::Mixture(m) => m.log_prob(tape, z),
        }
    }
}

/// Monte-Carlo KL(q || p): average of `log q(z) - log p(z)` over fresh
/// reparameterized samples from `q`. Works for any pair of distributions;
/// gradients flow through both the sample path and the densities.
pub fn kl_monte_carlo<R: Rng>(
    tape: &mut Tape,
    q: &LatentDistribution,
    p: &LatentDistribution,
    n_samples: usize,
    rng: &mut R,
) -> Result<NodeId> {
    if n_samples == 0 {
        return Err(Error::config("monte-carlo KL needs at least one sample".to_string()));
    }
    if q.dim(tape) != p.dim(tape) {
        return Err(Error::shape(format!(
            "KL endpoints disagree: {} vs {} dims",
            q.dim(tape),
            p.dim(tape)
        )));
    }
    let mut terms = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z = q.sample(tape, rng)?;
        let lq = q.log_prob(tape, z)?;
        let lp = p.log_prob(tape, z)?;
        terms.push(tape.sub(lq, lp)?);
    }
    let stacked = tape.stack_rows(&terms)?;
    tape.mean(stacked)
}

/// KL(q || p), closed form when both sides are Gaussian, Monte-Carlo with
/// `mc_samples` draws as soon as a mixture is involved.
pub fn kl<R: Rng>(
    tape: &mut Tape,
    q: &LatentDistribution,
    p: &LatentDistribution,
    mc_samples: usize,
    rng: &mut R,
) -> Result<NodeId> {
    match (q, p) {
        (LatentDistribution::Gaussian(q), LatentDistribution::Gaussian(p)) => {
            kl_closed_form(tape, q, p)
        }
        _ => kl_monte_carlo(tape, q, p, mc_samples, rng),
    }
}

/// Stable log-sum-exp of a vector node (max is detached, which leaves the
/// gradient — the softmax — exact).
pub fn logsumexp(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let m = tape
        .values(x)
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(x, -m)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum(e)?;
    let ls = tape.log(s)?;
    tape.add_scalar(ls, m)
}

pub fn log_softmax(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let lse = logsumexp(tape, x)?;
    tape.sub(x, lse)
}

pub fn softmax(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let ls = log_softmax(tape, x)?;
    tape.exp(ls)
}

/// Standard Gumbel draws, with uniforms clamped away from 0 and 1.
pub fn gumbel_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            -(-u.ln()).ln()
        })
        .collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn vector_dim(tape: &Tape, id: NodeId, what: &str) -> Result<usize> {
    let shape = tape.shape(id);
    if shape.len() != 1 || shape[0] == 0 {
        return Err(Error::shape(format!(
            "{what} must be a non-empty vector, got {shape:?}"
        )));
    }
    Ok(shape[0])
}
