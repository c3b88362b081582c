//! Latent sampling and self-normalized importance weighting.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `K` draws from a diagonal Gaussian and their log-densities.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    /// `K x dim`.
    pub samples: Tensor,
    pub log_q: Vec<f64>,
}

/// Diagonal Gaussian log-density of one point.
pub fn diag_gaussian_log_density(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((x, m), s)| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - HALF_LN_2PI
        })
        .sum()
}

/// Reparameterized draws `b = mu + sigma * eps` with standard normal `eps`.
pub fn sample_latents<R: Rng + ?Sized>(mu: &[f64], sigma: &[f64], k_sp: usize, rng: &mut R) -> Result<LatentBatch> {
    if k_sp == 0 {
        return Err(Error::config("K_sp must be at least 1"));
    }
    if mu.len() != sigma.len() {
        return Err(Error::shape(format!("mu has {} entries, sigma {}", mu.len(), sigma.len())));
    }
    let dim = mu.len();
    let mut data = Vec::with_capacity(k_sp * dim);
    let mut log_q = Vec::with_capacity(k_sp);
    for _ in 0..k_sp {
        let start = data.len();
        for j in 0..dim {
            let eps: f64 = rng.sample(StandardNormal);
            data.push(mu[j] + sigma[j] * eps);
        }
        log_q.push(diag_gaussian_log_density(&data[start..], mu, sigma));
    }
    Ok(LatentBatch { samples: Tensor::matrix(k_sp, dim, data)?, log_q })
}

/// `exp(lw - max lw)` normalized to sum to one.
pub fn snis_normalize(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::DegenerateWeights);
    }
    let mut w: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = w.iter().sum();
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("importance weights sum to {total}")));
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// `-sum_j w_j v_j` for a `K x 1` column `v` and constant weights.
pub fn weighted_surrogate(tape: &mut Tape, values: Var, weights: &[f64]) -> Result<Var> {
    if tape.value(values).numel() != weights.len() {
        return Err(Error::shape(format!(
            "{} weights for values of shape {:?}",
            weights.len(),
            tape.shape(values)
        )));
    }
    let w = tape.constant(Tensor::new(tape.shape(values).to_vec(), weights.to_vec())?);
    let wv = tape.mul(values, w)?;
    let s = tape.sum(wv);
    Ok(tape.neg(s))
}

/// Adds `-sum_j w_j grad log p(B, b_j)` to the generative store's gradients,
/// the descent direction for the log-marginal. Returns the surrogate value.
pub fn generative_grad(tape: &Tape, surrogate: Var, theta: &mut ParameterStore) -> Result<f64> {
    tape.backward(surrogate, &mut [theta])?;
    tape.value(surrogate).item()
}

/// Adds `-sum_j w_j grad log q(b_j)` to the inference store's gradients, the
/// descent direction for the divergence. Returns the surrogate value.
pub fn inference_grad(tape: &Tape, surrogate: Var, phi: &mut ParameterStore) -> Result<f64> {
    tape.backward(surrogate, &mut [phi])?;
    tape.value(surrogate).item()
}
