//! Closed-form linear-Gaussian model used to validate the SNIS estimators.
//!
//! `p(b) = N(0, I)`, `p(B | b) = N(Phi b, I)`, so `p(B) = N(0, I + Phi Phi^T)`
//! and the posterior over `b` is Gaussian with covariance `(I + Phi^T Phi)^-1`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::snis::{generative_grad, inference_grad, sample_latents, snis_normalize, weighted_surrogate};
use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tape, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub log_marginal: f64,
    /// `d log p(B) / d Phi`, same shape as `Phi`.
    pub grad: DMatrix<f64>,
    pub posterior_mean: DVector<f64>,
    pub posterior_cov: DMatrix<f64>,
}

/// Log-marginal, its gradient in `Phi`, and the exact posterior.
pub fn analytic_oracle(phi: &DMatrix<f64>, obs: &DVector<f64>) -> Result<OracleResult> {
    let (n, m) = phi.shape();
    if obs.len() != n {
        return Err(Error::shape(format!("Phi has {n} rows but B has {} entries", obs.len())));
    }
    let sigma = DMatrix::identity(n, n) + phi * phi.transpose();
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NonFinite("marginal covariance is not positive definite".into()))?;
    let inv = chol.inverse();
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = (obs.transpose() * &inv * obs)[(0, 0)];
    let log_marginal = -0.5 * (n as f64 * LN_2PI + log_det + quad);
    let alpha = &inv * obs;
    let grad = (&alpha * alpha.transpose() - &inv) * phi;
    let post_prec = DMatrix::identity(m, m) + phi.transpose() * phi;
    let posterior_cov = post_prec
        .try_inverse()
        .ok_or_else(|| Error::NonFinite("posterior precision is singular".into()))?;
    let posterior_mean = &posterior_cov * phi.transpose() * obs;
    Ok(OracleResult { log_marginal, grad, posterior_mean, posterior_cov })
}

/// The oracle model together with one observation.
#[derive(Clone, Debug)]
pub struct OracleModel {
    pub phi: DMatrix<f64>,
    pub obs: DVector<f64>,
}

impl OracleModel {
    /// Latent dim 2, observation dim 4. The columns of `Phi` are orthogonal, so
    /// the exact posterior is diagonal.
    pub fn standard() -> Self {
        let phi = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 0.5, -1.0, 0.2, 0.4, -0.4, 0.2]);
        let obs = DVector::from_vec(vec![1.0, -0.5, 0.8, 0.3]);
        OracleModel { phi, obs }
    }

    pub fn exact(&self) -> Result<OracleResult> {
        analytic_oracle(&self.phi, &self.obs)
    }

    /// Exact posterior mean and per-coordinate standard deviation. Only valid
    /// when the posterior covariance is diagonal.
    pub fn diagonal_posterior(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let r = self.exact()?;
        let m = r.posterior_cov.nrows();
        for i in 0..m {
            for j in 0..m {
                if i != j && r.posterior_cov[(i, j)].abs() > 1e-12 {
                    return Err(Error::config("posterior covariance is not diagonal"));
                }
            }
        }
        let sd = (0..m).map(|i| r.posterior_cov[(i, i)].sqrt()).collect();
        Ok((r.posterior_mean.iter().copied().collect(), sd))
    }

    fn phi_tensor(&self) -> Tensor {
        let (n, m) = self.phi.shape();
        let data = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| self.phi[(i, j)]).collect();
        Tensor::matrix(n, m, data).expect("shape matches")
    }

    /// `log p(B, b)` for every row of `samples`.
    pub fn log_joint_values(&self, samples: &Tensor) -> Vec<f64> {
        let (n, m) = self.phi.shape();
        (0..samples.rows())
            .map(|r| {
                let b = samples.row_slice(r);
                let prior: f64 = b.iter().map(|v| -0.5 * v * v).sum::<f64>() - 0.5 * m as f64 * LN_2PI;
                let lik: f64 = (0..n)
                    .map(|i| {
                        let pred: f64 = (0..m).map(|j| self.phi[(i, j)] * b[j]).sum();
                        let e = self.obs[i] - pred;
                        -0.5 * e * e
                    })
                    .sum::<f64>()
                    - 0.5 * n as f64 * LN_2PI;
                prior + lik
            })
            .collect()
    }

    /// SNIS estimate of `d log p(B) / d Phi` from `k` draws of the diagonal
    /// proposal `N(q_mu, diag(q_sigma^2))`, computed through the taped
    /// surrogate and `generative_grad`.
    pub fn generative_estimate<R: Rng + ?Sized>(
        &self,
        q_mu: &[f64],
        q_sigma: &[f64],
        k: usize,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        let (n, m) = self.phi.shape();
        let batch = sample_latents(q_mu, q_sigma, k, rng)?;
        let mut store = ParameterStore::new();
        store.insert("phi", self.phi_tensor())?;
        let mut tape = Tape::new();
        let phi = tape.param(&store, "phi")?;
        let b = tape.constant(batch.samples.clone());
        let pred = tape.matmul_nt(b, phi)?;
        let obs_row: Vec<f64> = self.obs.iter().copied().collect();
        let target = tape.constant(Tensor::row(&obs_row));
        let target = tape.broadcast_rows(target, k)?;
        let ones = tape.constant(Tensor::full(&[k, n], 1.0));
        let lik = tape.gaussian_log_density(target, pred, ones)?;
        let prior: Vec<f64> = (0..k)
            .map(|r| batch.samples.row_slice(r).iter().map(|v| -0.5 * v * v).sum::<f64>() - 0.5 * m as f64 * LN_2PI)
            .collect();
        let prior = tape.constant(Tensor::matrix(k, 1, prior)?);
        let log_p = tape.add(lik, prior)?;
        let log_w: Vec<f64> = tape.value(log_p).data().iter().zip(&batch.log_q).map(|(p, q)| p - q).collect();
        let w = snis_normalize(&log_w)?;
        let surrogate = weighted_surrogate(&mut tape, log_p, &w)?;
        generative_grad(&tape, surrogate, &mut store)?;
        let g = store.grad("phi")?;
        Ok(DMatrix::from_fn(n, m, |i, j| -g.get2(i, j)))
    }

    /// SNIS estimate of the descent direction `-sum_j w_j grad log q(b_j)`
    /// with respect to `(q_mu, q_sigma)`, concatenated.
    pub fn inference_estimate<R: Rng + ?Sized>(
        &self,
        q_mu: &[f64],
        q_sigma: &[f64],
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let m = q_mu.len();
        let batch = sample_latents(q_mu, q_sigma, k, rng)?;
        let mut store = ParameterStore::new();
        store.insert("mu", Tensor::row(q_mu))?;
        store.insert("sigma", Tensor::row(q_sigma))?;
        let mut tape = Tape::new();
        let mu = tape.param(&store, "mu")?;
        let sigma = tape.param(&store, "sigma")?;
        let mu_k = tape.broadcast_rows(mu, k)?;
        let sigma_k = tape.broadcast_rows(sigma, k)?;
        let b = tape.constant(batch.samples.clone());
        let log_q = tape.gaussian_log_density(b, mu_k, sigma_k)?;
        let log_p = self.log_joint_values(&batch.samples);
        let log_w: Vec<f64> = log_p.iter().zip(tape.value(log_q).data()).map(|(p, q)| p - q).collect();
        let w = snis_normalize(&log_w)?;
        let surrogate = weighted_surrogate(&mut tape, log_q, &w)?;
        inference_grad(&tape, surrogate, &mut store)?;
        let mut out = store.grad("mu")?.data().to_vec();
        out.extend_from_slice(store.grad("sigma")?.data());
        debug_assert_eq!(out.len(), 2 * m);
        Ok(out)
    }
}
