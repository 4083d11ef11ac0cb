//! Diagonal Gaussians over skill space.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// `N(mean, diag(var))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_dim("gaussian variance", mean.len(), var.len())?;
        if mean.is_empty() {
            return Err(Error::Empty("gaussian mean"));
        }
        if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// Builds from a mean and a log-variance, as produced by a Gaussian head.
    pub fn from_log_var(mean: ArrayView1<f64>, log_var: ArrayView1<f64>) -> Self {
        Self {
            mean: mean.to_vec(),
            var: log_var.iter().map(|lv| lv.exp()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_var(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.ln()).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// `n` samples as rows. Draws are taken row by row.
    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let std: Vec<f64> = self.var.iter().map(|v| v.sqrt()).collect();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.mean[j] + std[j] * rng.sample::<f64, _>(StandardNormal);
            }
        }
        out
    }

    pub fn kl(&self, other: &DiagGaussian) -> f64 {
        let lv_p = self.log_var();
        let lv_q = other.log_var();
        kl_diag(&self.mean, &lv_p, &other.mean, &lv_q).value
    }
}

/// KL(p ‖ q) between diagonal Gaussians given in (mean, log-variance) form,
/// with its partial derivatives.
#[derive(Debug, Clone)]
pub struct KlTerms {
    pub value: f64,
    pub d_mean_p: Vec<f64>,
    pub d_log_var_p: Vec<f64>,
    pub d_mean_q: Vec<f64>,
    pub d_log_var_q: Vec<f64>,
}

/// Closed form
/// `Σ [ ½(lv_q − lv_p) + (σ_p² + (μ_p − μ_q)²) / (2σ_q²) − ½ ]`.
pub fn kl_diag(mean_p: &[f64], log_var_p: &[f64], mean_q: &[f64], log_var_q: &[f64]) -> KlTerms {
    let d = mean_p.len();
    let mut t = KlTerms {
        value: 0.0,
        d_mean_p: vec![0.0; d],
        d_log_var_p: vec![0.0; d],
        d_mean_q: vec![0.0; d],
        d_log_var_q: vec![0.0; d],
    };
    for i in 0..d {
        let var_p = log_var_p[i].exp();
        let inv_var_q = (-log_var_q[i]).exp();
        let diff = mean_p[i] - mean_q[i];
        let ratio = (var_p + diff * diff) * inv_var_q;
        t.value += 0.5 * (log_var_q[i] - log_var_p[i]) + 0.5 * ratio - 0.5;
        t.d_mean_p[i] = diff * inv_var_q;
        t.d_mean_q[i] = -diff * inv_var_q;
        t.d_log_var_p[i] = -0.5 + 0.5 * var_p * inv_var_q;
        t.d_log_var_q[i] = 0.5 - 0.5 * ratio;
    }
    t
}
