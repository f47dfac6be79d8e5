//! Regression losses and the heteroscedastic Gaussian head.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpCache};
use crate::error::{Error, Result};

pub const VAR_MIN: f64 = 1e-6;

/// Numerically stable log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalError(format!("non-finite {what}")));
    }
    Ok(())
}

/// Mean of `½ log σ² + (y − μ)² / (2σ²)` over the batch.
pub fn gaussian_nll(mu: &[f64], var: &[f64], target: &[f64]) -> Result<f64> {
    if mu.len() != var.len() || mu.len() != target.len() {
        return Err(Error::shape(mu.len(), var.len().min(target.len())));
    }
    if mu.is_empty() {
        return Err(Error::InvalidBuffer("empty batch".into()));
    }
    check_finite(mu, "mean")?;
    check_finite(var, "variance")?;
    check_finite(target, "target")?;
    if let Some(v) = var.iter().find(|v| **v <= 0.0) {
        return Err(Error::InvalidVariance(*v));
    }
    let n = mu.len() as f64;
    Ok(mu
        .iter()
        .zip(var)
        .zip(target)
        .map(|((m, v), y)| 0.5 * v.ln() + (y - m).powi(2) / (2.0 * v))
        .sum::<f64>()
        / n)
}

/// Batch-mean NLL in terms of the raw head outputs `(μ, s)` with
/// `σ² = softplus(s) + var_min`. Returns the loss and per-sample gradients
/// with respect to `μ` and `s`, already divided by the batch size.
pub fn gaussian_nll_raw(mu: &[f64], s: &[f64], target: &[f64], var_min: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let var: Vec<f64> = s.iter().map(|&s| softplus(s) + var_min).collect();
    let loss = gaussian_nll(mu, &var, target)?;
    let n = mu.len() as f64;
    let mut dmu = Vec::with_capacity(mu.len());
    let mut ds = Vec::with_capacity(mu.len());
    for i in 0..mu.len() {
        let e = target[i] - mu[i];
        let v = var[i];
        dmu.push(-e / v / n);
        let dv = 0.5 / v - e * e / (2.0 * v * v);
        ds.push(dv * sigmoid(s[i]) / n);
    }
    Ok((loss, dmu, ds))
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::shape(target.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidBuffer("empty batch".into()));
    }
    check_finite(pred, "prediction")?;
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

/// Network with a two-output head read as mean and variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub net: Mlp,
    pub var_min: f64,
}

impl GaussianHead {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Result<GaussianHead> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(2);
        Ok(GaussianHead {
            net: Mlp::new(&sizes, 1.0, rng)?,
            var_min: VAR_MIN,
        })
    }

    /// Means and variances, one per input row.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.net.forward(x)?;
        Ok(split_outputs(&out, self.var_min))
    }

    /// Batch NLL and its parameter gradient.
    pub fn nll_and_grad(&self, x: ArrayView2<f64>, target: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.nrows() != target.len() {
            return Err(Error::DataError(format!(
                "{} inputs but {} labels",
                x.nrows(),
                target.len()
            )));
        }
        let (out, cache): (Array2<f64>, MlpCache) = self.net.forward_cached(x)?;
        let mu: Vec<f64> = out.column(0).to_vec();
        let s: Vec<f64> = out.column(1).to_vec();
        let (loss, dmu, ds) = gaussian_nll_raw(&mu, &s, target, self.var_min)?;
        let g = Array2::from_shape_fn(out.dim(), |(i, j)| if j == 0 { dmu[i] } else { ds[i] });
        let mut grads = vec![0.0; self.net.num_params()];
        self.net.backward(&cache, g.view(), &mut grads)?;
        Ok((loss, grads))
    }
}

fn split_outputs(out: &Array2<f64>, var_min: f64) -> (Vec<f64>, Vec<f64>) {
    let mu = out.column(0).to_vec();
    let var = out.column(1).iter().map(|&s| softplus(s) + var_min).collect();
    (mu, var)
}
