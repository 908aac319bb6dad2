//! Policy head losses: mean squared error and a diagonal Gaussian mixture.

use serde::{Deserialize, Serialize};

use super::dense::Scalar;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    Mse,
    Gmm,
}

/// Width of the head's raw output for `mode`.
pub fn head_width(mode: HeadMode, action_dim: usize, components: usize) -> usize {
    match mode {
        HeadMode::Mse => action_dim,
        HeadMode::Gmm => components * (1 + 2 * action_dim),
    }
}

/// Decoded Gaussian mixture over actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub weights: Vec<f64>,
    /// `components × action_dim`, row-major.
    pub means: Vec<f64>,
    /// Clamped log standard deviations, same layout as `means`.
    pub log_stds: Vec<f64>,
}

impl Mixture {
    /// Decodes raw head output laid out as `[logits | means | log-stds]`.
    pub fn from_raw<T: Scalar>(raw: &[T], action_dim: usize, components: usize) -> Self {
        let k = components;
        let logits: Vec<f64> = raw[..k].iter().map(|&v| v.into()).collect();
        let lse = log_sum_exp(&logits);
        let weights = logits.iter().map(|l| (l - lse).exp()).collect();
        let means = raw[k..k + k * action_dim].iter().map(|&v| v.into()).collect();
        let log_stds = raw[k + k * action_dim..k + 2 * k * action_dim]
            .iter()
            .map(|&v| Into::<f64>::into(v).clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Self {
            weights,
            means,
            log_stds,
        }
    }

    /// Mixture mean `Σ π_k μ_k`.
    pub fn mean_action(&self) -> Vec<f64> {
        let a = self.means.len() / self.weights.len();
        let mut out = vec![0.0; a];
        for (k, &w) in self.weights.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(&self.means[k * a..(k + 1) * a]) {
                *o += w * m;
            }
        }
        out
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `‖pred − target‖² / A` and its gradient with respect to `pred`.
pub fn mse_loss_grad<T: Scalar>(pred: &[T], target: &[f32]) -> (f64, Vec<f64>) {
    let a = target.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p.into() - t as f64;
            loss += d * d;
            2.0 * d / a
        })
        .collect();
    (loss / a, grad)
}

/// Negative log-likelihood of `target` under the mixture encoded by `raw`,
/// with its gradient with respect to `raw`. Clamped log-stds pass no gradient.
pub fn gmm_nll_grad<T: Scalar>(raw: &[T], target: &[f32], components: usize) -> (f64, Vec<f64>) {
    let a = target.len();
    let k = components;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let logits: Vec<f64> = raw[..k].iter().map(|&v| v.into()).collect();
    let lse_logits = log_sum_exp(&logits);
    let mean_off = k;
    let std_off = k + k * a;

    let mut comp_ll = vec![0.0; k];
    for c in 0..k {
        let mut ll = logits[c] - lse_logits;
        for d in 0..a {
            let mu: f64 = raw[mean_off + c * a + d].into();
            let ls = Into::<f64>::into(raw[std_off + c * a + d]).clamp(LOG_STD_MIN, LOG_STD_MAX);
            let z = (target[d] as f64 - mu) * (-ls).exp();
            ll += -0.5 * z * z - ls - half_ln_2pi;
        }
        comp_ll[c] = ll;
    }
    let log_p = log_sum_exp(&comp_ll);

    let mut grad = vec![0.0; raw.len()];
    for c in 0..k {
        let resp = (comp_ll[c] - log_p).exp();
        let prior = (logits[c] - lse_logits).exp();
        grad[c] = prior - resp;
        for d in 0..a {
            let mu: f64 = raw[mean_off + c * a + d].into();
            let raw_ls: f64 = raw[std_off + c * a + d].into();
            let ls = raw_ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
            let inv_var = (-2.0 * ls).exp();
            let diff = target[d] as f64 - mu;
            grad[mean_off + c * a + d] = -resp * diff * inv_var;
            if raw_ls > LOG_STD_MIN && raw_ls < LOG_STD_MAX {
                grad[std_off + c * a + d] = -resp * (diff * diff * inv_var - 1.0);
            }
        }
    }
    (-log_p, grad)
}
