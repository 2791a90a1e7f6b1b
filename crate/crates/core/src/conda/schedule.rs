use serde::{Deserialize, Serialize};

use super::{CondaError, Result};

/// Linear partial-noising schedule. Arrays are indexed by step `n` in `0..=N`;
/// index 0 holds the clean state (`ᾱ_0 = 1`, `β_0 = β̃_0 = 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub k: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    beta_tilde: Vec<f64>,
}

/// `k · [alpha_min + (n−1)/(N−1) · (alpha_max − alpha_min)]`, the target `1 − ᾱ_n`.
pub fn linear_noise_level(n: usize, steps: usize, k: f64, alpha_min: f64, alpha_max: f64) -> f64 {
    k * (alpha_min + (n - 1) as f64 / (steps - 1) as f64 * (alpha_max - alpha_min))
}

pub fn build_schedule(steps: usize, k: f64, alpha_min: f64, alpha_max: f64) -> Result<NoiseSchedule> {
    let bad = |msg: String| Err(CondaError::Schedule(msg));
    if steps < 2 {
        return bad(format!("N = {steps}, need at least 2 steps"));
    }
    if !(alpha_min > 0.0 && alpha_min < alpha_max && alpha_max < 1.0) {
        return bad(format!("need 0 < alpha_min < alpha_max < 1, got {alpha_min}, {alpha_max}"));
    }
    if !(k > 0.0 && k <= 1.0 && k * alpha_max < 1.0) {
        return bad(format!("noise scale k = {k} outside (0, 1] or k·alpha_max ≥ 1"));
    }
    let mut alpha_bar = vec![1.0];
    alpha_bar.extend((1..=steps).map(|n| 1.0 - linear_noise_level(n, steps, k, alpha_min, alpha_max)));
    let mut alpha = vec![1.0];
    let mut beta = vec![0.0];
    let mut beta_tilde = vec![0.0];
    for n in 1..=steps {
        let a = alpha_bar[n] / alpha_bar[n - 1];
        alpha.push(a);
        beta.push(1.0 - a);
        beta_tilde.push((1.0 - a) * (1.0 - alpha_bar[n - 1]) / (1.0 - alpha_bar[n]));
    }
    Ok(NoiseSchedule {
        steps,
        k,
        alpha_min,
        alpha_max,
        alpha,
        alpha_bar,
        beta,
        beta_tilde,
    })
}

impl NoiseSchedule {
    pub fn alpha(&self, n: usize) -> f64 {
        self.alpha[n]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n]
    }

    pub fn beta_tilde(&self, n: usize) -> f64 {
        self.beta_tilde[n]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha[1..]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar[1..]
    }

    pub fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps {
            return Err(CondaError::Step { n, steps: self.steps });
        }
        Ok(())
    }

    /// Coefficients `(c_n, c_0)` of the posterior mean `c_n · x_n + c_0 · x_0`.
    pub fn posterior_coefs(&self, n: usize) -> (f64, f64) {
        let (a, ab, ab_prev) = (self.alpha[n], self.alpha_bar[n], self.alpha_bar[n - 1]);
        let denom = 1.0 - ab;
        (a.sqrt() * (1.0 - ab_prev) / denom, ab_prev.sqrt() * (1.0 - a) / denom)
    }
}
