use rand::Rng;
use rand_distr::StandardNormal;

use super::Result;
use crate::nn::{Activation, Mlp};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Diagonal Gaussian `q(z | s)` produced by the encoder.
#[derive(Clone, Copy, Debug)]
pub struct VaePosterior {
    pub mu: Var,
    pub log_var: Var,
}

/// Row-wise encoder `D → D/2 → 2d` and decoder `d → D/2 → D`.
#[derive(Clone, Debug)]
pub struct Vae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub dim: usize,
    pub latent: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct VaeOutput {
    pub posterior: VaePosterior,
    pub z: Var,
    pub recon: Var,
    pub kl: Var,
    pub loss: Var,
}

/// Standard-normal tensor of the given shape.
pub fn gaussian<S: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl Vae {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, dim: usize, latent: usize, rng: &mut R) -> Self {
        let hidden = (dim / 2).max(1);
        Self {
            encoder: Mlp::new(store, "conda/phi", &[dim, hidden, 2 * latent], Activation::Relu, rng),
            decoder: Mlp::new(store, "conda/psi", &[latent, hidden, dim], Activation::Relu, rng),
            dim,
            latent,
        }
    }

    /// Returns the posterior and a latent: the reparameterized sample
    /// `mu + exp(log_var / 2) · ε` when `sample` is set, `mu` otherwise.
    pub fn encode<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        s: Var,
        sample: bool,
        rng: &mut R,
    ) -> Result<(VaePosterior, Var)> {
        let h = self.encoder.forward(tape, store, s)?;
        let axis = tape.shape(h).len() - 1;
        let mu = tape.slice(h, axis, 0, self.latent)?;
        let log_var = tape.slice(h, axis, self.latent, 2 * self.latent)?;
        let posterior = VaePosterior { mu, log_var };
        if !sample {
            return Ok((posterior, mu));
        }
        let half = tape.scale(log_var, S::of(0.5));
        let std = tape.exp(half);
        let eps = tape.constant(gaussian(tape.shape(mu), rng));
        let noise = tape.mul(std, eps)?;
        let z = tape.add(mu, noise)?;
        Ok((posterior, z))
    }

    pub fn decode<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, z: Var) -> Result<Var> {
        Ok(self.decoder.forward(tape, store, z)?)
    }

    /// `MSE(s, decode(z)) + KL` with one reparameterized sample.
    pub fn loss<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        s: Var,
        rng: &mut R,
    ) -> Result<VaeOutput> {
        let (posterior, z) = self.encode(tape, store, s, true, rng)?;
        let s_hat = self.decode(tape, store, z)?;
        let recon = tape.mse(s_hat, s)?;
        let kl = kl_divergence(tape, posterior)?;
        let loss = tape.add(recon, kl)?;
        Ok(VaeOutput {
            posterior,
            z,
            recon,
            kl,
            loss,
        })
    }
}

/// `0.5 · (μ² + σ² − log σ² − 1)` averaged over latent coordinates.
pub fn kl_divergence<S: Scalar>(tape: &mut Tape<S>, q: VaePosterior) -> Result<Var> {
    let mu2 = tape.square(q.mu);
    let var = tape.exp(q.log_var);
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, q.log_var)?;
    let one = tape.constant(Tensor::scalar(S::one()));
    let t = tape.sub(t, one)?;
    let m = tape.mean(t);
    Ok(tape.scale(m, S::of(0.5)))
}

/// Summed diagonal-Gaussian KL against `N(0, I)`.
pub fn kl_diag(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}
