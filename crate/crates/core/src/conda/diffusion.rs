use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::vae::gaussian;
use super::{CondaError, Result};
use crate::nn::{Activation, Mlp};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Width of the sinusoidal step embedding fed to the denoiser.
pub const STEP_EMBED_DIM: usize = 32;

/// Which end of the sequence is noised and regenerated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    /// Rows `[0, diff_len)` are diffused; the rest is the condition.
    #[default]
    DiffPrefix,
    /// Rows `[L − diff_len, L)` are diffused.
    DiffSuffix,
}

impl FromStr for Orientation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "prefix" => Ok(Self::DiffPrefix),
            "suffix" => Ok(Self::DiffSuffix),
            _ => Err(format!("unknown orientation `{s}` (expected prefix|suffix)")),
        }
    }
}

impl std::fmt::Display for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DiffPrefix => "prefix",
            Self::DiffSuffix => "suffix",
        })
    }
}

/// Split of an `L × d` latent into diffused and conditioning rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentLayout {
    pub len: usize,
    pub diff_len: usize,
    pub latent: usize,
    pub orientation: Orientation,
}

impl LatentLayout {
    pub fn new(len: usize, diff_len: usize, latent: usize, orientation: Orientation) -> Result<Self> {
        if diff_len == 0 || diff_len >= len {
            return Err(CondaError::Shape(format!("diff_len {diff_len} must lie in 1..{len}")));
        }
        Ok(Self {
            len,
            diff_len,
            latent,
            orientation,
        })
    }

    pub fn cond_len(&self) -> usize {
        self.len - self.diff_len
    }

    pub fn diff_rows(&self) -> std::ops::Range<usize> {
        match self.orientation {
            Orientation::DiffPrefix => 0..self.diff_len,
            Orientation::DiffSuffix => self.cond_len()..self.len,
        }
    }

    pub fn cond_rows(&self) -> std::ops::Range<usize> {
        match self.orientation {
            Orientation::DiffPrefix => self.diff_len..self.len,
            Orientation::DiffSuffix => 0..self.cond_len(),
        }
    }

    fn check<S: Scalar>(&self, tape: &Tape<S>, x: Var) -> Result<usize> {
        let shape = tape.shape(x);
        let r = shape.len();
        if r < 2 || shape[r - 2] != self.len || shape[r - 1] != self.latent {
            return Err(CondaError::Shape(format!(
                "latent of shape {shape:?}, expected [.., {}, {}]",
                self.len, self.latent
            )));
        }
        Ok(r - 2)
    }

    /// `(x^diff, x^cond)`.
    pub fn split<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<(Var, Var)> {
        let axis = self.check(tape, x)?;
        let (d, c) = (self.diff_rows(), self.cond_rows());
        Ok((tape.slice(x, axis, d.start, d.end)?, tape.slice(x, axis, c.start, c.end)?))
    }

    pub fn join<S: Scalar>(&self, tape: &mut Tape<S>, diff: Var, cond: Var) -> Result<Var> {
        let axis = tape.shape(diff).len() - 2;
        let parts = match self.orientation {
            Orientation::DiffPrefix => [diff, cond],
            Orientation::DiffSuffix => [cond, diff],
        };
        Ok(tape.concat(&parts, axis)?)
    }
}

/// `[sin(n·f_0), cos(n·f_0), …]` with `f_i = 10000^(−i / (dim/2))`.
pub fn step_embedding(n: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let f = 10000f64.powf(-(i as f64) / half as f64);
        out.push((n as f64 * f).sin());
        out.push((n as f64 * f).cos());
    }
    out.resize(dim, 0.0);
    out
}

/// `f_θ`: MLP over `[flat x_n^diff ‖ flat x_0^cond ‖ step embedding]`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub mlp: Mlp,
    pub layout: LatentLayout,
}

impl Denoiser {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, layout: LatentLayout, rng: &mut R) -> Self {
        let d = layout.latent;
        let out = layout.diff_len * d;
        let input = out + layout.cond_len() * d + STEP_EMBED_DIM;
        let hidden = 4 * out;
        let mlp = Mlp::new(store, "conda/theta", &[input, hidden, hidden, out], Activation::Gelu, rng);
        Self { mlp, layout }
    }

    /// Predicts the clean diffused rows. `steps` holds one step per batch
    /// element, or a single step shared by the batch.
    pub fn predict<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x_diff: Var,
        cond: Var,
        steps: &[usize],
    ) -> Result<Var> {
        let l = &self.layout;
        let d = l.latent;
        let sd = tape.shape(x_diff).to_vec();
        let sc = tape.shape(cond).to_vec();
        let r = sd.len();
        if r < 2 || sd[r - 2..] != [l.diff_len, d] || sc.len() != r || sc[r - 2..] != [l.cond_len(), d] || sd[..r - 2] != sc[..r - 2]
        {
            return Err(CondaError::Shape(format!("denoiser inputs {sd:?} and {sc:?}")));
        }
        let batch: usize = sd[..r - 2].iter().product();
        let emb = step_rows::<S>(steps, batch)?;
        let xf = tape.reshape(x_diff, &[batch, l.diff_len * d])?;
        let cf = tape.reshape(cond, &[batch, l.cond_len() * d])?;
        let e = tape.constant(emb);
        let input = tape.concat_last(&[xf, cf, e])?;
        let y = self.mlp.forward(tape, store, input)?;
        Ok(tape.reshape(y, &sd)?)
    }
}

fn step_rows<S: Scalar>(steps: &[usize], batch: usize) -> Result<Tensor<S>> {
    if steps.len() != 1 && steps.len() != batch {
        return Err(CondaError::Shape(format!("{} steps for a batch of {batch}", steps.len())));
    }
    let mut data = Vec::with_capacity(batch * STEP_EMBED_DIM);
    for b in 0..batch {
        let n = steps[if steps.len() == 1 { 0 } else { b }];
        data.extend(step_embedding(n, STEP_EMBED_DIM).into_iter().map(S::of));
    }
    Ok(Tensor::new([batch, STEP_EMBED_DIM], data)?)
}

/// Per-batch-element coefficient shaped to broadcast against `[.., rows, d]`.
fn coef<S: Scalar>(tape: &mut Tape<S>, like: Var, values: &[f64]) -> Result<Var> {
    let shape = tape.shape(like);
    let r = shape.len();
    let batch: usize = shape[..r - 2].iter().product();
    if values.len() == 1 {
        return Ok(tape.constant(Tensor::scalar(S::of(values[0]))));
    }
    if values.len() != batch {
        return Err(CondaError::Shape(format!("{} coefficients for a batch of {batch}", values.len())));
    }
    let mut cshape = shape[..r - 2].to_vec();
    cshape.extend([1, 1]);
    Ok(tape.constant(Tensor::from_f64(cshape, values)?))
}

/// `√ᾱ_n · x_0^diff + √(1 − ᾱ_n) · ε` per batch element; `eps` defaults to fresh noise.
pub fn forward_diffuse<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    x0_diff: Var,
    steps: &[usize],
    schedule: &NoiseSchedule,
    eps: Option<Tensor<S>>,
    rng: &mut R,
) -> Result<Var> {
    for &n in steps {
        schedule.check_step(n)?;
    }
    let eps = match eps {
        Some(e) if e.shape() == tape.shape(x0_diff) => e,
        Some(e) => {
            return Err(CondaError::Shape(format!(
                "noise {:?} vs latent {:?}",
                e.shape(),
                tape.shape(x0_diff)
            )))
        }
        None => gaussian(tape.shape(x0_diff), rng),
    };
    let signal: Vec<f64> = steps.iter().map(|&n| schedule.alpha_bar(n).sqrt()).collect();
    let noise: Vec<f64> = steps.iter().map(|&n| (1.0 - schedule.alpha_bar(n)).sqrt()).collect();
    let a = coef(tape, x0_diff, &signal)?;
    let b = coef(tape, x0_diff, &noise)?;
    let e = tape.constant(eps);
    let xs = tape.mul(x0_diff, a)?;
    let es = tape.mul(e, b)?;
    Ok(tape.add(xs, es)?)
}

/// One forward transition `√α_n · x_{n−1} + √β_n · ε` on plain values.
pub fn forward_step<R: Rng + ?Sized>(x_prev: &[f64], n: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<Vec<f64>> {
    schedule.check_step(n)?;
    let (a, b) = (schedule.alpha(n).sqrt(), schedule.beta(n).sqrt());
    let eps: Tensor<f64> = gaussian(&[x_prev.len()], rng);
    Ok(x_prev.iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect())
}

/// `x_{n−1}` from the posterior mean; noise `√β̃_n · ε` is added only for `n ≥ 2`.
pub fn posterior_step<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    x_n: Var,
    x0_hat: Var,
    n: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var> {
    schedule.check_step(n)?;
    let (cn, c0) = schedule.posterior_coefs(n);
    let a = tape.scale(x_n, S::of(cn));
    let b = tape.scale(x0_hat, S::of(c0));
    let mean = tape.add(a, b)?;
    if n == 1 {
        return Ok(mean);
    }
    let eps: Tensor<S> = gaussian(tape.shape(mean), rng);
    let e = tape.constant(eps.map(|v| v * S::of(schedule.beta_tilde(n).sqrt())));
    Ok(tape.add(mean, e)?)
}

/// Noises the diffused rows to `target` and denoises back to step 0,
/// conditioning every step on the untouched condition rows.
#[allow(clippy::too_many_arguments)]
pub fn reverse_sample<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    denoiser: &Denoiser,
    x0: Var,
    schedule: &NoiseSchedule,
    target: usize,
    rng: &mut R,
) -> Result<Var> {
    schedule.check_step(target)?;
    let (diff, cond) = denoiser.layout.split(tape, x0)?;
    let mut x = forward_diffuse(tape, diff, &[target], schedule, None, rng)?;
    for n in (1..=target).rev() {
        let x0_hat = denoiser.predict(tape, store, x, cond, &[n])?;
        x = posterior_step(tape, x, x0_hat, n, schedule, rng)?;
    }
    denoiser.layout.join(tape, x, cond)
}

/// Batch mean of `‖x_0^diff − f_θ(x_n^diff, x_0^cond, n)‖²` with `n ~ U{1..N}` per element.
pub fn diffusion_loss<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    denoiser: &Denoiser,
    x0: Var,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.shape(x0).to_vec();
    let batch: usize = shape[..shape.len().saturating_sub(2)].iter().product();
    let steps: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=schedule.steps)).collect();
    diffusion_loss_at(tape, store, denoiser, x0, schedule, &steps, None, rng)
}

/// [`diffusion_loss`] with fixed steps and, optionally, fixed noise.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss_at<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    denoiser: &Denoiser,
    x0: Var,
    schedule: &NoiseSchedule,
    steps: &[usize],
    eps: Option<Tensor<S>>,
    rng: &mut R,
) -> Result<Var> {
    let (diff, cond) = denoiser.layout.split(tape, x0)?;
    let shape = tape.shape(x0);
    let batch: usize = shape[..shape.len() - 2].iter().product();
    let xn = forward_diffuse(tape, diff, steps, schedule, eps, rng)?;
    let pred = denoiser.predict(tape, store, xn, cond, steps)?;
    let err = tape.sub(diff, pred)?;
    let sq = tape.square(err);
    let total = tape.sum(sq);
    Ok(tape.scale(total, S::of(1.0 / batch as f64)))
}
