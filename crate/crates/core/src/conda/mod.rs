//! Latent diffusion augmenter: a row-wise VAE wrapped around a conditional
//! partial-noising diffusion model over neighbor-embedding sequences.

mod diffusion;
mod schedule;
mod vae;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

pub use diffusion::{
    diffusion_loss, diffusion_loss_at, forward_diffuse, forward_step, posterior_step, reverse_sample,
    step_embedding, Denoiser, LatentLayout, Orientation, STEP_EMBED_DIM,
};
pub use schedule::{build_schedule, linear_noise_level, NoiseSchedule};
pub use vae::{gaussian, kl_diag, kl_divergence, Vae, VaeOutput, VaePosterior};

/// Name prefix of every augmenter parameter.
pub const PREFIX: &str = "conda/";

#[derive(Debug, Error)]
pub enum CondaError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("diffusion step {n} outside 1..={steps}")]
    Step { n: usize, steps: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameters under `{0}` must be frozen")]
    NotFrozen(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CondaError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondaConfig {
    /// Embedding width `D` of the incoming sequence.
    pub dim: usize,
    /// Latent width `d`.
    pub latent: usize,
    pub seq_len: usize,
    pub diff_len: usize,
    pub steps: usize,
    pub k: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub lambda: f64,
    pub orientation: Orientation,
    /// Step the diffused rows are noised to before the reverse pass; `None` means `N`.
    pub aug_step: Option<usize>,
}

impl CondaConfig {
    /// Defaults: `d = max(D/8, 4)`, `N = 50`, `k = 1e-4`, bounds 0.1/0.9, `λ = 1`.
    pub fn new(dim: usize, seq_len: usize, diff_len: usize) -> Self {
        Self {
            dim,
            latent: (dim / 8).max(4),
            seq_len,
            diff_len,
            steps: 50,
            k: 1e-4,
            alpha_min: 0.1,
            alpha_max: 0.9,
            lambda: 1.0,
            orientation: Orientation::DiffPrefix,
            aug_step: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CondaLoss {
    pub total: Var,
    pub diffusion: Var,
    pub vae: Var,
    pub recon: Var,
    pub kl: Var,
}

#[derive(Clone, Debug)]
pub struct Conda {
    pub config: CondaConfig,
    pub schedule: NoiseSchedule,
    pub vae: Vae,
    pub denoiser: Denoiser,
}

impl Conda {
    /// Registers `conda/phi`, `conda/theta` and `conda/psi` weights.
    pub fn new<S: Scalar, R: Rng + ?Sized>(config: CondaConfig, store: &mut ParamStore<S>, rng: &mut R) -> Result<Self> {
        if config.latent >= config.dim {
            return Err(CondaError::Shape(format!(
                "latent width {} must be below embedding width {}",
                config.latent, config.dim
            )));
        }
        let schedule = build_schedule(config.steps, config.k, config.alpha_min, config.alpha_max)?;
        if let Some(n) = config.aug_step {
            schedule.check_step(n)?;
        }
        let layout = LatentLayout::new(config.seq_len, config.diff_len, config.latent, config.orientation)?;
        let vae = Vae::new(store, config.dim, config.latent, rng);
        let denoiser = Denoiser::new(store, layout, rng);
        Ok(Self {
            config,
            schedule,
            vae,
            denoiser,
        })
    }

    pub fn layout(&self) -> LatentLayout {
        self.denoiser.layout
    }

    /// `diffusion_loss(z) + λ · vae_loss(s)` where `z` is the reparameterized
    /// latent of `s`. Every `ctdg/` parameter must be frozen.
    pub fn loss<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        s: Var,
        rng: &mut R,
    ) -> Result<CondaLoss> {
        if !store.is_frozen(crate::model::PREFIX) {
            return Err(CondaError::NotFrozen(crate::model::PREFIX.into()));
        }
        let v = self.vae.loss(tape, store, s, rng)?;
        let diffusion = diffusion_loss(tape, store, &self.denoiser, v.z, &self.schedule, rng)?;
        let weighted = tape.scale(v.loss, S::of(self.config.lambda));
        let total = tape.add(diffusion, weighted)?;
        Ok(CondaLoss {
            total,
            diffusion,
            vae: v.loss,
            recon: v.recon,
            kl: v.kl,
        })
    }

    /// Encodes `s` to its posterior mean, regenerates the diffused rows and decodes.
    pub fn augment<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        s: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let (_, z) = self.vae.encode(tape, store, s, false, rng)?;
        let target = self.config.aug_step.unwrap_or(self.config.steps);
        let z_hat = reverse_sample(tape, store, &self.denoiser, z, &self.schedule, target, rng)?;
        self.vae.decode(tape, store, z_hat)
    }

    /// Schedule and shape settings as a flat `f32` tensor for checkpoints:
    /// `[N, k, alpha_min, alpha_max, diff_len, d, λ, L, D]`.
    pub fn header<S: Scalar>(&self) -> Tensor<S> {
        let c = &self.config;
        let v = [
            c.steps as f64,
            c.k,
            c.alpha_min,
            c.alpha_max,
            c.diff_len as f64,
            c.latent as f64,
            c.lambda,
            c.seq_len as f64,
            c.dim as f64,
        ];
        Tensor::from_f64([v.len()], &v).expect("shape matches data")
    }
}
