//! Continuous latents, forward noising, the graph-conditioned denoiser,
//! end-to-end training and DDPM/DDIM sampling.

mod checkpoint;
mod diffusion;
mod net;
mod optim;
mod sample;
pub mod tape;
mod train;

pub use checkpoint::Checkpoint;
pub use diffusion::{forward_noise, position_alpha_bars, posterior_coeffs, PosteriorCoeffs};
pub use net::{round, sinusoid, Cond, Denoise, Net, Params, Rounded};
pub use optim::{lr_at, AdamW};
pub use sample::{ddim_timesteps, sample_ddim, sample_ddpm, InferenceSchedule, SampleOutput, Sampler};
pub use train::{
    estimate_difficulty, loss_e2e, prepare_examples, train, DifficultyConfig, Grads, LossBreakdown, StepLog,
    TrainEvent, TrainExample,
};

use crate::error::{Error, Result};
use crate::schedule::{MappingConfig, DEFAULT_FLOOR, DEFAULT_SQRT_OFFSET};
use serde::{Deserialize, Serialize};

/// Denoiser shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    /// Target length `N_max`.
    pub n_max: usize,
    /// Serialized-graph length.
    pub g_max: usize,
    /// Use the token embedding table as the rounding projection.
    pub tie_weights: bool,
}

impl ModelConfig {
    pub fn small(vocab: usize, n_max: usize, g_max: usize) -> Self {
        ModelConfig { vocab, d: 32, heads: 4, enc_layers: 2, dec_layers: 2, ffn: 64, n_max, g_max, tie_weights: true }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.vocab == 0 || self.d == 0 || self.heads == 0 || self.ffn == 0 || self.n_max == 0 || self.g_max == 0 {
            return bad("model dimensions must be positive");
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad("d must be divisible by heads");
        }
        if self.dec_layers == 0 {
            return bad("need at least one decoder layer");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub sqrt_offset: f64,
    pub floor: f64,
    pub k_up: usize,
    pub k_win: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip: f64,
    pub batch: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub n_mc: usize,
    pub mapping: MappingConfig,
    /// Turn off to train with the baseline schedule only.
    pub graph_aware: bool,
    /// Alias cap used when aligning training targets.
    pub alias_k: usize,
    /// Emit intermediate checkpoints every this many steps.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            sqrt_offset: DEFAULT_SQRT_OFFSET,
            floor: DEFAULT_FLOOR,
            k_up: 20_000,
            k_win: 200,
            lr: 1e-4,
            warmup: 10_000,
            weight_decay: 0.0,
            clip: 1.0,
            batch: 128,
            total_steps: 200_000,
            seed: 0,
            n_mc: 8,
            mapping: MappingConfig::default(),
            graph_aware: true,
            alias_k: 3,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps < 2 {
            return bad("T must be at least 2".into());
        }
        if self.k_up == 0 || self.k_win == 0 || self.batch == 0 || self.total_steps == 0 || self.n_mc == 0 {
            return bad("k_up, k_win, batch, total_steps and n_mc must be positive".into());
        }
        if self.graph_aware && self.k_up > self.total_steps {
            log::warn!("k_up = {} exceeds total steps {}; schedules stay at the baseline", self.k_up, self.total_steps);
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) || self.weight_decay < 0.0 {
            return bad(format!("bad optimizer settings lr={} clip={} wd={}", self.lr, self.clip, self.weight_decay));
        }
        if self.k_win > self.steps {
            return bad(format!("k_win {} exceeds T {}", self.k_win, self.steps));
        }
        Ok(())
    }
}
