//! DDPM and DDIM reverse samplers with per-position schedule blending.

use super::diffusion::posterior_coeffs;
use super::net::{round_masked, Cond, Denoise};
use crate::error::{Error, Result};
use crate::kg::{TokenSequence, PAD_ID};
use crate::schedule::{blend, AnchorSchedule, CumulativeSchedule};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Baseline plus optional anchor; positions mix them by their graph attention mass.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceSchedule {
    pub baseline: CumulativeSchedule,
    pub anchor: Option<AnchorSchedule>,
}

impl InferenceSchedule {
    pub fn new(baseline: CumulativeSchedule, anchor: Option<AnchorSchedule>) -> Result<Self> {
        match &anchor {
            Some(a) if a.0.steps() != baseline.steps() => {
                Err(Error::Shape(format!("anchor T = {} but baseline T = {}", a.0.steps(), baseline.steps())))
            }
            None => {
                log::warn!("no anchor schedule; sampling with the baseline only");
                Ok(InferenceSchedule { baseline, anchor })
            }
            _ => Ok(InferenceSchedule { baseline, anchor }),
        }
    }

    pub fn steps(&self) -> usize {
        self.baseline.steps()
    }

    /// `ᾱ_t` for a position with graph attention mass `w`.
    pub fn at(&self, w: f64, t: usize) -> Result<f64> {
        match &self.anchor {
            Some(a) => blend(w, self.baseline.at(t), a.0.at(t)),
            None => Ok(self.baseline.at(t)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    Ddpm,
    Ddim { steps: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub sequences: Vec<TokenSequence>,
    /// Number of denoiser invocations for the whole batch.
    pub calls: usize,
}

fn initial_latent(emb: &Array2<f64>, cond: &Cond, rng: &mut impl Rng) -> Array2<f64> {
    let mut z = Array2::zeros((cond.target_mask.len(), emb.ncols()));
    for (mut row, &real) in z.rows_mut().into_iter().zip(&cond.target_mask) {
        if real {
            row.mapv_inplace(|_| rng.sample(StandardNormal));
        } else {
            row.assign(&emb.row(PAD_ID as usize));
        }
    }
    z
}

fn finish(zhat: &Array2<f64>, round_w: &Array2<f64>, cond: &Cond, calls: usize) -> SampleOutput {
    let ids = round_masked(zhat, round_w, &cond.target_mask);
    let n = ids.len() / cond.batch.max(1);
    let sequences = ids
        .chunks(n.max(1))
        .zip(cond.target_mask.chunks(n.max(1)))
        .map(|(ids, mask)| TokenSequence { ids: ids.to_vec(), mask: mask.to_vec() })
        .collect();
    SampleOutput { sequences, calls }
}

fn check_finite(z: &Array2<f64>) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical("non-finite latent during sampling".into()))
    }
}

/// Ancestral sampling over `t = T..1`. Each step uses the attention record of
/// the previous denoiser call; the first step uses `w = 0`.
pub fn sample_ddpm(
    den: &impl Denoise,
    emb: &Array2<f64>,
    round_w: &Array2<f64>,
    cond: &Cond,
    sched: &InferenceSchedule,
    rng: &mut impl Rng,
) -> Result<SampleOutput> {
    let steps = sched.steps();
    let mut z = initial_latent(emb, cond, rng);
    let mut w = vec![0.0; z.nrows()];
    let mut zhat = z.clone();
    let mut calls = 0;
    for t in (1..=steps).rev() {
        let (est, w_new) = den.denoise(&z, &vec![t; cond.batch], cond)?;
        calls += 1;
        for (r, &real) in cond.target_mask.iter().enumerate() {
            if !real {
                continue;
            }
            let c = posterior_coeffs(sched.at(w[r], t)?, sched.at(w[r], t - 1)?)?;
            let sd = if t > 1 { c.var.sqrt() } else { 0.0 };
            for j in 0..z.ncols() {
                let noise = if t > 1 { rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                z[[r, j]] = c.u * z[[r, j]] + c.e * est[[r, j]] + sd * noise;
            }
        }
        check_finite(&z)?;
        zhat = est;
        w = w_new;
    }
    Ok(finish(&zhat, round_w, cond, calls))
}

/// `t_k = ⌊(k + 1)·T / T′⌋` for `k = 0..T′`, increasing.
pub fn ddim_timesteps(steps: usize, sub: usize) -> Result<Vec<usize>> {
    if sub == 0 || sub > steps {
        return Err(Error::OutOfRange(format!("DDIM steps {sub} outside 1..={steps}")));
    }
    Ok((0..sub).map(|k| (k + 1) * steps / sub).collect())
}

/// Deterministic (`η = 0`) sampling over `T′` evenly spaced timesteps.
/// The only randomness is the initial latent.
#[allow(clippy::too_many_arguments)]
pub fn sample_ddim(
    den: &impl Denoise,
    emb: &Array2<f64>,
    round_w: &Array2<f64>,
    cond: &Cond,
    sched: &InferenceSchedule,
    sub: usize,
    rng: &mut impl Rng,
) -> Result<SampleOutput> {
    let ts = ddim_timesteps(sched.steps(), sub)?;
    let mut z = initial_latent(emb, cond, rng);
    let mut w = vec![0.0; z.nrows()];
    let mut zhat = z.clone();
    let mut calls = 0;
    for k in (0..ts.len()).rev() {
        let t = ts[k];
        let t_prev = if k == 0 { 0 } else { ts[k - 1] };
        let (est, w_new) = den.denoise(&z, &vec![t; cond.batch], cond)?;
        calls += 1;
        for (r, &real) in cond.target_mask.iter().enumerate() {
            if !real {
                continue;
            }
            let (ab_t, ab_p) = (sched.at(w[r], t)?, sched.at(w[r], t_prev)?);
            if !(ab_t < 1.0) {
                return Err(Error::OutOfRange(format!("alpha_bar_{t} = 1 leaves no noise to remove")));
            }
            let (st, sp) = (ab_t.sqrt(), ab_p.sqrt());
            let (nt, np) = ((1.0 - ab_t).sqrt(), (1.0 - ab_p).sqrt());
            for j in 0..z.ncols() {
                let eps = (z[[r, j]] - st * est[[r, j]]) / nt;
                z[[r, j]] = sp * est[[r, j]] + np * eps;
            }
        }
        check_finite(&z)?;
        zhat = est;
        w = w_new;
    }
    Ok(finish(&zhat, round_w, cond, calls))
}
