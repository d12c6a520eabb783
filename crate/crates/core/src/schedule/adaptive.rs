//! Difficulty-driven token-wise schedules.
//!
//! Per-token difficulty curves are averaged over fixed windows of diffusion
//! steps, normalized by the per-window extrema across aligned tokens and mapped
//! to one per-step coefficient per window. The first window always keeps the
//! baseline coefficients. Cumulative schedules are rebuilt by products, so every
//! result is a valid schedule by construction.

use super::{per_step, CumulativeSchedule};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

/// Mean per-step denoising error of one vocabulary token over `t = 1..=T`
/// (index `t − 1`), pooled over `count` aligned occurrences.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyProfile {
    pub losses: Vec<f64>,
    pub count: u64,
}

/// Profiles keyed by vocabulary token id.
pub type Profiles = BTreeMap<u32, DifficultyProfile>;

impl DifficultyProfile {
    pub fn new(losses: Vec<f64>, count: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::OutOfRange("profile count must be at least 1".into()));
        }
        if losses.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::OutOfRange("difficulty values must be finite and non-negative".into()));
        }
        Ok(DifficultyProfile { losses, count })
    }

    /// Count-weighted mean of two profiles.
    pub fn merge(&self, other: &DifficultyProfile) -> Result<DifficultyProfile> {
        if self.losses.len() != other.losses.len() {
            return Err(Error::Shape("profiles cover different horizons".into()));
        }
        let n = (self.count + other.count) as f64;
        let (wa, wb) = (self.count as f64 / n, other.count as f64 / n);
        Ok(DifficultyProfile {
            losses: self.losses.iter().zip(&other.losses).map(|(a, b)| wa * a + wb * b).collect(),
            count: self.count + other.count,
        })
    }
}

/// Non-overlapping windows `W_m = {(m−1)K+1, …, min(mK, T)}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub steps: usize,
    pub k_win: usize,
}

impl WindowSpec {
    pub fn new(steps: usize, k_win: usize) -> Result<Self> {
        if steps == 0 || k_win == 0 {
            return Err(Error::OutOfRange("T and K_win must be positive".into()));
        }
        Ok(WindowSpec { steps, k_win })
    }

    /// `K_win = T / 10` (at least 1).
    pub fn default_for(steps: usize) -> Self {
        WindowSpec { steps, k_win: (steps / 10).max(1) }
    }

    pub fn count(&self) -> usize {
        self.steps.div_ceil(self.k_win)
    }

    /// Endpoints `(t_{m−1}, t_m)` of window `m` (1-based); the window is `t_{m−1}+1 ..= t_m`.
    pub fn bounds(&self, m: usize) -> (usize, usize) {
        ((m - 1) * self.k_win, (m * self.k_win).min(self.steps))
    }

    pub fn window_of(&self, t: usize) -> usize {
        (t - 1) / self.k_win + 1
    }
}

/// Shape function `φ: [0,1] → [0,1]`, monotone with `φ(0) = 0`, `φ(1) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Linear,
    Polynomial { p: f64 },
    Exponential { beta: f64 },
    Cosine,
}

impl Shape {
    /// The argument is clamped to `[0, 1]` first.
    pub fn apply(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match *self {
            Shape::Linear => u,
            Shape::Polynomial { p } => u.powf(p),
            Shape::Exponential { beta } => (beta * u).exp_m1() / beta.exp_m1(),
            Shape::Cosine => 0.5 * (1.0 - (PI * u).cos()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Shape::Linear => "linear".into(),
            Shape::Polynomial { p } => format!("polynomial:{p}"),
            Shape::Exponential { beta } => format!("exponential:{beta}"),
            Shape::Cosine => "cosine".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |default: f64| -> Result<f64> {
            arg.map_or(Ok(default), |a| a.parse().map_err(|_| Error::Config(format!("bad shape parameter {a:?}"))))
        };
        let shape = match name {
            "linear" => Shape::Linear,
            "polynomial" | "poly" => Shape::Polynomial { p: num(2.0)? },
            "exponential" | "exp" => Shape::Exponential { beta: num(3.0)? },
            "cosine" | "cos" => Shape::Cosine,
            other => return Err(Error::Config(format!("unknown mapping family {other:?}"))),
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Shape::Polynomial { p } if !(p >= 1.0) => Err(Error::Config(format!("polynomial p = {p} must be ≥ 1"))),
            Shape::Exponential { beta } if !(beta > 0.0) => {
                Err(Error::Config(format!("exponential beta = {beta} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

/// Loss-to-coefficient mapping settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingConfig {
    pub shape: Shape,
    pub tau: f64,
    /// Lower clip bound; `None` uses the smallest baseline per-step coefficient.
    pub alpha_min: Option<f64>,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig { shape: Shape::Linear, tau: 1e-8, alpha_min: None }
    }
}

/// Everything the mapping needs to know about one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowContext {
    /// Coefficient at the window end, `α_{t_m}` (the more-noising endpoint).
    pub alpha_end: f64,
    /// Coefficient at the window start, `α_{t_{m−1}}`.
    pub alpha_start: f64,
    pub loss_min: f64,
    pub loss_max: f64,
}

/// `clip(α_end + φ((x − ℓmin)/(ℓmax − ℓmin + τ))·(α_start − α_end), α_min, 1)`.
pub fn psi_map(x: f64, ctx: &WindowContext, shape: Shape, tau: f64, alpha_min: f64) -> f64 {
    let u = (x - ctx.loss_min) / (ctx.loss_max - ctx.loss_min + tau);
    let raw = ctx.alpha_end + shape.apply(u) * (ctx.alpha_start - ctx.alpha_end);
    raw.clamp(alpha_min, 1.0)
}

/// Window-averaged difficulties per token and per-window extrema across tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowStats {
    pub per_token: BTreeMap<u32, Vec<f64>>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn window_stats(profiles: &Profiles, spec: &WindowSpec) -> Result<WindowStats> {
    if profiles.is_empty() {
        return Err(Error::NoAlignedTokens);
    }
    let m_count = spec.count();
    let mut min = vec![f64::INFINITY; m_count];
    let mut max = vec![f64::NEG_INFINITY; m_count];
    let mut per_token = BTreeMap::new();
    for (&id, prof) in profiles {
        if prof.losses.len() != spec.steps {
            return Err(Error::Shape(format!(
                "profile for token {id} has {} steps, expected {}",
                prof.losses.len(),
                spec.steps
            )));
        }
        let means: Vec<f64> = (1..=m_count)
            .map(|m| {
                let (lo, hi) = spec.bounds(m);
                prof.losses[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect();
        for (m, &v) in means.iter().enumerate() {
            min[m] = min[m].min(v);
            max[m] = max[m].max(v);
        }
        per_token.insert(id, means);
    }
    Ok(WindowStats { per_token, min, max })
}

/// Geometric-mean per-step coefficient of each window,
/// `(ᾱ_{t_m} / ᾱ_{t_{m−1}})^{1/(t_m − t_{m−1})}`, for `m = 1..=M`.
pub fn window_endpoints(baseline: &CumulativeSchedule, spec: &WindowSpec) -> Vec<f64> {
    (1..=spec.count())
        .map(|m| {
            let (lo, hi) = spec.bounds(m);
            (baseline.at(hi) / baseline.at(lo)).powf(1.0 / (hi - lo) as f64)
        })
        .collect()
}

/// Per-step coefficients and the cumulative schedule they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSchedule {
    /// `α_{t,i}` for `t = 1..=T` (index `t − 1`).
    pub coeffs: Vec<f64>,
    pub cumulative: CumulativeSchedule,
}

impl TokenSchedule {
    pub fn from_coeffs(coeffs: Vec<f64>) -> Result<Self> {
        let cumulative = CumulativeSchedule::from_coeffs(&coeffs)?;
        Ok(TokenSchedule { coeffs, cumulative })
    }
}

/// Baseline schedule plus one learned schedule per aligned vocabulary token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWiseSchedule {
    pub baseline: CumulativeSchedule,
    pub per_token: BTreeMap<u32, TokenSchedule>,
    /// Lower clip bound actually used.
    pub alpha_min: f64,
}

impl TokenWiseSchedule {
    pub fn baseline_only(baseline: CumulativeSchedule) -> Self {
        let alpha_min = min_coeff(&baseline);
        TokenWiseSchedule { baseline, per_token: BTreeMap::new(), alpha_min }
    }

    pub fn steps(&self) -> usize {
        self.baseline.steps()
    }

    /// Schedule for a position holding `token`; unaligned positions use the baseline.
    pub fn lookup(&self, token: u32, aligned: bool) -> &CumulativeSchedule {
        if aligned {
            if let Some(s) = self.per_token.get(&token) {
                return &s.cumulative;
            }
        }
        &self.baseline
    }
}

fn min_coeff(baseline: &CumulativeSchedule) -> f64 {
    per_step(baseline).alpha.into_iter().fold(f64::INFINITY, f64::min)
}

/// Rebuilds token-wise schedules for `aligned` token ids from their difficulty profiles.
///
/// Window 1 copies the baseline per-step coefficients. For `m ≥ 2` the window
/// coefficient maps the token's window-averaged difficulty between the
/// geometric-mean coefficients of windows `m` and `m − 1`.
pub fn build_token_schedules(
    baseline: &CumulativeSchedule,
    aligned: &BTreeSet<u32>,
    profiles: &Profiles,
    spec: &WindowSpec,
    cfg: &MappingConfig,
) -> Result<TokenWiseSchedule> {
    if spec.steps != baseline.steps() {
        return Err(Error::Shape(format!("window spec T = {} but baseline T = {}", spec.steps, baseline.steps())));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    cfg.shape.validate()?;
    let alpha_min = cfg.alpha_min.unwrap_or_else(|| min_coeff(baseline));
    if !(alpha_min > 0.0 && alpha_min < 1.0) {
        return Err(Error::Config(format!("alpha_min = {alpha_min} must lie in (0, 1)")));
    }
    let mut out = TokenWiseSchedule { baseline: baseline.clone(), per_token: BTreeMap::new(), alpha_min };
    if aligned.is_empty() {
        return Ok(out);
    }
    let selected: Profiles = aligned
        .iter()
        .map(|id| {
            profiles
                .get(id)
                .map(|p| (*id, p.clone()))
                .ok_or_else(|| Error::Shape(format!("no difficulty profile for aligned token {id}")))
        })
        .collect::<Result<_>>()?;
    let stats = window_stats(&selected, spec)?;
    let base = per_step(baseline).alpha;
    let gm = window_endpoints(baseline, spec);
    let first_end = spec.bounds(1).1;

    for (&id, means) in &stats.per_token {
        let mut coeffs = base[..first_end].to_vec();
        for m in 2..=spec.count() {
            let (a, b) = (gm[m - 1], gm[m - 2]);
            let ctx = WindowContext {
                alpha_end: a.min(b),
                alpha_start: a.max(b),
                loss_min: stats.min[m - 1],
                loss_max: stats.max[m - 1],
            };
            let coeff = psi_map(means[m - 1], &ctx, cfg.shape, cfg.tau, alpha_min);
            let (lo, hi) = spec.bounds(m);
            coeffs.extend(std::iter::repeat_n(coeff, hi - lo));
        }
        out.per_token.insert(id, TokenSchedule::from_coeffs(coeffs)?);
    }
    Ok(out)
}

/// Occurrence-weighted per-step mean of learned schedules, used at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSchedule(pub CumulativeSchedule);

pub fn anchor_from(schedules: &TokenWiseSchedule, counts: &BTreeMap<u32, u64>) -> Result<AnchorSchedule> {
    let total: u64 = schedules.per_token.keys().map(|id| counts.get(id).copied().unwrap_or(0)).sum();
    if total == 0 {
        return Err(Error::NoAlignedTokens);
    }
    let mut values = vec![0.0; schedules.steps() + 1];
    for (id, sched) in &schedules.per_token {
        let c = counts.get(id).copied().unwrap_or(0);
        if c == 0 {
            continue;
        }
        let w = c as f64 / total as f64;
        for (a, v) in values.iter_mut().zip(sched.cumulative.values()) {
            *a += w * v;
        }
    }
    values[0] = 1.0;
    // rounding in the weighted sum can break monotonicity by an ulp
    for t in 1..values.len() {
        values[t] = values[t].min(values[t - 1]);
    }
    Ok(AnchorSchedule(CumulativeSchedule::new(values)?))
}
