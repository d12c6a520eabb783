//! Cumulative noise schedules, difficulty-driven token-wise schedules and
//! the inference-time anchor/blend schedules. All arithmetic is `f64`.

mod adaptive;
mod io;

pub use adaptive::{
    anchor_from, build_token_schedules, psi_map, window_endpoints, window_stats, AnchorSchedule,
    DifficultyProfile, MappingConfig, Profiles, Shape, TokenSchedule, TokenWiseSchedule, WindowContext,
    WindowSpec, WindowStats,
};
pub use io::{read_schedule_table, write_schedule_table, ScheduleHeader};

use crate::error::{Error, Result};

/// Default offset `s` of the sqrt schedule.
pub const DEFAULT_SQRT_OFFSET: f64 = 1e-4;
/// Default positivity floor for cumulative values.
pub const DEFAULT_FLOOR: f64 = 1e-4;

/// `ᾱ_0..=ᾱ_T` with `ᾱ_0 = 1`, strictly positive and non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeSchedule {
    values: Vec<f64>,
}

impl CumulativeSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidSchedule(m));
        if values.len() < 2 {
            return bad("need at least t = 0 and t = 1".into());
        }
        if values[0] != 1.0 {
            return bad(format!("alpha_bar_0 = {} (must be 1)", values[0]));
        }
        for (t, w) in values.windows(2).enumerate() {
            if !(w[1] > 0.0 && w[1].is_finite()) {
                return bad(format!("alpha_bar_{} = {} is not positive", t + 1, w[1]));
            }
            if w[1] > w[0] {
                return bad(format!("increases at t = {}", t + 1));
            }
        }
        Ok(CumulativeSchedule { values })
    }

    /// Builds the cumulative product of per-step coefficients with `ᾱ_0 = 1`.
    pub fn from_coeffs(coeffs: &[f64]) -> Result<Self> {
        let mut values = Vec::with_capacity(coeffs.len() + 1);
        let mut acc = 1.0;
        values.push(acc);
        for &a in coeffs {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidSchedule(format!("per-step coefficient {a} outside (0, 1]")));
            }
            acc *= a;
            values.push(acc);
        }
        Self::new(values)
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn at(&self, t: usize) -> f64 {
        self.values[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `α_t = ᾱ_t / ᾱ_{t-1}` and `β_t = 1 − α_t` for `t = 1..=T` (index `t − 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct PerStepCoeffs {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn per_step(sched: &CumulativeSchedule) -> PerStepCoeffs {
    let alpha: Vec<f64> = sched.values.windows(2).map(|w| w[1] / w[0]).collect();
    let beta = alpha.iter().map(|a| 1.0 - a).collect();
    PerStepCoeffs { alpha, beta }
}

/// `ᾱ_t = max(1 − sqrt(t/T + s), floor)` with `ᾱ_0 = 1`.
pub fn sqrt_baseline(steps: usize, s: f64, floor: f64) -> Result<CumulativeSchedule> {
    if steps == 0 {
        return Err(Error::OutOfRange("T must be at least 1".into()));
    }
    if !(s > 0.0) {
        return Err(Error::OutOfRange(format!("sqrt offset s = {s} must be positive")));
    }
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::OutOfRange(format!("floor {floor} must lie in (0, 1)")));
    }
    let values = (0..=steps)
        .map(|t| {
            if t == 0 {
                1.0
            } else {
                (1.0 - (t as f64 / steps as f64 + s).sqrt()).max(floor)
            }
        })
        .collect();
    CumulativeSchedule::new(values)
}

/// Piecewise-linear interpolation of an explicit `(t, ᾱ)` grid over `0..=T`.
/// A grid without `t = 0` gets `(0, 1)` prepended; the last point must be `t = T`.
pub fn table_schedule(grid: &[(usize, f64)], steps: usize) -> Result<CumulativeSchedule> {
    let mut pts: Vec<(usize, f64)> = grid.to_vec();
    if pts.first().map(|p| p.0) != Some(0) {
        pts.insert(0, (0, 1.0));
    }
    for w in pts.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::InvalidSchedule("grid times must be strictly increasing".into()));
        }
        if w[1].1 > w[0].1 {
            return Err(Error::InvalidSchedule(format!("grid increases between t = {} and t = {}", w[0].0, w[1].0)));
        }
    }
    if pts.last().map(|p| p.0) != Some(steps) {
        return Err(Error::InvalidSchedule(format!("grid must end at t = {steps}")));
    }
    let mut values = Vec::with_capacity(steps + 1);
    for w in pts.windows(2) {
        let ((t0, a0), (t1, a1)) = (w[0], w[1]);
        let start = if values.is_empty() { t0 } else { t0 + 1 };
        for t in start..=t1 {
            values.push(if t == t1 {
                a1
            } else if t == t0 {
                a0
            } else {
                a0 + (a1 - a0) * (t - t0) as f64 / (t1 - t0) as f64
            });
        }
    }
    CumulativeSchedule::new(values)
}

/// `SNR = ᾱ / (1 − ᾱ)`.
pub fn snr(alpha_bar: f64) -> Result<f64> {
    if alpha_bar == 1.0 {
        return Err(Error::InfiniteSnr);
    }
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::OutOfRange(format!("alpha_bar {alpha_bar} outside (0, 1)")));
    }
    Ok(alpha_bar / (1.0 - alpha_bar))
}

/// `(1 − w)·base + w·anchor`.
pub fn blend(w: f64, base: f64, anchor: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::OutOfRange(format!("attention weight {w} outside [0, 1]")));
    }
    Ok((1.0 - w) * base + w * anchor)
}
