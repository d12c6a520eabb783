//! The single-token worked example: a hand-specified baseline grid and
//! difficulty profile run through window statistics, the loss-to-coefficient
//! map and schedule reconstruction, compared cell by cell with the published
//! tables.

use crate::error::Result;
use crate::schedule::{
    build_token_schedules, psi_map, snr, table_schedule, window_endpoints, window_stats, CumulativeSchedule,
    DifficultyProfile, MappingConfig, Profiles, Shape, WindowContext, WindowSpec,
};
use std::collections::BTreeSet;
use std::fmt::Write as _;

pub const STEPS: usize = 2000;
pub const K_WIN: usize = 200;
pub const TAU: f64 = 1e-8;
pub const LOSS_MIN: f64 = 0.03;
pub const LOSS_MAX: f64 = 0.20;

/// Sampled baseline `ᾱ_t`.
pub const BASELINE_GRID: [(usize, f64); 10] = [
    (1, 0.999),
    (100, 0.980),
    (300, 0.940),
    (600, 0.880),
    (900, 0.780),
    (1200, 0.650),
    (1500, 0.520),
    (1700, 0.430),
    (1850, 0.360),
    (2000, 0.300),
];
pub const BASELINE_SNR: [f64; 10] = [999.0, 49.0, 15.7, 7.33, 3.55, 1.86, 1.08, 0.75, 0.56, 0.43];
/// Sampled difficulty of the hard token on the same grid.
pub const SAMPLED_LOSS: [f64; 10] = [0.020, 0.030, 0.050, 0.082, 0.078, 0.115, 0.160, 0.155, 0.185, 0.200];
/// Published adaptive `ᾱ` on the grid.
pub const ADAPTIVE_ROW: [f64; 10] = [0.999, 0.982, 0.947, 0.892, 0.804, 0.683, 0.555, 0.462, 0.392, 0.300];
/// Published adaptive SNR for `t ∈ {600, 900, 1200, 1500, 1700, 1850}`.
pub const ADAPTIVE_SNR: [(usize, f64); 6] =
    [(600, 8.25), (900, 4.10), (1200, 2.15), (1500, 1.25), (1700, 0.86), (1850, 0.64)];

/// `(m, α_{t_{m−1}}, α_{t_m}, ℓ̃_m, α̃_m)` as published.
pub const WINDOW_ROWS: [(usize, f64, f64, f64, f64); 7] = [
    (2, 0.9989, 0.9986, 0.045, 0.9988),
    (4, 0.9984, 0.9980, 0.080, 0.9983),
    (5, 0.9980, 0.9976, 0.095, 0.9979),
    (7, 0.9971, 0.9962, 0.130, 0.9969),
    (8, 0.9962, 0.9947, 0.155, 0.9958),
    (9, 0.9947, 0.9924, 0.175, 0.9941),
    (10, 0.9924, 0.9896, 0.195, 0.9918),
];

const HARD: u32 = 1;
const EASY: u32 = 2;
const HARDEST: u32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub got: f64,
    pub want: f64,
    pub tol: f64,
}

impl Check {
    fn new(name: impl Into<String>, got: f64, want: f64, tol: f64) -> Self {
        Check { name: name.into(), got, want, tol }
    }

    pub fn pass(&self) -> bool {
        (self.got - self.want).abs() <= self.tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowRow {
    pub m: usize,
    pub bounds: (usize, usize),
    pub loss: f64,
    /// Geometric-mean endpoints of the interpolated baseline.
    pub endpoints: (f64, f64),
    /// Map applied to the grid-derived endpoints.
    pub alpha: f64,
    /// Map applied to the published endpoints and difficulty, unclipped.
    pub alpha_published_ends: f64,
    pub published: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyReport {
    pub baseline: CumulativeSchedule,
    pub adaptive: CumulativeSchedule,
    pub windows: Vec<WindowRow>,
    pub baseline_snr: Vec<Check>,
    pub adaptive_row_snr: Vec<Check>,
    /// Reconstructed vs published adaptive `ᾱ`, informational.
    pub adaptive_cells: Vec<Check>,
    pub monotone: bool,
    pub starts_at_one: bool,
    /// First `t ∈ [K_win, T)` where the reconstruction falls below the baseline.
    pub first_violation: Option<(usize, f64)>,
}

impl ToyReport {
    pub fn dominates(&self) -> bool {
        self.first_violation.is_none()
    }

    pub fn shape_ok(&self) -> bool {
        self.monotone && self.starts_at_one && self.dominates()
    }

    pub fn all_pass(&self) -> bool {
        self.baseline_snr.iter().chain(&self.adaptive_row_snr).all(Check::pass) && self.shape_ok()
    }
}

/// Window averages for the hard token: published values where given, the
/// midpoint of the neighbours for windows 3 and 6, and the interpolated sampled
/// profile in window 1 (which the map never reads).
pub fn window_losses() -> Vec<f64> {
    let mut out = vec![f64::NAN; STEPS / K_WIN];
    for &(m, _, _, l, _) in &WINDOW_ROWS {
        out[m - 1] = l;
    }
    for m in 1..out.len() {
        if out[m].is_nan() {
            out[m] = 0.5 * (out[m - 1] + out[m + 1]);
        }
    }
    let first: f64 = (1..=K_WIN).map(sampled_loss).sum::<f64>() / K_WIN as f64;
    out[0] = first;
    out
}

fn sampled_loss(t: usize) -> f64 {
    let grid: Vec<(usize, f64)> = BASELINE_GRID.iter().map(|g| g.0).zip(SAMPLED_LOSS).collect();
    if t <= grid[0].0 {
        return grid[0].1;
    }
    let i = grid.iter().position(|g| g.0 >= t).expect("t within grid");
    let ((t0, a), (t1, b)) = (grid[i - 1], grid[i]);
    a + (b - a) * (t - t0) as f64 / (t1 - t0) as f64
}

fn profiles() -> Result<Profiles> {
    let per_step = |windows: &[f64]| windows.iter().flat_map(|&l| std::iter::repeat_n(l, K_WIN)).collect::<Vec<_>>();
    let mut p = Profiles::new();
    p.insert(HARD, DifficultyProfile::new(per_step(&window_losses()), 1)?);
    p.insert(EASY, DifficultyProfile::new(vec![LOSS_MIN; STEPS], 1)?);
    p.insert(HARDEST, DifficultyProfile::new(vec![LOSS_MAX; STEPS], 1)?);
    Ok(p)
}

pub fn toy_example() -> Result<ToyReport> {
    let baseline = table_schedule(&BASELINE_GRID, STEPS)?;
    let spec = WindowSpec::new(STEPS, K_WIN)?;
    let profiles = profiles()?;
    let stats = window_stats(&profiles, &spec)?;
    let cfg = MappingConfig { shape: Shape::Linear, tau: TAU, alpha_min: None };
    let aligned: BTreeSet<u32> = profiles.keys().copied().collect();
    let tw = build_token_schedules(&baseline, &aligned, &profiles, &spec, &cfg)?;
    let adaptive = tw.per_token[&HARD].cumulative.clone();
    let gm = window_endpoints(&baseline, &spec);

    let losses = &stats.per_token[&HARD];
    let windows = (2..=spec.count())
        .map(|m| {
            let published = WINDOW_ROWS.iter().find(|r| r.0 == m);
            let ctx = WindowContext {
                alpha_end: gm[m - 1].min(gm[m - 2]),
                alpha_start: gm[m - 1].max(gm[m - 2]),
                loss_min: stats.min[m - 1],
                loss_max: stats.max[m - 1],
            };
            let alpha = psi_map(losses[m - 1], &ctx, cfg.shape, TAU, tw.alpha_min);
            let alpha_published_ends = published.map_or(f64::NAN, |r| {
                let ctx = WindowContext { alpha_start: r.1, alpha_end: r.2, ..ctx };
                psi_map(r.3, &ctx, cfg.shape, TAU, 0.0)
            });
            WindowRow {
                m,
                bounds: spec.bounds(m),
                loss: losses[m - 1],
                endpoints: (ctx.alpha_start, ctx.alpha_end),
                alpha,
                alpha_published_ends,
                published: published.map(|r| r.4),
            }
        })
        .collect();

    let baseline_snr = BASELINE_GRID
        .iter()
        .zip(BASELINE_SNR)
        .map(|(&(t, _), want)| {
            let tol = if t == 1 { 0.5 } else { 0.01 };
            Ok(Check::new(format!("baseline SNR t={t}"), snr(baseline.at(t))?, want, tol))
        })
        .collect::<Result<Vec<_>>>()?;
    let adaptive_row_snr = ADAPTIVE_SNR
        .iter()
        .map(|&(t, want)| {
            let i = BASELINE_GRID.iter().position(|g| g.0 == t).expect("grid point");
            Ok(Check::new(format!("adaptive-row SNR t={t}"), snr(ADAPTIVE_ROW[i])?, want, 0.02))
        })
        .collect::<Result<Vec<_>>>()?;
    let adaptive_cells = BASELINE_GRID
        .iter()
        .zip(ADAPTIVE_ROW)
        .map(|(&(t, _), want)| Check::new(format!("adaptive ᾱ t={t}"), adaptive.at(t), want, 0.0005))
        .collect();

    let v = adaptive.values();
    let first_violation =
        (K_WIN..STEPS).find(|&t| adaptive.at(t) < baseline.at(t)).map(|t| (t, adaptive.at(t) - baseline.at(t)));
    Ok(ToyReport {
        monotone: v.windows(2).all(|w| w[1] <= w[0]),
        starts_at_one: v[0] == 1.0,
        first_violation,
        baseline,
        adaptive,
        windows,
        baseline_snr,
        adaptive_row_snr,
        adaptive_cells,
    })
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn render(r: &ToyReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# baseline and adaptive schedules on the sampled grid");
    let _ = writeln!(out, "t\tbase\tbase_snr\tadaptive\tadaptive_snr\tpublished\tdelta");
    for (&(t, _), want) in BASELINE_GRID.iter().zip(ADAPTIVE_ROW) {
        let (b, a) = (r.baseline.at(t), r.adaptive.at(t));
        let _ = writeln!(
            out,
            "{t}\t{b:.4}\t{:.3}\t{a:.4}\t{:.3}\t{want:.3}\t{:+.4}",
            b / (1.0 - b),
            a / (1.0 - a),
            a - want
        );
    }
    let _ = writeln!(out, "\n# window map (direct evaluation vs published column)");
    let _ = writeln!(out, "m\twindow\tloss\tends(start,end)\talpha\talpha@published_ends\tpublished\tdelta");
    for w in &r.windows {
        let published = w.published.map_or("-".to_string(), |p| format!("{p:.4}"));
        let delta = w.published.map_or("-".to_string(), |p| format!("{:+.6}", w.alpha_published_ends - p));
        let direct = if w.alpha_published_ends.is_nan() { "-".to_string() } else { format!("{:.6}", w.alpha_published_ends) };
        let _ = writeln!(
            out,
            "{}\t({},{})\t{:.4}\t({:.6},{:.6})\t{:.6}\t{direct}\t{published}\t{delta}",
            w.m, w.bounds.0, w.bounds.1, w.loss, w.endpoints.0, w.endpoints.1, w.alpha
        );
    }
    let _ = writeln!(out, "\n# checks");
    for c in r.baseline_snr.iter().chain(&r.adaptive_row_snr) {
        let _ = writeln!(out, "{}\t{}\tgot {:.4}\twant {} ± {}", mark(c.pass()), c.name, c.got, c.want, c.tol);
    }
    let _ = writeln!(out, "{}\tadaptive schedule starts at 1", mark(r.starts_at_one));
    let _ = writeln!(out, "{}\tadaptive schedule non-increasing", mark(r.monotone));
    match r.first_violation {
        None => {
            let _ = writeln!(out, "PASS\tadaptive ≥ baseline on [{K_WIN}, {STEPS})");
        }
        Some((t, d)) => {
            let _ = writeln!(out, "FAIL\tadaptive ≥ baseline on [{K_WIN}, {STEPS}): first violation t={t} ({d:+.3e})");
        }
    }
    out
}
