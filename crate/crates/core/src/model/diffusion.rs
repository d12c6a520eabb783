//! Forward noising and reverse-process coefficients.

use crate::error::{Error, Result};
use crate::kg::TokenSequence;
use crate::schedule::TokenWiseSchedule;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// `z_t = sqrt(ᾱ_i) z_0 + sqrt(1 − ᾱ_i) ε` per row. Rows with `ᾱ_i = 1`
/// (PAD positions, or no noise yet) are copied unchanged and draw no noise.
pub fn forward_noise(z0: &Array2<f64>, alpha_bar: &[f64], rng: &mut impl Rng) -> Result<Array2<f64>> {
    if alpha_bar.len() != z0.nrows() {
        return Err(Error::Shape(format!("{} alpha_bar values for {} rows", alpha_bar.len(), z0.nrows())));
    }
    let mut out = z0.clone();
    for (mut row, &ab) in out.rows_mut().into_iter().zip(alpha_bar) {
        if !(ab > 0.0 && ab <= 1.0) {
            return Err(Error::OutOfRange(format!("alpha_bar {ab} outside (0, 1]")));
        }
        if ab == 1.0 {
            continue;
        }
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for v in row.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = a * *v + s * e;
        }
    }
    Ok(out)
}

/// Per-position `ᾱ_t^i` for a batch of sequences: aligned positions use their
/// token's learned schedule, other real positions the baseline, PAD positions 1.
pub fn position_alpha_bars(
    seqs: &[&TokenSequence],
    aligned: &[&[bool]],
    sched: &TokenWiseSchedule,
    ts: &[usize],
) -> Result<Vec<f64>> {
    let steps = sched.steps();
    let mut out = Vec::new();
    for ((seq, al), &t) in seqs.iter().zip(aligned).zip(ts) {
        if t == 0 || t > steps {
            return Err(Error::OutOfRange(format!("timestep {t} outside 1..={steps}")));
        }
        for (i, (&id, &real)) in seq.ids.iter().zip(&seq.mask).enumerate() {
            out.push(if real { sched.lookup(id, al[i]).at(t) } else { 1.0 });
        }
    }
    Ok(out)
}

/// Coefficients of the Gaussian posterior `q(z_{t−1} | z_t, z_0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    /// Weight on `z_t`.
    pub u: f64,
    /// Weight on `ẑ_0`.
    pub e: f64,
    pub var: f64,
}

/// From `ᾱ_t` and `ᾱ_{t−1}` (both may already be per-position blends).
pub fn posterior_coeffs(ab_t: f64, ab_prev: f64) -> Result<PosteriorCoeffs> {
    if !(ab_t > 0.0 && ab_t < 1.0 && ab_prev >= ab_t && ab_prev <= 1.0) {
        return Err(Error::OutOfRange(format!("alpha_bar pair ({ab_t}, {ab_prev}) not a valid step")));
    }
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let denom = 1.0 - ab_t;
    Ok(PosteriorCoeffs {
        u: alpha.sqrt() * (1.0 - ab_prev) / denom,
        e: ab_prev.sqrt() * beta / denom,
        var: (1.0 - ab_prev) / denom * beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{per_step, sqrt_baseline, CumulativeSchedule, DEFAULT_FLOOR};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_alpha_bar_copies() {
        let z0 = ndarray::arr2(&[[1.0, -2.0], [0.5, 3.0]]);
        let z = forward_noise(&z0, &[1.0, 1.0], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(z, z0);
        assert!(forward_noise(&z0, &[1.0], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(forward_noise(&z0, &[0.0, 1.0], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn tiny_alpha_bar_is_nearly_pure_noise() {
        let n = 20_000;
        let z0 = Array2::from_elem((n, 1), 5.0);
        let z = forward_noise(&z0, &vec![1e-12; n], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mean = z.sum() / n as f64;
        let var = z.mapv(|v| (v - mean) * (v - mean)).sum() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn pad_positions_keep_unit_alpha_bar() {
        let base = sqrt_baseline(10, 1e-4, DEFAULT_FLOOR).unwrap();
        let tw = TokenWiseSchedule::baseline_only(base.clone());
        let seq = TokenSequence::from_ids(vec![7, 8], 4);
        let al = [false; 4];
        let ab = position_alpha_bars(&[&seq], &[&al], &tw, &[3]).unwrap();
        assert_eq!(ab, vec![base.at(3), base.at(3), 1.0, 1.0]);
        assert!(position_alpha_bars(&[&seq], &[&al], &tw, &[0]).is_err());
        assert!(position_alpha_bars(&[&seq], &[&al], &tw, &[11]).is_err());
    }

    #[test]
    fn posterior_mean_of_noise_free_state() {
        let s = CumulativeSchedule::new(vec![1.0, 0.9, 0.7, 0.4]).unwrap();
        let z0 = 1.7;
        for t in 1..=3 {
            let c = posterior_coeffs(s.at(t), s.at(t - 1)).unwrap();
            let mu = c.u * s.at(t).sqrt() * z0 + c.e * z0;
            assert!((mu - s.at(t - 1).sqrt() * z0).abs() < 1e-14);
        }
        assert_eq!(posterior_coeffs(0.9, 1.0).unwrap().var, 0.0);
    }

    proptest! {
        #[test]
        fn posterior_identity_and_variance(coeffs in prop::collection::vec(0.3f64..0.9999, 1..100)) {
            let s = CumulativeSchedule::from_coeffs(&coeffs).unwrap();
            let beta = per_step(&s).beta;
            for t in 1..=s.steps() {
                let c = posterior_coeffs(s.at(t), s.at(t - 1)).unwrap();
                let lhs = c.u * s.at(t).sqrt() + c.e;
                let rhs = s.at(t - 1).sqrt();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs);
                prop_assert!(c.var >= 0.0 && c.var <= beta[t - 1] + 1e-15);
            }
        }
    }
}
