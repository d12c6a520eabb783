use crate::kg::tokenize;
use std::collections::HashMap;

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU up to `max_n`-grams with uniform weights. Unigram precision is
/// unsmoothed; precisions for `n ≥ 2` use `(m + 1) / (c + 1)`. The brevity
/// penalty uses the reference length closest to the candidate (shorter on ties).
pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> f64 {
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    if cand.is_empty() || refs.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let counts = ngrams(&cand, n);
        let total: usize = counts.values().sum();
        let ref_counts: Vec<HashMap<&[String], usize>> = refs.iter().map(|r| ngrams(r, n)).collect();
        let matched: usize = counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln() / max_n as f64;
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_sum.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_one() {
        assert!((bleu("the cat sat on the mat", &["the cat sat on the mat"], 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(bleu("a b c", &["x y z"], 4), 0.0);
        assert_eq!(bleu("", &["x y z"], 4), 0.0);
    }

    #[test]
    fn brevity_penalty_hand_value() {
        // p1 = 4/4; p2..p4 = (m+1)/(c+1) = 1; BP = exp(1 − 5/4)
        let got = bleu("a b c d", &["a b c d e"], 4);
        assert!((got - (-0.25f64).exp()).abs() < 1e-12);
        assert!((got - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn clipping_and_smoothing() {
        // candidate "the the the": p1 = 1/3 (clipped by one "the" in the ref),
        // p2 = (0+1)/(2+1), p3 = (0+1)/(1+1), p4 = (0+1)/(0+1); c = 3 < r = 4
        let got = bleu("the the the", &["the cat is here"], 4);
        let want = (1.0f64 / 3.0 * 1.0 / 3.0 * 0.5 * 1.0).powf(0.25) * (1.0 - 4.0 / 3.0f64).exp();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn closest_reference_length() {
        let a = bleu("a b c", &["a b c d e f g", "a b c d"], 1);
        assert!((a - (1.0 - 4.0 / 3.0f64).exp()).abs() < 1e-12);
    }
}
