use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest effective sample size that uses the exact null distribution.
pub const EXACT_LIMIT: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Smaller of the positive and negative signed-rank sums.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n_effective: usize,
    pub exact: bool,
    /// No non-zero differences; `p_value` is 1.
    pub degenerate: bool,
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Paired two-sided Wilcoxon signed-rank test. Zero differences are
/// dropped; ties in |difference| receive average ranks.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::arg(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::arg("paired samples must be finite"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            n_effective: 0,
            exact: true,
            degenerate: true,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = plus.min(total - plus);

    let (p, exact) = if n <= EXACT_LIMIT {
        // doubled ranks are integers even with ties
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let w2 = (2.0 * w).round() as usize;
        let tail: f64 = counts[..=w2].iter().sum();
        ((2.0 * tail / 2f64.powi(n as i32)).min(1.0), true)
    } else {
        let mean = total / 2.0;
        let mut ties = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            ties += t * t * t - t;
            i = j + 1;
        }
        let nf = n as f64;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let z = (w - mean) / var.sqrt();
        // two-sided: 2·Φ(z) with z ≤ 0, written through erfc for accuracy
        ((libm::erfc(-z / std::f64::consts::SQRT_2)).min(1.0), false)
    };
    Ok(WilcoxonResult {
        statistic: w,
        p_value: p,
        n_effective: n,
        exact,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-sided p by enumerating every sign assignment.
    fn enumerate_p(diffs: &[f64]) -> f64 {
        let d: Vec<f64> = diffs.iter().copied().filter(|v| *v != 0.0).collect();
        let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
        let total: f64 = ranks.iter().sum();
        let observed: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
        let w = observed.min(total - observed);
        let n = d.len();
        let mut extreme = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s.min(total - s) <= w + 1e-9 {
                extreme += 1;
            }
        }
        extreme as f64 / (1u64 << n) as f64
    }

    #[test]
    fn identical_vectors_are_degenerate() {
        let r = wilcoxon_signed_rank(&[0.3, 0.5], &[0.3, 0.5]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn constant_shift_of_six() {
        let b = [0.1, 0.5, 0.2, 0.9, 0.7, 0.3];
        let a: Vec<f64> = b.iter().enumerate().map(|(i, v)| v + 0.1 + i as f64 * 0.01).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 0.03125).abs() < 1e-15);
        assert!(r.exact);
    }

    #[test]
    fn unequal_lengths_rejected() {
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn large_sample_uses_normal_approximation() {
        let a: Vec<f64> = (0..40).map(|i| i as f64 + if i % 3 == 0 { -0.5 } else { 0.7 }).collect();
        let b: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        // a symmetric sample sits in the middle of the null
        let c: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } * (i / 2 + 1) as f64).collect();
        let r = wilcoxon_signed_rank(&c, &vec![0.0; 40]).unwrap();
        assert!(r.p_value > 0.9, "{}", r.p_value);
    }

    proptest! {
        #[test]
        fn exact_matches_enumeration(diffs in prop::collection::vec(-20i32..20, 1..=10)) {
            let d: Vec<f64> = diffs.iter().map(|&v| v as f64 / 4.0).collect();
            prop_assume!(d.iter().any(|v| *v != 0.0));
            let r = wilcoxon_signed_rank(&d, &vec![0.0; d.len()]).unwrap();
            prop_assert!((r.p_value - enumerate_p(&d)).abs() < 1e-12);
            prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        }

        #[test]
        fn swapping_sides_keeps_p(a in prop::collection::vec(0.0f64..1.0, 1..30), shift in -0.3f64..0.3) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + shift * (i % 3) as f64).collect();
            let x = wilcoxon_signed_rank(&a, &b).unwrap();
            let y = wilcoxon_signed_rank(&b, &a).unwrap();
            prop_assert_eq!(x.p_value, y.p_value);
            prop_assert_eq!(x.statistic, y.statistic);
        }
    }
}
