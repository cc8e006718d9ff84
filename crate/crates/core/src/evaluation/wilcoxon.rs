//! Paired Wilcoxon signed-rank test, two-sided.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest non-zero pair count that gets the exact null distribution.
pub const EXACT_MAX_N: usize = 12;
/// Minimum non-zero pair count accepted.
pub const MIN_N: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    pub method: PMethod,
}

/// Midranks (1-based) of `values`; tied values share the mean of their ranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Nonzero differences `a - b` in input order.
fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("paired samples of {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("paired samples must be finite"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).filter(|&d| d != 0.0).collect())
}

/// Two-sided exact p: `2 P(T+ <= w)` under random signs, capped at 1.
/// `doubled` are twice the midranks, which are always integers.
fn exact_p(doubled: &[u64], w_doubled: u64) -> f64 {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let below: u64 = counts[..=w_doubled as usize].iter().sum();
    let p = 2.0 * below as f64 / (1u64 << doubled.len()) as f64;
    p.min(1.0)
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let d = differences(a, b)?;
    if d.is_empty() {
        return Err(Error::DegenerateTest);
    }
    let n = d.len();
    if n < MIN_N {
        return Err(Error::invalid(format!(
            "{n} non-zero differences; the test needs at least {MIN_N}"
        )));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).fold(0.0, |acc, (_, r)| acc + r);
    let w_minus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v < 0.0).fold(0.0, |acc, (_, r)| acc + r);
    let statistic = w_plus.min(w_minus);

    let (p_value, method) = if n <= EXACT_MAX_N {
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        (exact_p(&doubled, (2.0 * statistic).round() as u64), PMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i + 1;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        // statistic <= mean, so the continuity correction moves it towards the mean
        let z = ((statistic - mean + 0.5).min(0.0)) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * normal.cdf(z)).min(1.0), PMethod::Normal)
    };

    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        statistic,
        p_value,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn all_positive_gives_zero_statistic() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.5, 1.0, 1.0, 1.0, 1.0];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w_minus, 0.0);
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.w_plus, 15.0);
        // only the all-positive and all-negative sign patterns reach 0 or 15
        assert!((r.p_value - 2.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let a = [0.3, 0.4, 0.5, 0.6, 0.7];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::DegenerateTest)));
        assert!(wilcoxon_signed_rank(&a, &a[..4]).is_err());
    }

    #[test]
    fn zero_differences_are_dropped() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let b = [1.0, 2.5, 2.0, 4.5, 4.0, 6.5, 6.0];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.n, 6);
    }

    #[test]
    fn large_sample_uses_normal_approximation() {
        // differences 1..=20, all positive: W = 0, mean 105, var 717.5
        let a: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let b = vec![0.0; 20];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, PMethod::Normal);
        let z = (0.0 - 105.0 + 0.5) / 717.5f64.sqrt();
        let expected = 2.0 * Normal::new(0.0, 1.0).unwrap().cdf(z);
        assert!((r.p_value - expected).abs() < 1e-15);
        assert!(r.p_value < 1e-3);
    }
}
