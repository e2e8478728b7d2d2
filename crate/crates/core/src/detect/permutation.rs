use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DetectError;
use crate::rng::stream;

/// Splits are enumerated exhaustively up to this many.
pub const EXHAUSTIVE_LIMIT: u64 = 10_000;

/// Slack for floating-point ties between permuted and observed statistics.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Reject,
    Accept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTestResult {
    /// Absolute difference of the sample means.
    pub statistic: f64,
    pub p_value: f64,
    /// Splits evaluated: all of them when exhaustive.
    pub n_permutations: u64,
    pub exhaustive: bool,
    /// Pooled values were all equal; the p-value is 1 by definition.
    pub degenerate: bool,
    pub decision: Decision,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * u128::from(n - i) / u128::from(i + 1);
        if acc > u128::from(u64::MAX) {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Two-sided test of equal means. Enumerates every split when there are at
/// most [`EXHAUSTIVE_LIMIT`], otherwise draws `n_perms` seeded shuffles.
pub fn permutation_test(a: &[f64], b: &[f64], n_perms: u64, alpha: f64, seed: u64) -> Result<PermutationTestResult, DetectError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(DetectError::SampleTooSmall);
    }
    let statistic = (mean(a) - mean(b)).abs();
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let decide = |p: f64| if p < alpha { Decision::Reject } else { Decision::Accept };
    if pooled.iter().all(|v| *v == pooled[0]) {
        return Ok(PermutationTestResult {
            statistic,
            p_value: 1.0,
            n_permutations: 0,
            exhaustive: true,
            degenerate: true,
            decision: decide(1.0),
        });
    }
    let total: f64 = pooled.iter().sum();
    let (n, k) = (pooled.len(), a.len());
    let split_stat = |sum_a: f64| (sum_a / k as f64 - (total - sum_a) / (n - k) as f64).abs();
    let splits = binomial(n as u64, k as u64);
    if splits <= EXHAUSTIVE_LIMIT {
        let mut hits = 0u64;
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            let sum_a: f64 = idx.iter().map(|&i| pooled[i]).sum();
            if split_stat(sum_a) >= statistic - TIE_EPS {
                hits += 1;
            }
            // next k-combination in lexicographic order
            let Some(pos) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
                break;
            };
            idx[pos] += 1;
            for j in pos + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
        let p_value = hits as f64 / splits as f64;
        return Ok(PermutationTestResult {
            statistic,
            p_value,
            n_permutations: splits,
            exhaustive: true,
            degenerate: false,
            decision: decide(p_value),
        });
    }
    let mut rng = stream(seed, "permutation", &[]);
    let mut work = pooled;
    let mut hits = 0u64;
    for _ in 0..n_perms {
        work.shuffle(&mut rng);
        let sum_a: f64 = work[..k].iter().sum();
        if split_stat(sum_a) >= statistic - TIE_EPS {
            hits += 1;
        }
    }
    let p_value = (1 + hits) as f64 / (1 + n_perms) as f64;
    Ok(PermutationTestResult {
        statistic,
        p_value,
        n_permutations: n_perms,
        exhaustive: false,
        degenerate: false,
        decision: decide(p_value),
    })
}
