//! Kernel two-sample statistics over joint-angle vectors.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::stats::{quantile, quantile_sorted, std_dev};
use super::EvalError;
use crate::kinematics::{wrap_angle, Configuration};
use crate::model::sample_rng;

/// Multipliers applied to the median pairwise distance.
pub const BANDWIDTH_SCALES: [f64; 3] = [0.5, 1.0, 2.0];

/// Squared distance between angle vectors with every component difference
/// wrapped to `(-π, π]`.
pub fn wrapped_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| wrap_angle(x - y).powi(2))
        .sum()
}

fn kernel(a: &[f64], b: &[f64], bandwidths: &[f64]) -> f64 {
    let d2 = wrapped_sq_dist(a, b);
    bandwidths
        .iter()
        .map(|s| (-d2 / (2.0 * s * s)).exp())
        .sum()
}

fn check(x: &[Configuration], y: &[Configuration], min_len: usize) -> Result<(), EvalError> {
    if x.len() < min_len || y.len() < min_len {
        return Err(EvalError::TooFewSamples {
            needed: min_len,
            got: x.len().min(y.len()),
        });
    }
    let d = x[0].len();
    if let Some(bad) = x.iter().chain(y).find(|c| c.len() != d) {
        return Err(EvalError::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    Ok(())
}

/// Median pairwise wrapped distance of the pooled samples times
/// `BANDWIDTH_SCALES`. Falls back to unit scale when all points coincide.
pub fn median_bandwidths(x: &[Configuration], y: &[Configuration]) -> Vec<f64> {
    let pooled: Vec<&Configuration> = x.iter().chain(y).collect();
    let mut dists = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(wrapped_sq_dist(&pooled[i].0, &pooled[j].0).sqrt());
        }
    }
    let med = if dists.is_empty() {
        1.0
    } else {
        quantile(&dists, 0.5)
    };
    let med = if med > 0.0 { med } else { 1.0 };
    BANDWIDTH_SCALES.iter().map(|s| s * med).collect()
}

/// Unbiased (U-statistic) MMD² with the given bandwidths. Can be slightly
/// negative.
pub fn mmd_unbiased_with(
    x: &[Configuration],
    y: &[Configuration],
    bandwidths: &[f64],
) -> Result<f64, EvalError> {
    check(x, y, 2)?;
    let within = |s: &[Configuration]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += kernel(&s[i].0, &s[j].0, bandwidths);
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += kernel(&a.0, &b.0, bandwidths);
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64)
}

/// Biased (V-statistic) MMD², which keeps the diagonal terms and is
/// therefore exactly zero for identical sets.
pub fn mmd_biased_with(
    x: &[Configuration],
    y: &[Configuration],
    bandwidths: &[f64],
) -> Result<f64, EvalError> {
    check(x, y, 1)?;
    let avg = |a: &[Configuration], b: &[Configuration]| {
        let mut acc = 0.0;
        for u in a {
            for v in b {
                acc += kernel(&u.0, &v.0, bandwidths);
            }
        }
        acc / (a.len() * b.len()) as f64
    };
    Ok(avg(x, x) + avg(y, y) - 2.0 * avg(x, y))
}

/// Unbiased MMD² with median-heuristic bandwidths.
pub fn mmd(x: &[Configuration], y: &[Configuration]) -> Result<f64, EvalError> {
    check(x, y, 2)?;
    mmd_unbiased_with(x, y, &median_bandwidths(x, y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub null_mean: f64,
    pub null_std: f64,
    pub null_q95: f64,
    /// Fraction of permuted statistics at least as large as the observed one
    /// (with the usual +1 correction).
    pub p_value: f64,
}

/// Permutation null distribution of the unbiased MMD² obtained by
/// reshuffling the pooled samples into groups of the original sizes.
/// Bandwidths are fixed from the pooled data once.
pub fn permutation_test(
    x: &[Configuration],
    y: &[Configuration],
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest, EvalError> {
    check(x, y, 2)?;
    let bw = median_bandwidths(x, y);
    let pooled: Vec<&Configuration> = x.iter().chain(y).collect();
    let n = pooled.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel(&pooled[i].0, &pooled[j].0, &bw);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let m = x.len();
    let stat_for = |idx: &[usize]| {
        let (a, b) = idx.split_at(m);
        let within = |s: &[usize]| {
            let mut acc = 0.0;
            for (p, &i) in s.iter().enumerate() {
                for &j in &s[p + 1..] {
                    acc += k[i * n + j];
                }
            }
            2.0 * acc / (s.len() * (s.len() - 1)) as f64
        };
        let mut cross = 0.0;
        for &i in a {
            for &j in b {
                cross += k[i * n + j];
            }
        }
        within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64
    };
    let identity: Vec<usize> = (0..n).collect();
    let statistic = stat_for(&identity);
    let mut null: Vec<f64> = (0..permutations)
        .map(|p| {
            let mut idx = identity.clone();
            idx.shuffle(&mut sample_rng(seed, p as u64));
            stat_for(&idx)
        })
        .collect();
    let exceed = null.iter().filter(|&&s| s >= statistic).count();
    let null_std = std_dev(&null);
    null.sort_by(f64::total_cmp);
    Ok(PermutationTest {
        statistic,
        null_mean: null.iter().sum::<f64>() / null.len().max(1) as f64,
        null_std,
        null_q95: if null.is_empty() {
            f64::INFINITY
        } else {
            quantile_sorted(&null, 0.95)
        },
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn uniform(n: usize, d: usize, seed: u64) -> Vec<Configuration> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Configuration((0..d).map(|_| rng.gen_range(-PI..PI)).collect()))
            .collect()
    }

    /// Textbook double sums over every ordered pair, skipping i = j.
    fn brute_force(x: &[Configuration], y: &[Configuration], bw: &[f64]) -> f64 {
        let k = |a: &Configuration, b: &Configuration| {
            let mut d2 = 0.0;
            for i in 0..a.len() {
                let mut diff = (a.0[i] - b.0[i]) % (2.0 * PI);
                if diff >= PI {
                    diff -= 2.0 * PI;
                }
                if diff < -PI {
                    diff += 2.0 * PI;
                }
                d2 += diff * diff;
            }
            bw.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>()
        };
        let (m, n) = (x.len() as f64, y.len() as f64);
        let mut xx = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                if i != j {
                    xx += k(&x[i], &x[j]);
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..y.len() {
            for j in 0..y.len() {
                if i != j {
                    yy += k(&y[i], &y[j]);
                }
            }
        }
        let mut xy = 0.0;
        for a in x {
            for b in y {
                xy += k(a, b);
            }
        }
        xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (m * n)
    }

    #[test]
    fn u_statistic_matches_brute_force() {
        for seed in 0..5 {
            let x = uniform(20, 6, seed);
            let y = uniform(17, 6, seed + 100);
            let bw = median_bandwidths(&x, &y);
            let fast = mmd_unbiased_with(&x, &y, &bw).unwrap();
            assert!((fast - brute_force(&x, &y, &bw)).abs() < 1e-12);
        }
    }

    #[test]
    fn biased_is_zero_on_identical_sets() {
        let x = uniform(15, 4, 1);
        assert_eq!(mmd_biased_with(&x, &x, &[0.7, 1.4]).unwrap(), 0.0);
    }

    #[test]
    fn wrapping_makes_seam_points_close() {
        let a = Configuration(vec![PI - 0.01]);
        let b = Configuration(vec![-PI + 0.01]);
        assert!((wrapped_sq_dist(&a.0, &b.0) - 0.0004).abs() < 1e-12);
    }

    #[test]
    fn separated_sets_have_large_mmd() {
        let x: Vec<_> = uniform(50, 3, 2)
            .into_iter()
            .map(|c| Configuration(c.0.iter().map(|v| v * 0.1).collect()))
            .collect();
        let y = uniform(50, 3, 3);
        let t = permutation_test(&x, &y, 100, 4).unwrap();
        assert!(t.statistic > t.null_q95);
        assert!(t.p_value < 0.05);
    }

    #[test]
    fn errors_on_bad_input() {
        let x = uniform(5, 3, 1);
        let y = uniform(5, 2, 2);
        assert!(matches!(mmd(&x, &y), Err(EvalError::DimensionMismatch { .. })));
        assert!(matches!(mmd(&x[..1], &x), Err(EvalError::TooFewSamples { .. })));
    }
}
