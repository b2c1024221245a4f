use serde::{Deserialize, Serialize};

/// Quantile `p` of an ascending slice with linear interpolation between
/// order statistics (the rank is `p * (n - 1)`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty slice");
    let p = p.clamp(0.0, 1.0);
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi || frac == 0.0 {
        return sorted[lo];
    }
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub q1: f64,
    pub q3: f64,
}

impl ErrorSummary {
    /// All fields infinite; used when no finite value exists.
    pub fn infinite() -> Self {
        Self {
            mean: f64::INFINITY,
            min: f64::INFINITY,
            max: f64::INFINITY,
            q1: f64::INFINITY,
            q3: f64::INFINITY,
        }
    }

    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::infinite();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            mean: mean(&v),
            min: v[0],
            max: v[v.len() - 1],
            q1: quantile_sorted(&v, 0.25),
            q3: quantile_sorted(&v, 0.75),
        }
    }

    /// Field-wise mean over several summaries.
    pub fn average(items: &[ErrorSummary]) -> Self {
        if items.is_empty() {
            return Self::infinite();
        }
        let avg = |f: fn(&ErrorSummary) -> f64| mean(&items.iter().map(f).collect::<Vec<_>>());
        Self {
            mean: avg(|s| s.mean),
            min: avg(|s| s.min),
            max: avg(|s| s.max),
            q1: avg(|s| s.q1),
            q3: avg(|s| s.q3),
        }
    }
}

/// Percentage of `(pos, rot)` pairs strictly below both thresholds.
pub fn success_pct(errors: &[(f64, f64)], pos_tol: f64, rot_tol: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let hits = errors
        .iter()
        .filter(|(p, r)| *p < pos_tol && *r < rot_tol)
        .count();
    100.0 * hits as f64 / errors.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// k-th smallest value found by counting, without sorting.
    fn order_statistic(values: &[f64], k: usize) -> f64 {
        for &c in values {
            let below = values.iter().filter(|&&v| v < c).count();
            let equal = values.iter().filter(|&&v| v == c).count();
            if below <= k && k < below + equal {
                return c;
            }
        }
        unreachable!()
    }

    fn brute_quantile(values: &[f64], p: f64) -> f64 {
        let h = (values.len() - 1) as f64 * p;
        let lo = order_statistic(values, h.floor() as usize);
        let hi = order_statistic(values, h.ceil() as usize);
        lo + (h - h.floor()) * (hi - lo)
    }

    #[test]
    fn known_quartiles() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.25), 1.25);
        let s = ErrorSummary::of(&v);
        assert_eq!((s.min, s.max, s.mean), (1.0, 5.0, 3.0));
        assert!(ErrorSummary::of(&[]).mean.is_infinite());
    }

    proptest! {
        #[test]
        fn quartiles_match_order_statistics(v in prop::collection::vec(-1e3f64..1e3, 1..60), p in 0.0f64..1.0) {
            let q = quantile(&v, p);
            let b = brute_quantile(&v, p);
            prop_assert!((q - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }

        #[test]
        fn summary_is_ordered(v in prop::collection::vec(-1e3f64..1e3, 1..60)) {
            let s = ErrorSummary::of(&v);
            prop_assert!(s.min <= s.q1 && s.q1 <= s.q3 && s.q3 <= s.max);
            prop_assert!(s.min <= s.mean && s.mean <= s.max);
        }

        #[test]
        fn success_monotone_in_thresholds(
            e in prop::collection::vec((0.0f64..50.0, 0.0f64..5.0), 1..80),
            pos in 0.0f64..50.0, rot in 0.0f64..5.0, shrink in 0.0f64..1.0,
        ) {
            let loose = success_pct(&e, pos, rot);
            let tight = success_pct(&e, pos * shrink, rot * shrink);
            prop_assert!(tight <= loose);
            prop_assert!((0.0..=100.0).contains(&loose));
        }
    }
}
