//! 4-bit NormalFloat codebook built from standard-normal quantiles.
//!
//! The 16 values are evenly spaced quantiles of N(0,1): eight on the negative
//! side, seven on the positive side, plus an exact zero, normalized so the
//! endpoints land exactly on -1 and +1. The asymmetric split is what buys the
//! exact zero in an even-sized table.

use std::sync::OnceLock;

/// Probability offset for the outermost quantiles: 1 - (1/32 + 1/30)/2.
/// Chosen so the two half-tables average the quantile spacing of 15- and
/// 16-level symmetric layouts.
pub const QUANTILE_OFFSET: f64 = 1.0 - 0.5 * (1.0 / 32.0 + 1.0 / 30.0);

/// Sorted 16-entry codebook over [-1, 1] containing exactly one zero.
#[derive(Debug, Clone)]
pub struct Nf4Codebook {
    values: [f32; 16],
    zero_index: usize,
}

impl Nf4Codebook {
    pub fn values(&self) -> &[f32; 16] {
        &self.values
    }

    pub fn zero_index(&self) -> usize {
        self.zero_index
    }

    /// Index of the nearest codebook entry; exact ties resolve toward the
    /// smaller-magnitude value.
    pub fn nearest_index(&self, v: f32) -> u8 {
        let idx = self.values.partition_point(|&c| c < v);
        if idx == 0 {
            return 0;
        }
        if idx == self.values.len() {
            return (self.values.len() - 1) as u8;
        }
        let lo = self.values[idx - 1];
        let hi = self.values[idx];
        let dl = v - lo;
        let dh = hi - v;
        if dl < dh {
            (idx - 1) as u8
        } else if dh < dl {
            idx as u8
        } else if lo.abs() <= hi.abs() {
            (idx - 1) as u8
        } else {
            idx as u8
        }
    }

    /// Largest gap between adjacent entries (bounds the round-trip error of a
    /// unit-scaled block at half this value).
    pub fn max_adjacent_gap(&self) -> f32 {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f32::max)
    }
}

/// Build the codebook from scratch. Deterministic.
pub fn build_nf4_codebook() -> Nf4Codebook {
    let mut vals = Vec::with_capacity(16);
    // Negative side: 8 evenly spaced quantiles from 1-offset up to (not
    // including) the median.
    let lo = 1.0 - QUANTILE_OFFSET;
    for i in 0..8 {
        let p = lo + (0.5 - lo) * i as f64 / 8.0;
        vals.push(probit(p));
    }
    vals.push(0.0);
    // Positive side: 7 quantiles from offset down to (not including) the
    // median, mirrored spacing over one fewer step.
    for j in 0..7 {
        let p = QUANTILE_OFFSET + (0.5 - QUANTILE_OFFSET) * j as f64 / 7.0;
        vals.push(probit(p));
    }
    let max = vals.iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut values = [0.0f32; 16];
    for (slot, v) in values.iter_mut().zip(&vals) {
        *slot = (v / max) as f32;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let zero_index = values.iter().position(|&v| v == 0.0).unwrap();
    debug_assert!(values.windows(2).all(|w| w[0] < w[1]));
    debug_assert_eq!(values[0], -1.0);
    debug_assert_eq!(values[15], 1.0);
    Nf4Codebook { values, zero_index }
}

/// Shared codebook instance for the codec hot path.
pub fn codebook() -> &'static Nf4Codebook {
    static CB: OnceLock<Nf4Codebook> = OnceLock::new();
    CB.get_or_init(build_nf4_codebook)
}

/// Inverse standard-normal CDF (Acklam's rational approximation,
/// |relative error| < 1.2e-9 over (0,1)).
pub fn probit(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probit domain is (0,1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -probit(1.0 - p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent quantile oracle: bisection on a series-expansion normal
    /// CDF, sharing nothing with the rational approximation above.
    fn quantile_by_bisection(p: f64) -> f64 {
        fn erf_series(x: f64) -> f64 {
            // converges quickly for |x| <= 3, which covers our quantile range
            let mut term = x;
            let mut sum = x;
            for n in 1..200 {
                term *= -x * x / n as f64;
                let add = term / (2 * n + 1) as f64;
                sum += add;
                if add.abs() < 1e-18 {
                    break;
                }
            }
            sum * 2.0 / std::f64::consts::PI.sqrt()
        }
        let cdf = |x: f64| 0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
        let (mut lo, mut hi) = (-4.0f64, 4.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn probit_matches_bisection_oracle() {
        for &p in &[0.001, 0.02, 0.0322917, 0.25, 0.5 - 1e-9, 0.75, 0.9677083, 0.999] {
            let got = probit(p);
            let want = quantile_by_bisection(p);
            assert!(
                (got - want).abs() < 1e-8,
                "probit({p}) = {got}, oracle {want}"
            );
        }
    }

    #[test]
    fn codebook_endpoints_exact() {
        let cb = build_nf4_codebook();
        assert_eq!(cb.values()[0], -1.0);
        assert_eq!(cb.values()[15], 1.0);
    }

    #[test]
    fn codebook_contains_zero_exactly_once() {
        let cb = build_nf4_codebook();
        assert_eq!(cb.values().iter().filter(|&&v| v == 0.0).count(), 1);
        assert_eq!(cb.values()[cb.zero_index()], 0.0);
    }

    #[test]
    fn codebook_strictly_increasing() {
        let cb = build_nf4_codebook();
        assert!(cb.values().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn codebook_matches_independent_quantile_computation() {
        // Reconstruct the full table through the bisection oracle.
        let lo = 1.0 - QUANTILE_OFFSET;
        let mut expect = Vec::new();
        for i in 0..8 {
            expect.push(quantile_by_bisection(lo + (0.5 - lo) * i as f64 / 8.0));
        }
        expect.push(0.0);
        for j in 0..7 {
            expect.push(quantile_by_bisection(
                QUANTILE_OFFSET + (0.5 - QUANTILE_OFFSET) * j as f64 / 7.0,
            ));
        }
        let max = expect.iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut expect: Vec<f64> = expect.iter().map(|v| v / max).collect();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());

        let cb = build_nf4_codebook();
        for (got, want) in cb.values().iter().zip(&expect) {
            assert!(
                (*got as f64 - want).abs() < 1e-6,
                "codebook entry {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn nearest_index_exact_values_are_fixed_points() {
        let cb = build_nf4_codebook();
        for (i, &v) in cb.values().iter().enumerate() {
            assert_eq!(cb.nearest_index(v) as usize, i);
        }
    }

    #[test]
    fn nearest_index_tie_breaks_toward_smaller_magnitude() {
        let cb = build_nf4_codebook();
        let a = cb.values()[13];
        let b = cb.values()[14];
        let mid = (a + b) / 2.0;
        // if mid is exactly equidistant the smaller-magnitude entry wins
        let idx = cb.nearest_index(mid) as usize;
        let da = (mid - a).abs();
        let db = (b - mid).abs();
        if da == db {
            assert_eq!(idx, 13);
        } else {
            assert_eq!(idx, if da < db { 13 } else { 14 });
        }
    }

    #[test]
    fn nearest_index_clamps_out_of_range() {
        let cb = build_nf4_codebook();
        assert_eq!(cb.nearest_index(-5.0), 0);
        assert_eq!(cb.nearest_index(5.0), 15);
    }
}
