//! Variable-scale discretized logistic likelihood.
//!
//! Samples `x ∈ [0, 2^D)` are mapped to `x_n = x·L/2^D`; symbol `x` owns the
//! interval `[x_n − b, x_n + b)` with `b = 0.5·L/2^D`, and its probability is
//! the logistic CDF mass on that interval. The lowest and highest symbols
//! absorb the tails, so the distribution sums to one over the alphabet.

use std::f64::consts::LN_2;

/// Coder frequency precision.
pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

/// Per-pixel distribution parameters from the estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticParams {
    /// Location in the normalized domain.
    pub mu_n: f64,
    /// Natural log of the scale, already clamped to `[-7, 7]`.
    pub log_s: f64,
}

impl LogisticParams {
    pub fn scale(&self) -> f64 {
        self.log_s.exp()
    }
}

/// A non-empty cumulative-frequency interval `[lo, hi)` on the 16-bit grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoderInterval {
    pub lo: u32,
    pub hi: u32,
}

impl CoderInterval {
    pub fn new(lo: u32, hi: u32) -> Option<Self> {
        (lo < hi && hi <= FREQ_TOTAL).then_some(Self { lo, hi })
    }

    pub fn width(&self) -> u32 {
        self.hi - self.lo
    }

    /// Ideal code length of the interval in bits.
    pub fn bits(&self) -> f64 {
        f64::from(FREQ_BITS) - f64::from(self.width()).log2()
    }
}

/// Result of quantizing a symbol's probability onto the coder grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantized {
    Interval(CoderInterval),
    /// The symbol's mass rounds to nothing; it must bypass the coder.
    Escape,
}

pub fn normalize(x: u32, depth_bits: u8, scale_l: f64) -> f64 {
    f64::from(x) * scale_l / f64::from(1u32 << depth_bits)
}

/// Half the normalized width of one symbol.
pub fn half_step(depth_bits: u8, scale_l: f64) -> f64 {
    normalize(1, depth_bits, scale_l) * 0.5
}

fn top(depth_bits: u8) -> u32 {
    (1u32 << depth_bits) - 1
}

/// Normalized position of the boundary between symbols `k − 1` and `k`.
fn edge(k: u32, depth_bits: u8, scale_l: f64) -> f64 {
    normalize(k, depth_bits, scale_l) - half_step(depth_bits, scale_l)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `ln σ(z)`, stable for large `|z|`.
fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

/// Tail-extended CDF at boundary `k ∈ [0, 2^D]`.
fn cdf_at(k: u32, lp: &LogisticParams, depth_bits: u8, scale_l: f64) -> f64 {
    if k == 0 {
        0.0
    } else if k > top(depth_bits) {
        1.0
    } else {
        sigmoid((edge(k, depth_bits, scale_l) - lp.mu_n) / lp.scale())
    }
}

/// Quantized tail-extended CDF at boundary `k`: `floor(CDF · 2^16)`.
pub fn quantized_cdf(k: u32, lp: &LogisticParams, depth_bits: u8, scale_l: f64) -> u32 {
    if k == 0 {
        0
    } else if k > top(depth_bits) {
        FREQ_TOTAL
    } else {
        let c = (cdf_at(k, lp, depth_bits, scale_l) * f64::from(FREQ_TOTAL)).floor();
        (c as u32).min(FREQ_TOTAL)
    }
}

/// Probability of symbol `x` under the tail-extended discretized logistic.
pub fn discrete_prob(x: u32, lp: &LogisticParams, depth_bits: u8, scale_l: f64) -> f64 {
    cdf_at(x + 1, lp, depth_bits, scale_l) - cdf_at(x, lp, depth_bits, scale_l)
}

pub fn quantize_interval(x: u32, lp: &LogisticParams, depth_bits: u8, scale_l: f64) -> Quantized {
    let lo = quantized_cdf(x, lp, depth_bits, scale_l);
    let hi = quantized_cdf(x + 1, lp, depth_bits, scale_l);
    match CoderInterval::new(lo, hi) {
        Some(iv) => Quantized::Interval(iv),
        None => Quantized::Escape,
    }
}

/// Symbol whose quantized interval contains `f`. Binary search over the
/// monotone quantized CDF; never returns an escape symbol.
pub fn locate_symbol(f: u32, lp: &LogisticParams, depth_bits: u8, scale_l: f64) -> u32 {
    debug_assert!(f < FREQ_TOTAL);
    // invariant: cdf(lo) <= f < cdf(hi + 1)
    let (mut lo, mut hi) = (0u32, top(depth_bits));
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if quantized_cdf(mid, lp, depth_bits, scale_l) <= f {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Natural log-probability of `x` with its derivatives with respect to
/// `mu_n` and `log_s`. Evaluated in a form that stays finite far in the
/// tails.
pub fn log_prob_with_grad(
    x: u32,
    lp: &LogisticParams,
    depth_bits: u8,
    scale_l: f64,
) -> (f64, f64, f64) {
    let inv_s = (-lp.log_s).exp();
    let last = top(depth_bits);
    let upper = (x < last).then(|| (edge(x + 1, depth_bits, scale_l) - lp.mu_n) * inv_s);
    let lower = (x > 0).then(|| (edge(x, depth_bits, scale_l) - lp.mu_n) * inv_s);
    // d log p / d a and d log p / d c for the upper and lower standardized edges
    let (logp, ga_a, gc_c, ga, gc) = match (upper, lower) {
        (Some(a), Some(c)) => {
            let gap = a - c;
            let logp = log_sigmoid(a) + log_sigmoid(-c) + (-(-gap).exp_m1()).ln();
            let sa = sigmoid(-a);
            let sc = sigmoid(c);
            let tail = gap / gap.exp_m1();
            // Σ g·z and Σ g, with the 1/expm1 terms folded in analytically
            (logp, sa * a - sc * c + tail, 0.0, sa - sc, 0.0)
        }
        (Some(a), None) => {
            let sa = sigmoid(-a);
            (log_sigmoid(a), sa * a, 0.0, sa, 0.0)
        }
        (None, Some(c)) => {
            let sc = sigmoid(c);
            (log_sigmoid(-c), 0.0, -sc * c, 0.0, -sc)
        }
        (None, None) => (0.0, 0.0, 0.0, 0.0, 0.0),
    };
    let d_mu = -(ga + gc) * inv_s;
    let d_log_s = -(ga_a + gc_c);
    (logp, d_mu, d_log_s)
}

/// Code length of one symbol in bits, `−log2 p(x)`.
pub fn symbol_bits(x: u32, lp: &LogisticParams, depth_bits: u8, scale_l: f64) -> f64 {
    -log_prob_with_grad(x, lp, depth_bits, scale_l).0 / LN_2
}

/// Total negative log-likelihood of a set of samples, in bits.
pub fn nll_bits(samples: &[u16], params: &[LogisticParams], depth_bits: u8, scale_l: f64) -> f64 {
    assert_eq!(samples.len(), params.len());
    samples
        .iter()
        .zip(params)
        .map(|(&x, lp)| symbol_bits(u32::from(x), lp, depth_bits, scale_l))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lp(mu_n: f64, log_s: f64) -> LogisticParams {
        LogisticParams { mu_n, log_s }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize(64, 8, 1.0), 0.25);
        assert_eq!(normalize(2048, 12, 8.0), 4.0);
        assert_eq!(half_step(8, 1.0), 1.0 / 512.0);
    }

    #[test]
    fn centered_bin_probability() {
        let p = discrete_prob(64, &lp(normalize(64, 8, 1.0), -2.0), 8, 1.0);
        let b_over_s = (1.0f64 / 512.0) * 2f64.exp();
        let expected = 2.0 * (1.0 / (1.0 + (-b_over_s).exp()) - 0.5);
        assert!((p - expected).abs() < 1e-15);
        assert!((p - 0.007215).abs() < 1e-6, "{p}");
    }

    #[test]
    fn larger_scale_factor_concentrates_mass() {
        let s = -2.0;
        let p1 = discrete_prob(64, &lp(normalize(64, 8, 1.0), s), 8, 1.0);
        let p8 = discrete_prob(64, &lp(normalize(64, 8, 8.0), s), 8, 8.0);
        assert!(p8 > p1);
    }

    #[test]
    fn interval_edges() {
        for &(mu, ls) in &[(0.5, -3.0), (-4.0, 2.0), (9.0, -7.0)] {
            let p = lp(mu, ls);
            match quantize_interval(0, &p, 8, 1.0) {
                Quantized::Interval(iv) => assert_eq!(iv.lo, 0),
                Quantized::Escape => assert_eq!(quantized_cdf(1, &p, 8, 1.0), 0),
            }
            assert_eq!(quantized_cdf(256, &p, 8, 1.0), FREQ_TOTAL);
        }
    }

    #[test]
    fn far_symbol_escapes_at_minimum_scale() {
        let p = lp(0.5, -7.0);
        let x = 20;
        // mass in the bin, evaluated directly, is far below one grid step
        assert!(discrete_prob(x, &p, 8, 1.0) < 1.0 / 65536.0);
        assert_eq!(quantize_interval(x, &p, 8, 1.0), Quantized::Escape);
        assert!(matches!(
            quantize_interval(128, &p, 8, 1.0),
            Quantized::Interval(_)
        ));
    }

    #[test]
    fn locate_symbol_boundaries() {
        let p = lp(0.3, -4.0);
        for x in 0..256 {
            if let Quantized::Interval(iv) = quantize_interval(x, &p, 8, 1.0) {
                assert_eq!(locate_symbol(iv.lo, &p, 8, 1.0), x);
                assert_eq!(locate_symbol(iv.hi - 1, &p, 8, 1.0), x);
            }
        }
    }

    #[test]
    fn exhaustive_inversion_two_bit_alphabet() {
        let draws = [
            (0.1, -1.0),
            (0.5, -7.0),
            (0.9, 0.5),
            (-1.0, -2.0),
            (2.0, 7.0),
            (0.37, -3.3),
        ];
        for &(mu, ls) in &draws {
            let p = lp(mu, ls);
            for f in 0..FREQ_TOTAL {
                let x = locate_symbol(f, &p, 2, 1.0);
                match quantize_interval(x, &p, 2, 1.0) {
                    Quantized::Interval(iv) => assert!(iv.lo <= f && f < iv.hi),
                    Quantized::Escape => panic!("escape symbol located for f = {f}"),
                }
            }
        }
    }

    #[test]
    fn half_probability_is_one_bit() {
        // D = 1 with mu between the two symbols: each gets exactly half
        let p = lp(normalize(1, 1, 1.0) - half_step(1, 1.0), 0.0);
        assert!((symbol_bits(0, &p, 1, 1.0) - 1.0).abs() < 1e-12);
        assert!((symbol_bits(1, &p, 1, 1.0) - 1.0).abs() < 1e-12);
        // huge scale, mu centered: both bins tend to one half
        let wide = lp(0.5, 7.0);
        assert!((nll_bits(&[0, 1, 1, 0], &[wide; 4], 1, 1.0) - 4.0).abs() < 1e-3);
    }

    #[test]
    fn nll_is_additive() {
        let ps: Vec<_> = (0..6)
            .map(|k| lp(0.1 * k as f64, -2.0 + 0.3 * k as f64))
            .collect();
        let xs = [3u16, 100, 255, 0, 17, 64];
        let whole = nll_bits(&xs, &ps, 8, 1.0);
        let split = nll_bits(&xs[..2], &ps[..2], 8, 1.0) + nll_bits(&xs[2..], &ps[2..], 8, 1.0);
        assert!((whole - split).abs() < 1e-12);
    }

    #[test]
    fn log_prob_gradient_matches_differences() {
        let eps = 1e-6;
        for &(x, mu, ls) in &[
            (10u32, 0.05, -3.0),
            (0, 0.2, -1.0),
            (255, 0.7, -2.0),
            (128, 0.5, -6.9),
        ] {
            let (_, dmu, dls) = log_prob_with_grad(x, &lp(mu, ls), 8, 1.0);
            let f = |m: f64, s: f64| log_prob_with_grad(x, &lp(m, s), 8, 1.0).0;
            let nmu = (f(mu + eps, ls) - f(mu - eps, ls)) / (2.0 * eps);
            let nls = (f(mu, ls + eps) - f(mu, ls - eps)) / (2.0 * eps);
            assert!(
                (dmu - nmu).abs() <= 1e-6 * nmu.abs().max(1.0),
                "{dmu} vs {nmu}"
            );
            assert!(
                (dls - nls).abs() <= 1e-6 * nls.abs().max(1.0),
                "{dls} vs {nls}"
            );
        }
    }

    proptest! {
        #[test]
        fn distribution_sums_to_one(mu in -2.0f64..10.0, ls in -7.0f64..7.0, d in 1u8..=12, l in 0.5f64..16.0) {
            let p = lp(mu, ls);
            let total: f64 = (0..1u32 << d).map(|x| discrete_prob(x, &p, d, l)).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn log_prob_matches_direct_evaluation(x in 0u32..256, mu in -0.5f64..1.5, ls in -5.0f64..3.0) {
            let p = lp(mu, ls);
            let direct = discrete_prob(x, &p, 8, 1.0);
            // the direct CDF difference loses ~1e-16/p relative accuracy
            prop_assume!(direct > 1e-8);
            let stable = log_prob_with_grad(x, &p, 8, 1.0).0;
            prop_assert!((stable - direct.ln()).abs() < 1e-6 * stable.abs().max(1.0));
        }

        #[test]
        fn quantized_cdf_is_monotone(mu in -1.0f64..2.0, ls in -7.0f64..7.0) {
            let p = lp(mu, ls);
            let mut prev = 0;
            for k in 0..=256 {
                let c = quantized_cdf(k, &p, 8, 1.0);
                prop_assert!(c >= prev);
                prev = c;
            }
        }

        #[test]
        fn locate_inverts_quantize(mu in -1.0f64..2.0, ls in -7.0f64..3.0, f in 0u32..FREQ_TOTAL) {
            let p = lp(mu, ls);
            let x = locate_symbol(f, &p, 8, 1.0);
            match quantize_interval(x, &p, 8, 1.0) {
                Quantized::Interval(iv) => prop_assert!(iv.lo <= f && f < iv.hi),
                Quantized::Escape => prop_assert!(false, "escape located"),
            }
        }
    }
}
