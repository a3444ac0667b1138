//! Normal-distribution helpers that stay accurate in the far tails.
//!
//! Interval masses and truncated means are computed from the scaled
//! complementary error function so that intervals lying many standard
//! deviations from the mean never reduce to `0 / 0`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const ERFCX_ASYMPTOTIC_FROM: f64 = 25.0;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
#[cfg(test)]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `exp(x^2) * erfc(x)` for `x >= 0`.
pub fn erfcx(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < ERFCX_ASYMPTOTIC_FROM {
        // x*x rounded, plus its rounding error, so exp() sees the exact square
        let x2 = x * x;
        let err = x.mul_add(x, -x2);
        libm::exp(x2) * (1.0 + err) * libm::erfc(x)
    } else {
        let inv = 1.0 / (2.0 * x * x);
        // 1 - 1/(2x^2) + 3/(2x^2)^2 - 15/(2x^2)^3 + ...
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..8 {
            term *= -((2 * k - 1) as f64) * inv;
            sum += term;
        }
        sum / (x * PI.sqrt())
    }
}

/// Mills ratio `Q(x) / phi(x)` for `x >= 0`, where `Q` is the upper tail.
fn mills(x: f64) -> f64 {
    (PI / 2.0).sqrt() * erfcx(x * FRAC_1_SQRT_2)
}

/// `ln(Phi(b) - Phi(a))` for `a <= b`.
pub fn log_norm_interval(a: f64, b: f64) -> f64 {
    debug_assert!(a <= b);
    if a == b {
        return f64::NEG_INFINITY;
    }
    if a >= 0.0 {
        log_upper_interval(a, b)
    } else if b <= 0.0 {
        log_upper_interval(-b, -a)
    } else {
        // straddles zero: both erf terms are positive, no cancellation
        (0.5 * (libm::erf(b * FRAC_1_SQRT_2) + libm::erf(-a * FRAC_1_SQRT_2))).ln()
    }
}

// ln(Q(a) - Q(b)) for 0 <= a < b, with Q(x) = phi(x) * mills(x).
fn log_upper_interval(a: f64, b: f64) -> f64 {
    if b.is_infinite() {
        return -0.5 * a * a - LN_SQRT_2PI + mills(a).ln();
    }
    let ratio = (-0.5 * (b - a) * (b + a)).exp();
    -0.5 * a * a - LN_SQRT_2PI + (mills(a) - mills(b) * ratio).ln()
}

/// Mean offset of a standard normal truncated to `[a, b]`:
/// `(phi(a) - phi(b)) / (Phi(b) - Phi(a))`.
pub fn truncated_mean(a: f64, b: f64) -> f64 {
    debug_assert!(a < b);
    if a >= 0.0 {
        upper_truncated_mean(a, b)
    } else if b <= 0.0 {
        -upper_truncated_mean(-b, -a)
    } else {
        let mass = 0.5 * (libm::erf(b * FRAC_1_SQRT_2) + libm::erf(-a * FRAC_1_SQRT_2));
        (norm_pdf(a) - norm_pdf(b)) / mass
    }
}

fn upper_truncated_mean(a: f64, b: f64) -> f64 {
    if b.is_infinite() {
        return 1.0 / mills(a);
    }
    let ratio = (-0.5 * (b - a) * (b + a)).exp();
    (1.0 - ratio) / (mills(a) - mills(b) * ratio)
}

/// `Phi(b) - Phi(a)` without catastrophic cancellation in the tails.
pub fn norm_interval(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        0.5 * (libm::erfc(a * FRAC_1_SQRT_2) - libm::erfc(b * FRAC_1_SQRT_2))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b * FRAC_1_SQRT_2) - libm::erfc(-a * FRAC_1_SQRT_2))
    } else {
        0.5 * (libm::erf(b / SQRT_2) + libm::erf(-a / SQRT_2))
    }
}
