//! Scalar log densities used by the model. Variances below `VAR_FLOOR`
//! evaluate to `-inf` instead of producing non-finite arithmetic.

use std::f64::consts::PI;

pub const VAR_FLOOR: f64 = 1e-300;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[inline]
pub fn normal_ln_var(x: f64, mean: f64, var: f64) -> f64 {
    if !(var >= VAR_FLOOR) {
        return f64::NEG_INFINITY;
    }
    let z = x - mean;
    -0.5 * (LN_2PI + var.ln() + z * z / var)
}

#[inline]
pub fn normal_ln(x: f64, mean: f64, sd: f64) -> f64 {
    normal_ln_var(x, mean, sd * sd)
}

/// `|N(0, scale^2)|` on `x > 0`.
#[inline]
pub fn half_normal_ln(x: f64, scale: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    std::f64::consts::LN_2 + normal_ln(x, 0.0, scale)
}

/// Gamma with shape/rate parameterization.
#[inline]
pub fn gamma_ln(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

#[inline]
pub fn beta_ln(x: f64, a: f64, b: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) {
        return f64::NEG_INFINITY;
    }
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)
}

#[inline]
pub fn uniform_ln(x: f64, lo: f64, hi: f64) -> f64 {
    if x > lo && x < hi {
        -(hi - lo).ln()
    } else {
        f64::NEG_INFINITY
    }
}

#[inline]
pub fn bernoulli_ln(c: f64, p: f64) -> f64 {
    if c == 1.0 {
        if p > 0.0 {
            p.ln()
        } else {
            f64::NEG_INFINITY
        }
    } else if c == 0.0 {
        if p < 1.0 {
            (1.0 - p).ln()
        } else {
            f64::NEG_INFINITY
        }
    } else {
        f64::NEG_INFINITY
    }
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-15 for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}
