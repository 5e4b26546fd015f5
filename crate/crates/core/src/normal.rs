//! Standard normal helpers with tail-accurate interval masses.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// 1/sqrt(2 pi)
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * PI).ln()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail 1 - Phi(x), accurate for large x.
pub fn sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

pub fn quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // polish the approximate inverse against the accurate cdf
    for _ in 0..2 {
        let d = pdf(x);
        if !x.is_finite() || d == 0.0 {
            break;
        }
        let r = if x > 0.0 { (1.0 - p) - sf(x) } else { cdf(x) - p };
        x -= r / d;
    }
    x
}

/// P(a <= Z < b) for standard normal Z, using whichever tail keeps precision.
///
/// Mirrored intervals give bit-identical results: `mass(a, b) == mass(-b, -a)`.
pub fn mass(a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    if a >= 0.0 {
        sf(a) - sf(b)
    } else if b <= 0.0 {
        sf(-b) - sf(-a)
    } else {
        1.0 - (sf(-a) + sf(b))
    }
}

/// Phi(a / s) with the indicator limit 1{a > 0} + 1/2 1{a = 0} at s = 0.
pub fn cdf_scaled(a: f64, s: f64) -> f64 {
    if s > 0.0 {
        cdf(a / s)
    } else if a > 0.0 {
        1.0
    } else if a < 0.0 {
        0.0
    } else {
        0.5
    }
}

/// log(sum(exp(v))) over a slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}
