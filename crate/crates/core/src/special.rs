//! Scalar special functions: standard normal and Student-t helpers.

use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc_inv;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * LN_2PI).exp()
}

#[inline]
pub fn norm_logpdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * LN_2PI
}

/// Standard normal CDF, accurate in both tails.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal quantile. Returns ±∞ at the endpoints.
pub fn norm_ppf(u: f64) -> f64 {
    if u <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if u >= 1.0 {
        return f64::INFINITY;
    }
    let x = -SQRT_2 * erfc_inv(2.0 * u);
    // erfc_inv is good to ~1e-10 relative; one Newton step on the accurate
    // CDF brings it to working precision.
    let d = norm_pdf(x);
    if d > 0.0 {
        let e = if u < 0.5 {
            norm_cdf(x) - u
        } else {
            (1.0 - u) - norm_cdf(-x)
        };
        x - e / d
    } else {
        x
    }
}

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// CDF of a location-scale Student-t.
pub fn t_cdf(x: f64, loc: f64, scale: f64, dof: f64) -> f64 {
    StudentsT::new(loc, scale, dof)
        .map(|t| t.cdf(x))
        .unwrap_or(f64::NAN)
}

/// Quantile of a location-scale Student-t.
pub fn t_ppf(u: f64, loc: f64, scale: f64, dof: f64) -> f64 {
    StudentsT::new(loc, scale, dof)
        .map(|t| t.inverse_cdf(u))
        .unwrap_or(f64::NAN)
}

/// Numerically stable `log(Σ exp(v))`. Returns `-∞` when every entry is `-∞`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_basics() {
        assert_eq!(norm_cdf(0.0), 0.5);
        assert!((norm_ppf(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((norm_cdf(norm_ppf(1e-10)) - 1e-10).abs() < 1e-22);
        assert_eq!(norm_ppf(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn lse_handles_all_negative_infinity() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn cauchy_cdf() {
        assert!((t_cdf(1.0, 0.0, 1.0, 1.0) - 0.75).abs() < 1e-12);
    }
}
