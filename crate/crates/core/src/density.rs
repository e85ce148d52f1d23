//! Log-densities shared by the lensing model and the compiled graph.
//!
//! Every function returns `f64::NEG_INFINITY` outside the support or for
//! invalid parameters; callers treat that as a rejection.

use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Normal log-density parameterized by variance.
pub fn normal_var(x: f64, mean: f64, var: f64) -> f64 {
    if !(var > 0.0) || !mean.is_finite() || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    let z = x - mean;
    -0.5 * (LN_2PI + var.ln()) - 0.5 * z * z / var
}

/// Normal log-density parameterized by precision (BUGS `dnorm`).
pub fn normal_prec(x: f64, mean: f64, precision: f64) -> f64 {
    if !(precision > 0.0) || !precision.is_finite() || !mean.is_finite() || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    let z = x - mean;
    0.5 * (precision.ln() - LN_2PI) - 0.5 * precision * z * z
}

/// Gamma log-density, shape-rate parameterization (BUGS `dgamma`).
pub fn gamma(x: f64, shape: f64, rate: f64) -> f64 {
    if !(shape > 0.0 && rate > 0.0) || !(x > 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Uniform log-density on the closed interval `[lo, hi]`.
pub fn uniform(x: f64, lo: f64, hi: f64) -> f64 {
    if !(lo < hi) || !(x >= lo && x <= hi) {
        return f64::NEG_INFINITY;
    }
    -(hi - lo).ln()
}
