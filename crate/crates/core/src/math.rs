//! Log-space numerics shared by every lattice computation.

use crate::error::{Error, Result};

/// Stable log(sum(exp(x_i))) with max subtraction.
///
/// The empty sum is log 0, returned as `f64::NEG_INFINITY`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Two-argument form, used by DP inner loops.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-probabilities of softmax(logits / temperature).
pub fn log_softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        return Err(Error::Invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|&z| z / temperature).collect();
    let lse = logsumexp(&scaled);
    Ok(scaled.iter().map(|&z| z - lse).collect())
}

/// Plain log-softmax (temperature 1).
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax_with_temperature(logits, 1.0).expect("temperature 1 is valid")
}
