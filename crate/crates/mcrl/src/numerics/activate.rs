//! Saturating softmax and sigmoid.
//!
//! Exponent arguments are clamped to `±EXP_CLAMP` so no input can produce an
//! Inf, and outputs are pinned strictly inside (0, 1) so downstream ratios
//! and logs stay finite.

use crate::error::{Error, Result};

/// Exponent arguments are clamped to this magnitude before `exp`.
pub const EXP_CLAMP: f64 = 500.0;

/// Smallest distance softmax/sigmoid outputs keep from 0 and 1.
const OUTPUT_MARGIN: f64 = 1e-15;

/// Numerically stable softmax of a logit vector.
///
/// Entries land in (0, 1) and sum to 1 up to rounding; adding a constant to
/// every logit leaves the result unchanged up to rounding. Empty or
/// non-finite input is rejected.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid_argument("softmax: empty input"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_argument("softmax: non-finite input"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax for callers that already hold finite logits (model outputs).
pub fn softmax_in_place(row: &mut [f64]) {
    debug_assert!(row.iter().all(|v| v.is_finite()));
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).max(-EXP_CLAMP).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        // a dominant logit would otherwise round to exactly 1
        *v = (*v / sum).clamp(OUTPUT_MARGIN, 1.0 - OUTPUT_MARGIN);
    }
}

/// Logistic function with input clamp and an open-interval output guard.
pub fn sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid_argument("sigmoid: non-finite input"));
    }
    Ok(sigmoid_saturating(x))
}

/// Infallible sigmoid used on values already known to be finite.
pub fn sigmoid_saturating(x: f64) -> f64 {
    let x = x.clamp(-EXP_CLAMP, EXP_CLAMP);
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(OUTPUT_MARGIN, 1.0 - OUTPUT_MARGIN)
}
