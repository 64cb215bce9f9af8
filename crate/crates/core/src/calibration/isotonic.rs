use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::PredictionRecord;
use crate::{Error, Result};

/// Weighted pool-adjacent-violators: the least-squares non-decreasing fit
/// of `targets` in the given order.
pub fn pav(targets: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if targets.len() != weights.len() {
        return Err(Error::SizeMismatch {
            expected: targets.len(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument(
            "pav weights must be positive".into(),
        ));
    }
    // (mean, weight, length) per block
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(targets.len());
    for (&y, &w) in targets.iter().zip(weights) {
        blocks.push((y, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, n2) = blocks[blocks.len() - 1];
            let (m1, w1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let w = w1 + w2;
            *blocks.last_mut().expect("two blocks") = ((w1 * m1 + w2 * m2) / w, w, n1 + n2);
        }
    }
    Ok(blocks
        .into_iter()
        .flat_map(|(m, _, n)| core::iter::repeat_n(m, n))
        .collect())
}

/// Step function from raw confidence to calibrated confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    /// Distinct fitted confidences, strictly increasing.
    pub breakpoints: Vec<f64>,
    /// Fitted value at each breakpoint, non-decreasing.
    pub values: Vec<f64>,
}

/// Regresses correctness on confidence under a monotonicity constraint.
/// Records sharing a confidence are pooled into one weighted point first.
pub fn fit_isotonic(records: &[PredictionRecord]) -> Result<IsotonicMap> {
    if records.is_empty() {
        return Err(Error::EmptyInput("isotonic fit"));
    }
    let mut points: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.confidence, f64::from(u8::from(r.correct()))))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut breakpoints: Vec<f64> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for (x, y) in points {
        if breakpoints.last() == Some(&x) {
            *sums.last_mut().expect("open group") += y;
            *weights.last_mut().expect("open group") += 1.0;
        } else {
            breakpoints.push(x);
            sums.push(y);
            weights.push(1.0);
        }
    }
    let means: Vec<f64> = sums.iter().zip(&weights).map(|(s, w)| s / w).collect();
    let values = pav(&means, &weights)?;
    Ok(IsotonicMap {
        breakpoints,
        values,
    })
}

/// Value at the breakpoint nearest to `confidence`; exact midpoints take the
/// lower breakpoint. Inputs outside the fitted range take the end values.
pub fn apply_isotonic(map: &IsotonicMap, confidence: f64) -> f64 {
    let bp = &map.breakpoints;
    let upper = bp.partition_point(|&b| b < confidence);
    if upper == 0 {
        return map.values[0];
    }
    if upper == bp.len() {
        return map.values[bp.len() - 1];
    }
    let lower = upper - 1;
    if confidence - bp[lower] <= bp[upper] - confidence {
        map.values[lower]
    } else {
        map.values[upper]
    }
}
