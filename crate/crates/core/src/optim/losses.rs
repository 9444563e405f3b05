//! Photometric and orientation losses on plain values. The tracked
//! versions used in training are built inline in [`super::train`].

use crate::math::Vec3;
use crate::{Error, Result};

/// Mean squared error over all channels of two tonemapped images.
pub fn photometric_loss(rendered: &[f64], target: &[f64]) -> Result<f64> {
    if rendered.len() != target.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", target.len()),
            found: format!("{} values", rendered.len()),
        });
    }
    if rendered.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = rendered.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / rendered.len() as f64)
}

/// `sum w max(0, -n . wo)^2` over `(weight, pre-flip normal)` pairs.
pub fn orientation_loss(samples: &[(f64, Vec3)], wo: Vec3) -> f64 {
    samples.iter().map(|&(w, n)| w * (-n.dot(wo)).max(0.0).powi(2)).sum()
}
