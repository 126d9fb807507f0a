use crate::error::{Error, Result};

/// Variance below which the loss-based estimate is treated as undefined.
pub const MIN_ANCHOR_VARIANCE: f64 = 1e-12;

fn mean(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |s, &x| s + x) / v.len() as f64
}

/// Sample covariance of the new and anchor losses over the sample variance of
/// the anchor losses, before clamping.
///
/// `Ok(None)` is the degenerate-variance sentinel: the caller should keep its
/// previous smoothed weight.
pub fn loss_covariance_ratio(new: &[f64], anchor: &[f64]) -> Result<Option<f64>> {
    if new.len() != anchor.len() {
        return Err(Error::Argument(format!(
            "probe loss vectors differ in length ({} vs {})",
            new.len(),
            anchor.len()
        )));
    }
    if new.len() < 2 {
        return Err(Error::Argument("need at least two probe losses".into()));
    }
    let (mn, ma) = (mean(new), mean(anchor));
    let denom = (new.len() - 1) as f64;
    let cov = new.iter().zip(anchor).fold(0.0, |s, (&x, &y)| s + (x - mn) * (y - ma)) / denom;
    let var = anchor.iter().fold(0.0, |s, &y| s + (y - ma) * (y - ma)) / denom;
    if !(var >= MIN_ANCHOR_VARIANCE) {
        return Ok(None);
    }
    Ok(Some(cov / var))
}

/// Loss-based estimate of the optimal correction weight, clamped to `[0, 1]`.
pub fn estimate_c_hat(new: &[f64], anchor: &[f64]) -> Result<Option<f64>> {
    Ok(loss_covariance_ratio(new, anchor)?.map(|c| c.clamp(0.0, 1.0)))
}
