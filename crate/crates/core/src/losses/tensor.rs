//! Autograd loss terms on `N x ...` batches. Each returns one value per item.

use candle_core::{DType, Tensor};

use crate::deform::ops;

/// Per-item Huber loss for `N x 2` targets and predictions.
pub fn huber(y: &Tensor, y_hat: &Tensor, c: f64) -> candle_core::Result<Tensor> {
    let d = (y - y_hat)?.abs()?;
    let quadratic = d.sqr()?.affine(1.0 / (2.0 * c), c / 2.0)?;
    let linear_branch = d.ge(c)?;
    linear_branch.where_cond(&d, &quadratic)?.sum(1)
}

/// Per-item sum of squared forward differences of `N x 2 x H x W` fields.
pub fn smoothness(phi: &Tensor) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = phi.dims4()?;
    let mut total = phi.zeros_like()?.sum((1, 2, 3))?;
    if h > 1 {
        let d = (phi.narrow(2, 1, h - 1)? - phi.narrow(2, 0, h - 1)?)?;
        total = (total + d.sqr()?.sum((1, 2, 3))?)?;
    }
    if w > 1 {
        let d = (phi.narrow(3, 1, w - 1)? - phi.narrow(3, 0, w - 1)?)?;
        total = (total + d.sqr()?.sum((1, 2, 3))?)?;
    }
    Ok(total)
}

/// Per-item hinge `sum(max(0, |phi| - delta))` with one threshold per item.
///
/// The magnitude is computed as `sqrt(max(|phi|^2, 1e-12))`, which keeps the
/// gradient finite at zero displacement and only changes values below
/// `1e-6` px, where the hinge is inactive for any positive threshold.
pub fn ceiling(phi: &Tensor, delta_px: &[f64]) -> candle_core::Result<Tensor> {
    let n = phi.dim(0)?;
    let sq = phi.sqr()?.sum_keepdim(1)?;
    let norm = sq.maximum(1e-12)?.sqrt()?;
    let delta = Tensor::new(delta_px, phi.device())?
        .to_dtype(phi.dtype())?
        .reshape((n, 1, 1, 1))?;
    norm.broadcast_sub(&delta)?.relu()?.sum((1, 2, 3))
}

/// Per-item mean squared error between `x0_prime` warped by `phi` and `x0`.
pub fn warp_consistency(x0: &Tensor, x0_prime: &Tensor, phi: &Tensor) -> candle_core::Result<Tensor> {
    let warped = ops::warp(x0_prime, phi)?;
    (warped - x0)?.sqr()?.mean((1, 2, 3))
}

/// Scalar helper used by tests and logging.
pub fn scalar(t: &Tensor) -> candle_core::Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}
