//! Reference loss implementations on f64 arrays, with analytic gradients.

use ndarray::{Array2, Array3};

use crate::data::ImageSlice;
use crate::deform::{warp_array, warp_vjp, DeformationField};
use crate::error::{ensure, Result};

fn huber_component(diff: f64, c: f64) -> f64 {
    let a = diff.abs();
    if a >= c {
        a
    } else {
        (diff * diff + c * c) / (2.0 * c)
    }
}

/// Sum over both components of the piecewise loss: `|d|` when `|d| >= c`,
/// otherwise `(d^2 + c^2) / (2c)`.
pub fn huber(y: [f64; 2], y_hat: [f64; 2], c: f64) -> f64 {
    huber_component(y[0] - y_hat[0], c) + huber_component(y[1] - y_hat[1], c)
}

/// Gradient of [`huber`] with respect to `y_hat`.
pub fn huber_grad(y: [f64; 2], y_hat: [f64; 2], c: f64) -> [f64; 2] {
    let g = |d: f64| if d.abs() >= c { -d.signum() } else { -d / c };
    [g(y[0] - y_hat[0]), g(y[1] - y_hat[1])]
}

/// Squared forward differences along rows and columns, summed over the grid.
pub fn smoothness(phi: &DeformationField) -> f64 {
    let f = &phi.0;
    let (_, h, w) = f.dim();
    let mut s = 0.0;
    for ch in 0..2 {
        for r in 0..h {
            for c in 0..w {
                if r > 0 {
                    let d = f[[ch, r, c]] - f[[ch, r - 1, c]];
                    s += d * d;
                }
                if c > 0 {
                    let d = f[[ch, r, c]] - f[[ch, r, c - 1]];
                    s += d * d;
                }
            }
        }
    }
    s
}

pub fn smoothness_grad(phi: &DeformationField) -> Array3<f64> {
    let f = &phi.0;
    let (_, h, w) = f.dim();
    let mut g = Array3::zeros(f.dim());
    for ch in 0..2 {
        for r in 0..h {
            for c in 0..w {
                if r > 0 {
                    let d = 2.0 * (f[[ch, r, c]] - f[[ch, r - 1, c]]);
                    g[[ch, r, c]] += d;
                    g[[ch, r - 1, c]] -= d;
                }
                if c > 0 {
                    let d = 2.0 * (f[[ch, r, c]] - f[[ch, r, c - 1]]);
                    g[[ch, r, c]] += d;
                    g[[ch, r, c - 1]] -= d;
                }
            }
        }
    }
    g
}

/// Hinge on displacement magnitudes above `delta_px`, summed over pixels.
pub fn ceiling(phi: &DeformationField, delta_px: f64) -> Result<f64> {
    ensure!(delta_px >= 0.0, "ceiling threshold must be >= 0, got {delta_px}");
    Ok(phi.magnitude().iter().map(|m| (m - delta_px).max(0.0)).sum())
}

pub fn ceiling_grad(phi: &DeformationField, delta_px: f64) -> Array3<f64> {
    let f = &phi.0;
    let (_, h, w) = f.dim();
    let mut g = Array3::zeros(f.dim());
    for r in 0..h {
        for c in 0..w {
            let m = f[[0, r, c]].hypot(f[[1, r, c]]);
            if m > delta_px && m > 0.0 {
                g[[0, r, c]] = f[[0, r, c]] / m;
                g[[1, r, c]] = f[[1, r, c]] / m;
            }
        }
    }
    g
}

/// Mean squared error between `x0_prime` warped by `phi` and `x0`.
pub fn warp_consistency(x0: &ImageSlice, x0_prime: &ImageSlice, phi: &DeformationField) -> Result<f64> {
    warp_consistency_array(&x0.pixels, &x0_prime.pixels, phi)
}

pub fn warp_consistency_array(x0: &Array2<f64>, x0_prime: &Array2<f64>, phi: &DeformationField) -> Result<f64> {
    ensure!(x0.dim() == x0_prime.dim(), "image shapes differ");
    let warped = warp_array(x0_prime, phi)?;
    Ok((&warped - x0).mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// Gradient of [`warp_consistency_array`] with respect to `phi`.
pub fn warp_consistency_grad(x0: &Array2<f64>, x0_prime: &Array2<f64>, phi: &DeformationField) -> Result<Array3<f64>> {
    let warped = warp_array(x0_prime, phi)?;
    let n = x0.len() as f64;
    let grad_out = (&warped - x0).mapv(|d| 2.0 * d / n);
    let (_, gphi) = warp_vjp(x0_prime, phi, &grad_out)?;
    Ok(gphi)
}
