//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

/// Clamped bilinear read of an `H x W` plane.
pub fn bilinear(plane: &Array2<f64>, r: f64, c: f64) -> f64 {
    let (h, w) = plane.dim();
    let r = r.clamp(0.0, (h - 1) as f64);
    let c = c.clamp(0.0, (w - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let top = plane[[r0, c0]] * (1.0 - fc) + plane[[r0, c1]] * fc;
    let bottom = plane[[r1, c0]] * (1.0 - fc) + plane[[r1, c1]] * fc;
    top * (1.0 - fr) + bottom * fr
}

pub fn channel(f: &Array3<f64>, k: usize) -> Array2<f64> {
    f.index_axis(ndarray::Axis(0), k).to_owned()
}

/// `out(p) = img(p + phi(p))`.
pub fn warp_ref(img: &Array2<f64>, phi: &Array3<f64>) -> Array2<f64> {
    Array2::from_shape_fn(img.dim(), |(r, c)| {
        bilinear(img, r as f64 + phi[[0, r, c]], c as f64 + phi[[1, r, c]])
    })
}

/// Displacement after integrating `dx/dt = v(x)` over unit time with
/// `substeps` forward-Euler steps from every grid point.
pub fn euler_integrate(v: &Array3<f64>, substeps: usize) -> Array3<f64> {
    let (_, h, w) = v.dim();
    let (vr, vc) = (channel(v, 0), channel(v, 1));
    let dt = 1.0 / substeps as f64;
    let mut out = Array3::zeros((2, h, w));
    for r in 0..h {
        for c in 0..w {
            let (mut y, mut x) = (r as f64, c as f64);
            for _ in 0..substeps {
                let dy = bilinear(&vr, y, x);
                let dx = bilinear(&vc, y, x);
                y += dt * dy;
                x += dt * dx;
            }
            out[[0, r, c]] = y - r as f64;
            out[[1, r, c]] = x - c as f64;
        }
    }
    out
}

fn blur_axis(a: &Array2<f64>, kernel: &[f64], along_rows: bool) -> Array2<f64> {
    let (h, w) = a.dim();
    let rad = (kernel.len() / 2) as isize;
    Array2::from_shape_fn((h, w), |(r, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let o = i as isize - rad;
                let (rr, cc) = if along_rows {
                    ((r as isize + o).clamp(0, h as isize - 1) as usize, c)
                } else {
                    (r, (c as isize + o).clamp(0, w as isize - 1) as usize)
                };
                k * a[[rr, cc]]
            })
            .sum()
    })
}

pub fn gaussian_blur(a: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let rad = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-rad..=rad).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    blur_axis(&blur_axis(a, &k, true), &k, false)
}

/// Gaussian-blurred white noise rescaled so the largest vector has length
/// `max_px`.
pub fn smooth_field<R: Rng>(rng: &mut R, h: usize, w: usize, sigma: f64, max_px: f64) -> Array3<f64> {
    let mut f = Array3::zeros((2, h, w));
    for k in 0..2 {
        let noise = Array2::from_shape_simple_fn((h, w), || rng.sample::<f64, _>(StandardNormal));
        f.index_axis_mut(ndarray::Axis(0), k).assign(&gaussian_blur(&noise, sigma));
    }
    let m = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .map(|(r, c)| f[[0, r, c]].hypot(f[[1, r, c]]))
        .fold(0.0, f64::max);
    f * (max_px / m)
}

/// Smooth test image in `[-1, 1]`.
pub fn smooth_image(h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
        0.6 * (2.0 * std::f64::consts::PI * (1.5 * y + 0.5 * x)).sin() * (3.0 * x).cos()
            + 0.3 * (-((y - 0.5).powi(2) + (x - 0.4).powi(2)) * 20.0).exp()
    })
}
