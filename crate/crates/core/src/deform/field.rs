//! Dense 2-vector fields and the pure kernels that act on them.

use ndarray::{Array2, Array3};

use super::kernels;
use crate::data::ImageSlice;
use crate::error::{ensure, Result};

fn check_field(data: &Array3<f64>, what: &str) -> Result<()> {
    ensure!(
        data.dim().0 == 2,
        "{what} must have 2 channels, got {}",
        data.dim().0
    );
    ensure!(data.dim().1 > 0 && data.dim().2 > 0, "{what} is empty");
    ensure!(data.iter().all(|v| v.is_finite()), "{what} has non-finite values");
    Ok(())
}

/// Stationary velocity field, channels `(row, col)`, in pixels per unit time.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField(pub Array3<f64>);

/// Per-pixel displacement in pixels, channels `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField(pub Array3<f64>);

impl VelocityField {
    pub fn new(v: Array3<f64>) -> Result<Self> {
        check_field(&v, "velocity field")?;
        Ok(Self(v))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Array3::zeros((2, h, w)))
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.0.dim().1, self.0.dim().2)
    }
}

impl DeformationField {
    pub fn new(phi: Array3<f64>) -> Result<Self> {
        check_field(&phi, "deformation field")?;
        Ok(Self(phi))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Array3::zeros((2, h, w)))
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.0.dim().1, self.0.dim().2)
    }

    pub fn vector(&self, r: usize, c: usize) -> [f64; 2] {
        [self.0[[0, r, c]], self.0[[1, r, c]]]
    }

    /// Per-pixel displacement magnitude.
    pub fn magnitude(&self) -> Array2<f64> {
        let (h, w) = self.dim();
        Array2::from_shape_fn((h, w), |(r, c)| self.0[[0, r, c]].hypot(self.0[[1, r, c]]))
    }

    pub fn negated(&self) -> Self {
        Self(-&self.0)
    }
}

fn contiguous(a: &Array3<f64>) -> Vec<f64> {
    a.as_standard_layout().iter().copied().collect()
}

/// Scaling-and-squaring integration of a stationary velocity field.
/// `steps == 0` returns the velocity itself.
pub fn integrate(v: &VelocityField, steps: u32) -> DeformationField {
    let (h, w) = v.dim();
    let phi = kernels::integrate(&contiguous(&v.0), h, w, steps);
    DeformationField(Array3::from_shape_vec((2, h, w), phi).expect("shape"))
}

/// `output(p) = image(p + phi(p))`, bilinear, border clamped.
pub fn warp_array(image: &Array2<f64>, phi: &DeformationField) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    ensure!(
        phi.dim() == (h, w),
        "image {h}x{w} and field {:?} differ in shape",
        phi.dim()
    );
    let img: Vec<f64> = image.as_standard_layout().iter().copied().collect();
    let mut out = vec![0.0; h * w];
    kernels::warp_forward(&img, 1, h, w, &contiguous(&phi.0), &mut out);
    Ok(Array2::from_shape_vec((h, w), out).expect("shape"))
}

/// Warps a slice; metadata is carried over unchanged.
pub fn warp(image: &ImageSlice, phi: &DeformationField) -> Result<ImageSlice> {
    Ok(ImageSlice {
        pixels: warp_array(&image.pixels, phi)?,
        pixel_size_mm: image.pixel_size_mm,
        slice_index: image.slice_index,
    })
}

/// Gradients of `sum(grad_out * warp(image, phi))` with respect to the image
/// and the field.
pub fn warp_vjp(
    image: &Array2<f64>,
    phi: &DeformationField,
    grad_out: &Array2<f64>,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let (h, w) = image.dim();
    ensure!(phi.dim() == (h, w) && grad_out.dim() == (h, w), "shape mismatch");
    let img: Vec<f64> = image.as_standard_layout().iter().copied().collect();
    let g: Vec<f64> = grad_out.as_standard_layout().iter().copied().collect();
    let mut gi = vec![0.0; h * w];
    let mut gp = vec![0.0; 2 * h * w];
    kernels::warp_backward(
        &img,
        1,
        h,
        w,
        &contiguous(&phi.0),
        &g,
        Some(&mut gi),
        Some(&mut gp),
    );
    Ok((
        Array2::from_shape_vec((h, w), gi).expect("shape"),
        Array3::from_shape_vec((2, h, w), gp).expect("shape"),
    ))
}

/// Bilinear value of both channels at a real `(row, col)` point.
pub fn sample_at(phi: &DeformationField, point: [f64; 2]) -> Result<[f64; 2]> {
    let (h, w) = phi.dim();
    let [r, c] = point;
    ensure!(
        r >= 0.0 && r < h as f64 && c >= 0.0 && c < w as f64,
        "point ({r}, {c}) outside {h}x{w} grid"
    );
    let data = phi.0.as_standard_layout();
    let data = data.as_slice().expect("standard layout");
    let (ay, ax) = (kernels::axis(r, h), kernels::axis(c, w));
    Ok([
        kernels::sample(&data[..h * w], w, ay, ax),
        kernels::sample(&data[h * w..], w, ay, ax),
    ])
}

/// Largest displacement magnitude and its location; ties resolve to the
/// first pixel in row-major order.
pub fn max_displacement(phi: &DeformationField) -> (f64, (usize, usize)) {
    let (h, w) = phi.dim();
    let mut best = (0.0, (0, 0));
    for r in 0..h {
        for c in 0..w {
            let m = phi.0[[0, r, c]].hypot(phi.0[[1, r, c]]);
            if m > best.0 {
                best = (m, (r, c));
            }
        }
    }
    best
}

/// Central-difference Jacobian determinant of `id + phi` on interior pixels
/// (border rows and columns are left at 1).
pub fn jacobian_determinant(phi: &DeformationField) -> Array2<f64> {
    let (h, w) = phi.dim();
    let f = &phi.0;
    let mut det = Array2::from_elem((h, w), 1.0);
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            let drr = (f[[0, r + 1, c]] - f[[0, r - 1, c]]) / 2.0;
            let drc = (f[[0, r, c + 1]] - f[[0, r, c - 1]]) / 2.0;
            let dcr = (f[[1, r + 1, c]] - f[[1, r - 1, c]]) / 2.0;
            let dcc = (f[[1, r, c + 1]] - f[[1, r, c - 1]]) / 2.0;
            det[[r, c]] = (1.0 + drr) * (1.0 + dcc) - drc * dcr;
        }
    }
    det
}

/// Fraction of interior pixels with positive Jacobian determinant.
pub fn positive_jacobian_fraction(phi: &DeformationField) -> f64 {
    let (h, w) = phi.dim();
    if h < 3 || w < 3 {
        return 1.0;
    }
    let det = jacobian_determinant(phi);
    let mut pos = 0usize;
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            if det[[r, c]] > 0.0 {
                pos += 1;
            }
        }
    }
    pos as f64 / ((h - 2) * (w - 2)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn smooth_image(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(r, c)| {
            (r as f64 * 0.4).sin() * (c as f64 * 0.3).cos() + 0.1 * r as f64
        })
    }

    #[test]
    fn zero_velocity_integrates_to_zero() {
        let phi = integrate(&VelocityField::zeros(8, 8), 7);
        assert!(phi.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn steps_zero_returns_velocity() {
        let v = Array3::from_shape_fn((2, 5, 6), |(k, r, c)| (k + r * c) as f64 * 0.1);
        assert_eq!(integrate(&VelocityField(v.clone()), 0).0, v);
    }

    #[test]
    fn constant_velocity_integrates_to_itself() {
        let mut v = Array3::zeros((2, 32, 32));
        v.index_axis_mut(ndarray::Axis(0), 0).fill(1.5);
        v.index_axis_mut(ndarray::Axis(0), 1).fill(-2.25);
        let phi = integrate(&VelocityField(v), 7);
        for r in 4..28 {
            for c in 4..28 {
                assert!((phi.0[[0, r, c]] - 1.5).abs() < 1e-4);
                assert!((phi.0[[1, r, c]] + 2.25).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn zero_warp_is_exact_identity() {
        let img = smooth_image(9, 11);
        let out = warp_array(&img, &DeformationField::zeros(9, 11)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn integer_shift_moves_rows_and_clamps_border() {
        let img = smooth_image(8, 6);
        let mut phi = DeformationField::zeros(8, 6);
        phi.0.index_axis_mut(ndarray::Axis(0), 0).fill(2.0);
        let out = warp_array(&img, &phi).unwrap();
        for r in 0..8 {
            let src = (r + 2).min(7);
            for c in 0..6 {
                assert_eq!(out[[r, c]], img[[src, c]]);
            }
        }
    }

    #[test]
    fn warp_shape_mismatch_rejected() {
        let img = smooth_image(8, 6);
        assert!(warp_array(&img, &DeformationField::zeros(6, 8)).is_err());
    }

    #[test]
    fn warp_gradient_matches_finite_differences() {
        let (h, w) = (8, 8);
        let img = smooth_image(h, w);
        let phi = DeformationField(Array3::from_shape_fn((2, h, w), |(k, r, c)| {
            0.37 + 0.8 * ((k * 5 + r * 3 + c) as f64 * 0.7).sin()
        }));
        let ones = Array2::from_elem((h, w), 1.0);
        let (_, gp) = warp_vjp(&img, &phi, &ones).unwrap();
        let f = |p: &DeformationField| warp_array(&img, p).unwrap().sum();
        let hstep = 1e-3;
        let mut max_rel: f64 = 0.0;
        for idx in [(0, 2, 3), (1, 4, 4), (0, 5, 1), (1, 3, 6), (0, 6, 5)] {
            let mut plus = phi.clone();
            plus.0[idx] += hstep;
            let mut minus = phi.clone();
            minus.0[idx] -= hstep;
            let fd = (f(&plus) - f(&minus)) / (2.0 * hstep);
            let rel = (fd - gp[idx]).abs() / fd.abs().max(1e-8);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "relative error {max_rel}");
    }

    #[test]
    fn sample_at_lattice_and_midpoint() {
        let mut phi = DeformationField::zeros(4, 4);
        phi.0[[0, 1, 2]] = 7.0;
        phi.0[[1, 1, 2]] = -3.0;
        assert_eq!(sample_at(&phi, [1.0, 2.0]).unwrap(), [7.0, -3.0]);

        let mut phi = DeformationField::zeros(2, 2);
        // left column (0,0), right column (2,4)
        for r in 0..2 {
            phi.0[[0, r, 1]] = 2.0;
            phi.0[[1, r, 1]] = 4.0;
        }
        assert_eq!(sample_at(&phi, [0.0, 0.5]).unwrap(), [1.0, 2.0]);
        assert!(sample_at(&phi, [2.0, 0.0]).is_err());
        assert!(sample_at(&phi, [0.0, -0.1]).is_err());
    }

    #[test]
    fn max_displacement_cases() {
        assert_eq!(max_displacement(&DeformationField::zeros(5, 5)), (0.0, (0, 0)));
        let mut phi = DeformationField::zeros(32, 32);
        phi.0[[0, 10, 20]] = 3.0;
        phi.0[[1, 10, 20]] = 4.0;
        assert_eq!(max_displacement(&phi), (5.0, (10, 20)));
        // tie: first in row-major order wins
        phi.0[[0, 2, 30]] = 5.0;
        assert_eq!(max_displacement(&phi), (5.0, (2, 30)));
    }
}
