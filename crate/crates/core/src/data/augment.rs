//! Rotation augmentation applied jointly to a slice and its annotation.

use ndarray::Array2;
use rand::Rng;

use super::types::{ImageSlice, LandmarkAnnotation};
use crate::deform::kernels::{axis, sample};

/// Normalized background used for pixels rotated in from outside the grid.
pub const BACKGROUND: f64 = -1.0;

/// Rotates a `(row, col)` vector counterclockwise as seen on screen (rows
/// grow downward).
pub fn rotate_vector(v: [f64; 2], angle_deg: f64) -> [f64; 2] {
    let (s, c) = angle_deg.to_radians().sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c]
}

fn centre(h: usize, w: usize) -> [f64; 2] {
    [(h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0]
}

/// Rotates a point about the image centre.
pub fn rotate_point(p: [f64; 2], h: usize, w: usize, angle_deg: f64) -> [f64; 2] {
    let c = centre(h, w);
    let d = rotate_vector([p[0] - c[0], p[1] - c[1]], angle_deg);
    [c[0] + d[0], c[1] + d[1]]
}

/// Rotates the image (bilinear, background fill) and the annotation by the
/// same rotation. The annotation is discarded if its landmark leaves the grid.
pub fn augment_rotation(
    slice: &ImageSlice,
    annotation: Option<&LandmarkAnnotation>,
    angle_deg: f64,
) -> (ImageSlice, Option<LandmarkAnnotation>) {
    let (h, w) = slice.pixels.dim();
    if angle_deg == 0.0 {
        return (slice.clone(), annotation.copied());
    }
    let plane = slice.pixels.as_standard_layout();
    let plane = plane.as_slice().expect("standard layout");
    let c = centre(h, w);
    let pixels = Array2::from_shape_fn((h, w), |(r, k)| {
        // inverse rotation maps the output pixel back into the source
        let d = rotate_vector([r as f64 - c[0], k as f64 - c[1]], -angle_deg);
        let (sr, sc) = (c[0] + d[0], c[1] + d[1]);
        let eps = 1e-9;
        if sr < -eps || sc < -eps || sr > (h - 1) as f64 + eps || sc > (w - 1) as f64 + eps {
            BACKGROUND
        } else {
            sample(plane, w, axis(sr, h), axis(sc, w))
        }
    });
    let rotated = ImageSlice {
        pixels,
        pixel_size_mm: slice.pixel_size_mm,
        slice_index: slice.slice_index,
    };
    let ann = annotation.and_then(|a| {
        let landmark = rotate_point(a.landmark, h, w, angle_deg);
        let out = LandmarkAnnotation {
            landmark,
            displacement: rotate_vector(a.displacement, angle_deg),
        };
        out.validate(h, w).ok().map(|_| out)
    });
    (rotated, ann)
}

/// Draws an angle uniformly from `[-range, range]` degrees.
pub fn random_angle<R: Rng + ?Sized>(rng: &mut R, range_deg: f64) -> f64 {
    if range_deg <= 0.0 {
        0.0
    } else {
        rng.random_range(-range_deg..=range_deg)
    }
}
