//! Schematic head phantoms with exact ground-truth deformations.
//!
//! A positive slice is the warp of its normal counterpart by the integral of a
//! Gaussian-bump lateral velocity, scaled so that the largest displacement
//! equals the slice's target shift.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_array, write_array2, write_array3, Dataset, ImageSlice, LandmarkAnnotation, Volume};
use crate::deform::{integrate, max_displacement, warp_array, DeformationField, VelocityField};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub n_cases: usize,
    pub positive_fraction: f64,
    /// Range of the per-case peak shift, in pixels.
    pub shift_range_px: (f64, f64),
    pub slices_per_case: usize,
    pub labeled_slices_per_case: usize,
    pub pixel_size_mm: f64,
    pub integration_steps: u32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            n_cases: 80,
            positive_fraction: 0.75,
            shift_range_px: (2.0, 20.0),
            slices_per_case: 17,
            labeled_slices_per_case: 4,
            pixel_size_mm: 0.86,
            integration_steps: 7,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.image_size >= 16, "image_size must be >= 16");
        ensure!(self.n_cases >= 1, "n_cases must be >= 1");
        ensure!(
            (0.0..=1.0).contains(&self.positive_fraction),
            "positive_fraction must lie in [0, 1]"
        );
        let (lo, hi) = self.shift_range_px;
        ensure!(0.0 < lo && lo <= hi, "shift range ({lo}, {hi}) must be positive and ordered");
        let limit = self.image_size as f64 / 8.0;
        ensure!(
            hi <= limit,
            "shift up to {hi} px does not fit a {}-pixel image (limit {limit})",
            self.image_size
        );
        ensure!(self.slices_per_case >= 1, "slices_per_case must be >= 1");
        ensure!(
            self.labeled_slices_per_case <= self.slices_per_case,
            "cannot label more slices than exist"
        );
        ensure!(self.pixel_size_mm > 0.0, "pixel_size_mm must be positive");
        Ok(())
    }

    pub fn positive_count(&self) -> usize {
        (self.n_cases as f64 * self.positive_fraction).round() as usize
    }

    fn case_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        rng
    }
}

/// Hidden ground truth of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTruth {
    pub normal: Array2<f64>,
    pub velocity: VelocityField,
    pub field: DeformationField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub volume: Volume,
    /// One entry per slice, in slice order.
    pub truth: Vec<SliceTruth>,
}

/// Random per-case anatomy.
#[derive(Debug, Clone)]
struct Anatomy {
    center: (f64, f64),
    axes: (f64, f64),
    skull: f64,
    midline_bend: f64,
    ventricle_offset: (f64, f64),
    ventricle_axes: (f64, f64),
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Anatomy {
    fn sample<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        let s = size as f64;
        let waves = (0..6)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                let k = rng.random_range(2.0..9.0) * 2.0 * PI / s;
                (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.01..0.03))
            })
            .collect();
        Self {
            center: (
                s / 2.0 + rng.random_range(-0.02..0.02) * s,
                s / 2.0 + rng.random_range(-0.02..0.02) * s,
            ),
            axes: (rng.random_range(0.38..0.42) * s, rng.random_range(0.31..0.35) * s),
            skull: (0.025 * s).max(1.5),
            midline_bend: rng.random_range(-0.01..0.01) * s,
            ventricle_offset: (rng.random_range(-0.04..0.02) * s, rng.random_range(0.05..0.07) * s),
            ventricle_axes: (rng.random_range(0.09..0.12) * s, rng.random_range(0.025..0.04) * s),
            waves,
        }
    }

    /// Lateral coordinate of the midline at row `r`.
    fn midline_col(&self, r: f64, scale: f64) -> f64 {
        let rel = (r - self.center.0) / (self.axes.0 * scale);
        self.center.1 + self.midline_bend * (PI * rel.clamp(-1.0, 1.0)).sin()
    }
}

fn soft_step(x: f64, width: f64) -> f64 {
    0.5 * (1.0 + (x / width).tanh())
}

/// Normal slice at relative axial position `z` in [-1, 1].
fn normal_slice(anat: &Anatomy, size: usize, z: f64) -> Array2<f64> {
    let s = size as f64;
    let scale = (1.0 - 0.45 * z * z).sqrt();
    let vent_scale = 1.0 - 0.6 * z * z;
    let (ar, ac) = (anat.axes.0 * scale, anat.axes.1 * scale);
    let edge = (1.2 * s / 256.0).max(1.0);
    let mid_width = (1.6 * s / 256.0).max(1.2);
    Array2::from_shape_fn((size, size), |(r, c)| {
        let (r, c) = (r as f64, c as f64);
        let dr = r - anat.center.0;
        let dc = c - anat.center.1;
        let rho = ((dr / ar).powi(2) + (dc / ac).powi(2)).sqrt();
        let dist = (1.0 - rho) * ar.min(ac); // approximate signed pixel distance to the inner skull edge
        let inside = soft_step(dist, edge);
        let outer = soft_step(dist + anat.skull, edge);
        let texture: f64 = anat
            .waves
            .iter()
            .map(|(kr, kc, ph, amp)| amp * (kr * r + kc * c + ph).sin())
            .sum();
        let mut brain = -0.1 + texture;
        let mc = anat.midline_col(r, scale);
        let along = (dr / ar).abs();
        let mid = (-0.5 * ((c - mc) / mid_width).powi(2)).exp() * soft_step(0.92 - along, 0.03);
        brain += 0.75 * mid;
        for side in [-1.0, 1.0] {
            let vr = anat.center.0 + anat.ventricle_offset.0 * scale;
            let vc = mc + side * anat.ventricle_offset.1 * scale;
            let q = (((r - vr) / (anat.ventricle_axes.0 * vent_scale)).powi(2)
                + ((c - vc) / (anat.ventricle_axes.1 * vent_scale)).powi(2))
            .sqrt();
            let vd = (1.0 - q) * anat.ventricle_axes.1 * vent_scale;
            brain -= 0.55 * soft_step(vd, edge * 1.5);
        }
        let skull = 0.9;
        let background = -1.0;
        let v = background + (skull - background) * outer + (brain - skull) * inside;
        v.clamp(-1.0, 1.0)
    })
}

/// Lateral Gaussian bump velocity with unit amplitude.
fn bump(size: usize, center: (f64, f64), sigma: f64, sign: f64) -> Array3<f64> {
    let mut v = Array3::zeros((2, size, size));
    for r in 0..size {
        for c in 0..size {
            let d2 = (r as f64 - center.0).powi(2) + (c as f64 - center.1).powi(2);
            v[[1, r, c]] = sign * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    v
}

/// Scales `unit` so that the integrated field has maximum magnitude `target`.
fn fit_amplitude(unit: &Array3<f64>, target: f64, steps: u32) -> (VelocityField, DeformationField) {
    let eval = |a: f64| {
        let v = VelocityField(unit.mapv(|x| a * x));
        let phi = integrate(&v, steps);
        let m = max_displacement(&phi).0;
        (v, phi, m)
    };
    if target <= 0.0 {
        let (v, phi, _) = eval(0.0);
        return (v, phi);
    }
    // secant iteration on f(a) = max|phi(a)| - target, monotone in a
    let (mut a0, mut f0) = (target, eval(target).2 - target);
    let mut a1 = target * 1.2;
    let (mut v, mut phi, m) = eval(a1);
    let mut f1 = m - target;
    for _ in 0..60 {
        if f1.abs() < 1e-9 * target.max(1.0) || f1 == f0 {
            break;
        }
        let a2 = (a1 - f1 * (a1 - a0) / (f1 - f0)).max(1e-6);
        a0 = a1;
        f0 = f1;
        a1 = a2;
        let r = eval(a1);
        v = r.0;
        phi = r.1;
        f1 = r.2 - target;
    }
    (v, phi)
}

/// Builds one case. A positive case peaks at a shift drawn from
/// `shift_range_px`; its per-slice shifts follow a Gaussian profile over slices.
pub fn generate_phantom_case<R: Rng + ?Sized>(
    spec: &PhantomSpec,
    case_id: &str,
    positive: bool,
    rng: &mut R,
) -> Result<PhantomCase> {
    spec.validate()?;
    let size = spec.image_size;
    let n = spec.slices_per_case;
    let anat = Anatomy::sample(size, rng);
    let (lo, hi) = spec.shift_range_px;
    let peak_mag = rng.random_range(lo..=hi);
    let peak_slice = if n > 1 {
        rng.random_range(n as f64 * 0.3..=n as f64 * 0.7)
    } else {
        0.0
    };
    let width = (rng.random_range(0.2..0.4) * n as f64).max(1.0);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let unit_scale = size as f64 / 256.0;

    let mut slices = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut peaks = Vec::with_capacity(n);
    for i in 0..n {
        let z = if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
        let normal = normal_slice(&anat, size, z);
        let sigma = rng.random_range(10.0..=30.0) * unit_scale;
        let row = anat.center.0 + anat.ventricle_offset.0 * (1.0 - 0.45 * z * z).sqrt()
            + rng.random_range(-0.03..0.03) * size as f64;
        let col = anat.midline_col(row, 1.0);
        let target = if positive {
            peak_mag * (-0.5 * ((i as f64 - peak_slice) / width).powi(2)).exp()
        } else {
            0.0
        };
        let (velocity, field) = fit_amplitude(&bump(size, (row, col), sigma, sign), target, spec.integration_steps);
        let pixels = warp_array(&normal, &field)?.mapv(|v| v.clamp(-1.0, 1.0));
        let (mag, at) = max_displacement(&field);
        peaks.push((mag, at));
        slices.push(ImageSlice::new(pixels, spec.pixel_size_mm, i)?);
        truth.push(SliceTruth {
            normal,
            velocity,
            field,
        });
    }

    let mut annotations = BTreeMap::new();
    let mut case_mls_mm = 0.0;
    if positive {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| peaks[b].0.total_cmp(&peaks[a].0).then(a.cmp(&b)));
        for &i in order.iter().take(spec.labeled_slices_per_case) {
            let (r, c) = peaks[i].1;
            let displacement = truth[i].field.vector(r, c);
            annotations.insert(
                i,
                vec![LandmarkAnnotation {
                    landmark: [r as f64, c as f64],
                    displacement,
                }],
            );
        }
        case_mls_mm = truth
            .iter()
            .zip(&peaks)
            .map(|(t, &(_, (r, c)))| {
                let d = t.field.vector(r, c);
                d[0].hypot(d[1]) * spec.pixel_size_mm
            })
            .fold(0.0, f64::max);
    }
    let volume = Volume {
        case_id: case_id.to_string(),
        slices,
        annotations,
        is_mls: positive,
        case_mls_mm,
    };
    volume.validate()?;
    Ok(PhantomCase { volume, truth })
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// All cases of a spec. Exactly `positive_count()` cases are positive, chosen
/// by a seeded shuffle; each case draws from its own stream of the seed.
pub fn generate_dataset(spec: &PhantomSpec) -> Result<Vec<PhantomCase>> {
    spec.validate()?;
    let mut labels: Vec<bool> = (0..spec.n_cases).map(|i| i < spec.positive_count()).collect();
    labels.shuffle(&mut spec.case_rng(0));
    labels
        .iter()
        .enumerate()
        .map(|(i, &pos)| {
            log::debug!("phantom {} ({})", case_id(i), if pos { "positive" } else { "negative" });
            generate_phantom_case(spec, &case_id(i), pos, &mut spec.case_rng(i + 1))
        })
        .collect()
}

pub fn truth_dir(root: &Path) -> PathBuf {
    root.join("truth")
}

pub fn truth_field_path(root: &Path, case_id: &str, slice: usize) -> PathBuf {
    truth_dir(root).join(format!("field_{case_id}_{slice}.arr"))
}

/// Writes the dataset plus `truth/field_*`, `truth/velocity_*` and
/// `truth/normal_*` arrays.
pub fn export_dataset(cases: &[PhantomCase], root: &Path) -> Result<Dataset> {
    let dataset = Dataset::new(cases.iter().map(|c| c.volume.clone()).collect());
    dataset.save(root)?;
    let tdir = truth_dir(root);
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    for case in cases {
        let id = &case.volume.case_id;
        for (slice, t) in case.volume.slices.iter().zip(&case.truth) {
            let px = slice.pixel_size_mm;
            let i = slice.slice_index;
            write_array3(&truth_field_path(root, id, i), &t.field.0, px)?;
            write_array3(&tdir.join(format!("velocity_{id}_{i}.arr")), &t.velocity.0, px)?;
            write_array2(&tdir.join(format!("normal_{id}_{i}.arr")), &t.normal, px)?;
        }
    }
    Ok(dataset)
}

pub fn load_truth_field(root: &Path, case_id: &str, slice: usize) -> Result<DeformationField> {
    let path = truth_field_path(root, case_id, slice);
    DeformationField::new(read_array(&path)?.into_array3(&path)?)
}
