use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Slack allowed when checking annotation magnitudes against the case label.
pub const CASE_LABEL_TOLERANCE_MM: f64 = 1e-6;

/// One 2D slice. After preprocessing the pixels lie in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlice {
    pub pixels: Array2<f64>,
    /// Millimetres per pixel.
    pub pixel_size_mm: f64,
    pub slice_index: usize,
}

impl ImageSlice {
    pub fn new(pixels: Array2<f64>, pixel_size_mm: f64, slice_index: usize) -> Result<Self> {
        ensure!(
            pixel_size_mm.is_finite() && pixel_size_mm > 0.0,
            "pixel size must be positive, got {pixel_size_mm}"
        );
        ensure!(!pixels.is_empty(), "slice {slice_index} has no pixels");
        Ok(Self {
            pixels,
            pixel_size_mm,
            slice_index,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// Checks the post-preprocessing invariants for a `size x size` slice.
    pub fn check_normalized(&self, size: usize) -> Result<()> {
        ensure!(
            self.height() == size && self.width() == size,
            "slice {} is {}x{}, expected {size}x{size}",
            self.slice_index,
            self.height(),
            self.width()
        );
        ensure!(
            self.pixels.iter().all(|v| (-1.0..=1.0).contains(v)),
            "slice {} has values outside [-1, 1]",
            self.slice_index
        );
        Ok(())
    }
}

/// A sparse label: the shifted landmark and the vector pointing from it toward
/// its presumed normal location, both in `(row, col)` pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkAnnotation {
    pub landmark: [f64; 2],
    pub displacement: [f64; 2],
}

impl LandmarkAnnotation {
    pub fn magnitude(&self) -> f64 {
        self.displacement[0].hypot(self.displacement[1])
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let [r, c] = self.landmark;
        ensure!(
            r >= 0.0 && r < height as f64 && c >= 0.0 && c < width as f64,
            "landmark ({r}, {c}) outside {height}x{width} grid"
        );
        ensure!(
            self.displacement.iter().all(|d| d.is_finite()),
            "displacement must be finite"
        );
        Ok(())
    }
}

/// An ordered stack of slices with its case-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub case_id: String,
    pub slices: Vec<ImageSlice>,
    /// Sparse labels keyed by `slice_index`.
    pub annotations: BTreeMap<usize, Vec<LandmarkAnnotation>>,
    pub is_mls: bool,
    /// Case-level maximum shift in millimetres; zero for negative cases.
    pub case_mls_mm: f64,
}

impl Volume {
    pub fn slice(&self, slice_index: usize) -> Option<&ImageSlice> {
        self.slices.iter().find(|s| s.slice_index == slice_index)
    }

    pub fn annotation_count(&self) -> usize {
        self.annotations.values().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.case_mls_mm.is_finite() && self.case_mls_mm >= 0.0,
            "case {}: case_mls_mm must be >= 0",
            self.case_id
        );
        if !self.is_mls {
            ensure!(
                self.annotations.values().all(Vec::is_empty) && self.case_mls_mm == 0.0,
                "case {}: negative cases carry no annotations and zero shift",
                self.case_id
            );
        }
        for (idx, anns) in &self.annotations {
            let slice = self.slice(*idx).ok_or_else(|| {
                crate::Error::Validation(format!(
                    "case {}: annotation references missing slice {idx}",
                    self.case_id
                ))
            })?;
            for a in anns {
                a.validate(slice.height(), slice.width())?;
                let mm = a.magnitude() * slice.pixel_size_mm;
                ensure!(
                    mm <= self.case_mls_mm + CASE_LABEL_TOLERANCE_MM,
                    "case {}: slice {idx} annotation {mm:.4} mm exceeds case label {:.4} mm",
                    self.case_id,
                    self.case_mls_mm
                );
            }
        }
        Ok(())
    }
}

/// Preprocessing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_pixel_size_mm: f64,
    pub target_size: usize,
    pub window_low: f64,
    pub window_high: f64,
    pub clip_percentiles: (f64, f64),
    pub discard_head: usize,
    pub discard_tail: usize,
    pub rotation_range_deg: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_pixel_size_mm: 0.86,
            target_size: 256,
            window_low: 0.0,
            window_high: 80.0,
            clip_percentiles: (0.5, 99.5),
            discard_head: 8,
            discard_tail: 5,
            rotation_range_deg: 15.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.window_low < self.window_high,
            "window_low {} must be below window_high {}",
            self.window_low,
            self.window_high
        );
        let (lo, hi) = self.clip_percentiles;
        ensure!(
            0.0 <= lo && lo < hi && hi <= 100.0,
            "clip percentiles ({lo}, {hi}) must satisfy 0 <= lo < hi <= 100"
        );
        ensure!(
            self.target_pixel_size_mm > 0.0 && self.target_size > 0,
            "target pixel size and size must be positive"
        );
        ensure!(self.rotation_range_deg >= 0.0, "rotation range must be >= 0");
        Ok(())
    }
}
