//! Slice preprocessing: window, resample, crop/pad, percentile clip, normalize.

use log::warn;
use ndarray::Array2;

use super::types::{ImageSlice, PreprocessConfig, Volume};
use crate::deform::kernels::{axis, sample};
use crate::error::{ensure, Result};

/// Clamps every value into `[low, high]`.
pub fn window(raw: &Array2<f64>, low: f64, high: f64) -> Array2<f64> {
    raw.mapv(|v| v.clamp(low, high))
}

/// Bilinear resampling from `from_mm` to `to_mm` pixel spacing.
///
/// Output pixel centres map to input coordinates `(o + 0.5) * to/from - 0.5`,
/// which keeps the physical image centre fixed. Equal spacings are an exact
/// identity.
pub fn resample(img: &Array2<f64>, from_mm: f64, to_mm: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let ratio = to_mm / from_mm;
    let oh = ((h as f64) / ratio).round().max(1.0) as usize;
    let ow = ((w as f64) / ratio).round().max(1.0) as usize;
    let plane = img.as_standard_layout();
    let plane = plane.as_slice().expect("standard layout");
    Array2::from_shape_fn((oh, ow), |(r, k)| {
        let ay = axis((r as f64 + 0.5) * ratio - 0.5, h);
        let ax = axis((k as f64 + 0.5) * ratio - 0.5, w);
        sample(plane, w, ay, ax)
    })
}

/// Centre crop and/or pad to `size x size`, filling new pixels with `fill`.
pub fn crop_or_pad(img: &Array2<f64>, size: usize, fill: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut out = Array2::from_elem((size, size), fill);
    // offsets: positive = crop from source, negative = pad in destination
    let off = |n: usize| -> (usize, usize, usize) {
        if n >= size {
            ((n - size) / 2, 0, size)
        } else {
            (0, (size - n) / 2, n)
        }
    };
    let (sr, dr, nr) = off(h);
    let (sc, dc, nc) = off(w);
    for r in 0..nr {
        for c in 0..nc {
            out[[dr + r, dc + c]] = img[[sr + r, sc + c]];
        }
    }
    out
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Min-max normalization into `[-1, 1]`. A zero-range image maps to zeros.
pub fn normalize_minmax(img: &Array2<f64>) -> Array2<f64> {
    let min = img.iter().copied().fold(f64::INFINITY, f64::min);
    let max = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 {
        return Array2::zeros(img.dim());
    }
    img.mapv(|v| (2.0 * (v - min) / range - 1.0).clamp(-1.0, 1.0))
}

/// Full pipeline for one raw slice.
pub fn preprocess_slice(
    raw: &Array2<f64>,
    raw_pixel_size_mm: f64,
    slice_index: usize,
    cfg: &PreprocessConfig,
) -> Result<ImageSlice> {
    cfg.validate()?;
    ensure!(!raw.is_empty(), "raw slice {slice_index} is empty");
    ensure!(
        raw.iter().all(|v| v.is_finite()),
        "raw slice {slice_index} contains non-finite values"
    );
    ensure!(
        raw_pixel_size_mm.is_finite() && raw_pixel_size_mm > 0.0,
        "raw pixel size must be positive, got {raw_pixel_size_mm}"
    );

    let windowed = window(raw, cfg.window_low, cfg.window_high);
    let resampled = resample(&windowed, raw_pixel_size_mm, cfg.target_pixel_size_mm);
    // Pad with the darkest value present so that padding becomes -1 after
    // normalization and a constant image stays constant.
    let fill = resampled.iter().copied().fold(f64::INFINITY, f64::min);
    let sized = crop_or_pad(&resampled, cfg.target_size, fill);

    let flat: Vec<f64> = sized.iter().copied().collect();
    let lo = percentile(&flat, cfg.clip_percentiles.0);
    let hi = percentile(&flat, cfg.clip_percentiles.1);
    let clipped = sized.mapv(|v| v.clamp(lo, hi));
    let pixels = normalize_minmax(&clipped);
    ImageSlice::new(pixels, cfg.target_pixel_size_mm, slice_index)
}

/// Result of [`select_slices`]; lists the annotation slices that were dropped.
#[derive(Debug, Clone)]
pub struct Selection {
    pub volume: Volume,
    pub dropped_annotation_slices: Vec<usize>,
}

/// Drops the first `discard_head` and last `discard_tail` slices.
pub fn select_slices(volume: &Volume, cfg: &PreprocessConfig) -> Result<Selection> {
    let n = volume.slices.len();
    let discard = cfg.discard_head + cfg.discard_tail;
    ensure!(
        n > discard,
        "case {} has {n} slices; need more than {discard}",
        volume.case_id
    );
    let slices = volume.slices[cfg.discard_head..n - cfg.discard_tail].to_vec();
    let mut annotations = volume.annotations.clone();
    let mut dropped = Vec::new();
    annotations.retain(|idx, _| {
        let keep = slices.iter().any(|s| s.slice_index == *idx);
        if !keep {
            warn!(
                "case {}: dropping annotation on discarded slice {idx}",
                volume.case_id
            );
            dropped.push(*idx);
        }
        keep
    });
    Ok(Selection {
        volume: Volume {
            slices,
            annotations,
            ..volume.clone()
        },
        dropped_annotation_slices: dropped,
    })
}
