//! MAE/RMSE metrics, result tables and deformation overlays.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageSlice};
use crate::deform::{max_displacement, DeformationField};
use crate::error::{ensure, Error, Result};
use crate::training::VolumePrediction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub pred_mm: f64,
    pub truth_mm: f64,
    pub abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub case_id: String,
    pub slice_index: usize,
    pub pred_mm: f64,
    pub truth_mm: f64,
    pub abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub volume_mae_mm: f64,
    pub volume_rmse_mm: f64,
    pub slice_mae_mm: f64,
    pub slice_rmse_mm: f64,
    pub per_case: Vec<CaseRecord>,
    pub per_slice: Vec<SliceRecord>,
}

/// `(MAE, RMSE)` of signed errors; both zero for an empty list.
pub fn mae_rmse(errors: &[f64]) -> (f64, f64) {
    if errors.is_empty() {
        return (0.0, 0.0);
    }
    let n = errors.len() as f64;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    (mae, rmse)
}

/// Volume-wise metrics over every case of `dataset` and slice-wise metrics
/// pooled over all annotated slices. Records are ordered by case id, so the
/// result does not depend on the order of `predictions`.
pub fn evaluate(predictions: &[VolumePrediction], dataset: &Dataset) -> Result<EvalResult> {
    let by_id: BTreeMap<&str, &VolumePrediction> = predictions.iter().map(|p| (p.case_id.as_str(), p)).collect();
    let mut cases: Vec<_> = dataset.cases.iter().collect();
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut per_case = Vec::with_capacity(cases.len());
    let mut per_slice = Vec::new();
    for v in cases {
        let p = by_id
            .get(v.case_id.as_str())
            .ok_or_else(|| Error::Validation(format!("no prediction for case {}", v.case_id)))?;
        per_case.push(CaseRecord {
            case_id: v.case_id.clone(),
            pred_mm: p.volume_mls_mm,
            truth_mm: v.case_mls_mm,
            abs_err: (p.volume_mls_mm - v.case_mls_mm).abs(),
        });
        for (idx, anns) in &v.annotations {
            if anns.is_empty() {
                continue;
            }
            let slice = v
                .slice(*idx)
                .ok_or_else(|| Error::Validation(format!("case {}: missing slice {idx}", v.case_id)))?;
            let truth = anns.iter().map(|a| a.magnitude()).fold(0.0, f64::max) * slice.pixel_size_mm;
            let pred = p
                .slices
                .iter()
                .find(|s| s.slice_index == *idx)
                .ok_or_else(|| {
                    Error::Validation(format!("no prediction for case {} slice {idx}", v.case_id))
                })?
                .mls_mm;
            per_slice.push(SliceRecord {
                case_id: v.case_id.clone(),
                slice_index: *idx,
                pred_mm: pred,
                truth_mm: truth,
                abs_err: (pred - truth).abs(),
            });
        }
    }
    let vol_err: Vec<f64> = per_case.iter().map(|r| r.pred_mm - r.truth_mm).collect();
    let slice_err: Vec<f64> = per_slice.iter().map(|r| r.pred_mm - r.truth_mm).collect();
    let (volume_mae_mm, volume_rmse_mm) = mae_rmse(&vol_err);
    let (slice_mae_mm, slice_rmse_mm) = mae_rmse(&slice_err);
    assert!(volume_rmse_mm >= volume_mae_mm * (1.0 - 1e-12) && slice_rmse_mm >= slice_mae_mm * (1.0 - 1e-12));
    Ok(EvalResult {
        volume_mae_mm,
        volume_rmse_mm,
        slice_mae_mm,
        slice_rmse_mm,
        per_case,
        per_slice,
    })
}

impl EvalResult {
    /// `case_id,pred_mm,truth_mm,abs_err`.
    pub fn write_results_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("case_id,pred_mm,truth_mm,abs_err\n");
        for r in &self.per_case {
            s.push_str(&format!("{},{},{},{}\n", r.case_id, r.pred_mm, r.truth_mm, r.abs_err));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn write_slice_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("case_id,slice_index,pred_mm,truth_mm,abs_err\n");
        for r in &self.per_slice {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.case_id, r.slice_index, r.pred_mm, r.truth_mm, r.abs_err
            ));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// The four headline metrics and the case/slice counts.
    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let summary = serde_json::json!({
            "volume_mae_mm": self.volume_mae_mm,
            "volume_rmse_mm": self.volume_rmse_mm,
            "slice_mae_mm": self.slice_mae_mm,
            "slice_rmse_mm": self.slice_rmse_mm,
            "cases": self.per_case.len(),
            "labeled_slices": self.per_slice.len(),
        });
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(path, e))
    }

    /// Table row in the layout `volume MAE | volume RMSE | slice MAE | slice RMSE`.
    pub fn table_row(&self, label: &str) -> String {
        format!(
            "| {label} | {:.2} | {:.2} | {:.2} | {:.2} |",
            self.volume_mae_mm, self.volume_rmse_mm, self.slice_mae_mm, self.slice_rmse_mm
        )
    }
}

/// What [`render_overlay`] drew.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayInfo {
    pub arrows: usize,
    /// Grid pixel at the centre of the highlight box.
    pub highlight: (usize, usize),
    pub width: u32,
    pub height: u32,
}

/// Arrows are drawn where the displacement exceeds this many pixels.
pub const ARROW_THRESHOLD_PX: f64 = 0.5;

const CAPTION_H: u32 = 9;

// 3x5 glyphs, one row per u8 with the low three bits used
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        ':' => [0, 2, 0, 2, 0],
        'A' => [2, 5, 7, 5, 5],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'P' => [7, 5, 7, 4, 4],
        'R' => [6, 5, 6, 5, 5],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, scale: u32, color: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        let g = glyph(ch.to_ascii_uppercase());
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3u32 {
                if bits & (4 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let x = x0 + (i as u32 * 4 + col) * scale + dx;
                        let y = y0 + row as u32 * scale + dy;
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, color);
                        }
                    }
                }
            }
        }
    }
}

fn put(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let f = i as f64 / n as f64;
        put(img, a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1), color);
    }
}

/// Writes a PNG with the slice in grey, displacement arrows on a regular
/// grid (from each pixel towards its normal location), a box around the
/// largest displacement and a caption with predicted and true shift.
pub fn render_overlay(
    slice: &ImageSlice,
    phi: &DeformationField,
    pred_mm: f64,
    truth_mm: Option<f64>,
    path: &Path,
) -> Result<OverlayInfo> {
    let (h, w) = slice.pixels.dim();
    ensure!(phi.dim() == (h, w), "field shape differs from slice shape");
    let scale = (512 / h.max(w)).max(1) as u32;
    let (iw, ih) = (w as u32 * scale, h as u32 * scale);
    let mut img = RgbImage::new(iw, ih + CAPTION_H * scale);
    for r in 0..h {
        for c in 0..w {
            let v = ((slice.pixels[[r, c]].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(c as u32 * scale + dx, r as u32 * scale + dy, Rgb([v, v, v]));
                }
            }
        }
    }
    let to_img = |r: f64, c: f64| ((c + 0.5) * scale as f64, (r + 0.5) * scale as f64);
    let arrow = Rgb([255, 210, 0]);
    let step = (h.max(w) / 16).max(4);
    let mut arrows = 0;
    for r in (step / 2..h).step_by(step) {
        for c in (step / 2..w).step_by(step) {
            let [dr, dc] = phi.vector(r, c);
            if dr.hypot(dc) <= ARROW_THRESHOLD_PX {
                continue;
            }
            let a = to_img(r as f64, c as f64);
            let b = to_img(r as f64 + dr, c as f64 + dc);
            line(&mut img, a, b, arrow);
            // head: two short strokes back from the tip
            let len = (b.0 - a.0).hypot(b.1 - a.1);
            let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
            let hl = (3.0 * scale as f64).min(len / 2.0);
            for s in [-1.0, 1.0] {
                let (px, py) = (-uy * s, ux * s);
                line(&mut img, b, (b.0 - hl * (ux - 0.5 * px), b.1 - hl * (uy - 0.5 * py)), arrow);
            }
            arrows += 1;
        }
    }
    let (_, (mr, mc)) = max_displacement(phi);
    let half = (h.max(w) as f64 / 16.0).max(2.0);
    let red = Rgb([230, 40, 40]);
    let (bx0, by0) = to_img(mr as f64 - half, mc as f64 - half);
    let (bx1, by1) = to_img(mr as f64 + half, mc as f64 + half);
    line(&mut img, (bx0, by0), (bx1, by0), red);
    line(&mut img, (bx0, by1), (bx1, by1), red);
    line(&mut img, (bx0, by0), (bx0, by1), red);
    line(&mut img, (bx1, by0), (bx1, by1), red);

    let truth = truth_mm.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into());
    let caption = format!("PRED {pred_mm:.2} MM  TRUE {truth} MM");
    draw_text(&mut img, scale, ih + 2 * scale, &caption, scale, Rgb([255, 255, 255]));
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    img.save(path)?;
    Ok(OverlayInfo {
        arrows,
        highlight: (mr, mc),
        width: img.width(),
        height: img.height(),
    })
}
