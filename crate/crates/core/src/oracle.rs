//! Programmatic attribute oracles.
//!
//! Each detector is a matched filter anchored on the canonical face layout
//! for a *known* pose: it measures a contrast that the attribute's painter
//! creates and nothing else does. Because generated images place features
//! only approximately where the layout predicts, every detector scans a
//! horizontal offset window (±4 px at the 32-px scale) and keeps the best
//! aligned response.
//!
//! The raw responses are mapped to confidences through a logistic centered
//! on a calibrated threshold; `present` means confidence ≥ 1/2, i.e. raw ≥
//! threshold. Thresholds are frozen from the mid-point of the clean-data
//! response distributions (see the calibration test) and deliberately leave
//! slack for the softer renders a small generator produces.

use crate::data::{face_layout, FaceLayout, Pose, ATTRIBUTES};
use crate::error::{Error, Result};
use crate::imgmath::{image_dims, Image};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Detection thresholds and logistic softness per attribute, in raw-response
/// units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub glasses_threshold: f64,
    pub glasses_softness: f64,
    pub hat_threshold: f64,
    pub hat_softness: f64,
    pub smile_threshold: f64,
    pub smile_softness: f64,
    pub aged_threshold: f64,
    pub aged_softness: f64,
    /// Horizontal scan radius in pixels at the 32-px scale.
    pub scan_radius: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        // calibrated on 300 clean renders; clean-data response gaps were
        // glasses [0.160, 0.225], hat [0.018, 0.180], smile [0.000, 0.255],
        // aged [0.022, 0.066] — thresholds sit in the gaps, biased low
        // because generated renders are softer than clean ones
        OracleConfig {
            glasses_threshold: 0.185,
            glasses_softness: 0.04,
            hat_threshold: 0.06,
            hat_softness: 0.035,
            smile_threshold: 0.10,
            smile_softness: 0.12,
            aged_threshold: 0.040,
            aged_softness: 0.015,
            scan_radius: 4.0,
        }
    }
}

/// One oracle verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub present: bool,
    /// Logistic confidence in (0, 1); 1/2 exactly at the threshold.
    pub confidence: f64,
    /// Best aligned raw matched-filter response.
    pub raw: f64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn verdict(raw: f64, threshold: f64, softness: f64) -> Detection {
    let confidence = logistic((raw - threshold) / softness);
    Detection {
        present: raw >= threshold,
        confidence,
        raw,
    }
}

fn lum_at(img: &Image, y: usize, x: usize) -> f64 {
    0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]]
}

/// Mean luminance over the pixels of an axis-aligned box intersected with
/// the canonical head ellipse (slightly shrunk so identity jitter cannot
/// push the box into background). Returns None when the region is empty.
fn region_mean<F: Fn(&Image, usize, usize) -> f64>(
    img: &Image,
    lay: &FaceLayout,
    y0: f64,
    y1: f64,
    x0: f64,
    x1: f64,
    inside_head: bool,
    f: F,
) -> Option<f64> {
    let (h, w) = image_dims(img);
    let mut acc = 0.0;
    let mut n = 0usize;
    let ys = y0.floor().max(0.0) as usize;
    let ye = (y1.ceil() as isize).min(h as isize - 1).max(0) as usize;
    let xs = x0.floor().max(0.0) as usize;
    let xe = (x1.ceil() as isize).min(w as isize - 1).max(0) as usize;
    for y in ys..=ye {
        for x in xs..=xe {
            let yf = y as f64;
            let xf = x as f64;
            if yf < y0 || yf > y1 || xf < x0 || xf > x1 {
                continue;
            }
            if inside_head {
                let nx = (xf - lay.head_cx) / (lay.head_rx * 0.9);
                let ny = (yf - lay.head_cy) / (lay.head_ry * 0.9);
                if nx * nx + ny * ny > 1.0 {
                    continue;
                }
            }
            acc += f(img, y, x);
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(acc / n as f64)
    }
}

/// Glasses: the eye band is far darker than the cheeks right below it.
fn glasses_raw(img: &Image, lay: &FaceLayout, dx: f64) -> f64 {
    let band_h = lay.lens_r * 0.9;
    let band_w = lay.eye_dx + lay.lens_r * 0.8;
    let cx = lay.feat_cx + dx;
    let band = region_mean(
        img,
        lay,
        lay.eye_y - band_h,
        lay.eye_y + band_h,
        cx - band_w,
        cx + band_w,
        true,
        lum_at,
    );
    let cheek = region_mean(
        img,
        lay,
        lay.eye_y + lay.lens_r + 1.0,
        lay.eye_y + lay.lens_r + 3.0,
        cx - band_w,
        cx + band_w,
        true,
        lum_at,
    );
    match (band, cheek) {
        (Some(b), Some(c)) => c - b,
        _ => 0.0,
    }
}

/// Hat: the brim band is bluer than red; skin is the opposite and the
/// background is neutral.
fn hat_raw(img: &Image, lay: &FaceLayout, dx: f64, dy: f64) -> f64 {
    region_mean(
        img,
        lay,
        lay.hat_top + dy + 0.3,
        lay.hat_bot + dy - 0.3,
        lay.head_cx + dx - lay.hat_half_w * 0.7,
        lay.head_cx + dx + lay.hat_half_w * 0.7,
        false,
        |img, y, x| img[[2, y, x]] - img[[0, y, x]],
    )
    .unwrap_or(0.0)
}

/// Mouthness score: red-dominant and dark.
fn mouthness(img: &Image, y: usize, x: usize) -> f64 {
    2.0 * (img[[0, y, x]] - img[[1, y, x]]) - lum_at(img, y, x)
}

/// Smile: per-column mouth centroid rows; a smile's center third sits lower
/// (larger row) than its outer thirds. Returns (curvature, mass).
fn smile_raw(img: &Image, lay: &FaceLayout, s: f64, dx: f64) -> (f64, f64) {
    let (h, w) = image_dims(img);
    let cx = lay.mouth_cx + dx;
    let x0 = (cx - lay.mouth_half_w - 2.0 * s).floor().max(0.0) as usize;
    let x1 = ((cx + lay.mouth_half_w + 2.0 * s).ceil() as isize).min(w as isize - 1).max(0) as usize;
    let y0 = (lay.mouth_y - 3.5 * s).floor().max(0.0) as usize;
    let y1 = ((lay.mouth_y + 4.0 * s).ceil() as isize).min(h as isize - 1).max(0) as usize;
    if x1 <= x0 || y1 <= y0 {
        return (0.0, 0.0);
    }
    let mut cols: Vec<(f64, f64, f64)> = Vec::new(); // (x, centroid row, mass)
    let mut max_mass = 0.0f64;
    for x in x0..=x1 {
        let mut m = 0.0;
        let mut my = 0.0;
        for y in y0..=y1 {
            // clip to the head so dark backgrounds cannot contribute
            let nx = (x as f64 - lay.head_cx) / (lay.head_rx * 1.05);
            let ny = (y as f64 - lay.head_cy) / (lay.head_ry * 1.05);
            if nx * nx + ny * ny > 1.0 {
                continue;
            }
            let v = mouthness(img, y, x).max(0.0);
            m += v;
            my += v * y as f64;
        }
        if m > 1e-6 {
            cols.push((x as f64, my / m, m));
            max_mass = max_mass.max(m);
        }
    }
    // drop weak columns so stray near-threshold pixels cannot vote
    cols.retain(|c| c.2 > 0.25 * max_mass);
    if cols.len() < 4 {
        return (0.0, 0.0);
    }
    let total_mass: f64 = cols.iter().map(|c| c.2).sum();
    let span = cols.last().unwrap().0 - cols[0].0;
    if span < 2.0 {
        return (0.0, total_mass);
    }
    let mid = (cols[0].0 + cols.last().unwrap().0) / 2.0;
    let third = span / 3.0;
    let mut center = (0.0, 0.0);
    let mut outer = (0.0, 0.0);
    for &(x, cy, m) in &cols {
        if (x - mid).abs() <= third / 2.0 {
            center = (center.0 + m * cy, center.1 + m);
        } else if (x - mid).abs() >= third {
            outer = (outer.0 + m * cy, outer.1 + m);
        }
    }
    if center.1 < 1e-6 || outer.1 < 1e-6 {
        return (0.0, total_mass);
    }
    (center.0 / center.1 - outer.0 / outer.1, total_mass)
}

/// Aged: dark stripes at the canonical wrinkle rows plus low cheek chroma.
fn aged_raw(img: &Image, lay: &FaceLayout, s: f64, dx: f64) -> f64 {
    let cx = lay.head_cx + dx;
    let half_w = lay.head_rx * 0.5;
    let wrinkle_rows = [lay.eye_y - 4.3 * s, lay.eye_y + 4.3 * s];
    // every band is wider than one pixel so it always contains a pixel-center
    // row; the surround takes the brighter side, so a hat brim or glasses rim
    // darkening one side cannot fake or mask a wrinkle
    let mut stripe = 0.0f64;
    for wy in wrinkle_rows {
        let line = region_mean(img, lay, wy - 0.55, wy + 0.55, cx - half_w, cx + half_w, true, lum_at);
        let above = region_mean(img, lay, wy - 2.45, wy - 1.35, cx - half_w, cx + half_w, true, lum_at);
        let below = region_mean(img, lay, wy + 1.35, wy + 2.45, cx - half_w, cx + half_w, true, lum_at);
        let surround = match (above, below) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        };
        if let (Some(l), Some(sur)) = (line, surround) {
            stripe = stripe.max(sur - l);
        }
    }
    // chroma on lateral cheek patches, clear of glasses, mouth, and wrinkles
    let chroma_of = |img: &Image, y: usize, x: usize| {
        let r = img[[0, y, x]];
        let g = img[[1, y, x]];
        let b = img[[2, y, x]];
        r.max(g).max(b) - r.min(g).min(b)
    };
    let y0 = lay.eye_y + lay.lens_r + 1.0;
    let y1 = lay.mouth_y + 1.5 * s;
    let mut chroma_acc = 0.0;
    let mut chroma_n = 0usize;
    for side in [-1.0, 1.0] {
        let xa = cx + side * lay.head_rx * 0.85;
        let xb = cx + side * lay.head_rx * 0.5;
        if let Some(v) = region_mean(img, lay, y0, y1, xa.min(xb), xa.max(xb), true, chroma_of) {
            chroma_acc += v;
            chroma_n += 1;
        }
    }
    let chroma = if chroma_n > 0 { chroma_acc / chroma_n as f64 } else { 0.3 };
    stripe.max(0.0) + 0.4 * (0.22 - chroma).max(0.0)
}

/// Runs one attribute oracle at a known pose.
pub fn detect(img: &Image, attribute: &str, pose: &Pose, cfg: &OracleConfig) -> Result<Detection> {
    let (h, w) = image_dims(img);
    if h != w {
        return Err(Error::shape("oracle::detect", "square image", format!("{h}x{w}")));
    }
    let s = h as f64 / 32.0;
    let lay = face_layout(pose, h);
    let radius = (cfg.scan_radius * s).round() as isize;
    let offsets: Vec<f64> = (-radius..=radius).map(|d| d as f64).collect();
    match attribute {
        "glasses" => {
            let raw = offsets
                .iter()
                .map(|&dx| glasses_raw(img, &lay, dx))
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(verdict(raw, cfg.glasses_threshold, cfg.glasses_softness))
        }
        "hat" => {
            let mut raw = f64::NEG_INFINITY;
            for &dx in &offsets {
                for dyi in -2..=2 {
                    raw = raw.max(hat_raw(img, &lay, dx, dyi as f64 * s * 0.7));
                }
            }
            Ok(verdict(raw, cfg.hat_threshold, cfg.hat_softness))
        }
        "smile" => {
            // pick the alignment with the most mouth mass, then read the
            // curvature there (avoids a max-of-noise bias)
            let mut best = (0.0, f64::NEG_INFINITY);
            for &dx in &offsets {
                let (curv, mass) = smile_raw(img, &lay, s, dx);
                if mass > best.1 {
                    best = (curv, mass);
                }
            }
            // curvature scales with image size; normalize to the 32-px scale
            Ok(verdict(best.0 / s, cfg.smile_threshold, cfg.smile_softness))
        }
        "aged" => {
            let raw = offsets
                .iter()
                .map(|&dx| aged_raw(img, &lay, s, dx))
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(verdict(raw, cfg.aged_threshold, cfg.aged_softness))
        }
        other => Err(Error::InvalidConfig(format!("unknown attribute {other:?}"))),
    }
}

/// Runs all four oracles.
pub fn detect_all(img: &Image, pose: &Pose, cfg: &OracleConfig) -> Result<BTreeMap<String, Detection>> {
    let mut out = BTreeMap::new();
    for attr in ATTRIBUTES {
        out.insert(attr.to_string(), detect(img, attr, pose, cfg)?);
    }
    Ok(out)
}

/// Canonical region an attribute occupies at a pose, independent of any
/// particular identity (radii are inflated to cover identity jitter). Used
/// to exclude attribute pixels when comparing identities.
pub fn canonical_region(attribute: &str, pose: &Pose, size: usize) -> Result<Array2<bool>> {
    let lay = face_layout(pose, size);
    let s = size as f64 / 32.0;
    // inflation covers identity jitter (x1.07) plus the anti-aliased edge
    let rx = lay.head_rx * 1.12 + s;
    let ry = lay.head_ry * 1.12 + s;
    let mut m = Array2::<bool>::default((size, size));
    for y in 0..size {
        for x in 0..size {
            let yf = y as f64;
            let xf = x as f64;
            let nx = (xf - lay.head_cx) / rx;
            let ny = (yf - lay.head_cy) / ry;
            let in_head = nx * nx + ny * ny <= 1.0;
            m[[y, x]] = match attribute {
                "glasses" => {
                    in_head
                        && (yf - lay.eye_y).abs() <= lay.lens_r + 1.6 * s
                        && (xf - lay.feat_cx).abs() <= lay.eye_dx * 1.1 + lay.lens_r + 1.7 * s
                }
                "hat" => {
                    yf >= lay.hat_top - 1.5 * s
                        && yf <= lay.hat_bot + 1.5 * s
                        && (xf - lay.head_cx).abs() <= lay.hat_half_w + 1.5 * s
                }
                "smile" => {
                    in_head
                        && yf - lay.mouth_y >= -3.5 * s
                        && yf - lay.mouth_y <= 4.0 * s
                        && (xf - lay.mouth_cx).abs() <= lay.mouth_half_w + 2.5 * s
                }
                "aged" => in_head,
                other => {
                    return Err(Error::InvalidConfig(format!("unknown attribute {other:?}")));
                }
            };
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DataConfig};

    /// Clean-data agreement: on procedurally rendered faces, every oracle
    /// must reproduce the ground-truth labels exactly, with a margin between
    /// the negative and positive response populations.
    #[test]
    fn oracles_agree_with_ground_truth_on_clean_data() {
        let d = generate_dataset(300, &DataConfig::default(), 99).unwrap();
        let cfg = OracleConfig::default();
        for attr in ATTRIBUTES {
            let mut worst_pos = f64::INFINITY;
            let mut worst_neg = f64::NEG_INFINITY;
            let mut errors = 0usize;
            for s in &d.samples {
                let det = detect(&s.image, attr, &s.pose, &cfg).unwrap();
                let truth = s.flags.get(attr).unwrap();
                if det.present != truth {
                    errors += 1;
                }
                if truth {
                    worst_pos = worst_pos.min(det.raw);
                } else {
                    worst_neg = worst_neg.max(det.raw);
                }
            }
            assert_eq!(
                errors, 0,
                "{attr}: oracle disagrees with ground truth (worst pos {worst_pos:.4}, worst neg {worst_neg:.4})"
            );
            assert!(
                worst_pos > worst_neg,
                "{attr}: populations overlap (pos min {worst_pos:.4} <= neg max {worst_neg:.4})"
            );
        }
    }

    #[test]
    fn confidence_is_calibrated_around_threshold() {
        let d = generate_dataset(50, &DataConfig::default(), 101).unwrap();
        let cfg = OracleConfig::default();
        for s in &d.samples {
            for attr in ATTRIBUTES {
                let det = detect(&s.image, attr, &s.pose, &cfg).unwrap();
                assert!((0.0..=1.0).contains(&det.confidence));
                assert_eq!(det.present, det.confidence >= 0.5);
            }
        }
    }

    #[test]
    fn canonical_regions_cover_exact_masks() {
        let d = generate_dataset(80, &DataConfig::default(), 103).unwrap();
        for s in &d.samples {
            for (attr, mask) in &s.masks {
                let region = canonical_region(attr, &s.pose, d.config.image_size).unwrap();
                let mut covered = 0usize;
                let mut total = 0usize;
                for (r, m) in region.iter().zip(mask.iter()) {
                    if *m {
                        total += 1;
                        if *r {
                            covered += 1;
                        }
                    }
                }
                let frac = covered as f64 / total.max(1) as f64;
                assert!(
                    frac >= 0.97,
                    "{} {attr}: canonical region covers only {frac:.3} of the exact mask",
                    s.id
                );
            }
        }
    }

    #[test]
    fn unknown_attribute_is_rejected() {
        let d = generate_dataset(1, &DataConfig::default(), 1).unwrap();
        let cfg = OracleConfig::default();
        assert!(detect(&d.samples[0].image, "mustache", &d.samples[0].pose, &cfg).is_err());
        assert!(canonical_region("mustache", &Pose::frontal(), 32).is_err());
    }
}
