//! Procedural labelled face dataset with exact attribute masks.
//!
//! Faces are parametric: an ellipse head with eyes and a mouth over a plain
//! background, with four independent binary attributes — `glasses` (dark
//! eye-band with a bridge), `hat` (brim bar above the forehead), `smile`
//! (mouth curvature sign), `aged` (wrinkle stripes plus desaturation).
//! Every attribute is drawn by a closed-form painter, so its mask is exact
//! by construction and a programmatic oracle can verify it later.
//!
//! Pose (yaw/pitch) shifts the facial features more than the head outline —
//! a weak but scene-consistent parallax that gives the pose-conditioned
//! discriminator real signal.
//!
//! Pair building follows the cut-and-paste protocol: one fixed negative
//! source identity S, with K donors' attribute regions pasted onto S
//! (centroid-aligned, integer translation, pixel-exact). The `aged`
//! attribute has no paste mask, so its positives are aged re-renders of S
//! at varying severity.

use crate::error::{Error, Result};
use crate::imgmath::{self, Image};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// The four procedural attributes, in canonical order.
pub const ATTRIBUTES: [&str; 4] = ["glasses", "hat", "smile", "aged"];

/// Camera-style pose under which a face was drawn, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

impl Pose {
    pub fn frontal() -> Self {
        Pose {
            yaw_deg: 0.0,
            pitch_deg: 0.0,
        }
    }
}

/// Binary attribute flags for one face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttributeFlags {
    pub glasses: bool,
    pub hat: bool,
    pub smile: bool,
    pub aged: bool,
}

impl AttributeFlags {
    pub fn get(&self, name: &str) -> Result<bool> {
        match name {
            "glasses" => Ok(self.glasses),
            "hat" => Ok(self.hat),
            "smile" => Ok(self.smile),
            "aged" => Ok(self.aged),
            other => Err(Error::InvalidConfig(format!("unknown attribute {other:?}"))),
        }
    }

    pub fn set(&mut self, name: &str, value: bool) -> Result<()> {
        match name {
            "glasses" => self.glasses = value,
            "hat" => self.hat = value,
            "smile" => self.smile = value,
            "aged" => self.aged = value,
            other => return Err(Error::InvalidConfig(format!("unknown attribute {other:?}"))),
        }
        Ok(())
    }
}

/// Identity, pose, and attribute parameters that fully determine one render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub pose: Pose,
    pub flags: AttributeFlags,
    /// Skin base color.
    pub skin: [f64; 3],
    /// Background shade.
    pub background: [f64; 3],
    /// Hat color (drawn only when `flags.hat`).
    pub hat_color: [f64; 3],
    /// Head radii jitter, multiplicative around the canonical layout.
    pub head_rx_scale: f64,
    pub head_ry_scale: f64,
    /// Eye spacing jitter (multiplicative).
    pub eye_spread: f64,
    /// Mouth width jitter (multiplicative).
    pub mouth_width: f64,
    /// Aged severity in [0.7, 1.0]; ignored unless `flags.aged`.
    pub aged_severity: f64,
}

impl FaceParams {
    /// Draws a full parameter set. Every field is sampled unconditionally in
    /// a fixed order, so the stream position after a call never depends on
    /// the flag values.
    pub fn sample(rng: &mut ChaCha12Rng) -> Self {
        let yaw_deg = rng.gen_range(-30.0..30.0);
        let pitch_deg = rng.gen_range(-12.0..12.0);
        let flags = AttributeFlags {
            glasses: rng.gen::<bool>(),
            hat: rng.gen::<bool>(),
            smile: rng.gen::<bool>(),
            aged: rng.gen::<bool>(),
        };
        let r: f64 = rng.gen_range(0.72..0.95);
        let g = r - rng.gen_range(0.08..0.2);
        let b = g - rng.gen_range(0.08..0.22);
        let skin = [r, g, b.max(0.05)];
        let bg_base: f64 = rng.gen_range(0.06..0.2);
        let bg_tint = rng.gen_range(-0.02..0.02);
        let background = [bg_base, bg_base + bg_tint, bg_base + rng.gen_range(-0.02..0.02)];
        // cool palette: every hat has blue > red, the reverse of skin
        let hue: f64 = rng.gen_range(0.0..1.0);
        let hat_color = if hue < 0.33 {
            [0.10, 0.14, 0.45]
        } else if hue < 0.66 {
            [0.08, 0.30, 0.38]
        } else {
            [0.24, 0.12, 0.42]
        };
        FaceParams {
            pose: Pose { yaw_deg, pitch_deg },
            flags,
            skin,
            background: [background[0].clamp(0.0, 1.0), background[1].clamp(0.0, 1.0), background[2].clamp(0.0, 1.0)],
            hat_color,
            head_rx_scale: rng.gen_range(0.93..1.07),
            head_ry_scale: rng.gen_range(0.93..1.07),
            eye_spread: rng.gen_range(0.9..1.1),
            mouth_width: rng.gen_range(0.85..1.15),
            aged_severity: rng.gen_range(0.7..1.0),
        }
    }
}

/// Geometric layout of a face at a given pose and canvas size. All
/// quantities are in pixels of the `size`-wide canvas.
#[derive(Debug, Clone, Copy)]
pub struct FaceLayout {
    pub head_cx: f64,
    pub head_cy: f64,
    pub head_rx: f64,
    pub head_ry: f64,
    /// Feature-center x (shifts more than the head under yaw — parallax).
    pub feat_cx: f64,
    pub eye_y: f64,
    pub eye_dx: f64,
    pub eye_r: f64,
    pub mouth_cx: f64,
    pub mouth_y: f64,
    pub mouth_half_w: f64,
    pub lens_r: f64,
    pub hat_top: f64,
    pub hat_bot: f64,
    pub hat_half_w: f64,
}

/// Canonical layout for a pose; identity jitters multiply on top of this.
pub fn face_layout(pose: &Pose, size: usize) -> FaceLayout {
    let s = size as f64 / 32.0;
    let yaw = pose.yaw_deg.to_radians().sin();
    let pitch = pose.pitch_deg.to_radians().sin();
    let head_cx = (15.5 + 1.2 * yaw) * s;
    let head_cy = (17.0 + 0.8 * pitch) * s;
    let head_rx = 10.2 * (1.0 - 0.12 * yaw.abs()) * s;
    let head_ry = 11.0 * s;
    let feat_cx = head_cx + 2.2 * yaw * s;
    let feat_dy = 2.2 * pitch * s;
    let eye_y = head_cy - 3.2 * s + feat_dy;
    let hat_top = head_cy - head_ry - 1.0 * s;
    FaceLayout {
        head_cx,
        head_cy,
        head_rx,
        head_ry,
        feat_cx,
        eye_y,
        eye_dx: 3.5 * s,
        eye_r: 1.25 * s,
        mouth_cx: head_cx + 1.8 * yaw * s,
        mouth_y: head_cy + 5.0 * s + 0.8 * feat_dy,
        mouth_half_w: 3.2 * s,
        lens_r: 2.7 * s,
        hat_top,
        hat_bot: hat_top + 2.8 * s,
        hat_half_w: 10.2 * 1.28 * s,
    }
}

/// Axis-aligned box coverage of the pixel centered at (x, y): the overlap
/// area of `[x-0.5, x+0.5] x [y-0.5, y+0.5]` with the given rectangle.
fn box_coverage(x: f64, y: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let ox = (x + 0.5).min(x1) - (x - 0.5).max(x0);
    let oy = (y + 0.5).min(y1) - (y - 0.5).max(y0);
    ox.max(0.0).min(1.0) * oy.max(0.0).min(1.0)
}

/// Soft ellipse coverage with roughly one-pixel anti-aliasing.
fn ellipse_coverage(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let nx = (x - cx) / rx;
    let ny = (y - cy) / ry;
    let rho = (nx * nx + ny * ny).sqrt();
    // normalized-space width of ~1 pixel
    let soft = 1.0 / rx.min(ry);
    ((1.0 - rho) / soft + 0.5).clamp(0.0, 1.0)
}

fn blend(img: &mut Image, x: usize, y: usize, color: [f64; 3], alpha: f64) {
    if alpha <= 0.0 {
        return;
    }
    let a = alpha.min(1.0);
    for c in 0..3 {
        img[[c, y, x]] = img[[c, y, x]] * (1.0 - a) + color[c] * a;
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Renders a face and the exact masks of its positive attributes.
pub fn render_face(params: &FaceParams, size: usize) -> (Image, BTreeMap<String, Array2<bool>>) {
    let lay = face_layout(&params.pose, size);
    let rx = lay.head_rx * params.head_rx_scale;
    let ry = lay.head_ry * params.head_ry_scale;
    let eye_dx = lay.eye_dx * params.eye_spread;
    let mouth_hw = lay.mouth_half_w * params.mouth_width;
    let s = size as f64 / 32.0;

    let mut img = Array3::<f64>::zeros((3, size, size));
    for c in 0..3 {
        img.index_axis_mut(ndarray::Axis(0), c).fill(params.background[c]);
    }

    // head with aged skin effects folded into the skin shade per pixel
    let mut head_cov = Array2::<f64>::zeros((size, size));
    let severity = if params.flags.aged { params.aged_severity } else { 0.0 };
    // rows chosen clear of the glasses band, hat brim, and mouth window
    let wrinkle_rows = [lay.eye_y - 4.3 * s, lay.eye_y + 4.3 * s];
    for y in 0..size {
        for x in 0..size {
            let cov = ellipse_coverage(x as f64, y as f64, lay.head_cx, lay.head_cy, rx, ry);
            if cov <= 0.0 {
                continue;
            }
            head_cov[[y, x]] = cov;
            let mut skin = params.skin;
            if severity > 0.0 {
                // desaturate toward gray and lighten slightly
                let lum = luminance(skin);
                let f = 0.65 * severity;
                for c in 0..3 {
                    skin[c] = skin[c] * (1.0 - f) + (lum + 0.04) * f;
                }
                // horizontal wrinkle stripes darken the skin multiplicatively
                for wy in wrinkle_rows {
                    let d = (y as f64 - wy).abs();
                    let band = (1.0 - d / (0.9 * s)).clamp(0.0, 1.0);
                    if band > 0.0 {
                        let dark = 1.0 - 0.38 * severity * band;
                        for c in skin.iter_mut() {
                            *c *= dark;
                        }
                    }
                }
            }
            blend(&mut img, x, y, skin, cov);
        }
    }

    // eyes: dark filled circles
    let eye_color = [0.08, 0.07, 0.1];
    for side in [-1.0, 1.0] {
        let ex = lay.feat_cx + side * eye_dx;
        for y in 0..size {
            for x in 0..size {
                let cov = ellipse_coverage(x as f64, y as f64, ex, lay.eye_y, lay.eye_r, lay.eye_r);
                if cov > 0.0 {
                    blend(&mut img, x, y, eye_color, cov * head_cov[[y, x]]);
                }
            }
        }
    }

    // mouth: thick curve, corners-up when smiling, slightly down otherwise
    let curv = if params.flags.smile { 1.9 * s } else { -1.4 * s };
    let mouth_color = [0.45, 0.12, 0.14];
    let thick = 1.3 * s;
    let mut mouth_cov = Array2::<f64>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let tx = (x as f64 - lay.mouth_cx) / mouth_hw;
            if tx.abs() > 1.15 {
                continue;
            }
            let yc = lay.mouth_y + curv * (1.0 - (tx * tx).min(1.0));
            // distance to the curve, softened over ~1px, faded at the ends
            let dv = (y as f64 - yc).abs();
            let v_cov = ((thick / 2.0 - dv) + 0.5).clamp(0.0, 1.0);
            let end_fade = ((1.05 - tx.abs()) / 0.15).clamp(0.0, 1.0);
            let cov = v_cov * end_fade * head_cov[[y, x]];
            if cov > 0.0 {
                mouth_cov[[y, x]] = cov;
                blend(&mut img, x, y, mouth_color, cov);
            }
        }
    }
    let _ = mouth_cov;

    // glasses: tinted lenses with dark rims and a bridge bar
    let mut glasses_cov = Array2::<f64>::zeros((size, size));
    if params.flags.glasses {
        let rim_color = [0.06, 0.06, 0.08];
        let tint_color = [0.16, 0.18, 0.24];
        for side in [-1.0, 1.0] {
            let ex = lay.feat_cx + side * eye_dx;
            for y in 0..size {
                for x in 0..size {
                    let outer = ellipse_coverage(x as f64, y as f64, ex, lay.eye_y, lay.lens_r, lay.lens_r);
                    if outer <= 0.0 {
                        continue;
                    }
                    let inner = ellipse_coverage(
                        x as f64,
                        y as f64,
                        ex,
                        lay.eye_y,
                        lay.lens_r - 0.9 * s,
                        lay.lens_r - 0.9 * s,
                    );
                    let rim = (outer - inner).max(0.0);
                    if rim > 0.0 {
                        blend(&mut img, x, y, rim_color, rim);
                        glasses_cov[[y, x]] = glasses_cov[[y, x]].max(rim);
                    }
                    if inner > 0.0 {
                        blend(&mut img, x, y, tint_color, 0.55 * inner);
                        glasses_cov[[y, x]] = glasses_cov[[y, x]].max(inner);
                    }
                }
            }
        }
        // bridge between the inner lens edges
        let bx0 = lay.feat_cx - eye_dx + lay.lens_r - 1.0 * s;
        let bx1 = lay.feat_cx + eye_dx - lay.lens_r + 1.0 * s;
        for y in 0..size {
            for x in 0..size {
                let cov = box_coverage(
                    x as f64,
                    y as f64,
                    bx0,
                    bx1,
                    lay.eye_y - 0.45 * s,
                    lay.eye_y + 0.45 * s,
                );
                if cov > 0.0 {
                    blend(&mut img, x, y, rim_color, cov);
                    glasses_cov[[y, x]] = glasses_cov[[y, x]].max(cov);
                }
            }
        }
    }

    // hat: brim bar overlapping the top of the head
    let mut hat_cov = Array2::<f64>::zeros((size, size));
    if params.flags.hat {
        for y in 0..size {
            for x in 0..size {
                let cov = box_coverage(
                    x as f64,
                    y as f64,
                    lay.head_cx - lay.hat_half_w,
                    lay.head_cx + lay.hat_half_w,
                    lay.hat_top,
                    lay.hat_bot,
                );
                if cov > 0.0 {
                    hat_cov[[y, x]] = cov;
                    blend(&mut img, x, y, params.hat_color, cov);
                }
            }
        }
    }

    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    // exact masks: region boxes clipped to drawn foreground
    let mut masks = BTreeMap::new();
    if params.flags.glasses {
        let mut m = Array2::<bool>::default((size, size));
        let band_h = lay.lens_r + 1.3 * s;
        let band_w = eye_dx + lay.lens_r + 1.2 * s;
        for y in 0..size {
            for x in 0..size {
                let in_band = (y as f64 - lay.eye_y).abs() <= band_h
                    && (x as f64 - lay.feat_cx).abs() <= band_w;
                m[[y, x]] = glasses_cov[[y, x]] > 0.0 || (in_band && head_cov[[y, x]] > 0.0);
            }
        }
        masks.insert("glasses".to_string(), m);
    }
    if params.flags.hat {
        let m = hat_cov.mapv(|v| v > 0.0);
        masks.insert("hat".to_string(), m);
    }
    if params.flags.smile {
        let mut m = Array2::<bool>::default((size, size));
        for y in 0..size {
            for x in 0..size {
                let in_box = (y as f64 - lay.mouth_y) >= -2.8 * s
                    && (y as f64 - lay.mouth_y) <= 3.4 * s
                    && (x as f64 - lay.mouth_cx).abs() <= mouth_hw + 1.5 * s;
                m[[y, x]] = in_box && head_cov[[y, x]] > 0.0;
            }
        }
        masks.insert("smile".to_string(), m);
    }
    if params.flags.aged {
        let m = head_cov.mapv(|v| v > 0.0);
        masks.insert("aged".to_string(), m);
    }

    (img, masks)
}

/// Dataset generation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { image_size: 32 }
    }
}

/// One labelled sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub flags: AttributeFlags,
    pub pose: Pose,
    /// Masks of the attributes that are present, exact by construction.
    pub masks: BTreeMap<String, Array2<bool>>,
    /// Render parameters when procedurally generated (None for ingested
    /// external data).
    pub params: Option<FaceParams>,
}

/// The procedural dataset.
#[derive(Debug, Clone)]
pub struct ProceduralDataset {
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub config: DataConfig,
}

impl ProceduralDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples with / without an attribute.
    pub fn split_by(&self, attribute: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.flags.get(attribute)? {
                pos.push(i);
            } else {
                neg.push(i);
            }
        }
        Ok((pos, neg))
    }
}

/// Generates `n` faces with independently sampled attributes (each present
/// with probability 1/2). Deterministic in `seed`.
pub fn generate_dataset(n: usize, config: &DataConfig, seed: u64) -> Result<ProceduralDataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    let mut master = ChaCha12Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        // per-sample stream so adding parameters later cannot shift others
        let sub = master.gen::<u64>();
        let mut rng = ChaCha12Rng::seed_from_u64(sub);
        let params = FaceParams::sample(&mut rng);
        let (image, masks) = render_face(&params, config.image_size);
        samples.push(Sample {
            id: format!("sample_{i:05}"),
            image,
            flags: params.flags,
            pose: params.pose,
            masks,
            params: Some(params),
        });
    }
    Ok(ProceduralDataset {
        samples,
        seed,
        config: config.clone(),
    })
}

// ---------------------------------------------------------------------------
// On-disk layout
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    image: String,
    flags: AttributeFlags,
    pose: Pose,
    masks: BTreeMap<String, String>,
    params: Option<FaceParams>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    config: DataConfig,
    samples: Vec<ManifestSample>,
}

impl ProceduralDataset {
    /// Writes PNG images, per-attribute PNG masks, and a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images_dir = dir.join("images");
        let masks_dir = dir.join("masks");
        std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(images_dir.display().to_string(), e))?;
        std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(masks_dir.display().to_string(), e))?;
        let mut manifest = Manifest {
            seed: self.seed,
            config: self.config.clone(),
            samples: Vec::with_capacity(self.samples.len()),
        };
        for s in &self.samples {
            let image_rel = format!("images/{}.png", s.id);
            imgmath::save_png(&s.image, &dir.join(&image_rel))?;
            let mut mask_paths = BTreeMap::new();
            for (attr, mask) in &s.masks {
                let mask_rel = format!("masks/{}_{attr}.png", s.id);
                imgmath::save_mask_png(mask, &dir.join(&mask_rel))?;
                mask_paths.insert(attr.clone(), mask_rel);
            }
            manifest.samples.push(ManifestSample {
                id: s.id.clone(),
                image: image_rel,
                flags: s.flags,
                pose: s.pose,
                masks: mask_paths,
                params: s.params.clone(),
            });
        }
        let json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
        let mpath = dir.join("manifest.json");
        std::fs::write(&mpath, json).map_err(|e| Error::io(mpath.display().to_string(), e))?;
        Ok(())
    }

    /// Loads a dataset saved by [`ProceduralDataset::save`]. Images come
    /// back 8-bit quantized.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let raw = std::fs::read(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
        let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::Malformed {
            path: mpath.display().to_string(),
            reason: format!("manifest is not valid JSON: {e}"),
        })?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for ms in manifest.samples {
            let image = imgmath::load_png(&dir.join(&ms.image))?;
            let mut masks = BTreeMap::new();
            for (attr, rel) in &ms.masks {
                let labels = imgmath::load_label_png(&dir.join(rel))?;
                masks.insert(attr.clone(), labels.mapv(|v| v > 127));
            }
            samples.push(Sample {
                id: ms.id,
                image,
                flags: ms.flags,
                pose: ms.pose,
                masks,
                params: ms.params,
            });
        }
        Ok(ProceduralDataset {
            samples,
            seed: manifest.seed,
            config: manifest.config,
        })
    }
}

// ---------------------------------------------------------------------------
// Cut-and-paste pairs
// ---------------------------------------------------------------------------

/// `output == source` where the mask is set, `== target` elsewhere, exactly.
pub fn cut_and_paste(source: &Image, source_mask: &Array2<bool>, target: &Image) -> Result<Image> {
    if source.shape() != target.shape()
        || source_mask.nrows() != source.shape()[1]
        || source_mask.ncols() != source.shape()[2]
    {
        return Err(Error::shape(
            "cut_and_paste",
            format!("{:?}", source.shape()),
            format!("{:?} with mask {}x{}", target.shape(), source_mask.nrows(), source_mask.ncols()),
        ));
    }
    let mut out = target.clone();
    for y in 0..source_mask.nrows() {
        for x in 0..source_mask.ncols() {
            if source_mask[[y, x]] {
                for c in 0..3 {
                    out[[c, y, x]] = source[[c, y, x]];
                }
            }
        }
    }
    Ok(out)
}

/// One positive/negative pair.
#[derive(Debug, Clone)]
pub struct Pair {
    pub negative: Image,
    pub positive: Image,
    pub mask: Array2<bool>,
}

/// K cut-and-paste pairs for one attribute, built from one source identity.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub attribute_name: String,
    pub pairs: Vec<Pair>,
    /// `[source identity id, donor id...]` provenance.
    pub source_ids: Vec<String>,
}

/// Integer-translates an image, filling vacated pixels from the original
/// (translation moves the *content*; out-of-range content is dropped).
fn translate_image(img: &Image, dy: isize, dx: isize) -> Image {
    let (h, w) = imgmath::image_dims(img);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                for c in 0..3 {
                    out[[c, y, x]] = img[[c, sy as usize, sx as usize]];
                }
            }
        }
    }
    out
}

fn translate_mask(mask: &Array2<bool>, dy: isize, dx: isize) -> Array2<bool> {
    let (h, w) = (mask.nrows(), mask.ncols());
    let mut out = Array2::<bool>::default((h, w));
    for y in 0..h {
        for x in 0..w {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                out[[y, x]] = mask[[sy as usize, sx as usize]];
            }
        }
    }
    out
}

fn mask_centroid(mask: &Array2<bool>) -> Option<(f64, f64)> {
    let mut sy = 0.0;
    let mut sx = 0.0;
    let mut n = 0usize;
    for y in 0..mask.nrows() {
        for x in 0..mask.ncols() {
            if mask[[y, x]] {
                sy += y as f64;
                sx += x as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some((sy / n as f64, sx / n as f64))
    }
}

/// Where an attribute's region centroid sits for a given pose.
pub fn canonical_attribute_center(attribute: &str, pose: &Pose, size: usize) -> Result<(f64, f64)> {
    let lay = face_layout(pose, size);
    match attribute {
        "glasses" => Ok((lay.eye_y, lay.feat_cx)),
        "hat" => Ok(((lay.hat_top + lay.hat_bot) / 2.0, lay.head_cx)),
        "smile" => Ok((lay.mouth_y + 0.3, lay.mouth_cx)),
        "aged" => Ok((lay.head_cy, lay.head_cx)),
        other => Err(Error::InvalidConfig(format!("unknown attribute {other:?}"))),
    }
}

/// Builds K pairs for `attribute` from `dataset`. One fixed negative source
/// identity S (the first attribute-negative sample); positives paste K
/// distinct donors' regions onto S, centroid-aligned by integer translation.
/// For `aged` (no paste mask) positives are aged re-renders of S at varying
/// severity, which requires procedural render parameters.
pub fn build_pairs(attribute: &str, k: usize, dataset: &ProceduralDataset, max_k: usize) -> Result<PairSet> {
    if k == 0 {
        return Err(Error::Data("pair count k must be >= 1".into()));
    }
    if k > max_k {
        return Err(Error::Data(format!("k={k} exceeds configured maximum {max_k}")));
    }
    let (mut pos_idx, mut neg_idx) = dataset.split_by(attribute)?;
    // Prefer near-frontal sources and donors: the inversion encoder is
    // trained at the reference camera only, so frontal pair images invert
    // far more faithfully than strongly yawed ones. Ties keep dataset order.
    let frontality = |i: &usize| {
        let p = &dataset.samples[*i].pose;
        p.yaw_deg.abs() + p.pitch_deg.abs()
    };
    pos_idx.sort_by(|a, b| frontality(a).partial_cmp(&frontality(b)).unwrap().then(a.cmp(b)));
    neg_idx.sort_by(|a, b| frontality(a).partial_cmp(&frontality(b)).unwrap().then(a.cmp(b)));
    let source_i = *neg_idx.first().ok_or_else(|| {
        Error::Data(format!("no {attribute}-negative sample to use as source identity"))
    })?;
    let source = &dataset.samples[source_i];
    let size = dataset.config.image_size;

    let mut pairs = Vec::with_capacity(k);
    let mut source_ids = vec![source.id.clone()];

    if attribute == "aged" {
        let params = source.params.clone().ok_or_else(|| {
            Error::Data("aged pairs require procedural render parameters (not available for ingested data)".into())
        })?;
        // both sides re-rendered so they differ only inside the head region
        let mut neg_params = params.clone();
        neg_params.flags.aged = false;
        let (neg_img, _) = render_face(&neg_params, size);
        for j in 0..k {
            let mut pos_params = params.clone();
            pos_params.flags.aged = true;
            // severity sweep keeps the K positives distinct
            pos_params.aged_severity = 0.7 + 0.3 * (j as f64 + 0.5) / k as f64;
            let (pos_img, pos_masks) = render_face(&pos_params, size);
            let mask = pos_masks
                .get("aged")
                .cloned()
                .ok_or_else(|| Error::DegenerateAttribute("aged render produced no mask".into()))?;
            pairs.push(Pair {
                negative: neg_img.clone(),
                positive: pos_img,
                mask,
            });
            source_ids.push(format!("{}#aged{}", source.id, j));
        }
        return Ok(PairSet {
            attribute_name: attribute.to_string(),
            pairs,
            source_ids,
        });
    }

    if pos_idx.len() < k {
        return Err(Error::Data(format!(
            "need {k} {attribute}-positive donors, dataset has only {}",
            pos_idx.len()
        )));
    }
    let (target_cy, target_cx) = canonical_attribute_center(attribute, &source.pose, size)?;
    for &di in pos_idx.iter().take(k) {
        let donor = &dataset.samples[di];
        let donor_mask = donor.masks.get(attribute).ok_or_else(|| {
            Error::Data(format!("donor {} lacks a {attribute} mask", donor.id))
        })?;
        let (dcy, dcx) = mask_centroid(donor_mask)
            .ok_or_else(|| Error::DegenerateAttribute(format!("donor {} has an empty {attribute} mask", donor.id)))?;
        let dy = (target_cy - dcy).round() as isize;
        let dx = (target_cx - dcx).round() as isize;
        let moved_img = translate_image(&donor.image, dy, dx);
        let moved_mask = translate_mask(donor_mask, dy, dx);
        let positive = cut_and_paste(&moved_img, &moved_mask, &source.image)?;
        pairs.push(Pair {
            negative: source.image.clone(),
            positive,
            mask: moved_mask,
        });
        source_ids.push(donor.id.clone());
    }
    Ok(PairSet {
        attribute_name: attribute.to_string(),
        pairs,
        source_ids,
    })
}

// ---------------------------------------------------------------------------
// External ingestion (CelebAMask-HQ-style folders)
// ---------------------------------------------------------------------------

/// Result of ingesting external data: the dataset view plus files skipped
/// for missing masks.
#[derive(Debug)]
pub struct IngestReport {
    pub dataset: ProceduralDataset,
    pub skipped: Vec<String>,
}

/// Ingests an images directory plus a label-mask directory. Masks are
/// single-channel PNGs of integer codes; `label_map` maps attribute name →
/// code. An attribute is present when any pixel carries its code, and its
/// mask is exactly those pixels.
pub fn ingest_external(
    image_dir: &Path,
    mask_dir: &Path,
    label_map: &BTreeMap<String, u8>,
) -> Result<IngestReport> {
    let mut entries: Vec<std::path::PathBuf> = std::fs::read_dir(image_dir)
        .map_err(|e| Error::io(image_dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    entries.sort();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut size = 0usize;
    for path in entries {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let mask_path = mask_dir.join(format!("{stem}.png"));
        if !mask_path.exists() {
            skipped.push(stem);
            continue;
        }
        let image = imgmath::load_png(&path)?;
        let labels = imgmath::load_label_png(&mask_path)?;
        if labels.nrows() != image.shape()[1] || labels.ncols() != image.shape()[2] {
            return Err(Error::Malformed {
                path: mask_path.display().to_string(),
                reason: "mask dimensions do not match image".into(),
            });
        }
        size = image.shape()[1];
        let mut flags = AttributeFlags::default();
        let mut masks = BTreeMap::new();
        for (attr, &code) in label_map {
            let mask = labels.mapv(|v| v == code);
            if mask.iter().any(|&b| b) {
                flags.set(attr, true)?;
                masks.insert(attr.clone(), mask);
            }
        }
        samples.push(Sample {
            id: stem,
            image,
            flags,
            pose: Pose::frontal(),
            masks,
            params: None,
        });
    }
    Ok(IngestReport {
        dataset: ProceduralDataset {
            samples,
            seed: 0,
            config: DataConfig {
                image_size: if size == 0 { 32 } else { size },
            },
        },
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgmath::linf_diff;
    use sha2::{Digest, Sha256};

    fn hash_dir(dir: &Path) -> String {
        let mut files: Vec<std::path::PathBuf> = walk(dir);
        files.sort();
        let mut h = Sha256::new();
        for f in files {
            h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
            h.update(std::fs::read(&f).unwrap());
        }
        format!("{:x}", h.finalize())
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let cfg = DataConfig::default();
        let d1 = generate_dataset(3, &cfg, 42).unwrap();
        let d2 = generate_dataset(3, &cfg, 42).unwrap();
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        d1.save(t1.path()).unwrap();
        d2.save(t2.path()).unwrap();
        assert_eq!(hash_dir(t1.path()), hash_dir(t2.path()));

        let d3 = generate_dataset(3, &cfg, 43).unwrap();
        let t3 = tempfile::tempdir().unwrap();
        d3.save(t3.path()).unwrap();
        assert_ne!(hash_dir(t1.path()), hash_dir(t3.path()));
    }

    #[test]
    fn attribute_frequencies_near_half() {
        let d = generate_dataset(1000, &DataConfig::default(), 7).unwrap();
        for attr in ATTRIBUTES {
            let count = d
                .samples
                .iter()
                .filter(|s| s.flags.get(attr).unwrap())
                .count();
            let freq = count as f64 / 1000.0;
            assert!((0.45..=0.55).contains(&freq), "{attr} frequency {freq}");
        }
    }

    #[test]
    fn positive_attributes_have_nonempty_foreground_masks() {
        let d = generate_dataset(40, &DataConfig::default(), 11).unwrap();
        for s in &d.samples {
            for attr in ATTRIBUTES {
                if s.flags.get(attr).unwrap() {
                    let m = s.masks.get(attr).expect("mask for positive attribute");
                    assert!(m.iter().any(|&b| b), "{} {attr} mask empty", s.id);
                } else {
                    assert!(!s.masks.contains_key(attr));
                }
            }
        }
    }

    #[test]
    fn glasses_mask_covers_eye_region() {
        let d = generate_dataset(60, &DataConfig::default(), 3).unwrap();
        for s in d.samples.iter().filter(|s| s.flags.glasses) {
            let lay = face_layout(&s.pose, d.config.image_size);
            let m = &s.masks["glasses"];
            for side in [-1.0, 1.0] {
                let ex = (lay.feat_cx + side * lay.eye_dx).round() as usize;
                let ey = lay.eye_y.round() as usize;
                assert!(m[[ey, ex]], "{}: eye center not in glasses mask", s.id);
            }
        }
    }

    #[test]
    fn cut_and_paste_exactness_and_idempotence() {
        let d = generate_dataset(6, &DataConfig::default(), 5).unwrap();
        let a = &d.samples[0].image;
        let b = &d.samples[1].image;
        let size = d.config.image_size;

        let empty = Array2::<bool>::default((size, size));
        assert_eq!(&cut_and_paste(a, &empty, b).unwrap(), b);

        let full = Array2::from_elem((size, size), true);
        assert_eq!(&cut_and_paste(a, &full, b).unwrap(), a);

        let mut half = Array2::<bool>::default((size, size));
        for y in 0..size / 2 {
            for x in 0..size {
                half[[y, x]] = true;
            }
        }
        let once = cut_and_paste(a, &half, b).unwrap();
        let twice = cut_and_paste(a, &half, &once).unwrap();
        assert_eq!(once, twice);
        // exact equality regions
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    let want = if half[[y, x]] { a[[c, y, x]] } else { b[[c, y, x]] };
                    assert_eq!(once[[c, y, x]], want);
                }
            }
        }
    }

    #[test]
    fn pairs_differ_only_inside_mask() {
        let d = generate_dataset(60, &DataConfig::default(), 19).unwrap();
        for attr in ATTRIBUTES {
            let ps = build_pairs(attr, 3, &d, 10).unwrap();
            assert_eq!(ps.pairs.len(), 3);
            for (pi, p) in ps.pairs.iter().enumerate() {
                let mut out_diff = 0.0f64;
                let mut in_diff = 0.0f64;
                for y in 0..d.config.image_size {
                    for x in 0..d.config.image_size {
                        for c in 0..3 {
                            let delta = (p.positive[[c, y, x]] - p.negative[[c, y, x]]).abs();
                            if p.mask[[y, x]] {
                                in_diff += delta;
                            } else {
                                out_diff = out_diff.max(delta);
                            }
                        }
                    }
                }
                assert_eq!(out_diff, 0.0, "{attr} pair {pi} differs outside mask");
                assert!(in_diff > 0.0, "{attr} pair {pi} identical inside mask");
            }
        }
    }

    #[test]
    fn pairs_share_one_source_identity() {
        let d = generate_dataset(60, &DataConfig::default(), 23).unwrap();
        let ps = build_pairs("glasses", 10, &d, 10).unwrap();
        assert_eq!(ps.pairs.len(), 10);
        for p in &ps.pairs[1..] {
            assert_eq!(p.negative, ps.pairs[0].negative);
        }
        // the source identity is glasses-negative
        let (_, neg) = d.split_by("glasses").unwrap();
        assert_eq!(ps.source_ids[0], d.samples[neg[0]].id);
    }

    #[test]
    fn pair_count_errors() {
        let d = generate_dataset(30, &DataConfig::default(), 29).unwrap();
        assert!(build_pairs("glasses", 0, &d, 10).is_err());
        assert!(build_pairs("glasses", 11, &d, 10).is_err());
        // k=15 allowed when the configured max permits it
        let d2 = generate_dataset(80, &DataConfig::default(), 29).unwrap();
        assert!(build_pairs("glasses", 15, &d2, 15).is_ok());
        // asking for more donors than exist
        let tiny = generate_dataset(3, &DataConfig::default(), 31).unwrap();
        let (pos, _) = tiny.split_by("hat").unwrap();
        let too_many = pos.len() + 1;
        assert!(build_pairs("hat", too_many, &tiny, 100).is_err());
    }

    #[test]
    fn dataset_roundtrip_through_disk() {
        let d = generate_dataset(4, &DataConfig::default(), 13).unwrap();
        let t = tempfile::tempdir().unwrap();
        d.save(t.path()).unwrap();
        let back = ProceduralDataset::load(t.path()).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.seed, 13);
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.flags, b.flags);
            assert_eq!(a.masks.len(), b.masks.len());
            for (attr, m) in &a.masks {
                assert_eq!(m, &b.masks[attr]);
            }
            // images round-trip through 8-bit quantization
            assert!(linf_diff(&a.image, &b.image) <= 0.5 / 255.0 + 1e-12);
            assert_eq!(a.params, b.params);
        }
    }

    #[test]
    fn ingest_external_roundtrip() {
        let d = generate_dataset(3, &DataConfig::default(), 17).unwrap();
        let t = tempfile::tempdir().unwrap();
        let img_dir = t.path().join("img");
        let mask_dir = t.path().join("msk");
        std::fs::create_dir_all(&img_dir).unwrap();
        std::fs::create_dir_all(&mask_dir).unwrap();
        // build a label image: code 3 where sample 0's glasses mask would be;
        // reuse its aged/head region for code 5
        for (i, s) in d.samples.iter().enumerate() {
            imgmath::save_png(&s.image, &img_dir.join(format!("f{i}.png"))).unwrap();
            let size = d.config.image_size;
            let mut labels = Array2::<u8>::zeros((size, size));
            if let Some(m) = s.masks.get("glasses") {
                for (l, &b) in labels.iter_mut().zip(m.iter()) {
                    if b {
                        *l = 3;
                    }
                }
            }
            // save as 8-bit gray PNG of raw codes
            let mask_b = labels.mapv(|v| v);
            let mut buf = image::GrayImage::new(size as u32, size as u32);
            for y in 0..size {
                for x in 0..size {
                    buf.put_pixel(x as u32, y as u32, image::Luma([mask_b[[y, x]]]));
                }
            }
            buf.save(mask_dir.join(format!("f{i}.png"))).unwrap();
        }
        let mut label_map = BTreeMap::new();
        label_map.insert("glasses".to_string(), 3u8);
        let report = ingest_external(&img_dir, &mask_dir, &label_map).unwrap();
        assert_eq!(report.dataset.len(), 3);
        assert!(report.skipped.is_empty());
        for (i, s) in report.dataset.samples.iter().enumerate() {
            let orig = &d.samples[i];
            assert_eq!(s.flags.glasses, orig.flags.glasses, "sample {i}");
            if orig.flags.glasses {
                assert_eq!(s.masks["glasses"], orig.masks["glasses"]);
            }
        }

        // missing mask file → skipped with a warning entry, no error
        std::fs::remove_file(mask_dir.join("f1.png")).unwrap();
        let report = ingest_external(&img_dir, &mask_dir, &label_map).unwrap();
        assert_eq!(report.dataset.len(), 2);
        assert_eq!(report.skipped, vec!["f1".to_string()]);

        // empty directory → empty view
        let empty = t.path().join("none");
        std::fs::create_dir_all(&empty).unwrap();
        let report = ingest_external(&empty, &mask_dir, &label_map).unwrap();
        assert!(report.dataset.is_empty());
    }

    #[test]
    fn aged_pairs_vary_and_stay_inside_head() {
        let d = generate_dataset(40, &DataConfig::default(), 37).unwrap();
        let ps = build_pairs("aged", 5, &d, 10).unwrap();
        assert_eq!(ps.pairs.len(), 5);
        // severities differ → positives differ pairwise
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert!(linf_diff(&ps.pairs[i].positive, &ps.pairs[j].positive) > 0.0);
            }
        }
    }
}
