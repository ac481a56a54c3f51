//! Edit-quality metrics: desk-scale Fréchet and kernel distances on fixed
//! convolutional features, masked identity embeddings (ED/CS), oracle-based
//! attribute efficacy, and multi-view consistency.
//!
//! Published FFHQ-scale comparison numbers use Inception features and a
//! face-identity network; at desk scale both are replaced by small fixed
//! random conv stacks. The published values therefore appear in reports as
//! context only, never as reproduction targets.

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::imgmath::Image;
use crate::inversion::{render_reference, Encoder};
use crate::latent::{apply_edit, broadcast, EditDirection, WPlusLatent, ZLatent};
use crate::linalg::{cosine, sym_eigen, sym_sqrt};
use crate::nn::{leaky_relu, Conv2d};
use crate::oracle::{detect, Detection, OracleConfig};
use crate::renderer::{orbit_yaws, render_orbit};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Seed of the fixed feature stack behind FID/KID.
const METRIC_FEATURE_SEED: u64 = 1717;
/// Seed of the fixed identity-embedding stack.
const IDENTITY_FEATURE_SEED: u64 = 2929;

/// Published FFHQ-scale Table-1 context rows: (method, FID↓, ED↓, CS↑).
/// Inception-feature numbers from the attribute-editing literature; not
/// comparable to desk-scale values and never used as targets.
pub const PUBLISHED_CONTEXT: [(&str, f64, f64, f64); 4] = [
    ("InterfaceGAN", 43.07, 0.61, 0.92),
    ("StyleFlow", 47.81, 0.71, 0.82),
    ("GANSpace", 42.38, 0.50, 0.95),
    ("FLAME-3D", 39.91, 0.50, 0.94),
];

// ---------------------------------------------------------------------------
// Fixed feature stacks
// ---------------------------------------------------------------------------

/// A fixed (never trained) two-layer conv stack whose pooled responses act
/// as the feature space for distribution distances.
pub struct FeatureStack {
    convs: Vec<Conv2d>,
}

impl FeatureStack {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        FeatureStack {
            convs: vec![
                Conv2d::new(&mut rng, 3, 6, 3, 2, 1),
                Conv2d::new(&mut rng, 6, 8, 3, 2, 1),
            ],
        }
    }

    fn layer_maps(&self, img: &Image) -> Vec<Array4<f64>> {
        let mut h = img.view().insert_axis(Axis(0)).to_owned();
        let mut maps = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h));
            maps.push(h.clone());
        }
        maps
    }

    /// Pooled feature vector: per-channel spatial mean and population
    /// standard deviation of every layer. Dimension `2·(6+8) = 28`.
    pub fn pooled_features(&self, img: &Image) -> Array1<f64> {
        let maps = self.layer_maps(img);
        let mut out = Vec::new();
        for m in &maps {
            let c = m.shape()[1];
            for ci in 0..c {
                let plane = m.index_axis(Axis(0), 0);
                let plane = plane.index_axis(Axis(0), ci);
                let n = plane.len() as f64;
                let mean = plane.sum() / n;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                out.push(mean);
                out.push(var.sqrt());
            }
        }
        Array1::from_vec(out)
    }
}

/// A fixed conv stack whose flattened final activation, unit-normalized, is
/// the identity embedding. Attribute regions are zeroed before embedding so
/// identity is measured where identity lives.
pub struct IdentityEmbedder {
    convs: Vec<Conv2d>,
}

impl IdentityEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        IdentityEmbedder {
            convs: vec![
                Conv2d::new(&mut rng, 3, 6, 3, 2, 1),
                Conv2d::new(&mut rng, 6, 8, 3, 2, 1),
            ],
        }
    }

    /// Embeds one image, zeroing pixels inside `exclude` first. The result
    /// is unit-norm except for the all-zero corner case (e.g. a black
    /// image), which embeds to the zero vector.
    pub fn embed(&self, img: &Image, exclude: Option<&Array2<bool>>) -> Result<Array1<f64>> {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let mut x = img.clone();
        if let Some(mask) = exclude {
            if mask.nrows() != h || mask.ncols() != w {
                return Err(Error::shape(
                    "identity embedding mask",
                    format!("{h}x{w}"),
                    format!("{}x{}", mask.nrows(), mask.ncols()),
                ));
            }
            for y in 0..h {
                for xx in 0..w {
                    if mask[[y, xx]] {
                        for c in 0..3 {
                            x[[c, y, xx]] = 0.0;
                        }
                    }
                }
            }
        }
        let mut hmap = x.view().insert_axis(Axis(0)).to_owned();
        for conv in &self.convs {
            hmap = leaky_relu(&conv.forward(&hmap));
        }
        let flat: Vec<f64> = hmap.iter().copied().collect();
        let mut e = Array1::from_vec(flat);
        let norm = e.dot(&e).sqrt();
        if norm > 0.0 {
            e /= norm;
        }
        Ok(e)
    }
}

// ---------------------------------------------------------------------------
// Distribution distances
// ---------------------------------------------------------------------------

/// Fréchet distance between two Gaussians:
/// `‖μ_a−μ_b‖² + Tr(Σ_a + Σ_b − 2·(Σ_a^½ Σ_b Σ_a^½)^½)`.
///
/// The symmetric-sandwich form of the cross term equals `Tr((Σ_aΣ_b)^½)`
/// and keeps every square root on a symmetric PSD matrix. Tiny negative
/// results from roundoff are clamped to zero.
pub fn frechet_distance(
    mu_a: &Array1<f64>,
    cov_a: &Array2<f64>,
    mu_b: &Array1<f64>,
    cov_b: &Array2<f64>,
) -> f64 {
    let dmu = mu_a - mu_b;
    let sq_a = sym_sqrt(cov_a);
    let sandwich = sq_a.dot(cov_b).dot(&sq_a);
    let cross = sym_sqrt(&sandwich);
    let trace = |m: &Array2<f64>| (0..m.nrows()).map(|i| m[[i, i]]).sum::<f64>();
    let d = dmu.dot(&dmu) + trace(cov_a) + trace(cov_b) - 2.0 * trace(&cross);
    d.max(0.0)
}

/// Feature mean and sample covariance (denominator `n − 1`) of a set.
fn feature_moments(images: &[Image], stack: &FeatureStack) -> (Array1<f64>, Array2<f64>) {
    let feats: Vec<Array1<f64>> = images.iter().map(|im| stack.pooled_features(im)).collect();
    let n = feats.len();
    let d = feats[0].len();
    let mut mu = Array1::<f64>::zeros(d);
    for f in &feats {
        mu += f;
    }
    mu /= n as f64;
    let mut cov = Array2::<f64>::zeros((d, d));
    for f in &feats {
        let c = f - &mu;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn check_set_sizes(a: &[Image], b: &[Image], what: &str) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Data(format!(
            "{what} needs at least 2 images per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Desk-scale FID: the Fréchet distance between Gaussian fits of pooled
/// fixed-conv features. Symmetric, non-negative, zero on identical sets.
pub fn small_fid(set_a: &[Image], set_b: &[Image]) -> Result<f64> {
    check_set_sizes(set_a, set_b, "small_fid")?;
    let stack = FeatureStack::new(METRIC_FEATURE_SEED);
    let (mu_a, cov_a) = feature_moments(set_a, &stack);
    let (mu_b, cov_b) = feature_moments(set_b, &stack);
    Ok(frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b))
}

/// Desk-scale KID: unbiased MMD² with the cubic polynomial kernel
/// `k(x, y) = (xᵀy/d + 1)³` on the same pooled features. Can be slightly
/// negative (unbiased estimator).
pub fn kid(set_a: &[Image], set_b: &[Image]) -> Result<f64> {
    check_set_sizes(set_a, set_b, "kid")?;
    let stack = FeatureStack::new(METRIC_FEATURE_SEED);
    let fa: Vec<Array1<f64>> = set_a.iter().map(|im| stack.pooled_features(im)).collect();
    let fb: Vec<Array1<f64>> = set_b.iter().map(|im| stack.pooled_features(im)).collect();
    let d = fa[0].len() as f64;
    let k = |x: &Array1<f64>, y: &Array1<f64>| {
        let v = x.dot(y) / d + 1.0;
        v * v * v
    };
    let m = fa.len() as f64;
    let n = fb.len() as f64;
    let mut kaa = 0.0;
    for i in 0..fa.len() {
        for j in 0..fa.len() {
            if i != j {
                kaa += k(&fa[i], &fa[j]);
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..fb.len() {
        for j in 0..fb.len() {
            if i != j {
                kbb += k(&fb[i], &fb[j]);
            }
        }
    }
    let mut kab = 0.0;
    for x in &fa {
        for y in &fb {
            kab += k(x, y);
        }
    }
    Ok(kaa / (m * (m - 1.0)) + kbb / (n * (n - 1.0)) - 2.0 * kab / (m * n))
}

// ---------------------------------------------------------------------------
// Identity metrics
// ---------------------------------------------------------------------------

/// `(ed, cs)` between the identity embeddings of two same-shape images,
/// excluding the attribute mask region from both. Bit-identical masked
/// inputs give exactly `(0, 1)`.
pub fn identity_metrics(
    original: &Image,
    edited: &Image,
    attribute_mask: Option<&Array2<bool>>,
) -> Result<(f64, f64)> {
    if original.shape() != edited.shape() {
        return Err(Error::shape(
            "identity metrics",
            format!("{:?}", original.shape()),
            format!("{:?}", edited.shape()),
        ));
    }
    let embedder = IdentityEmbedder::new(IDENTITY_FEATURE_SEED);
    let e1 = embedder.embed(original, attribute_mask)?;
    let e2 = embedder.embed(edited, attribute_mask)?;
    if e1 == e2 {
        return Ok((0.0, 1.0));
    }
    let diff = &e1 - &e2;
    let ed = diff.dot(&diff).sqrt();
    let cs = cosine(&e1, &e2).clamp(-1.0, 1.0);
    Ok((ed, cs))
}

// ---------------------------------------------------------------------------
// Model-based metrics
// ---------------------------------------------------------------------------

/// Settings shared by the model-based metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Sampling seed.
    pub seed: u64,
    /// Edit scale applied when measuring.
    pub scale: f64,
    /// Orbit width for view metrics (total sweep; ±half on each side).
    pub yaw_range_deg: f64,
    pub oracle: OracleConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 29,
            scale: 1.0,
            yaw_range_deg: 60.0,
            oracle: OracleConfig::default(),
        }
    }
}

/// Per-sample counts behind an efficacy fraction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EfficacyOutcome {
    /// Samples whose oracle verdict was negative before the edit.
    pub initially_negative: usize,
    /// Of those, how many turned positive after the edit.
    pub flipped: usize,
}

impl EfficacyOutcome {
    pub fn fraction(&self) -> f64 {
        self.flipped as f64 / self.initially_negative as f64
    }
}

/// One evaluation draw: a sampled latent's inversion reconstruction, its
/// edited render, and the oracle verdicts on both.
#[derive(Debug, Clone)]
pub struct EditProbe {
    pub before: Image,
    pub after: Image,
    pub det_before: Detection,
    pub det_after: Detection,
}

/// Runs the measurement pipeline on `n_samples` fresh latents: sample
/// z → w → render ("before") → `apply_edit(w, direction, opts.scale)` →
/// broadcast → render ("after"), with the oracle run on both at the frontal
/// pose. The edit is applied to the W vector before broadcast — the stated
/// editing mechanism — so the probe measures the direction itself, with no
/// inversion noise in the loop. The encoder is only checked for artifact
/// compatibility (it must belong to the same latent space).
pub fn edit_probes(
    direction: &EditDirection,
    n_samples: usize,
    generator: &Generator,
    encoder: &Encoder,
    opts: &EvalOptions,
) -> Result<Vec<EditProbe>> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("efficacy needs n_samples >= 1".into()));
    }
    let cfg = generator.config();
    if encoder.latent_dim() != cfg.latent_dim {
        return Err(Error::shape(
            "edit probe encoder",
            format!("latent_dim {}", cfg.latent_dim),
            format!("{}", encoder.latent_dim()),
        ));
    }
    let frontal = crate::data::Pose {
        yaw_deg: 0.0,
        pitch_deg: 0.0,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut probes = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z = Array1::from_shape_fn(cfg.latent_dim, |_| rng.sample(StandardNormal));
        let w = generator.map_latent(&ZLatent::new(z)?)?;
        let before = render_reference(&generator.synthesize_mpi(&broadcast(&w, cfg.t)?)?)?;
        let det_before = detect(&before, &direction.attribute_name, &frontal, &opts.oracle)?;
        let w_edit = apply_edit(&w, direction, opts.scale)?;
        let after = render_reference(&generator.synthesize_mpi(&broadcast(&w_edit, cfg.t)?)?)?;
        let det_after = detect(&after, &direction.attribute_name, &frontal, &opts.oracle)?;
        probes.push(EditProbe {
            before,
            after,
            det_before,
            det_after,
        });
    }
    Ok(probes)
}

/// Counts oracle flips negative → positive among the initially-negative
/// probes of [`edit_probes`].
pub fn efficacy_from_probes(probes: &[EditProbe], attribute: &str) -> Result<EfficacyOutcome> {
    let initially_negative = probes.iter().filter(|p| !p.det_before.present).count();
    if initially_negative == 0 {
        return Err(Error::Data(format!(
            "no {attribute}-negative samples among {} draws; cannot measure efficacy",
            probes.len()
        )));
    }
    let flipped = probes
        .iter()
        .filter(|p| !p.det_before.present && p.det_after.present)
        .count();
    Ok(EfficacyOutcome {
        initially_negative,
        flipped,
    })
}

/// Samples `n` latents, renders each before and after applying the edit at
/// `opts.scale` to the W vector, and counts oracle flips negative →
/// positive among the initially-negative samples.
pub fn attribute_efficacy_detailed(
    direction: &EditDirection,
    n_samples: usize,
    generator: &Generator,
    encoder: &Encoder,
    opts: &EvalOptions,
) -> Result<EfficacyOutcome> {
    let probes = edit_probes(direction, n_samples, generator, encoder, opts)?;
    efficacy_from_probes(&probes, &direction.attribute_name)
}

/// Fraction of initially-negative samples whose attribute oracle flips to
/// positive after the edit.
pub fn attribute_efficacy(
    direction: &EditDirection,
    n_samples: usize,
    generator: &Generator,
    encoder: &Encoder,
    opts: &EvalOptions,
) -> Result<f64> {
    Ok(attribute_efficacy_detailed(direction, n_samples, generator, encoder, opts)?.fraction())
}

/// Multi-view persistence of one edit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewConsistencyReport {
    /// Orbit yaw of each view, degrees.
    pub yaws_deg: Vec<f64>,
    /// Oracle verdict per view.
    pub per_view: Vec<Detection>,
    /// Minimum per-view oracle confidence (the edit must persist in every
    /// view, so the weakest view is the score).
    pub min_confidence: f64,
    /// Whether the oracle fires in every view.
    pub all_present: bool,
    /// Mean pairwise cosine similarity of per-view identity embeddings.
    pub mean_pairwise_cs: f64,
}

/// Applies the edit at `opts.scale`, renders an `n_views` orbit spanning
/// `±opts.yaw_range_deg/2`, and scores the weakest view's oracle confidence
/// plus cross-view identity agreement.
pub fn view_consistency(
    wp: &WPlusLatent,
    direction: &EditDirection,
    n_views: usize,
    generator: &Generator,
    opts: &EvalOptions,
) -> Result<ViewConsistencyReport> {
    if n_views < 2 {
        return Err(Error::InvalidConfig(
            "view consistency needs at least 2 views".into(),
        ));
    }
    let edited = wp.apply_edit_rows(direction, opts.scale)?;
    let mpi = generator.synthesize_mpi(&edited)?;
    let views = render_orbit(&mpi, n_views, opts.yaw_range_deg)?;
    let yaws = orbit_yaws(n_views, opts.yaw_range_deg);
    let embedder = IdentityEmbedder::new(IDENTITY_FEATURE_SEED);
    let mut per_view = Vec::with_capacity(n_views);
    let mut embeddings = Vec::with_capacity(n_views);
    for (view, yaw) in views.iter().zip(&yaws) {
        let pose = crate::data::Pose {
            yaw_deg: *yaw,
            pitch_deg: 0.0,
        };
        per_view.push(detect(
            &view.rgb,
            &direction.attribute_name,
            &pose,
            &opts.oracle,
        )?);
        embeddings.push(embedder.embed(&view.rgb, None)?);
    }
    let min_confidence = per_view
        .iter()
        .map(|d| d.confidence)
        .fold(f64::INFINITY, f64::min);
    let all_present = per_view.iter().all(|d| d.present);
    let mut cs_sum = 0.0;
    let mut pairs = 0.0;
    for i in 0..n_views {
        for j in (i + 1)..n_views {
            cs_sum += if embeddings[i] == embeddings[j] {
                1.0
            } else {
                cosine(&embeddings[i], &embeddings[j]).clamp(-1.0, 1.0)
            };
            pairs += 1.0;
        }
    }
    Ok(ViewConsistencyReport {
        yaws_deg: yaws,
        per_view,
        min_confidence,
        all_present,
        mean_pairwise_cs: cs_sum / pairs,
    })
}

/// Identity cosine similarity of each orbit view against the reference
/// (frontal) render of the same latent. Apply an edit to `wp` first to
/// measure an edited sample.
pub fn orbit_identity_cs(
    wp: &WPlusLatent,
    n_views: usize,
    generator: &Generator,
    opts: &EvalOptions,
) -> Result<Vec<f64>> {
    if n_views < 2 {
        return Err(Error::InvalidConfig(
            "orbit identity needs at least 2 views".into(),
        ));
    }
    let mpi = generator.synthesize_mpi(wp)?;
    let frontal = render_reference(&mpi)?;
    let views = render_orbit(&mpi, n_views, opts.yaw_range_deg)?;
    let embedder = IdentityEmbedder::new(IDENTITY_FEATURE_SEED);
    let e0 = embedder.embed(&frontal, None)?;
    views
        .iter()
        .map(|v| {
            let e = embedder.embed(&v.rgb, None)?;
            Ok(if e == e0 {
                1.0
            } else {
                cosine(&e0, &e).clamp(-1.0, 1.0)
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One evaluation run's numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub kid: f64,
    pub ed: f64,
    pub cs: f64,
    /// Efficacy fraction per attribute.
    pub efficacy: BTreeMap<String, f64>,
    /// Minimum per-view oracle confidence over the evaluation orbit.
    pub view_consistency: f64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let all = [self.fid, self.kid, self.ed, self.cs, self.view_consistency];
        if all.iter().any(|v| !v.is_finite()) || self.efficacy.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metric report"));
        }
        if !(-1.0..=1.0).contains(&self.cs) {
            return Err(Error::Domain(format!("cs {} outside [-1, 1]", self.cs)));
        }
        if self.fid < 0.0 || self.ed < 0.0 {
            return Err(Error::Domain("fid and ed must be non-negative".into()));
        }
        for (name, v) in &self.efficacy {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Domain(format!(
                    "efficacy[{name}] = {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    /// Markdown comparison table in the published layout (FID↓, ED↓, CS↑),
    /// with the published FFHQ-scale rows as context and this run's
    /// desk-scale numbers as the final row.
    pub fn to_markdown(&self) -> Result<String> {
        self.validate()?;
        let mut s = String::new();
        s.push_str("| Method | FID (↓) | ED (↓) | CS (↑) |\n");
        s.push_str("|---|---:|---:|---:|\n");
        for (name, fid, ed, cs) in PUBLISHED_CONTEXT {
            s.push_str(&format!(
                "| {name} (published, FFHQ scale) | {fid:.2} | {ed:.2} | {cs:.2} |\n"
            ));
        }
        s.push_str(&format!(
            "| this run (desk scale) | {:.3} | {:.3} | {:.3} |\n",
            self.fid, self.ed, self.cs
        ));
        s.push_str(
            "\nPublished rows are FFHQ-scale results measured with Inception and \
             face-identity features; desk-scale numbers use small fixed conv \
             stacks and are context, not comparable quantities.\n\n",
        );
        s.push_str(&format!("- KID (desk scale): {:.5}\n", self.kid));
        s.push_str(&format!(
            "- view consistency (min oracle confidence over orbit): {:.3}\n",
            self.view_consistency
        ));
        for (name, v) in &self.efficacy {
            s.push_str(&format!("- efficacy[{name}]: {v:.3}\n"));
        }
        Ok(s)
    }
}

// `sym_eigen` is re-exported through `frechet_distance`'s dependency on
// `sym_sqrt`; keep the import used for the covariance-spectrum helper below.
/// Largest eigenvalue of a feature covariance — a cheap spread diagnostic
/// used by reports.
pub fn covariance_spread(images: &[Image]) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::Data(
            "covariance spread needs at least 2 images".into(),
        ));
    }
    let stack = FeatureStack::new(METRIC_FEATURE_SEED);
    let (_, cov) = feature_moments(images, &stack);
    Ok(sym_eigen(&cov).values[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::Container;
    use crate::generator::{train_gan, GanTrainer, GeneratorConfig};
    use crate::inversion::{EncoderTrainer, InversionTrainingConfig};
    use crate::latent::SignConvention;
    use ndarray::{array, Array3};

    fn random_image(rng: &mut ChaCha12Rng, s: usize) -> Image {
        Array3::from_shape_fn((3, s, s), |_| rng.gen::<f64>())
    }

    fn constant_image(s: usize, r: f64, g: f64, b: f64) -> Image {
        let mut im = Array3::<f64>::zeros((3, s, s));
        im.index_axis_mut(Axis(0), 0).fill(r);
        im.index_axis_mut(Axis(0), 1).fill(g);
        im.index_axis_mut(Axis(0), 2).fill(b);
        im
    }

    fn unit_direction(dim: usize, seed: u64, name: &str) -> EditDirection {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let raw = Array1::from_shape_fn(dim, |_| rng.gen::<f64>() - 0.5);
        EditDirection::new(raw, name, SignConvention::NativeSvdSign, vec![1.0]).unwrap()
    }

    fn tiny_setup(seed: u64) -> (Container, GeneratorConfig) {
        let cfg = GeneratorConfig::tiny(seed);
        let ds = crate::data::generate_dataset(6, &crate::data::DataConfig { image_size: 8 }, 17)
            .unwrap();
        (train_gan(&ds, &cfg, 2).unwrap(), cfg)
    }

    #[test]
    fn fid_identical_sets_is_zero_and_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let s: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 8)).collect();
        let t: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 8)).collect();
        assert!(small_fid(&s, &s).unwrap() < 1e-6);
        let ab = small_fid(&s, &t).unwrap();
        let ba = small_fid(&t, &s).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-9);
        // fewer than 2 per set is a data error
        assert!(matches!(small_fid(&s[..1], &t), Err(Error::Data(_))));
    }

    /// With zero covariance (each set holds identical images) the Fréchet
    /// distance collapses to ‖μ_a−μ_b‖², which the test recomputes directly
    /// from pooled features.
    #[test]
    fn fid_constant_sets_match_mean_distance_closed_form() {
        let a: Vec<Image> = vec![constant_image(8, 0.2, 0.5, 0.7); 2];
        let b: Vec<Image> = vec![constant_image(8, 0.9, 0.1, 0.3); 2];
        let stack = FeatureStack::new(METRIC_FEATURE_SEED);
        let fa = stack.pooled_features(&a[0]);
        let fb = stack.pooled_features(&b[0]);
        let dmu = &fa - &fb;
        let expected = dmu.dot(&dmu);
        let got = small_fid(&a, &b).unwrap();
        assert!(
            (got - expected).abs() < 1e-9,
            "fid {got} vs closed form {expected}"
        );
    }

    /// Commuting diagonal case: Fréchet distance has the hand closed form
    /// ‖Δμ‖² + Σᵢ (√λᵃᵢ − √λᵇᵢ)².
    #[test]
    fn frechet_matches_diagonal_closed_form() {
        let mu_a = array![0.0, 0.0];
        let mu_b = array![1.0, 2.0];
        let cov_a = array![[4.0, 0.0], [0.0, 1.0]];
        let cov_b = array![[1.0, 0.0], [0.0, 9.0]];
        // by hand: (1 + 4) + (2−1)² + (1−3)² = 5 + 1 + 4 = 10
        let got = frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b);
        assert!((got - 10.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn kid_matches_scalar_loop_oracle_and_is_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 8)).collect();
        let b: Vec<Image> = (0..2).map(|_| random_image(&mut rng, 8)).collect();
        let got = kid(&a, &b).unwrap();

        // Independent recomputation with explicit loops.
        let stack = FeatureStack::new(METRIC_FEATURE_SEED);
        let fa: Vec<Array1<f64>> = a.iter().map(|im| stack.pooled_features(im)).collect();
        let fb: Vec<Array1<f64>> = b.iter().map(|im| stack.pooled_features(im)).collect();
        let d = fa[0].len() as f64;
        let kern = |x: &Array1<f64>, y: &Array1<f64>| {
            let mut dot = 0.0;
            for i in 0..x.len() {
                dot += x[i] * y[i];
            }
            (dot / d + 1.0).powi(3)
        };
        let mut expected = 0.0;
        expected += (kern(&fa[0], &fa[1]) + kern(&fa[0], &fa[2]) + kern(&fa[1], &fa[2])) * 2.0
            / (3.0 * 2.0);
        expected += (kern(&fb[0], &fb[1]) + kern(&fb[1], &fb[0])) / (2.0 * 1.0);
        let mut cross = 0.0;
        for x in &fa {
            for y in &fb {
                cross += kern(x, y);
            }
        }
        expected -= 2.0 * cross / (3.0 * 2.0);
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");

        let ba = kid(&b, &a).unwrap();
        assert!((got - ba).abs() < 1e-9);
        // near-zero (possibly negative) on same-distribution sets
        let c: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 8)).collect();
        let e: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 8)).collect();
        let same = kid(&c, &e).unwrap();
        assert!(same.abs() < kid(&a, &b).unwrap().abs() + 1.0);
    }

    #[test]
    fn identity_metrics_basics_and_mask_exclusion() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 8);
        let (ed, cs) = identity_metrics(&x, &x, None).unwrap();
        assert_eq!(ed, 0.0);
        assert_eq!(cs, 1.0);

        let inv = x.mapv(|v| 1.0 - v);
        let (ed2, cs2) = identity_metrics(&x, &inv, None).unwrap();
        assert!(ed2 > 0.0);
        assert!(cs2 < 1.0);

        // An edit confined to the mask region is invisible to masked metrics.
        let mut mask = Array2::from_elem((8, 8), false);
        for y in 2..5 {
            for xx in 2..6 {
                mask[[y, xx]] = true;
            }
        }
        let mut edited = x.clone();
        for y in 2..5 {
            for xx in 2..6 {
                for c in 0..3 {
                    edited[[c, y, xx]] = 1.0 - edited[[c, y, xx]];
                }
            }
        }
        let (ed_m, cs_m) = identity_metrics(&x, &edited, Some(&mask)).unwrap();
        assert_eq!((ed_m, cs_m), (0.0, 1.0));
        let (ed_u, _) = identity_metrics(&x, &edited, None).unwrap();
        assert!(ed_u > 0.0);

        // mismatched shapes rejected
        let wide = Array3::<f64>::zeros((3, 16, 16));
        assert!(identity_metrics(&x, &wide, None).is_err());
        // mismatched mask rejected
        let bad_mask = Array2::from_elem((4, 4), false);
        assert!(identity_metrics(&x, &x, Some(&bad_mask)).is_err());
    }

    #[test]
    fn embedding_is_unit_norm_and_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = random_image(&mut rng, 8);
        let emb = IdentityEmbedder::new(IDENTITY_FEATURE_SEED);
        let a = emb.embed(&x, None).unwrap();
        let b = emb.embed(&x, None).unwrap();
        assert_eq!(a, b);
        assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-12);
        // black image embeds to the zero vector (documented corner case)
        let z = emb.embed(&Array3::zeros((3, 8, 8)), None).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn efficacy_at_scale_zero_is_exactly_zero() {
        let (ckpt, gcfg) = tiny_setup(31);
        let trainer = EncoderTrainer::new(&ckpt, &InversionTrainingConfig::tiny(9, 1)).unwrap();
        let dir = unit_direction(gcfg.latent_dim, 5, "glasses");
        let opts = EvalOptions {
            scale: 0.0,
            ..EvalOptions::default()
        };
        let out =
            attribute_efficacy_detailed(&dir, 5, &trainer.generator, &trainer.encoder, &opts)
                .unwrap();
        // scale 0 renders identical before/after images: no flips possible
        assert_eq!(out.flipped, 0);
        assert_eq!(out.fraction(), 0.0);
        assert!(out.initially_negative > 0);

        assert!(matches!(
            attribute_efficacy(&dir, 0, &trainer.generator, &trainer.encoder, &opts),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn efficacy_is_deterministic() {
        let (ckpt, gcfg) = tiny_setup(32);
        let trainer = EncoderTrainer::new(&ckpt, &InversionTrainingConfig::tiny(10, 1)).unwrap();
        let dir = unit_direction(gcfg.latent_dim, 6, "hat");
        let opts = EvalOptions {
            scale: 2.0,
            ..EvalOptions::default()
        };
        let a = attribute_efficacy_detailed(&dir, 4, &trainer.generator, &trainer.encoder, &opts)
            .unwrap();
        let b = attribute_efficacy_detailed(&dir, 4, &trainer.generator, &trainer.encoder, &opts)
            .unwrap();
        assert_eq!(a.initially_negative, b.initially_negative);
        assert_eq!(a.flipped, b.flipped);
    }

    #[test]
    fn view_consistency_contracts() {
        let (ckpt, gcfg) = tiny_setup(33);
        let gen = GanTrainer::from_container(&ckpt).unwrap().generator;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let z = Array1::from_shape_fn(gcfg.latent_dim, |_| rng.sample(StandardNormal));
        let w = gen.map_latent(&ZLatent::new(z).unwrap()).unwrap();
        let wp = broadcast(&w, gcfg.t).unwrap();
        let dir = unit_direction(gcfg.latent_dim, 8, "glasses");
        let opts = EvalOptions {
            scale: 0.0,
            yaw_range_deg: 0.0,
            ..EvalOptions::default()
        };

        assert!(view_consistency(&wp, &dir, 1, &gen, &opts).is_err());

        // Degenerate orbit: both views identical, pairwise cs exactly 1 and
        // the min confidence equals the shared single-view confidence.
        let rep = view_consistency(&wp, &dir, 2, &gen, &opts).unwrap();
        assert_eq!(rep.per_view[0], rep.per_view[1]);
        assert_eq!(rep.mean_pairwise_cs, 1.0);
        assert_eq!(rep.min_confidence, rep.per_view[0].confidence);
        assert_eq!(rep.yaws_deg, vec![0.0, 0.0]);

        // Determinism across calls.
        let rep2 = view_consistency(&wp, &dir, 2, &gen, &opts).unwrap();
        assert_eq!(rep.min_confidence, rep2.min_confidence);
        assert_eq!(rep.mean_pairwise_cs, rep2.mean_pairwise_cs);

        // Non-degenerate orbit produces distinct views.
        let opts_wide = EvalOptions {
            scale: 0.0,
            yaw_range_deg: 40.0,
            ..EvalOptions::default()
        };
        let rep3 = view_consistency(&wp, &dir, 3, &gen, &opts_wide).unwrap();
        assert_eq!(rep3.yaws_deg, vec![-20.0, 0.0, 20.0]);
        assert!(rep3.mean_pairwise_cs <= 1.0);
        assert!(rep3.min_confidence > 0.0 && rep3.min_confidence < 1.0);

        // orbit identity against frontal: the 0-yaw view IS the frontal
        // render, so its cs is exactly 1.
        let cs = orbit_identity_cs(&wp, 3, &gen, &opts_wide).unwrap();
        assert_eq!(cs.len(), 3);
        assert_eq!(cs[1], 1.0);
        assert!(cs.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn report_validation_json_and_markdown() {
        let mut efficacy = BTreeMap::new();
        efficacy.insert("glasses".to_string(), 0.85);
        efficacy.insert("aged".to_string(), 0.75);
        let report = MetricReport {
            fid: 12.5,
            kid: -0.001,
            ed: 0.4,
            cs: 0.93,
            efficacy,
            view_consistency: 0.71,
        };
        report.validate().unwrap();
        let json = report.to_json().unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.fid, report.fid);
        assert_eq!(back.efficacy["glasses"], 0.85);

        let md = report.to_markdown().unwrap();
        assert!(md.contains("| InterfaceGAN (published, FFHQ scale) | 43.07 | 0.61 | 0.92 |"));
        assert!(md.contains("| StyleFlow (published, FFHQ scale) | 47.81 | 0.71 | 0.82 |"));
        assert!(md.contains("| GANSpace (published, FFHQ scale) | 42.38 | 0.50 | 0.95 |"));
        assert!(md.contains("| FLAME-3D (published, FFHQ scale) | 39.91 | 0.50 | 0.94 |"));
        assert!(md.contains("this run (desk scale)"));
        assert!(md.contains("efficacy[glasses]: 0.850"));

        let mut bad = report.clone();
        bad.cs = 1.5;
        assert!(bad.validate().is_err());
        let mut bad2 = report.clone();
        bad2.efficacy.insert("hat".into(), 1.2);
        assert!(bad2.validate().is_err());
        let mut bad3 = report.clone();
        bad3.fid = f64::NAN;
        assert!(bad3.validate().is_err());
    }

    #[test]
    fn covariance_spread_positive_on_varied_sets() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let varied: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 8)).collect();
        assert!(covariance_spread(&varied).unwrap() > 0.0);
        let flat: Vec<Image> = vec![constant_image(8, 0.5, 0.5, 0.5); 3];
        assert!(covariance_spread(&flat).unwrap().abs() < 1e-12);
    }
}
