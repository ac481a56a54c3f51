//! Few-shot edit-direction estimation: invert K positive/negative image
//! pairs, stack the latent differences, and take the top right-singular
//! vector as the consolidated attribute direction.
//!
//! Inversion emits `W+` (one row per synthesis block) while edits are
//! applied in `W`, so each pair's difference is mean-reduced over the block
//! rows before stacking. The rows are *not* centered — each row is already
//! a relative quantity (positive minus negative of the same identity).
//!
//! The SVD runs on the K×K Gram matrix `G = D·Dᵀ`: its top eigenvector
//! `u₁` gives the top right-singular vector as `v = Dᵀu₁ / ‖Dᵀu₁‖`, which
//! keeps the eigensolve at `K ≤ 15` regardless of latent width.

use crate::data::{build_pairs, PairSet, ProceduralDataset};
use crate::error::{Error, Result};
use crate::evaluation::{edit_probes, efficacy_from_probes, identity_metrics, EvalOptions};
use crate::generator::Generator;
use crate::imgmath::{contact_sheet, Image};
use crate::inversion::{invert, Encoder};
use crate::latent::{EditDirection, SignConvention};
use crate::linalg::sym_eigen;
use crate::oracle::canonical_region;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

/// K stacked latent differences for one attribute, row `i` =
/// `reduce(invert(positiveᵢ)) − reduce(invert(negativeᵢ))`.
#[derive(Debug, Clone)]
pub struct DifferenceMatrix {
    /// `(K, latent_dim)`.
    pub rows: Array2<f64>,
    pub attribute_name: String,
}

impl DifferenceMatrix {
    pub fn new(rows: Array2<f64>, attribute_name: impl Into<String>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::InvalidConfig(
                "difference matrix needs at least one pair row".into(),
            ));
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("difference matrix"));
        }
        Ok(DifferenceMatrix {
            rows,
            attribute_name: attribute_name.into(),
        })
    }

    /// Inverts every pair and stacks the mean-reduced latent differences.
    pub fn from_pairs(pairs: &PairSet, encoder: &Encoder) -> Result<Self> {
        if pairs.pairs.is_empty() {
            return Err(Error::Data(format!(
                "attribute {} has no pairs to invert",
                pairs.attribute_name
            )));
        }
        let d = encoder.latent_dim();
        let mut rows = Array2::<f64>::zeros((pairs.pairs.len(), d));
        for (i, pair) in pairs.pairs.iter().enumerate() {
            let wp_pos = invert(&pair.positive, encoder)?;
            let wp_neg = invert(&pair.negative, encoder)?;
            let diff = &wp_pos.reduce_mean().0 - &wp_neg.reduce_mean().0;
            rows.index_axis_mut(Axis(0), i).assign(&diff);
        }
        DifferenceMatrix::new(rows, pairs.attribute_name.clone())
    }

    pub fn k(&self) -> usize {
        self.rows.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Top right-singular vector of the difference matrix, unit norm, oriented
/// so that adding the direction moves toward attribute presence
/// (`direction · mean_row > 0`; an exactly-zero dot keeps the native SVD
/// sign). Singular values are recorded descending.
pub fn direction_from_difference_matrix(dm: &DifferenceMatrix) -> Result<EditDirection> {
    if dm.rows.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateAttribute(dm.attribute_name.clone()));
    }
    let k = dm.k();
    let d = dm.latent_dim();
    // Gram route: DDᵀ = U Σ² Uᵀ, so Dᵀu₁ = σ₁ v₁.
    let gram = dm.rows.dot(&dm.rows.t());
    let eig = sym_eigen(&gram);
    let u1 = eig.vectors.index_axis(Axis(1), 0).to_owned();
    let v_raw = dm.rows.t().dot(&u1);
    let singular_values: Vec<f64> = eig
        .values
        .iter()
        .take(k.min(d))
        .map(|l| l.max(0.0).sqrt())
        .collect();

    let k_f = k as f64;
    let mut mean_row = Array1::<f64>::zeros(d);
    for row in dm.rows.rows() {
        mean_row += &row;
    }
    mean_row /= k_f;

    let dot = v_raw.dot(&mean_row);
    let (oriented, convention) = if dot > 0.0 {
        (v_raw, SignConvention::PositiveAddsAttribute)
    } else if dot < 0.0 {
        (-v_raw, SignConvention::PositiveAddsAttribute)
    } else {
        (v_raw, SignConvention::NativeSvdSign)
    };
    EditDirection::new(
        oriented,
        dm.attribute_name.clone(),
        convention,
        singular_values,
    )
}

/// Inverts the K pairs and estimates the consolidated edit direction.
pub fn estimate_direction(pairs: &PairSet, encoder: &Encoder) -> Result<EditDirection> {
    direction_from_difference_matrix(&DifferenceMatrix::from_pairs(pairs, encoder)?)
}

// ---------------------------------------------------------------------------
// K ablation
// ---------------------------------------------------------------------------

/// One K's measurements in an ablation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    /// Fraction of initially-negative eval samples whose oracle flipped.
    pub efficacy: f64,
    pub initially_negative: usize,
    pub flipped: usize,
    /// Mean identity cosine similarity (before vs after, attribute region
    /// masked out) over all eval samples.
    pub mean_identity_cs: f64,
    /// Mean identity Euclidean distance over all eval samples.
    pub mean_identity_ed: f64,
    /// Top singular values of the K-row difference matrix.
    pub singular_values: Vec<f64>,
}

/// Ablation over pair counts for one attribute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub attribute: String,
    pub rows: Vec<AblationRow>,
    pub n_eval_samples: usize,
    pub edit_scale: f64,
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    /// Markdown table: one row per K.
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "Ablation over pair count K — attribute `{}`, {} eval samples, edit scale {}\n\n",
            self.attribute, self.n_eval_samples, self.edit_scale
        );
        s.push_str("| K | efficacy | flipped/negative | identity CS (↑) | identity ED (↓) |\n");
        s.push_str("|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.3} | {}/{} | {:.3} | {:.3} |\n",
                r.k, r.efficacy, r.flipped, r.initially_negative, r.mean_identity_cs, r.mean_identity_ed
            ));
        }
        s
    }
}

/// Report plus the before/after contact sheet (one row per K, columns
/// before | after of the first eval sample).
pub struct AblationOutput {
    pub report: AblationReport,
    pub sheet: Image,
}

/// Estimates a direction per K and measures efficacy plus identity
/// preservation on `n_eval_samples` fresh latents (the same probe pipeline
/// for every K, so rows are comparable).
pub fn ablate_k(
    attribute: &str,
    k_values: &[usize],
    dataset: &ProceduralDataset,
    encoder: &Encoder,
    generator: &Generator,
    opts: &EvalOptions,
    n_eval_samples: usize,
) -> Result<AblationOutput> {
    if k_values.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one K".into()));
    }
    if n_eval_samples == 0 {
        return Err(Error::InvalidConfig(
            "ablation needs at least one eval sample".into(),
        ));
    }
    let max_k = *k_values.iter().max().expect("non-empty");
    let size = dataset.config.image_size;
    let frontal = crate::data::Pose {
        yaw_deg: 0.0,
        pitch_deg: 0.0,
    };
    let region = canonical_region(attribute, &frontal, size)?;
    let mut rows = Vec::with_capacity(k_values.len());
    let mut tiles: Vec<Image> = Vec::with_capacity(2 * k_values.len());
    for &k in k_values {
        let pairs = build_pairs(attribute, k, dataset, max_k)?;
        let dm = DifferenceMatrix::from_pairs(&pairs, encoder)?;
        let direction = direction_from_difference_matrix(&dm)?;
        let probes = edit_probes(&direction, n_eval_samples, generator, encoder, opts)?;
        let outcome = efficacy_from_probes(&probes, attribute)?;
        let mut cs_sum = 0.0;
        let mut ed_sum = 0.0;
        for p in &probes {
            let (ed, cs) = identity_metrics(&p.before, &p.after, Some(&region))?;
            cs_sum += cs;
            ed_sum += ed;
        }
        let n = probes.len() as f64;
        tiles.push(probes[0].before.clone());
        tiles.push(probes[0].after.clone());
        rows.push(AblationRow {
            k,
            efficacy: outcome.fraction(),
            initially_negative: outcome.initially_negative,
            flipped: outcome.flipped,
            mean_identity_cs: cs_sum / n,
            mean_identity_ed: ed_sum / n,
            singular_values: direction.singular_values.clone(),
        });
    }
    let sheet = contact_sheet(&tiles, 2);
    Ok(AblationOutput {
        report: AblationReport {
            attribute: attribute.to_string(),
            rows,
            n_eval_samples,
            edit_scale: opts.scale,
        },
        sheet,
    })
}
