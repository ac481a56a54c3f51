//! Latent spaces and the edit algebra.
//!
//! `Z` is the Gaussian sampling space, `W` the mapping-network output, and
//! `W+` a stack of one `W` row per synthesis block. Edits are unit vectors in
//! `W`; applying one is plain vector addition, so edits compose by summation
//! and commute. The file format for saved directions is described in
//! `book/src/formats.md`.

use crate::error::{Error, Result};
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Sample from the standard-normal input space of the mapping network.
#[derive(Debug, Clone, PartialEq)]
pub struct ZLatent(pub Array1<f64>);

impl ZLatent {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("z latent"));
        }
        Ok(ZLatent(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Intermediate latent produced by the mapping network; the editing substrate.
#[derive(Debug, Clone, PartialEq)]
pub struct WLatent(pub Array1<f64>);

impl WLatent {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("w latent"));
        }
        Ok(WLatent(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Per-block style matrix of shape `(t, latent_dim)` fed to the synthesis
/// blocks; row `i` modulates block `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WPlusLatent {
    pub rows: Array2<f64>,
}

impl WPlusLatent {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::InvalidConfig("W+ needs at least one row".into()));
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("w+ latent"));
        }
        Ok(WPlusLatent { rows })
    }

    pub fn block_count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Mean over the block rows, collapsing `W+` back to a single `W` vector.
    pub fn reduce_mean(&self) -> WLatent {
        let t = self.rows.nrows() as f64;
        let mut out = Array1::<f64>::zeros(self.rows.ncols());
        for row in self.rows.rows() {
            out += &row;
        }
        out /= t;
        WLatent(out)
    }

    /// Adds `scale * direction` to every row. This is the row-wise variant of
    /// [`apply_edit`]; for a broadcast `W+` the two commute exactly.
    pub fn apply_edit_rows(&self, d: &EditDirection, scale: f64) -> Result<WPlusLatent> {
        if d.direction.len() != self.latent_dim() {
            return Err(Error::shape(
                "apply_edit_rows",
                format!("direction of dim {}", self.latent_dim()),
                format!("{}", d.direction.len()),
            ));
        }
        let mut rows = self.rows.clone();
        for mut row in rows.rows_mut() {
            row.scaled_add(scale, &d.direction);
        }
        Ok(WPlusLatent { rows })
    }

    /// Writes the latent file: a JSON document with the `(t, latent_dim)`
    /// shape and the rows as base64 little-endian `f32`, row-major. Same
    /// encoding as [`EditDirection::save`]; byte layout is pinned in
    /// `book/src/formats.md`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .rows
            .iter()
            .flat_map(|v| (*v as f32).to_le_bytes())
            .collect();
        let file = WPlusFile {
            block_count: self.rows.nrows(),
            latent_dim: self.rows.ncols(),
            rows_f32_le_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
        };
        let json = serde_json::to_string_pretty(&file).expect("latent file serializes");
        std::fs::write(path, json.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Reads a latent file written by [`WPlusLatent::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: WPlusFile = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(file.rows_f32_le_base64.as_bytes())
            .map_err(|e| Error::Malformed {
                path: path.display().to_string(),
                reason: format!("bad base64 payload: {e}"),
            })?;
        if bytes.len() != file.block_count * file.latent_dim * 4 {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                reason: format!(
                    "payload holds {} bytes, header says {}x{}",
                    bytes.len(),
                    file.block_count,
                    file.latent_dim
                ),
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let rows = Array2::from_shape_vec((file.block_count, file.latent_dim), values)
            .expect("shape matches checked length");
        WPlusLatent::new(rows)
    }
}

#[derive(Serialize, Deserialize)]
struct WPlusFile {
    block_count: usize,
    latent_dim: usize,
    rows_f32_le_base64: String,
}

/// How a direction's orientation relates to the attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// Adding the direction moves toward attribute presence.
    PositiveAddsAttribute,
    /// The positive/negative dot product was exactly zero; the native SVD
    /// sign was kept.
    NativeSvdSign,
}

/// A unit vector in `W` whose addition changes one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct EditDirection {
    pub direction: Array1<f64>,
    pub attribute_name: String,
    pub sign_convention: SignConvention,
    /// Singular values of the difference matrix, descending; diagnostics.
    pub singular_values: Vec<f64>,
}

impl EditDirection {
    /// Normalizes `raw` and records the metadata. Errors if `raw` is zero or
    /// non-finite.
    pub fn new(
        raw: Array1<f64>,
        attribute_name: impl Into<String>,
        sign_convention: SignConvention,
        singular_values: Vec<f64>,
    ) -> Result<Self> {
        let attribute_name = attribute_name.into();
        if !raw.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("edit direction"));
        }
        let norm = raw.dot(&raw).sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateAttribute(attribute_name));
        }
        let direction = raw / norm;
        Ok(EditDirection {
            direction,
            attribute_name,
            sign_convention,
            singular_values,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.direction.len()
    }

    pub fn norm(&self) -> f64 {
        self.direction.dot(&self.direction).sqrt()
    }

    /// Writes the direction file: a JSON document with the header fields and
    /// the unit vector as base64 little-endian `f32`. Byte layout is pinned
    /// in `book/src/formats.md`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .direction
            .iter()
            .flat_map(|v| (*v as f32).to_le_bytes())
            .collect();
        let file = DirectionFile {
            attribute_name: self.attribute_name.clone(),
            latent_dim: self.direction.len(),
            sign_convention: self.sign_convention,
            singular_values: self.singular_values.clone(),
            direction_f32_le_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
        };
        let json = serde_json::to_string_pretty(&file).expect("direction file serializes");
        std::fs::write(path, json.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Reads a direction file written by [`EditDirection::save`]. The vector
    /// is re-normalized after the f32 round-trip so the unit invariant holds.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: DirectionFile = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(file.direction_f32_le_base64.as_bytes())
            .map_err(|e| Error::Malformed {
                path: path.display().to_string(),
                reason: format!("bad base64 payload: {e}"),
            })?;
        if bytes.len() != file.latent_dim * 4 {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                reason: format!(
                    "payload holds {} bytes, header says latent_dim {}",
                    bytes.len(),
                    file.latent_dim
                ),
            });
        }
        let raw: Array1<f64> = Array1::from_iter(bytes.chunks_exact(4).map(|c| {
            f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64
        }));
        EditDirection::new(
            raw,
            file.attribute_name,
            file.sign_convention,
            file.singular_values,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct DirectionFile {
    attribute_name: String,
    latent_dim: usize,
    sign_convention: SignConvention,
    singular_values: Vec<f64>,
    direction_f32_le_base64: String,
}

/// Replicates `w` into `t` identical `W+` rows.
pub fn broadcast(w: &WLatent, t: usize) -> Result<WPlusLatent> {
    if t < 1 {
        return Err(Error::InvalidConfig(
            "broadcast needs at least one synthesis block".into(),
        ));
    }
    let mut rows = Array2::<f64>::zeros((t, w.dim()));
    for mut row in rows.rows_mut() {
        row.assign(&w.0);
    }
    Ok(WPlusLatent { rows })
}

/// Returns `w + scale * d.direction`; `w` itself is untouched.
pub fn apply_edit(w: &WLatent, d: &EditDirection, scale: f64) -> Result<WLatent> {
    if d.direction.len() != w.dim() {
        return Err(Error::shape(
            "apply_edit",
            format!("direction of dim {}", w.dim()),
            format!("{}", d.direction.len()),
        ));
    }
    let mut out = w.0.clone();
    out.scaled_add(scale, &d.direction);
    Ok(WLatent(out))
}

/// Applies a list of `(direction, scale)` edits by summation. The empty list
/// returns `w` unchanged.
pub fn compose_edits(w: &WLatent, edits: &[(&EditDirection, f64)]) -> Result<WLatent> {
    let mut out = w.clone();
    for (d, scale) in edits {
        out = apply_edit(&out, d, *scale)?;
    }
    Ok(out)
}
