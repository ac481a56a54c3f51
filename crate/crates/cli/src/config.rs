//! Run configuration: one TOML file describing every pipeline stage.
//!
//! The file is layered: every field is optional and falls back to a
//! documented default, per-stage seeds default to fixed offsets from the
//! top-level `seed`, and command-line flags override the file. The resolved
//! configuration is embedded verbatim in each command's manifest, so a run
//! is reproducible from its manifest alone.
//!
//! ```toml
//! seed = 7                 # master seed; stages derive theirs from it
//! log_level = "info"
//!
//! [paths]
//! workdir = "runs/exp"     # or --workdir / MPI_FACEDIT_WORKDIR
//!
//! [dataset]
//! n = 48
//! image_size = 32
//!
//! [gan]
//! steps = 2000             # remaining keys mirror GeneratorConfig
//!
//! [encoder]
//! steps = 3000             # remaining keys mirror InversionTrainingConfig
//!
//! [pairs]
//! k = 10
//! max_k = 15
//! attributes = ["glasses", "hat", "smile", "aged"]
//!
//! [edit]
//! n_samples = 4
//! scale = 1.0
//! orbit_views = 1
//! yaw_range_deg = 60.0
//!
//! [eval]
//! n_fid = 32
//! n_probes = 32
//! n_orbit_samples = 4
//! orbit_views = 5
//! yaw_range_deg = 60.0
//! scale = 1.0
//! attributes = ["glasses"]
//!
//! [pti]
//! steps = 30
//!
//! [ablate]
//! attribute = "glasses"
//! k_values = [1, 5, 10, 15]
//! n_eval_samples = 50
//! ```

use anyhow::{bail, Context, Result};
use mpi_facedit_core::data::ATTRIBUTES;
use mpi_facedit_core::generator::GeneratorConfig;
use mpi_facedit_core::inversion::InversionTrainingConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Seed offsets per stage, applied to the master seed when a stage does not
/// pin its own. Distinct offsets keep stage streams independent.
const SEED_OFFSET_DATASET: u64 = 0;
const SEED_OFFSET_GAN: u64 = 1;
const SEED_OFFSET_ENCODER: u64 = 2;
const SEED_OFFSET_EVAL: u64 = 3;
const SEED_OFFSET_EDIT: u64 = 4;

/// Fully resolved configuration for every command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub log_level: String,
    pub paths: PathsConfig,
    pub dataset: DatasetConfig,
    pub gan: GanConfig,
    pub encoder: InversionTrainingConfig,
    pub pairs: PairsConfig,
    pub edit: EditConfig,
    pub eval: EvalConfig,
    pub pti: PtiConfig,
    pub ablate: AblateConfig,
}

/// Artifact locations. `workdir` anchors everything; the remaining entries
/// are resolved beneath it when relative.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathsConfig {
    pub workdir: PathBuf,
    pub dataset_dir: PathBuf,
    pub gan_checkpoint: PathBuf,
    pub encoder_checkpoint: PathBuf,
    pub pairs_dir: PathBuf,
    pub directions_dir: PathBuf,
    pub renders_dir: PathBuf,
    pub inversions_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub ablation_dir: PathBuf,
    pub manifests_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetConfig {
    pub n: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// GAN architecture/optimizer settings plus the training-step budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GanConfig {
    pub steps: usize,
    #[serde(flatten)]
    pub generator: GeneratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairsConfig {
    pub k: usize,
    pub max_k: usize,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditConfig {
    pub n_samples: usize,
    pub scale: f64,
    pub orbit_views: usize,
    pub yaw_range_deg: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub n_fid: usize,
    pub n_probes: usize,
    pub n_orbit_samples: usize,
    pub orbit_views: usize,
    pub yaw_range_deg: f64,
    pub scale: f64,
    pub attributes: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PtiConfig {
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblateConfig {
    pub attribute: String,
    pub k_values: Vec<usize>,
    pub n_eval_samples: usize,
}

/// Global flag overrides, applied after the file is parsed.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workdir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub log_level: Option<String>,
}

// ---------------------------------------------------------------------------
// Raw (all-optional) TOML schema
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    log_level: Option<String>,
    #[serde(default)]
    paths: RawPaths,
    #[serde(default)]
    dataset: RawDataset,
    #[serde(default)]
    gan: RawGan,
    #[serde(default)]
    encoder: RawEncoder,
    #[serde(default)]
    pairs: RawPairs,
    #[serde(default)]
    edit: RawEdit,
    #[serde(default)]
    eval: RawEval,
    #[serde(default)]
    pti: RawPti,
    #[serde(default)]
    ablate: RawAblate,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPaths {
    workdir: Option<PathBuf>,
    dataset_dir: Option<PathBuf>,
    gan_checkpoint: Option<PathBuf>,
    encoder_checkpoint: Option<PathBuf>,
    pairs_dir: Option<PathBuf>,
    directions_dir: Option<PathBuf>,
    renders_dir: Option<PathBuf>,
    inversions_dir: Option<PathBuf>,
    eval_dir: Option<PathBuf>,
    ablation_dir: Option<PathBuf>,
    manifests_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    n: Option<usize>,
    image_size: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGan {
    steps: Option<usize>,
    latent_dim: Option<usize>,
    t: Option<usize>,
    image_size: Option<usize>,
    n_planes: Option<usize>,
    d_near: Option<f64>,
    d_far: Option<f64>,
    channels_per_block: Option<Vec<usize>>,
    disc_channels: Option<Vec<usize>>,
    batch_size: Option<usize>,
    lr_g: Option<f64>,
    lr_d: Option<f64>,
    r1_weight: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEncoder {
    steps: Option<usize>,
    lambda_lpips: Option<f64>,
    lambda_recons: Option<f64>,
    lambda_latent: Option<f64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    enc_channels: Option<Vec<usize>>,
    perceptual_seed: Option<u64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPairs {
    k: Option<usize>,
    max_k: Option<usize>,
    attributes: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdit {
    n_samples: Option<usize>,
    scale: Option<f64>,
    orbit_views: Option<usize>,
    yaw_range_deg: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    n_fid: Option<usize>,
    n_probes: Option<usize>,
    n_orbit_samples: Option<usize>,
    orbit_views: Option<usize>,
    yaw_range_deg: Option<f64>,
    scale: Option<f64>,
    attributes: Option<Vec<String>>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPti {
    steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAblate {
    attribute: Option<String>,
    k_values: Option<Vec<usize>>,
    n_eval_samples: Option<usize>,
}

impl RunConfig {
    /// Parses `path` (or starts from an empty document when `None`), applies
    /// `overrides`, resolves defaults and derived seeds, and validates.
    ///
    /// The workdir resolves in precedence order: `--workdir` flag, then
    /// `paths.workdir` in the file, then `MPI_FACEDIT_WORKDIR`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let raw: RawConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                // toml reports the offending line/column and field name
                toml::from_str(&text)
                    .with_context(|| format!("parsing config file {}", p.display()))?
            }
            None => RawConfig::default(),
        };
        RunConfig::resolve(raw, overrides)
    }

    fn resolve(raw: RawConfig, overrides: &Overrides) -> Result<RunConfig> {
        let seed = overrides.seed.or(raw.seed).unwrap_or(7);
        let log_level = overrides
            .log_level
            .clone()
            .or(raw.log_level)
            .unwrap_or_else(|| "info".to_string());

        let workdir = overrides
            .workdir
            .clone()
            .or(raw.paths.workdir)
            .or_else(|| std::env::var_os("MPI_FACEDIT_WORKDIR").map(PathBuf::from));
        let Some(workdir) = workdir else {
            bail!(
                "no workdir: pass --workdir, set paths.workdir in the config, \
                 or export MPI_FACEDIT_WORKDIR"
            );
        };
        let under = |p: Option<PathBuf>, default: &str| -> PathBuf {
            let p = p.unwrap_or_else(|| PathBuf::from(default));
            if p.is_absolute() {
                p
            } else {
                workdir.join(p)
            }
        };
        let paths = PathsConfig {
            dataset_dir: under(raw.paths.dataset_dir, "dataset"),
            gan_checkpoint: under(raw.paths.gan_checkpoint, "checkpoints/gan.ckpt"),
            encoder_checkpoint: under(raw.paths.encoder_checkpoint, "checkpoints/encoder.ckpt"),
            pairs_dir: under(raw.paths.pairs_dir, "pairs"),
            directions_dir: under(raw.paths.directions_dir, "directions"),
            renders_dir: under(raw.paths.renders_dir, "renders"),
            inversions_dir: under(raw.paths.inversions_dir, "inversions"),
            eval_dir: under(raw.paths.eval_dir, "eval"),
            ablation_dir: under(raw.paths.ablation_dir, "ablation"),
            manifests_dir: under(raw.paths.manifests_dir, "manifests"),
            workdir,
        };

        let gen_default = GeneratorConfig::default();
        let generator = GeneratorConfig {
            latent_dim: raw.gan.latent_dim.unwrap_or(gen_default.latent_dim),
            t: raw.gan.t.unwrap_or(gen_default.t),
            image_size: raw.gan.image_size.unwrap_or(gen_default.image_size),
            n_planes: raw.gan.n_planes.unwrap_or(gen_default.n_planes),
            d_near: raw.gan.d_near.unwrap_or(gen_default.d_near),
            d_far: raw.gan.d_far.unwrap_or(gen_default.d_far),
            channels_per_block: raw
                .gan
                .channels_per_block
                .unwrap_or(gen_default.channels_per_block),
            disc_channels: raw.gan.disc_channels.unwrap_or(gen_default.disc_channels),
            batch_size: raw.gan.batch_size.unwrap_or(gen_default.batch_size),
            lr_g: raw.gan.lr_g.unwrap_or(gen_default.lr_g),
            lr_d: raw.gan.lr_d.unwrap_or(gen_default.lr_d),
            r1_weight: raw.gan.r1_weight.unwrap_or(gen_default.r1_weight),
            seed: raw.gan.seed.unwrap_or(seed + SEED_OFFSET_GAN),
        };
        let enc_default = InversionTrainingConfig::default();
        let encoder = InversionTrainingConfig {
            lambda_lpips: raw.encoder.lambda_lpips.unwrap_or(enc_default.lambda_lpips),
            lambda_recons: raw
                .encoder
                .lambda_recons
                .unwrap_or(enc_default.lambda_recons),
            lambda_latent: raw
                .encoder
                .lambda_latent
                .unwrap_or(enc_default.lambda_latent),
            lr: raw.encoder.lr.unwrap_or(enc_default.lr),
            steps: raw.encoder.steps.unwrap_or(enc_default.steps),
            batch_size: raw.encoder.batch_size.unwrap_or(enc_default.batch_size),
            enc_channels: raw.encoder.enc_channels.unwrap_or(enc_default.enc_channels),
            perceptual_seed: raw
                .encoder
                .perceptual_seed
                .unwrap_or(enc_default.perceptual_seed),
            seed: raw.encoder.seed.unwrap_or(seed + SEED_OFFSET_ENCODER),
        };

        let cfg = RunConfig {
            seed,
            log_level,
            paths,
            dataset: DatasetConfig {
                n: raw.dataset.n.unwrap_or(48),
                image_size: raw.dataset.image_size.unwrap_or(generator.image_size),
                seed: raw.dataset.seed.unwrap_or(seed + SEED_OFFSET_DATASET),
            },
            gan: GanConfig {
                steps: raw.gan.steps.unwrap_or(2000),
                generator,
            },
            encoder,
            pairs: PairsConfig {
                k: raw.pairs.k.unwrap_or(10),
                max_k: raw.pairs.max_k.unwrap_or(15),
                attributes: raw
                    .pairs
                    .attributes
                    .unwrap_or_else(|| ATTRIBUTES.iter().map(|s| s.to_string()).collect()),
            },
            edit: EditConfig {
                n_samples: raw.edit.n_samples.unwrap_or(4),
                scale: raw.edit.scale.unwrap_or(1.0),
                orbit_views: raw.edit.orbit_views.unwrap_or(1),
                yaw_range_deg: raw.edit.yaw_range_deg.unwrap_or(60.0),
                seed: raw.edit.seed.unwrap_or(seed + SEED_OFFSET_EDIT),
            },
            eval: EvalConfig {
                n_fid: raw.eval.n_fid.unwrap_or(32),
                n_probes: raw.eval.n_probes.unwrap_or(32),
                n_orbit_samples: raw.eval.n_orbit_samples.unwrap_or(4),
                orbit_views: raw.eval.orbit_views.unwrap_or(5),
                yaw_range_deg: raw.eval.yaw_range_deg.unwrap_or(60.0),
                scale: raw.eval.scale.unwrap_or(1.0),
                attributes: raw
                    .eval
                    .attributes
                    .unwrap_or_else(|| vec!["glasses".to_string()]),
                seed: raw.eval.seed.unwrap_or(seed + SEED_OFFSET_EVAL),
            },
            pti: PtiConfig {
                steps: raw
                    .pti
                    .steps
                    .unwrap_or(mpi_facedit_core::inversion::PTI_DEFAULT_STEPS),
            },
            ablate: AblateConfig {
                attribute: raw.ablate.attribute.unwrap_or_else(|| "glasses".to_string()),
                k_values: raw.ablate.k_values.unwrap_or_else(|| vec![1, 5, 10, 15]),
                n_eval_samples: raw.ablate.n_eval_samples.unwrap_or(50),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.gan.generator.validate().context("[gan] section")?;
        self.encoder.validate().context("[encoder] section")?;
        if self.dataset.n == 0 {
            bail!("[dataset] n must be >= 1");
        }
        if self.dataset.image_size != self.gan.generator.image_size {
            bail!(
                "[dataset] image_size {} must match [gan] image_size {} \
                 (the GAN trains on the dataset renders)",
                self.dataset.image_size,
                self.gan.generator.image_size
            );
        }
        if self.gan.steps == 0 {
            bail!("[gan] steps must be >= 1");
        }
        if self.pairs.k == 0 || self.pairs.k > self.pairs.max_k {
            bail!(
                "[pairs] needs 1 <= k <= max_k, got k {} max_k {}",
                self.pairs.k,
                self.pairs.max_k
            );
        }
        let known = |name: &String| ATTRIBUTES.contains(&name.as_str());
        for (section, attrs) in [("pairs", &self.pairs.attributes), ("eval", &self.eval.attributes)]
        {
            if attrs.is_empty() {
                bail!("[{section}] attributes must not be empty");
            }
            if let Some(bad) = attrs.iter().find(|a| !known(a)) {
                bail!(
                    "[{section}] unknown attribute {bad:?} (known: {})",
                    ATTRIBUTES.join(", ")
                );
            }
        }
        if !known(&self.ablate.attribute) {
            bail!(
                "[ablate] unknown attribute {:?} (known: {})",
                self.ablate.attribute,
                ATTRIBUTES.join(", ")
            );
        }
        if self.edit.n_samples == 0 || self.edit.orbit_views == 0 {
            bail!("[edit] n_samples and orbit_views must be >= 1");
        }
        if !self.edit.scale.is_finite() || !self.eval.scale.is_finite() {
            bail!("edit scales must be finite");
        }
        if self.eval.n_fid < 2 {
            bail!("[eval] n_fid must be >= 2 (covariances need two samples)");
        }
        if self.eval.n_probes == 0 || self.eval.n_orbit_samples == 0 {
            bail!("[eval] n_probes and n_orbit_samples must be >= 1");
        }
        if self.eval.orbit_views < 2 {
            bail!("[eval] orbit_views must be >= 2");
        }
        if self.pti.steps == 0 {
            bail!("[pti] steps must be >= 1");
        }
        if self.ablate.k_values.is_empty() || self.ablate.k_values.contains(&0) {
            bail!("[ablate] k_values must be non-empty and positive");
        }
        if self.ablate.n_eval_samples == 0 {
            bail!("[ablate] n_eval_samples must be >= 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides_with_workdir() -> Overrides {
        Overrides {
            workdir: Some(PathBuf::from("/tmp/wd")),
            ..Overrides::default()
        }
    }

    fn resolve_str(toml_text: &str, overrides: &Overrides) -> Result<RunConfig> {
        let raw: RawConfig = toml::from_str(toml_text)?;
        RunConfig::resolve(raw, overrides)
    }

    #[test]
    fn empty_document_resolves_to_defaults() {
        let cfg = resolve_str("", &overrides_with_workdir()).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.gan.generator, GeneratorConfig { seed: 8, ..GeneratorConfig::default() });
        assert_eq!(
            cfg.encoder,
            InversionTrainingConfig { seed: 9, ..InversionTrainingConfig::default() }
        );
        assert_eq!(cfg.dataset.seed, 7);
        assert_eq!(cfg.eval.seed, 10);
        assert_eq!(cfg.edit.seed, 11);
        assert_eq!(cfg.pairs.k, 10);
        assert_eq!(cfg.pti.steps, 30);
        assert_eq!(cfg.paths.dataset_dir, PathBuf::from("/tmp/wd/dataset"));
        assert_eq!(
            cfg.paths.gan_checkpoint,
            PathBuf::from("/tmp/wd/checkpoints/gan.ckpt")
        );
    }

    #[test]
    fn master_seed_propagates_unless_stage_pins_its_own() {
        let cfg = resolve_str("seed = 100", &overrides_with_workdir()).unwrap();
        assert_eq!(cfg.dataset.seed, 100);
        assert_eq!(cfg.gan.generator.seed, 101);
        assert_eq!(cfg.encoder.seed, 102);
        assert_eq!(cfg.eval.seed, 103);
        assert_eq!(cfg.edit.seed, 104);

        let pinned = resolve_str(
            "seed = 100\n[gan]\nseed = 5\n",
            &overrides_with_workdir(),
        )
        .unwrap();
        assert_eq!(pinned.gan.generator.seed, 5);
        assert_eq!(pinned.encoder.seed, 102);
    }

    #[test]
    fn flag_overrides_beat_the_file() {
        let ov = Overrides {
            workdir: Some(PathBuf::from("/flag/wd")),
            seed: Some(999),
            log_level: Some("debug".into()),
        };
        let cfg = resolve_str("seed = 1\nlog_level = \"warn\"\n[paths]\nworkdir = \"/file/wd\"", &ov)
            .unwrap();
        assert_eq!(cfg.seed, 999);
        assert_eq!(cfg.log_level, "debug");
        assert_eq!(cfg.paths.workdir, PathBuf::from("/flag/wd"));
    }

    #[test]
    fn unknown_field_is_a_parse_error_naming_the_field() {
        let err = resolve_str("[gan]\nlearning_rate = 0.1\n", &overrides_with_workdir())
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn toml_parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "seed = 7\n[gan\n").unwrap();
        let err = format!(
            "{:#}",
            RunConfig::load(Some(&p), &overrides_with_workdir()).unwrap_err()
        );
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("bad.toml"), "{err}");
    }

    #[test]
    fn cross_field_validation_catches_size_mismatch_and_bad_attribute() {
        let err = resolve_str(
            "[dataset]\nimage_size = 16\n",
            &overrides_with_workdir(),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("must match"), "{err}");

        let err = resolve_str(
            "[pairs]\nattributes = [\"beard\"]\n",
            &overrides_with_workdir(),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("beard"), "{err}");
        assert!(err.contains("glasses"), "{err}");
    }

    #[test]
    fn workdir_must_come_from_somewhere() {
        // guard against env leakage in the test runner
        if std::env::var_os("MPI_FACEDIT_WORKDIR").is_some() {
            return;
        }
        let err = resolve_str("", &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("MPI_FACEDIT_WORKDIR"), "{err}");
    }

    #[test]
    fn absolute_path_entries_escape_the_workdir() {
        let cfg = resolve_str(
            "[paths]\ndataset_dir = \"/data/shared\"\n",
            &overrides_with_workdir(),
        )
        .unwrap();
        assert_eq!(cfg.paths.dataset_dir, PathBuf::from("/data/shared"));
        assert_eq!(cfg.paths.pairs_dir, PathBuf::from("/tmp/wd/pairs"));
    }
}
