//! The ten pipeline commands.
//!
//! Each command acquires the workdir lock, loads the artifacts it needs
//! (failing with the name of a missing prerequisite and the command that
//! produces it), writes its outputs, and records a provenance manifest.
//! Given the same config and seed every command overwrites its outputs
//! with identical bytes.

use anyhow::{bail, Context, Result};
use mpi_facedit_core::camera::Camera;
use mpi_facedit_core::container::Container;
use mpi_facedit_core::data::{
    build_pairs, generate_dataset, DataConfig, Pair, PairSet, Pose, ProceduralDataset, ATTRIBUTES,
};
use mpi_facedit_core::editdir::{ablate_k, estimate_direction};
use mpi_facedit_core::evaluation::{
    edit_probes, efficacy_from_probes, identity_metrics, kid, small_fid, view_consistency,
    EvalOptions, MetricReport,
};
use mpi_facedit_core::generator::{generator_from_container, train_gan, GanTrainer, Generator};
use mpi_facedit_core::imgmath::{
    contact_sheet, image_dims, load_label_png, load_png, save_mask_png, save_png, Image,
};
use mpi_facedit_core::inversion::{
    encoder_from_container, invert, pivotal_tune, reconstruction_l2, render_reference,
    train_encoder, Encoder, PerceptualFeatureExtractor,
};
use mpi_facedit_core::latent::{broadcast, EditDirection, WPlusLatent, ZLatent};
use mpi_facedit_core::oracle::canonical_region;
use mpi_facedit_core::renderer::{render, render_orbit, orbit_yaws};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::workdir::{ensure_parent, WorkdirLock};

/// Shared command context: resolved config plus the held workdir lock.
pub struct Ctx {
    pub cfg: RunConfig,
    _lock: WorkdirLock,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Ctx> {
        let lock = WorkdirLock::acquire(&cfg.paths.workdir)?;
        Ok(Ctx { cfg, _lock: lock })
    }

    fn manifest(&self, command: &str) -> Result<Manifest> {
        Manifest::new(command, &self.cfg)
    }

    fn finish(&self, manifest: &Manifest, name: &str) -> Result<()> {
        let path = manifest.write(&self.cfg.paths.manifests_dir, name)?;
        println!("manifest: {}", path.display());
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Artifact loading with prerequisite errors
// ---------------------------------------------------------------------------

fn load_dataset(cfg: &RunConfig) -> Result<ProceduralDataset> {
    let dir = &cfg.paths.dataset_dir;
    if !dir.join("manifest.json").exists() {
        bail!(
            "missing prerequisite: dataset at {} — run `mpi-facedit dataset` first",
            dir.display()
        );
    }
    ProceduralDataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_gan_checkpoint(cfg: &RunConfig) -> Result<Container> {
    let path = &cfg.paths.gan_checkpoint;
    if !path.exists() {
        bail!(
            "missing prerequisite: GAN checkpoint at {} — run `mpi-facedit train-gan` first",
            path.display()
        );
    }
    Container::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_encoder(cfg: &RunConfig) -> Result<Encoder> {
    let path = &cfg.paths.encoder_checkpoint;
    if !path.exists() {
        bail!(
            "missing prerequisite: encoder checkpoint at {} — run `mpi-facedit train-encoder` first",
            path.display()
        );
    }
    let c = Container::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (encoder, _) = encoder_from_container(&c)?;
    Ok(encoder)
}

fn load_direction(cfg: &RunConfig, attribute: &str) -> Result<EditDirection> {
    let path = direction_path(cfg, attribute);
    if !path.exists() {
        bail!(
            "missing prerequisite: edit direction at {} — run `mpi-facedit estimate --attribute {attribute}` first",
            path.display()
        );
    }
    EditDirection::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn direction_path(cfg: &RunConfig, attribute: &str) -> PathBuf {
    cfg.paths.directions_dir.join(format!("{attribute}.editdir"))
}

fn check_attribute_known(attribute: &str) -> Result<()> {
    if !ATTRIBUTES.contains(&attribute) {
        bail!(
            "unknown attribute {attribute:?} (known: {})",
            ATTRIBUTES.join(", ")
        );
    }
    Ok(())
}

/// Clears a directory artifact before a deterministic rewrite. Refuses to
/// clear a non-empty directory that lacks `marker` (i.e. one this tool did
/// not write), so a mistyped path cannot delete foreign files.
fn fresh_dir(dir: &Path, marker: &str) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !dir.join(marker).exists() {
            bail!(
                "refusing to clear {}: it is non-empty and was not written by \
                 this tool (no {marker} inside)",
                dir.display()
            );
        }
        std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

/// Samples `n` latents and broadcasts each to `W+`, mirroring the
/// evaluation probes' sampling scheme.
fn sample_wplus(generator: &Generator, n: usize, seed: u64) -> Result<Vec<WPlusLatent>> {
    let gcfg = generator.config();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z = Array1::from_shape_fn(gcfg.latent_dim, |_| rng.sample(StandardNormal));
            let w = generator.map_latent(&ZLatent::new(z)?)?;
            Ok(broadcast(&w, gcfg.t)?)
        })
        .collect()
}

fn render_at_pose(generator: &Generator, wp: &WPlusLatent, pose: &Pose) -> Result<Image> {
    let mpi = generator.synthesize_mpi(wp)?;
    let cam = Camera::orbit_deg(
        mpi.native_intrinsics(),
        mpi.pivot_depth(),
        pose.yaw_deg,
        pose.pitch_deg,
    )?;
    Ok(render(&mpi, &cam)?.rgb)
}

// ---------------------------------------------------------------------------
// dataset / train-gan / train-encoder
// ---------------------------------------------------------------------------

pub fn cmd_dataset(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("dataset")?;
    let ds = generate_dataset(
        cfg.dataset.n,
        &DataConfig {
            image_size: cfg.dataset.image_size,
        },
        cfg.dataset.seed,
    )?;
    fresh_dir(&cfg.paths.dataset_dir, "manifest.json")?;
    ds.save(&cfg.paths.dataset_dir)?;
    manifest.record_output(&cfg.paths.dataset_dir)?;
    println!(
        "dataset: {} samples at {}px -> {}",
        cfg.dataset.n,
        cfg.dataset.image_size,
        cfg.paths.dataset_dir.display()
    );
    ctx.finish(&manifest, "dataset")
}

pub fn cmd_train_gan(ctx: &Ctx, steps: Option<usize>) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("train-gan")?;
    let dataset = load_dataset(cfg)?;
    manifest.record_input(&cfg.paths.dataset_dir)?;
    let steps = steps.unwrap_or(cfg.gan.steps);
    log::info!("training GAN for {steps} steps (seed {})", cfg.gan.generator.seed);
    let checkpoint = train_gan(&dataset, &cfg.gan.generator, steps)?;
    ensure_parent(&cfg.paths.gan_checkpoint)?;
    checkpoint.save(&cfg.paths.gan_checkpoint)?;
    manifest.record_output(&cfg.paths.gan_checkpoint)?;
    println!(
        "train-gan: {steps} steps -> {}",
        cfg.paths.gan_checkpoint.display()
    );
    ctx.finish(&manifest, "train-gan")
}

pub fn cmd_train_encoder(ctx: &Ctx, steps: Option<usize>) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("train-encoder")?;
    let gan = load_gan_checkpoint(cfg)?;
    manifest.record_input(&cfg.paths.gan_checkpoint)?;
    let mut enc_cfg = cfg.encoder.clone();
    if let Some(steps) = steps {
        enc_cfg.steps = steps;
    }
    log::info!(
        "training encoder for {} steps against the frozen generator",
        enc_cfg.steps
    );
    let checkpoint = train_encoder(&gan, &enc_cfg)?;
    ensure_parent(&cfg.paths.encoder_checkpoint)?;
    checkpoint.save(&cfg.paths.encoder_checkpoint)?;
    manifest.record_output(&cfg.paths.encoder_checkpoint)?;
    println!(
        "train-encoder: {} steps -> {}",
        enc_cfg.steps,
        cfg.paths.encoder_checkpoint.display()
    );
    ctx.finish(&manifest, "train-encoder")
}

// ---------------------------------------------------------------------------
// pairs / estimate
// ---------------------------------------------------------------------------

/// Index document written beside the pair PNGs.
#[derive(Debug, Serialize, Deserialize)]
struct PairIndex {
    attribute: String,
    k: usize,
    image_size: usize,
    source_ids: Vec<String>,
    pairs: Vec<PairFiles>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairFiles {
    negative: String,
    positive: String,
    mask: String,
}

fn write_pairs(dir: &Path, set: &PairSet, image_size: usize) -> Result<()> {
    fresh_dir(dir, "pairs.json")?;
    let mut index = PairIndex {
        attribute: set.attribute_name.clone(),
        k: set.pairs.len(),
        image_size,
        source_ids: set.source_ids.clone(),
        pairs: Vec::with_capacity(set.pairs.len()),
    };
    for (i, pair) in set.pairs.iter().enumerate() {
        let files = PairFiles {
            negative: format!("pair_{i:02}_negative.png"),
            positive: format!("pair_{i:02}_positive.png"),
            mask: format!("pair_{i:02}_mask.png"),
        };
        save_png(&pair.negative, &dir.join(&files.negative))?;
        save_png(&pair.positive, &dir.join(&files.positive))?;
        save_mask_png(&pair.mask, &dir.join(&files.mask))?;
        index.pairs.push(files);
    }
    let json = serde_json::to_string_pretty(&index).context("serializing pair index")?;
    std::fs::write(dir.join("pairs.json"), json.as_bytes())
        .with_context(|| format!("writing {}", dir.join("pairs.json").display()))?;
    Ok(())
}

fn load_pairs(cfg: &RunConfig, attribute: &str) -> Result<PairSet> {
    let dir = cfg.paths.pairs_dir.join(attribute);
    let index_path = dir.join("pairs.json");
    if !index_path.exists() {
        bail!(
            "missing prerequisite: pairs at {} — run `mpi-facedit pairs --attribute {attribute}` first",
            dir.display()
        );
    }
    let text = std::fs::read_to_string(&index_path)
        .with_context(|| format!("reading {}", index_path.display()))?;
    let index: PairIndex = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", index_path.display()))?;
    let mut pairs = Vec::with_capacity(index.pairs.len());
    for files in &index.pairs {
        let negative = load_png(&dir.join(&files.negative))?;
        let positive = load_png(&dir.join(&files.positive))?;
        let mask = load_label_png(&dir.join(&files.mask))?.mapv(|v| v > 127);
        pairs.push(Pair {
            negative,
            positive,
            mask,
        });
    }
    Ok(PairSet {
        attribute_name: index.attribute,
        pairs,
        source_ids: index.source_ids,
    })
}

fn requested_attributes(cfg_list: &[String], flag: Option<&str>) -> Result<Vec<String>> {
    match flag {
        Some(a) => {
            check_attribute_known(a)?;
            Ok(vec![a.to_string()])
        }
        None => Ok(cfg_list.to_vec()),
    }
}

pub fn cmd_pairs(ctx: &Ctx, attribute: Option<&str>) -> Result<()> {
    let cfg = &ctx.cfg;
    let attrs = requested_attributes(&cfg.pairs.attributes, attribute)?;
    let mut manifest = ctx.manifest("pairs")?;
    let dataset = load_dataset(cfg)?;
    manifest.record_input(&cfg.paths.dataset_dir)?;
    for attr in &attrs {
        let set = build_pairs(attr, cfg.pairs.k, &dataset, cfg.pairs.max_k)?;
        let dir = cfg.paths.pairs_dir.join(attr);
        write_pairs(&dir, &set, cfg.dataset.image_size)?;
        manifest.record_output(&dir)?;
        println!(
            "pairs: {} {attr} pairs (sources {}) -> {}",
            set.pairs.len(),
            set.source_ids.join(", "),
            dir.display()
        );
    }
    ctx.finish(&manifest, &format!("pairs-{}", attrs.join("+")))
}

pub fn cmd_estimate(ctx: &Ctx, attribute: Option<&str>) -> Result<()> {
    let cfg = &ctx.cfg;
    let attrs = requested_attributes(&cfg.pairs.attributes, attribute)?;
    let mut manifest = ctx.manifest("estimate")?;
    let encoder = load_encoder(cfg)?;
    manifest.record_input(&cfg.paths.encoder_checkpoint)?;
    std::fs::create_dir_all(&cfg.paths.directions_dir)
        .with_context(|| format!("creating {}", cfg.paths.directions_dir.display()))?;
    for attr in &attrs {
        let set = load_pairs(cfg, attr)?;
        manifest.record_input(&cfg.paths.pairs_dir.join(attr))?;
        let direction = estimate_direction(&set, &encoder)?;
        let path = direction_path(cfg, attr);
        direction.save(&path)?;
        manifest.record_output(&path)?;
        println!(
            "estimate: {attr} direction from K={} pairs (sigma_1 {:.4}) -> {}",
            set.pairs.len(),
            direction.singular_values.first().copied().unwrap_or(f64::NAN),
            path.display()
        );
    }
    ctx.finish(&manifest, &format!("estimate-{}", attrs.join("+")))
}

// ---------------------------------------------------------------------------
// edit-render
// ---------------------------------------------------------------------------

/// Renders the cumulative-edit grid: one row per sampled identity, columns
/// `[reconstruction, +attr_1, +attr_1+attr_2, …]`, then (when requested) an
/// orbit strip of the fully edited latent. Each identity goes through the
/// same generate → invert → edit pipeline the evaluation probes use.
pub fn cmd_edit_render(
    ctx: &Ctx,
    attribute: Option<&str>,
    sequential: Option<&str>,
    scale: Option<f64>,
    orbit_views: Option<usize>,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let attrs: Vec<String> = match (sequential, attribute) {
        (Some(list), _) => list
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        (None, Some(a)) => vec![a.to_string()],
        (None, None) => bail!("edit-render needs --attribute NAME or --sequential a,b,…"),
    };
    if attrs.is_empty() {
        bail!("--sequential listed no attributes");
    }
    for a in &attrs {
        check_attribute_known(a)?;
    }
    let scale = scale.unwrap_or(cfg.edit.scale);
    let orbit_views = orbit_views.unwrap_or(cfg.edit.orbit_views);
    if !scale.is_finite() {
        bail!("--scale must be finite");
    }
    if orbit_views == 0 {
        bail!("--orbit-views must be >= 1");
    }

    let mut manifest = ctx.manifest("edit-render")?;
    let generator = generator_from_container(&load_gan_checkpoint(cfg)?)?;
    manifest.record_input(&cfg.paths.gan_checkpoint)?;
    let encoder = load_encoder(cfg)?;
    manifest.record_input(&cfg.paths.encoder_checkpoint)?;
    let directions = attrs
        .iter()
        .map(|a| {
            let d = load_direction(cfg, a)?;
            manifest.record_input(&direction_path(cfg, a))?;
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;

    // column legend, stored beside the frames
    let mut columns = vec!["reconstruction".to_string()];
    let mut cumulative = String::new();
    for a in &attrs {
        cumulative.push('+');
        cumulative.push_str(a);
        columns.push(cumulative.clone());
    }
    if orbit_views >= 2 {
        for yaw in orbit_yaws(orbit_views, cfg.edit.yaw_range_deg) {
            columns.push(format!("{cumulative} at yaw {yaw:+.1}°"));
        }
    }

    let qualifier = format!("{}-x{scale:.2}", attrs.join("+"));
    let out_dir = cfg.paths.renders_dir.join(&qualifier);
    fresh_dir(&out_dir, "columns.json")?;

    let latents = sample_wplus(&generator, cfg.edit.n_samples, cfg.edit.seed)?;
    let mut tiles = Vec::new();
    for (si, wp) in latents.iter().enumerate() {
        let x = render_reference(&generator.synthesize_mpi(wp)?)?;
        let wp_inv = invert(&x, &encoder)?;
        let mut row = vec![render_reference(&generator.synthesize_mpi(&wp_inv)?)?];
        let mut wp_cur = wp_inv;
        for d in &directions {
            wp_cur = wp_cur.apply_edit_rows(d, scale)?;
            row.push(render_reference(&generator.synthesize_mpi(&wp_cur)?)?);
        }
        if orbit_views >= 2 {
            let mpi = generator.synthesize_mpi(&wp_cur)?;
            for view in render_orbit(&mpi, orbit_views, cfg.edit.yaw_range_deg)? {
                row.push(view.rgb);
            }
        }
        for (ci, tile) in row.iter().enumerate() {
            save_png(tile, &out_dir.join(format!("frame_s{si:02}_c{ci:02}.png")))?;
        }
        tiles.extend(row);
    }
    let n_cols = columns.len();
    save_png(&contact_sheet(&tiles, n_cols), &out_dir.join("sheet.png"))?;
    let legend = serde_json::to_string_pretty(&columns).context("serializing column legend")?;
    std::fs::write(out_dir.join("columns.json"), legend.as_bytes())
        .with_context(|| format!("writing {}", out_dir.join("columns.json").display()))?;
    manifest.record_output(&out_dir)?;
    println!(
        "edit-render: {} identities x {} columns at scale {scale} -> {}",
        cfg.edit.n_samples,
        n_cols,
        out_dir.display()
    );
    ctx.finish(&manifest, &format!("edit-render-{qualifier}"))
}

// ---------------------------------------------------------------------------
// invert / pti
// ---------------------------------------------------------------------------

fn load_input_image(cfg: &RunConfig, input: &Path) -> Result<Image> {
    if !input.exists() {
        bail!("input image {} does not exist", input.display());
    }
    let x = load_png(input)?;
    let (h, w) = image_dims(&x);
    let s = cfg.gan.generator.image_size;
    if h != s || w != s {
        bail!(
            "input {} is {h}x{w}, the generator expects {s}x{s}",
            input.display()
        );
    }
    Ok(x)
}

fn input_stem(input: &Path) -> String {
    input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".to_string())
}

pub fn cmd_invert(ctx: &Ctx, input: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("invert")?;
    let generator = generator_from_container(&load_gan_checkpoint(cfg)?)?;
    manifest.record_input(&cfg.paths.gan_checkpoint)?;
    let encoder = load_encoder(cfg)?;
    manifest.record_input(&cfg.paths.encoder_checkpoint)?;
    let x = load_input_image(cfg, input)?;
    manifest.record_input(input)?;

    let wp = invert(&x, &encoder)?;
    let l2 = reconstruction_l2(&x, &wp, &generator)?;
    let recon = render_reference(&generator.synthesize_mpi(&wp)?)?;

    let stem = input_stem(input);
    std::fs::create_dir_all(&cfg.paths.inversions_dir)
        .with_context(|| format!("creating {}", cfg.paths.inversions_dir.display()))?;
    let latent_path = cfg.paths.inversions_dir.join(format!("{stem}.wplus"));
    let recon_path = cfg.paths.inversions_dir.join(format!("{stem}.recon.png"));
    wp.save(&latent_path)?;
    save_png(&recon, &recon_path)?;
    manifest.record_output(&latent_path)?;
    manifest.record_output(&recon_path)?;
    println!(
        "invert: {} -> {} (reconstruction L2 {l2:.4})",
        input.display(),
        latent_path.display()
    );
    ctx.finish(&manifest, &format!("invert-{stem}"))
}

/// Outcome document for one pivotal-tuning run.
#[derive(Debug, Serialize)]
struct PtiReportFile {
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    direct_l2: f64,
    pti_l2: f64,
}

pub fn cmd_pti(ctx: &Ctx, input: &Path, steps: Option<usize>) -> Result<()> {
    let cfg = &ctx.cfg;
    let steps = steps.unwrap_or(cfg.pti.steps);
    if steps == 0 {
        bail!("--steps must be >= 1");
    }
    let mut manifest = ctx.manifest("pti")?;
    let gan = load_gan_checkpoint(cfg)?;
    manifest.record_input(&cfg.paths.gan_checkpoint)?;
    let encoder = load_encoder(cfg)?;
    manifest.record_input(&cfg.paths.encoder_checkpoint)?;
    let x = load_input_image(cfg, input)?;
    manifest.record_input(input)?;

    let mut trainer = GanTrainer::from_container(&gan)?;
    let mut extractor = PerceptualFeatureExtractor::new(cfg.encoder.perceptual_seed);
    let direct_wp = invert(&x, &encoder)?;
    let direct_l2 = reconstruction_l2(&x, &direct_wp, &trainer.generator)?;
    let result = pivotal_tune(&x, &encoder, &trainer.generator, &mut extractor, steps)?;
    let pti_l2 = reconstruction_l2(&x, &result.pivot, &result.generator)?;
    let recon = render_reference(&result.generator.synthesize_mpi(&result.pivot)?)?;

    let stem = input_stem(input);
    std::fs::create_dir_all(&cfg.paths.inversions_dir)
        .with_context(|| format!("creating {}", cfg.paths.inversions_dir.display()))?;
    let ckpt_path = cfg.paths.inversions_dir.join(format!("{stem}.pti.ckpt"));
    let pivot_path = cfg.paths.inversions_dir.join(format!("{stem}.pivot.wplus"));
    let recon_path = cfg.paths.inversions_dir.join(format!("{stem}.pti.png"));
    let report_path = cfg.paths.inversions_dir.join(format!("{stem}.pti.json"));

    // persist the tuned generator in the standard checkpoint format by
    // swapping it into the loaded trainer state
    trainer.generator = result.generator;
    trainer.to_container()?.save(&ckpt_path)?;
    result.pivot.save(&pivot_path)?;
    save_png(&recon, &recon_path)?;
    let report = PtiReportFile {
        steps,
        initial_loss: result.initial_loss,
        final_loss: result.final_loss,
        direct_l2,
        pti_l2,
    };
    let json = serde_json::to_string_pretty(&report).context("serializing PTI report")?;
    std::fs::write(&report_path, json.as_bytes())
        .with_context(|| format!("writing {}", report_path.display()))?;
    for p in [&ckpt_path, &pivot_path, &recon_path, &report_path] {
        manifest.record_output(p)?;
    }
    println!(
        "pti: {steps} steps, loss {:.4} -> {:.4}, reconstruction L2 {direct_l2:.4} -> {pti_l2:.4} ({})",
        result.initial_loss,
        result.final_loss,
        ckpt_path.display()
    );
    ctx.finish(&manifest, &format!("pti-{stem}"))
}

// ---------------------------------------------------------------------------
// eval / ablate
// ---------------------------------------------------------------------------

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        seed: cfg.eval.seed,
        scale: cfg.eval.scale,
        yaw_range_deg: cfg.eval.yaw_range_deg,
        ..EvalOptions::default()
    }
}

/// Computes the metric report. All sampled draws (FID set, edit probes,
/// orbit subjects) come from the evaluation seed, so the report describes
/// one sampled population.
pub fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut manifest = ctx.manifest("eval")?;
    let generator = generator_from_container(&load_gan_checkpoint(cfg)?)?;
    manifest.record_input(&cfg.paths.gan_checkpoint)?;
    let encoder = load_encoder(cfg)?;
    manifest.record_input(&cfg.paths.encoder_checkpoint)?;
    let dataset = load_dataset(cfg)?;
    manifest.record_input(&cfg.paths.dataset_dir)?;
    let opts = eval_options(cfg);
    let size = cfg.gan.generator.image_size;

    // image realism: dataset images vs fresh renders at the same poses
    let n_real = cfg.eval.n_fid.min(dataset.len());
    let real: Vec<Image> = dataset.samples[..n_real]
        .iter()
        .map(|s| s.image.clone())
        .collect();
    let fakes: Vec<Image> = sample_wplus(&generator, cfg.eval.n_fid, cfg.eval.seed)?
        .iter()
        .enumerate()
        .map(|(i, wp)| {
            let pose = dataset.samples[i % dataset.len()].pose;
            render_at_pose(&generator, wp, &pose)
        })
        .collect::<Result<Vec<_>>>()?;
    let fid = small_fid(&real, &fakes)?;
    let kid_v = kid(&real, &fakes)?;
    log::info!("fid {fid:.4} kid {kid_v:.5} over {n_real} real / {} fake", fakes.len());

    // edit behavior per attribute
    let frontal = Pose::frontal();
    let orbit_subjects = sample_wplus(&generator, cfg.eval.n_orbit_samples, cfg.eval.seed)?;
    let mut efficacy = BTreeMap::new();
    let mut ed_sum = 0.0;
    let mut cs_sum = 0.0;
    let mut n_identity = 0usize;
    let mut vc_sum = 0.0;
    let mut n_vc = 0usize;
    for attr in &cfg.eval.attributes {
        let direction = load_direction(cfg, attr)?;
        manifest.record_input(&direction_path(cfg, attr))?;
        let probes = edit_probes(&direction, cfg.eval.n_probes, &generator, &encoder, &opts)?;
        let outcome = efficacy_from_probes(&probes, attr)?;
        log::info!(
            "{attr}: flipped {}/{} initially-negative probes",
            outcome.flipped,
            outcome.initially_negative
        );
        efficacy.insert(attr.clone(), outcome.fraction());
        let region = canonical_region(attr, &frontal, size)?;
        for p in &probes {
            let (ed, cs) = identity_metrics(&p.before, &p.after, Some(&region))?;
            ed_sum += ed;
            cs_sum += cs;
            n_identity += 1;
        }
        for wp in &orbit_subjects {
            let vc = view_consistency(wp, &direction, cfg.eval.orbit_views, &generator, &opts)?;
            vc_sum += vc.min_confidence;
            n_vc += 1;
        }
    }

    let report = MetricReport {
        fid,
        kid: kid_v,
        ed: ed_sum / n_identity as f64,
        cs: cs_sum / n_identity as f64,
        efficacy,
        view_consistency: vc_sum / n_vc as f64,
    };
    std::fs::create_dir_all(&cfg.paths.eval_dir)
        .with_context(|| format!("creating {}", cfg.paths.eval_dir.display()))?;
    let json_path = cfg.paths.eval_dir.join("report.json");
    let md_path = cfg.paths.eval_dir.join("report.md");
    std::fs::write(&json_path, report.to_json()?.as_bytes())
        .with_context(|| format!("writing {}", json_path.display()))?;
    let md = report.to_markdown()?;
    std::fs::write(&md_path, md.as_bytes())
        .with_context(|| format!("writing {}", md_path.display()))?;
    manifest.record_output(&json_path)?;
    manifest.record_output(&md_path)?;
    println!("{md}");
    println!("eval: wrote {} and {}", json_path.display(), md_path.display());
    ctx.finish(&manifest, "eval")
}

pub fn cmd_ablate(ctx: &Ctx, attribute: Option<&str>) -> Result<()> {
    let cfg = &ctx.cfg;
    let attr = attribute.unwrap_or(&cfg.ablate.attribute);
    check_attribute_known(attr)?;
    let mut manifest = ctx.manifest("ablate")?;
    let dataset = load_dataset(cfg)?;
    manifest.record_input(&cfg.paths.dataset_dir)?;
    let generator = generator_from_container(&load_gan_checkpoint(cfg)?)?;
    manifest.record_input(&cfg.paths.gan_checkpoint)?;
    let encoder = load_encoder(cfg)?;
    manifest.record_input(&cfg.paths.encoder_checkpoint)?;

    let opts = eval_options(cfg);
    let out = ablate_k(
        attr,
        &cfg.ablate.k_values,
        &dataset,
        &encoder,
        &generator,
        &opts,
        cfg.ablate.n_eval_samples,
    )?;
    let dir = cfg.paths.ablation_dir.join(attr);
    fresh_dir(&dir, "report.json")?;
    let json_path = dir.join("report.json");
    let md_path = dir.join("report.md");
    let sheet_path = dir.join("sheet.png");
    std::fs::write(&json_path, out.report.to_json()?.as_bytes())
        .with_context(|| format!("writing {}", json_path.display()))?;
    std::fs::write(&md_path, out.report.to_markdown().as_bytes())
        .with_context(|| format!("writing {}", md_path.display()))?;
    save_png(&out.sheet, &sheet_path)?;
    manifest.record_output(&dir)?;
    println!("{}", out.report.to_markdown());
    println!("ablate: wrote {}", dir.display());
    ctx.finish(&manifest, &format!("ablate-{attr}"))
}
