//! Image-to-latent inversion: a trained encoder, the three-term inversion
//! loss, and pivotal tuning.
//!
//! The encoder maps an image to a full `W+` matrix (one latent row per
//! synthesis block) with a small strided convolution stack and a linear
//! head. It is trained against a frozen generator on generated samples, so
//! the ground-truth latent of every training image is known:
//!
//! ```text
//! L = λ_lpips·L_perc(x, G(I(x))) + λ_recons·‖x − G(I(x))‖₂ + λ_latent·‖w − I(x)‖₂
//! ```
//!
//! with plain (unsquared) L2 norms for the reconstruction and latent terms.
//! The perceptual loss compares feature maps of a fixed, randomly
//! initialized convolution stack with unit activation scales. Every layer's
//! squared-difference sum is normalized by the *input image's* `H·W` (the
//! loss definition names the image height and width, not per-layer feature
//! dimensions).
//!
//! Pivotal tuning clones the generator and fine-tunes the clone for a few
//! steps so that one fixed pivot latent reconstructs one target image,
//! recovering detail the encoder alone misses on out-of-distribution
//! inputs. The original generator is never touched.

use crate::camera::{Camera, Intrinsics};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::generator::{broadcast_rows, step_rng, GanTrainer, Generator};
use crate::imgmath::Image;
use crate::latent::WPlusLatent;
use crate::nn::{self, leaky_mask, leaky_relu, Adam, Conv2d, Dense, ParamRef, ParamSet};
use crate::renderer::{render, render_with_tape, MultiPlaneImage};
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Default number of pivotal-tuning steps.
pub const PTI_DEFAULT_STEPS: usize = 30;
/// Adam learning rate used by pivotal tuning.
const PTI_LR: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Perceptual feature extractor
// ---------------------------------------------------------------------------

/// A fixed (never trained) two-layer convolutional feature stack with
/// per-layer, per-channel activation scales `v_l`.
///
/// `new` draws random weights once from a seed and sets every `v_l` to 1;
/// the random stack acts as a bank of fixed filters, a known-effective
/// stand-in for a pretrained perceptual network at this scale.
pub struct PerceptualFeatureExtractor {
    convs: Vec<Conv2d>,
    v: Vec<Array1<f64>>,
}

impl PerceptualFeatureExtractor {
    /// Standard extractor: `conv3×3 (3→8)` stride 1, `conv3×3 (8→12)`
    /// stride 2, LeakyReLU after each, unit `v_l`.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let convs = vec![
            Conv2d::new(&mut rng, 3, 8, 3, 1, 1),
            Conv2d::new(&mut rng, 8, 12, 3, 2, 1),
        ];
        let v = convs
            .iter()
            .map(|c| Array1::ones(c.out_channels()))
            .collect();
        PerceptualFeatureExtractor { convs, v }
    }

    /// Builds an extractor from explicit layers (used by oracle tests that
    /// need hand-settable weights).
    pub fn from_parts(convs: Vec<Conv2d>, v: Vec<Array1<f64>>) -> Result<Self> {
        if convs.is_empty() || convs.len() != v.len() {
            return Err(Error::InvalidConfig(
                "extractor needs one v_l per conv layer".into(),
            ));
        }
        for (c, vl) in convs.iter().zip(&v) {
            if vl.len() != c.out_channels() {
                return Err(Error::shape(
                    "extractor activation scales",
                    format!("{} channels", c.out_channels()),
                    format!("{}", vl.len()),
                ));
            }
        }
        Ok(PerceptualFeatureExtractor { convs, v })
    }

    /// Pre- and post-activation feature maps for one image.
    fn stack(&self, img: &Image) -> (Vec<Array4<f64>>, Vec<Array4<f64>>) {
        let x = img.view().insert_axis(Axis(0)).to_owned();
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut act = Vec::with_capacity(self.convs.len());
        let mut h = x;
        for conv in &self.convs {
            let p = conv.forward(&h);
            h = leaky_relu(&p);
            pre.push(p);
            act.push(h.clone());
        }
        (pre, act)
    }

    /// Post-activation feature maps of every layer for one `(3, H, W)` image.
    pub fn features(&self, img: &Image) -> Vec<Array4<f64>> {
        self.stack(img).1
    }

    fn check_pair(&self, x: &Image, y: &Image) -> Result<()> {
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "perceptual loss inputs",
                format!("{:?}", x.shape()),
                format!("{:?}", y.shape()),
            ));
        }
        if x.shape()[0] != 3 {
            return Err(Error::shape(
                "perceptual loss inputs",
                "(3, H, W)".to_string(),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// `Σ_l (1/(H·W)) Σ_{h,w} ‖v_l ⊙ (ŷ^l − ŷ₀^l)‖²` with `H, W` the input
    /// image's dimensions. Symmetric, non-negative, exactly zero for
    /// identical inputs.
    pub fn perceptual_loss(&self, x: &Image, y: &Image) -> Result<f64> {
        self.check_pair(x, y)?;
        let norm = (x.shape()[1] * x.shape()[2]) as f64;
        let fx = self.features(x);
        let fy = self.features(y);
        let mut loss = 0.0;
        for (l, (a, b)) in fx.iter().zip(&fy).enumerate() {
            let c = a.shape()[1];
            for ci in 0..c {
                let vl = self.v[l][ci];
                let pa = a.index_axis(Axis(1), ci);
                let pb = b.index_axis(Axis(1), ci);
                let mut s = 0.0;
                for (u, w) in pa.iter().zip(pb.iter()) {
                    let d = vl * (u - w);
                    s += d * d;
                }
                loss += s / norm;
            }
        }
        Ok(loss)
    }

    /// Perceptual loss plus its gradient with respect to `y` (the
    /// reconstruction side). The extractor's parameters stay frozen — the
    /// backward pass only transports the gradient to the input.
    pub fn loss_and_grad_y(&mut self, x: &Image, y: &Image) -> Result<(f64, Image)> {
        self.check_pair(x, y)?;
        let norm = (x.shape()[1] * x.shape()[2]) as f64;
        let fx = self.features(x);
        let (pre_y, act_y) = self.stack(y);
        let n_layers = self.convs.len();
        let mut loss = 0.0;
        // dL/d(act_y[l]), filled per layer.
        let mut g_act: Vec<Array4<f64>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let a = &fx[l];
            let b = &act_y[l];
            let mut g = Array4::<f64>::zeros(b.raw_dim());
            let c = b.shape()[1];
            for ci in 0..c {
                let vl = self.v[l][ci];
                let pa = a.index_axis(Axis(1), ci);
                let pb = b.index_axis(Axis(1), ci);
                let mut gslice = g.index_axis_mut(Axis(1), ci);
                for ((u, w), gv) in pa.iter().zip(pb.iter()).zip(gslice.iter_mut()) {
                    let d = w - u;
                    loss += vl * vl * d * d / norm;
                    *gv = 2.0 * vl * vl * d / norm;
                }
            }
            g_act.push(g);
        }
        // Walk the stack backwards; layer l's activation also feeds layer
        // l+1, so gradients add.
        let mut carry: Option<Array4<f64>> = None;
        for l in (0..n_layers).rev() {
            let mut g = g_act[l].clone();
            if let Some(c) = carry {
                g += &c;
            }
            let g_pre = &g * &leaky_mask(&pre_y[l]);
            let input = if l == 0 {
                y.view().insert_axis(Axis(0)).to_owned()
            } else {
                act_y[l - 1].clone()
            };
            carry = Some(self.convs[l].backward(&input, &g_pre, false));
        }
        let gy4 = carry.expect("at least one layer");
        let gy: Image = gy4.index_axis(Axis(0), 0).to_owned();
        Ok((loss, gy))
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// The three raw (unweighted) terms of the inversion loss plus the weighted
/// total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InversionLossBreakdown {
    /// Perceptual term `L_perc(x, G(I(x)))`.
    pub lpips: f64,
    /// Image reconstruction term `‖x − G(I(x))‖₂` (unsquared norm).
    pub recons: f64,
    /// Latent reconstruction term `‖w − W+‖₂` (Frobenius norm).
    pub latent: f64,
    /// `λ_lpips·lpips + λ_recons·recons + λ_latent·latent`.
    pub total: f64,
}

/// Flat L2 norm over all elements.
fn l2_norm<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Raw inversion-loss terms from already-computed pieces: the target image,
/// its reconstruction, the target `W+` rows, and the predicted rows.
pub fn inversion_loss_terms(
    x: &Image,
    x_hat: &Image,
    target_rows: &Array2<f64>,
    pred_rows: &Array2<f64>,
    extractor: &PerceptualFeatureExtractor,
) -> Result<(f64, f64, f64)> {
    if target_rows.shape() != pred_rows.shape() {
        return Err(Error::shape(
            "inversion latent rows",
            format!("{:?}", target_rows.shape()),
            format!("{:?}", pred_rows.shape()),
        ));
    }
    let lpips = extractor.perceptual_loss(x, x_hat)?;
    let recons = l2_norm(&(x - x_hat));
    let latent = l2_norm(&(target_rows - pred_rows));
    Ok((lpips, recons, latent))
}

/// Settings for encoder training (and the λ's of the inversion loss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionTrainingConfig {
    pub lambda_lpips: f64,
    pub lambda_recons: f64,
    pub lambda_latent: f64,
    /// Adam learning rate for the encoder.
    pub lr: f64,
    /// Training steps.
    pub steps: usize,
    pub batch_size: usize,
    /// Output channels of the encoder's three stride-2 convolutions.
    pub enc_channels: Vec<usize>,
    /// Seed for the frozen perceptual extractor's weights.
    pub perceptual_seed: u64,
    /// Seed for encoder init and per-step sampling.
    pub seed: u64,
}

impl Default for InversionTrainingConfig {
    fn default() -> Self {
        InversionTrainingConfig {
            lambda_lpips: 1.0,
            lambda_recons: 1.0,
            lambda_latent: 0.1,
            lr: 1e-3,
            steps: 3000,
            batch_size: 8,
            enc_channels: vec![16, 24, 32],
            perceptual_seed: 77,
            seed: 13,
        }
    }
}

impl InversionTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda_lpips, self.lambda_recons, self.lambda_latent];
        if ls.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if ls.iter().all(|&l| l == 0.0) {
            return Err(Error::InvalidConfig(
                "at least one loss weight must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.enc_channels.len() != 3 || self.enc_channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig(
                "enc_channels must list 3 positive channel counts".into(),
            ));
        }
        Ok(())
    }

    /// Small settings for the 8×8 test instance.
    pub fn tiny(seed: u64, steps: usize) -> Self {
        InversionTrainingConfig {
            lr: 2e-3,
            steps,
            batch_size: 4,
            enc_channels: vec![4, 6, 8],
            seed,
            ..InversionTrainingConfig::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Image → `W+` encoder: three stride-2 convolutions with LeakyReLU, then a
/// linear head emitting all `t · latent_dim` coefficients at once.
pub struct Encoder {
    convs: Vec<Conv2d>,
    head: Dense,
    image_size: usize,
    t: usize,
    latent_dim: usize,
    flat_len: usize,
}

/// Forward intermediates for [`Encoder::backward`].
pub struct EncTape {
    x: Array4<f64>,
    conv_pre: Vec<Array4<f64>>,
    conv_act: Vec<Array4<f64>>,
    flat: Array2<f64>,
}

impl ParamSet for Encoder {
    fn visit(&mut self, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit(&format!("conv{i}"), f);
        }
        self.head.visit("head", f);
    }
}

impl Encoder {
    pub fn new(
        rng: &mut ChaCha12Rng,
        image_size: usize,
        t: usize,
        latent_dim: usize,
        channels: &[usize],
    ) -> Result<Self> {
        if channels.len() != 3 || channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig(
                "encoder needs 3 positive channel counts".into(),
            ));
        }
        if image_size % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {image_size} not divisible by 8"
            )));
        }
        let mut convs = Vec::with_capacity(3);
        let mut in_c = 3;
        for &out_c in channels {
            convs.push(Conv2d::new(rng, in_c, out_c, 3, 2, 1));
            in_c = out_c;
        }
        let side = image_size / 8;
        let flat_len = in_c * side * side;
        let head = Dense::new(rng, flat_len, t * latent_dim);
        Ok(Encoder {
            convs,
            head,
            image_size,
            t,
            latent_dim,
            flat_len,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn block_count(&self) -> usize {
        self.t
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Encodes a batch `(B, 3, S, S)` into `W+` rows `(B, t, latent_dim)`.
    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array3<f64>, EncTape)> {
        let b = x.shape()[0];
        if x.shape()[1] != 3 || x.shape()[2] != self.image_size || x.shape()[3] != self.image_size {
            return Err(Error::shape(
                "encoder input",
                format!("(B, 3, {0}, {0})", self.image_size),
                format!("{:?}", x.shape()),
            ));
        }
        let mut conv_pre = Vec::with_capacity(3);
        let mut conv_act = Vec::with_capacity(3);
        let mut h = x.clone();
        for conv in &self.convs {
            let pre = conv.forward(&h);
            h = leaky_relu(&pre);
            conv_pre.push(pre);
            conv_act.push(h.clone());
        }
        let flat = h
            .into_shape_with_order((b, self.flat_len))
            .expect("contiguous activations");
        let out = self.head.forward(&flat);
        let rows = out
            .into_shape_with_order((b, self.t, self.latent_dim))
            .expect("head output reshape");
        let tape = EncTape {
            x: x.clone(),
            conv_pre,
            conv_act,
            flat,
        };
        Ok((rows, tape))
    }

    /// Backpropagates gradients on the predicted rows; accumulates parameter
    /// gradients when `accumulate` is set.
    pub fn backward(&mut self, tape: &EncTape, grows: &Array3<f64>, accumulate: bool) {
        let b = grows.shape()[0];
        let g2 = grows
            .to_owned()
            .into_shape_with_order((b, self.t * self.latent_dim))
            .expect("row grad reshape");
        let g_flat = self.head.backward(&tape.flat, &g2, accumulate);
        let last = tape.conv_act.last().expect("three conv layers");
        let mut g = g_flat
            .into_shape_with_order(last.raw_dim())
            .expect("flatten round-trip");
        for i in (0..self.convs.len()).rev() {
            let g_pre = &g * &leaky_mask(&tape.conv_pre[i]);
            let input = if i == 0 { &tape.x } else { &tape.conv_act[i - 1] };
            g = self.convs[i].backward(input, &g_pre, accumulate);
        }
    }
}

/// Encodes one image into a `W+` latent. Pure function of (parameters,
/// input): no state is read or written.
pub fn invert(x: &Image, encoder: &Encoder) -> Result<WPlusLatent> {
    let s = encoder.image_size();
    if x.shape() != [3, s, s] {
        return Err(Error::shape(
            "inversion input",
            format!("(3, {s}, {s})"),
            format!("{:?}", x.shape()),
        ));
    }
    let x4 = x.view().insert_axis(Axis(0)).to_owned();
    let (rows, _) = encoder.forward(&x4)?;
    WPlusLatent::new(rows.index_axis(Axis(0), 0).to_owned())
}

/// The camera every inversion target is rendered at: the MPI's native
/// intrinsics with no rotation or translation.
pub fn reference_camera(image_size: usize) -> Camera {
    Camera::reference(Intrinsics::for_size(image_size))
}

/// Renders an MPI at the reference camera.
pub fn render_reference(mpi: &MultiPlaneImage) -> Result<Image> {
    Ok(render(mpi, &reference_camera(mpi.width()))?.rgb)
}

/// Evaluates the full inversion loss of `encoder` on one image against its
/// known target latent: reconstructs `x̂ = G(I(x))` at the reference camera
/// and reports each raw term plus the weighted total.
pub fn inversion_loss(
    x: &Image,
    w_target: &WPlusLatent,
    encoder: &Encoder,
    generator: &Generator,
    extractor: &PerceptualFeatureExtractor,
    cfg: &InversionTrainingConfig,
) -> Result<InversionLossBreakdown> {
    cfg.validate()?;
    let pred = invert(x, encoder)?;
    let mpi = generator.synthesize_mpi(&pred)?;
    let x_hat = render_reference(&mpi)?;
    let (lpips, recons, latent) =
        inversion_loss_terms(x, &x_hat, &w_target.rows, &pred.rows, extractor)?;
    for (name, v) in [("lpips", lpips), ("recons", recons), ("latent", latent)] {
        if !v.is_finite() {
            return Err(Error::TrainingDiverged {
                term: match name {
                    "lpips" => "inversion lpips term",
                    "recons" => "inversion recons term",
                    _ => "inversion latent term",
                },
                step: 0,
                dump: String::new(),
            });
        }
    }
    let total = cfg.lambda_lpips * lpips + cfg.lambda_recons * recons + cfg.lambda_latent * latent;
    Ok(InversionLossBreakdown {
        lpips,
        recons,
        latent,
        total,
    })
}

// ---------------------------------------------------------------------------
// Encoder training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderMeta {
    kind: String,
    config: InversionTrainingConfig,
    image_size: usize,
    t: usize,
    latent_dim: usize,
    step: usize,
    loss: Vec<f64>,
    adam_t: u64,
}

/// Trains the encoder against a frozen generator on freshly generated
/// samples whose ground-truth latents are known.
pub struct EncoderTrainer {
    pub encoder: Encoder,
    /// The frozen generator (restored from the checkpoint; never updated).
    pub generator: Generator,
    pub extractor: PerceptualFeatureExtractor,
    config: InversionTrainingConfig,
    adam: Adam,
    step: usize,
    /// Per-step mean weighted loss.
    pub loss: Vec<f64>,
}

impl EncoderTrainer {
    pub fn new(gen_checkpoint: &Container, config: &InversionTrainingConfig) -> Result<Self> {
        config.validate()?;
        let generator = GanTrainer::from_container(gen_checkpoint)?.generator;
        let gcfg = generator.config().clone();
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let encoder = Encoder::new(
            &mut rng,
            gcfg.image_size,
            gcfg.t,
            gcfg.latent_dim,
            &config.enc_channels,
        )?;
        Ok(EncoderTrainer {
            encoder,
            generator,
            extractor: PerceptualFeatureExtractor::new(config.perceptual_seed),
            config: config.clone(),
            adam: Adam::new(config.lr, 0.9, 0.999),
            step: 0,
            loss: Vec::new(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &InversionTrainingConfig {
        &self.config
    }

    /// One optimizer step on a fresh generated batch at the reference
    /// camera. The generator participates in the backward pass only as a
    /// gradient conduit (`accumulate = false`): its parameters are frozen.
    pub fn train_step(&mut self) -> Result<()> {
        let cfg = &self.config;
        let gcfg = self.generator.config().clone();
        let b = cfg.batch_size;
        let bf = b as f64;
        let mut rng = step_rng(cfg.seed, self.step);
        let z = Array2::from_shape_fn((b, gcfg.latent_dim), |_| rng.sample(StandardNormal));
        let (w, _) = self.generator.map_forward(&z)?;
        let target_rows = broadcast_rows(&w, gcfg.t);
        // Targets: rendered without tape (no gradient flows through x).
        let (target_mpis, _) = self.generator.synthesize_rows(&target_rows)?;
        let s = gcfg.image_size;
        let cam = reference_camera(s);
        let mut x = Array4::<f64>::zeros((b, 3, s, s));
        for (bi, mpi) in target_mpis.iter().enumerate() {
            x.index_axis_mut(Axis(0), bi).assign(&render(mpi, &cam)?.rgb);
        }
        // Predictions and their reconstructions (with tapes).
        let (pred_rows, enc_tape) = self.encoder.forward(&x)?;
        let (pred_mpis, synth_tape) = self.generator.synthesize_rows(&pred_rows)?;
        let mut mpi_grads = Vec::with_capacity(b);
        let mut g_latent = Array3::<f64>::zeros(pred_rows.raw_dim());
        let mut loss_sum = 0.0;
        for (bi, mpi) in pred_mpis.iter().enumerate() {
            let (view, rtape) = render_with_tape(mpi, &cam, [0.0, 0.0, 0.0])?;
            let x_b: Image = x.index_axis(Axis(0), bi).to_owned();
            let x_hat = view.rgb;
            let (lpips, g_lpips) = self.extractor.loss_and_grad_y(&x_b, &x_hat)?;
            let diff = &x_hat - &x_b;
            let recons = l2_norm(&diff);
            let g_recons = diff.mapv(|v| v / recons.max(1e-12));
            let t_b = target_rows.index_axis(Axis(0), bi);
            let p_b = pred_rows.index_axis(Axis(0), bi);
            let ldiff = &p_b.to_owned() - &t_b;
            let latent = l2_norm(&ldiff);
            g_latent
                .index_axis_mut(Axis(0), bi)
                .assign(&ldiff.mapv(|v| cfg.lambda_latent / bf * v / latent.max(1e-12)));
            loss_sum +=
                cfg.lambda_lpips * lpips + cfg.lambda_recons * recons + cfg.lambda_latent * latent;
            let g_xhat = g_lpips.mapv(|v| v * cfg.lambda_lpips / bf)
                + g_recons.mapv(|v| v * cfg.lambda_recons / bf);
            mpi_grads.push(rtape.backward(&g_xhat));
        }
        let loss = loss_sum / bf;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                term: "encoder",
                step: self.step,
                dump: format!("; per-batch weighted loss {loss}"),
            });
        }
        let grows_recon = self
            .generator
            .synthesis_backward(&synth_tape, &mpi_grads, false)?;
        let grows = &grows_recon + &g_latent;
        nn::zero_grads(&mut self.encoder);
        self.encoder.backward(&enc_tape, &grows, true);
        self.adam.step(&mut self.encoder);
        self.loss.push(loss);
        self.step += 1;
        Ok(())
    }

    pub fn train(&mut self, steps: usize) -> Result<()> {
        if steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        for _ in 0..steps {
            self.train_step()?;
        }
        Ok(())
    }

    /// Serializes the encoder, optimizer state, config, and loss trace.
    pub fn to_container(&mut self) -> Result<Container> {
        let mut c = Container::new();
        for (name, arr) in nn::params_to_map(&mut self.encoder) {
            c.insert(format!("enc.{name}"), arr);
        }
        let (t, m, v) = self.adam.export_state();
        for (name, arr) in m {
            c.insert(format!("opt.m.{name}"), arr.clone());
        }
        for (name, arr) in v {
            c.insert(format!("opt.v.{name}"), arr.clone());
        }
        let gcfg = self.generator.config();
        let meta = EncoderMeta {
            kind: "mpi-encoder".to_string(),
            config: self.config.clone(),
            image_size: gcfg.image_size,
            t: gcfg.t,
            latent_dim: gcfg.latent_dim,
            step: self.step,
            loss: self.loss.clone(),
            adam_t: t,
        };
        c.set_meta(&meta)?;
        Ok(c)
    }
}

/// Trains an encoder for `config.steps` steps against the (frozen)
/// generator checkpoint and returns the encoder checkpoint.
pub fn train_encoder(
    gen_checkpoint: &Container,
    config: &InversionTrainingConfig,
) -> Result<Container> {
    let mut trainer = EncoderTrainer::new(gen_checkpoint, config)?;
    trainer.train(config.steps)?;
    trainer.to_container()
}

/// Restores an encoder (and the config it was trained with) from its
/// checkpoint.
pub fn encoder_from_container(c: &Container) -> Result<(Encoder, InversionTrainingConfig)> {
    let meta: EncoderMeta = c.meta_as()?;
    if meta.kind != "mpi-encoder" {
        return Err(Error::Malformed {
            path: "checkpoint".into(),
            reason: format!("expected an mpi-encoder checkpoint, found kind '{}'", meta.kind),
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(meta.config.seed);
    let mut encoder = Encoder::new(
        &mut rng,
        meta.image_size,
        meta.t,
        meta.latent_dim,
        &meta.config.enc_channels,
    )?;
    let mut map = std::collections::BTreeMap::new();
    for (name, arr) in &c.arrays {
        if let Some(rest) = name.strip_prefix("enc.") {
            map.insert(rest.to_string(), arr.clone());
        }
    }
    nn::load_params_from_map(&mut encoder, &map)?;
    Ok((encoder, meta.config))
}

// ---------------------------------------------------------------------------
// Pivotal tuning
// ---------------------------------------------------------------------------

/// Result of pivotal tuning: the fine-tuned generator copy and the fixed
/// pivot latent.
pub struct PivotalTuneResult {
    pub generator: Generator,
    pub pivot: WPlusLatent,
    /// Loss (perceptual + L2 reconstruction) before any tuning step.
    pub initial_loss: f64,
    /// Loss after the final step.
    pub final_loss: f64,
}

/// Fine-tunes a copy of the generator for `steps` steps so the fixed pivot
/// `invert(x)` reconstructs `x` (perceptual + unsquared-L2 reconstruction
/// loss, unit weights). The input generator is untouched. Aborts if the
/// loss grows past 10× its initial value.
pub fn pivotal_tune(
    x: &Image,
    encoder: &Encoder,
    generator: &Generator,
    extractor: &mut PerceptualFeatureExtractor,
    steps: usize,
) -> Result<PivotalTuneResult> {
    if steps == 0 {
        return Err(Error::InvalidConfig(
            "pivotal tuning needs at least one step".into(),
        ));
    }
    let pivot = invert(x, encoder)?;
    let mut tuned = generator.clone();
    let rows = pivot.rows.view().insert_axis(Axis(0)).to_owned();
    let cam = reference_camera(tuned.config().image_size);
    let mut adam = Adam::new(PTI_LR, 0.9, 0.999);
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for step in 0..steps {
        let (mpis, synth_tape) = tuned.synthesize_rows(&rows)?;
        let (view, rtape) = render_with_tape(&mpis[0], &cam, [0.0, 0.0, 0.0])?;
        let x_hat = view.rgb;
        let (lpips, g_lpips) = extractor.loss_and_grad_y(x, &x_hat)?;
        let diff = &x_hat - x;
        let recons = l2_norm(&diff);
        let loss = lpips + recons;
        if step == 0 {
            initial_loss = loss;
        }
        if !loss.is_finite() || (step > 0 && loss > 10.0 * initial_loss) {
            return Err(Error::PtiDiverged {
                loss,
                initial: initial_loss,
            });
        }
        let g_xhat = &g_lpips + &diff.mapv(|v| v / recons.max(1e-12));
        let grads = vec![rtape.backward(&g_xhat)];
        nn::zero_grads(&mut tuned);
        tuned.synthesis_backward(&synth_tape, &grads, true)?;
        adam.step(&mut tuned);
        final_loss = loss;
    }
    Ok(PivotalTuneResult {
        generator: tuned,
        pivot,
        initial_loss,
        final_loss,
    })
}

/// L2 distance between an image and its reconstruction through the given
/// generator at the pivot latent (the quantity pivotal tuning minimizes,
/// without the perceptual term).
pub fn reconstruction_l2(x: &Image, wp: &WPlusLatent, generator: &Generator) -> Result<f64> {
    let mpi = generator.synthesize_mpi(wp)?;
    let x_hat = render_reference(&mpi)?;
    Ok(l2_norm(&(x - &x_hat)))
}
