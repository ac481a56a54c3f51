//! Minimal neural-net toolkit: layers with hand-written forward/backward
//! passes, a named-parameter visitor, and Adam.
//!
//! Everything is `f64` and single-threaded. There is no autograd graph —
//! each network wires its own backward pass in reverse layer order, which
//! keeps every gradient explicit and testable against finite differences.
//! Layers own their parameters *and* their gradient accumulators; an
//! optimizer walks them through the [`ParamSet`] visitor, which yields
//! parameters in a fixed, name-stable order so training is bit-reproducible.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Negative-side slope shared by every LeakyReLU in the project.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Mutable view of one named parameter and its gradient accumulator.
pub struct ParamRef<'a> {
    pub value: ArrayViewMutD<'a, f64>,
    pub grad: ArrayViewMutD<'a, f64>,
}

/// A network exposes its parameters by visiting them in a fixed order under
/// stable names ("mapping.fc0.w", "block2.conv.b", ...).
pub trait ParamSet {
    fn visit(&mut self, f: &mut dyn FnMut(&str, ParamRef<'_>));
}

/// Sets every gradient accumulator to zero.
pub fn zero_grads(net: &mut dyn ParamSet) {
    net.visit(&mut |_, mut p| p.grad.fill(0.0));
}

/// Total number of scalar parameters.
pub fn param_count(net: &mut dyn ParamSet) -> usize {
    let mut n = 0;
    net.visit(&mut |_, p| n += p.value.len());
    n
}

/// Euclidean norm over all gradient accumulators.
pub fn grad_norm(net: &mut dyn ParamSet) -> f64 {
    let mut s = 0.0;
    net.visit(&mut |_, p| s += p.grad.iter().map(|g| g * g).sum::<f64>());
    s.sqrt()
}

/// Snapshots all parameters into a name → array map (for checkpoints).
pub fn params_to_map(net: &mut dyn ParamSet) -> BTreeMap<String, ArrayD<f64>> {
    let mut map = BTreeMap::new();
    net.visit(&mut |name, p| {
        map.insert(name.to_string(), p.value.to_owned());
    });
    map
}

/// Restores parameters from a map; every parameter must be present with the
/// right shape, and no extra keys may remain.
pub fn load_params_from_map(net: &mut dyn ParamSet, map: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    let mut missing = Vec::new();
    let mut seen = 0usize;
    let mut shape_err = None;
    net.visit(&mut |name, mut p| {
        match map.get(name) {
            Some(arr) => {
                seen += 1;
                if arr.shape() != p.value.shape() {
                    if shape_err.is_none() {
                        shape_err = Some(format!(
                            "parameter {name}: stored shape {:?}, expected {:?}",
                            arr.shape(),
                            p.value.shape()
                        ));
                    }
                } else {
                    p.value.assign(arr);
                }
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some(msg) = shape_err {
        return Err(Error::Data(msg));
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("checkpoint missing parameters: {missing:?}")));
    }
    if seen != map.len() {
        let mut names = std::collections::BTreeSet::new();
        net.visit(&mut |name, _| {
            names.insert(name.to_string());
        });
        let extra: Vec<&String> = map.keys().filter(|k| !names.contains(*k)).collect();
        return Err(Error::Data(format!("checkpoint has unknown parameters: {extra:?}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with per-parameter first/second moment state keyed by name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Moment state for checkpointing: `(t, first moments, second moments)`.
    pub fn export_state(&self) -> (u64, &BTreeMap<String, ArrayD<f64>>, &BTreeMap<String, ArrayD<f64>>) {
        (self.t, &self.m, &self.v)
    }

    /// Restores state captured by [`Adam::export_state`].
    pub fn import_state(&mut self, t: u64, m: BTreeMap<String, ArrayD<f64>>, v: BTreeMap<String, ArrayD<f64>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }

    /// One update from the currently accumulated gradients.
    pub fn step(&mut self, net: &mut dyn ParamSet) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        net.visit(&mut |name, mut p| {
            let ms = m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.shape()));
            let vs = v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.shape()));
            for ((pv, g), (mi, vi)) in p
                .value
                .iter_mut()
                .zip(p.grad.iter())
                .zip(ms.iter_mut().zip(vs.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        });
    }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Fully connected layer, `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

impl Dense {
    /// He-normal initialization (gain for LeakyReLU fan-in).
    pub fn new(rng: &mut impl Rng, in_f: usize, out_f: usize) -> Self {
        let std = (2.0 / in_f as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid normal");
        let w = Array2::from_shape_fn((out_f, in_f), |_| normal.sample(rng));
        Dense {
            w,
            b: Array1::zeros(out_f),
            gw: Array2::zeros((out_f, in_f)),
            gb: Array1::zeros(out_f),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Linear part only (no bias) — the tangent map for JVPs.
    pub fn forward_linear(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t())
    }

    /// Backpropagates `gy`; accumulates parameter gradients against the
    /// provided input (the primal input for ordinary backprop, the tangent
    /// input when differentiating a JVP) unless `accumulate` is false.
    pub fn backward(&mut self, x: &Array2<f64>, gy: &Array2<f64>, accumulate: bool) -> Array2<f64> {
        if accumulate {
            self.gw += &gy.t().dot(x);
            self.gb += &gy.sum_axis(Axis(0));
        }
        gy.dot(&self.w)
    }

    /// Backward for the bias-free tangent map [`Dense::forward_linear`]:
    /// the bias never enters a JVP, so only the weight gradient accumulates.
    pub fn backward_linear(&mut self, x: &Array2<f64>, gy: &Array2<f64>, accumulate: bool) -> Array2<f64> {
        if accumulate {
            self.gw += &gy.t().dot(x);
        }
        gy.dot(&self.w)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        f(
            &format!("{prefix}.w"),
            ParamRef {
                value: self.w.view_mut().into_dyn(),
                grad: self.gw.view_mut().into_dyn(),
            },
        );
        f(
            &format!("{prefix}.b"),
            ParamRef {
                value: self.b.view_mut().into_dyn(),
                grad: self.gb.view_mut().into_dyn(),
            },
        );
    }
}

// ---------------------------------------------------------------------------
// Conv2d (im2col)
// ---------------------------------------------------------------------------

/// 2D convolution over `(B, C, H, W)` tensors via im2col + matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub gw: Array4<f64>,
    pub gb: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(rng: &mut impl Rng, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid normal");
        let w = Array4::from_shape_fn((out_c, in_c, k, k), |_| normal.sample(rng));
        Conv2d {
            w,
            b: Array1::zeros(out_c),
            gw: Array4::zeros((out_c, in_c, k, k)),
            gb: Array1::zeros(out_c),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.shape()[2];
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let y = self.forward_linear(x);
        let mut y = y;
        for (o, bo) in self.b.iter().enumerate() {
            y.index_axis_mut(Axis(1), o).mapv_inplace(|v| v + bo);
        }
        y
    }

    /// Convolution without the bias — also the JVP tangent map.
    pub fn forward_linear(&self, x: &Array4<f64>) -> Array4<f64> {
        let (bsz, _, h, w) = dims4(x);
        let (oh, ow) = self.out_hw(h, w);
        let k = self.w.shape()[2];
        let in_c = self.w.shape()[1];
        let out_c = self.w.shape()[0];
        let cols = im2col(x, k, self.stride, self.pad);
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous conv weights");
        let y_mat = cols.dot(&w_mat.t()); // (B*oh*ow, out_c)
        let mut y = Array4::<f64>::zeros((bsz, out_c, oh, ow));
        for b in 0..bsz {
            for i in 0..oh {
                for j in 0..ow {
                    let row = (b * oh + i) * ow + j;
                    for o in 0..out_c {
                        y[[b, o, i, j]] = y_mat[[row, o]];
                    }
                }
            }
        }
        y
    }

    /// Backpropagates `gy` to the input; accumulates `gw`/`gb` against `x`
    /// when `accumulate` is set (see [`Dense::backward`] for the convention).
    pub fn backward(&mut self, x: &Array4<f64>, gy: &Array4<f64>, accumulate: bool) -> Array4<f64> {
        let (bsz, _, h, w) = dims4(x);
        let (oh, ow) = self.out_hw(h, w);
        let k = self.w.shape()[2];
        let in_c = self.w.shape()[1];
        let out_c = self.w.shape()[0];
        let mut gy_mat = Array2::<f64>::zeros((bsz * oh * ow, out_c));
        for b in 0..bsz {
            for i in 0..oh {
                for j in 0..ow {
                    let row = (b * oh + i) * ow + j;
                    for o in 0..out_c {
                        gy_mat[[row, o]] = gy[[b, o, i, j]];
                    }
                }
            }
        }
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous conv weights");
        if accumulate {
            let cols = im2col(x, k, self.stride, self.pad);
            let gw_mat = gy_mat.t().dot(&cols); // (out_c, C*k*k)
            let gw4 = gw_mat
                .into_shape_with_order((out_c, in_c, k, k))
                .expect("gw reshape");
            self.gw += &gw4;
            for o in 0..out_c {
                self.gb[o] += gy.index_axis(Axis(1), o).sum();
            }
        }
        let gcols = gy_mat.dot(&w_mat); // (B*oh*ow, C*k*k)
        col2im(&gcols, bsz, in_c, h, w, k, self.stride, self.pad)
    }

    /// Backward for the bias-free tangent map [`Conv2d::forward_linear`]:
    /// only the kernel gradient accumulates (the bias never enters a JVP).
    pub fn backward_linear(&mut self, x: &Array4<f64>, gy: &Array4<f64>, accumulate: bool) -> Array4<f64> {
        let (bsz, _, h, w) = dims4(x);
        let (oh, ow) = self.out_hw(h, w);
        let k = self.w.shape()[2];
        let in_c = self.w.shape()[1];
        let out_c = self.w.shape()[0];
        let mut gy_mat = Array2::<f64>::zeros((bsz * oh * ow, out_c));
        for b in 0..bsz {
            for i in 0..oh {
                for j in 0..ow {
                    let row = (b * oh + i) * ow + j;
                    for o in 0..out_c {
                        gy_mat[[row, o]] = gy[[b, o, i, j]];
                    }
                }
            }
        }
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous conv weights");
        if accumulate {
            let cols = im2col(x, k, self.stride, self.pad);
            let gw_mat = gy_mat.t().dot(&cols);
            let gw4 = gw_mat
                .into_shape_with_order((out_c, in_c, k, k))
                .expect("gw reshape");
            self.gw += &gw4;
        }
        let gcols = gy_mat.dot(&w_mat);
        col2im(&gcols, bsz, in_c, h, w, k, self.stride, self.pad)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        f(
            &format!("{prefix}.w"),
            ParamRef {
                value: self.w.view_mut().into_dyn(),
                grad: self.gw.view_mut().into_dyn(),
            },
        );
        f(
            &format!("{prefix}.b"),
            ParamRef {
                value: self.b.view_mut().into_dyn(),
                grad: self.gb.view_mut().into_dyn(),
            },
        );
    }
}

fn dims4(x: &Array4<f64>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

/// Unrolls `(B, C, H, W)` into `(B·oh·ow, C·k·k)` patch rows (zero padding).
pub fn im2col(x: &Array4<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (bsz, c, h, w) = dims4(x);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<f64>::zeros((bsz * oh * ow, c * k * k));
    for b in 0..bsz {
        for i in 0..oh {
            for j in 0..ow {
                let row = (b * oh + i) * ow + j;
                for ci in 0..c {
                    for ki in 0..k {
                        let y = (i * stride + ki) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let xx = (j * stride + kj) as isize - pad as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            cols[[row, (ci * k + ki) * k + kj]] = x[[b, ci, y as usize, xx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the input grid.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &Array2<f64>,
    bsz: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut x = Array4::<f64>::zeros((bsz, c, h, w));
    for b in 0..bsz {
        for i in 0..oh {
            for j in 0..ow {
                let row = (b * oh + i) * ow + j;
                for ci in 0..c {
                    for ki in 0..k {
                        let y = (i * stride + ki) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let xx = (j * stride + kj) as isize - pad as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            x[[b, ci, y as usize, xx as usize]] += cols[[row, (ci * k + ki) * k + kj]];
                        }
                    }
                }
            }
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities and resampling
// ---------------------------------------------------------------------------

/// LeakyReLU with slope [`LEAKY_SLOPE`].
pub fn leaky_relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Per-element derivative factor of [`leaky_relu`] at the primal input —
/// doubles as the frozen mask for JVP passes.
pub fn leaky_mask<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE })
}

pub fn sigmoid<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward through sigmoid given its *output* `y`: `gy · y · (1−y)`.
pub fn sigmoid_backward<D: ndarray::Dimension>(
    y: &ndarray::Array<f64, D>,
    gy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut g = gy.clone();
    g.zip_mut_with(y, |gv, yv| *gv *= yv * (1.0 - yv));
    g
}

/// Numerically stable `ln(1 + eˣ)`.
/// Per-row normalization to unit RMS, `y = x / sqrt(mean(x²) + ε)`.
pub fn pixel_norm(x: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let r = (row.iter().map(|v| v * v).sum::<f64>() / d + 1e-8).sqrt();
        row.mapv_inplace(|v| v / r);
    }
    y
}

/// Backward of [`pixel_norm`]: `gx = (g − y·mean(g⊙y)) / sqrt(mean(x²)+ε)`.
pub fn pixel_norm_backward(x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut gx = Array2::<f64>::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let msq = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = (msq + 1e-8).sqrt();
        let dot: f64 = (0..x.ncols()).map(|j| gy[[i, j]] * x[[i, j]]).sum();
        for j in 0..x.ncols() {
            gx[[i, j]] = gy[[i, j]] / r - x[[i, j]] * dot / (d * r * r * r);
        }
    }
    gx
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-(x.abs())).exp().ln_1p()
}

/// Nearest-neighbor 2x upsample of `(B, C, H, W)`.
pub fn upsample2x(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = dims4(x);
    let mut y = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[bi, ci, i, j]];
                    y[[bi, ci, 2 * i, 2 * j]] = v;
                    y[[bi, ci, 2 * i, 2 * j + 1]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

/// Backward of [`upsample2x`]: sums each 2x2 block.
pub fn upsample2x_backward(gy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = dims4(gy);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    gx[[bi, ci, i, j]] = gy[[bi, ci, 2 * i, 2 * j]]
                        + gy[[bi, ci, 2 * i, 2 * j + 1]]
                        + gy[[bi, ci, 2 * i + 1, 2 * j]]
                        + gy[[bi, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// FiLM modulation
// ---------------------------------------------------------------------------

/// Feature-wise affine modulation: `y[b,c] = x[b,c]·(1 + γ[b,c]) + β[b,c]`
/// broadcast over the spatial grid. γ and β come from a [`Dense`] on the
/// style vector; this is the functional core with its three gradients.
pub fn film_forward(x: &Array4<f64>, gamma: &Array2<f64>, beta: &Array2<f64>) -> Array4<f64> {
    let (b, c, h, w) = dims4(x);
    let mut y = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let g = 1.0 + gamma[[bi, ci]];
            let be = beta[[bi, ci]];
            for i in 0..h {
                for j in 0..w {
                    y[[bi, ci, i, j]] = x[[bi, ci, i, j]] * g + be;
                }
            }
        }
    }
    y
}

/// Returns `(gx, ggamma, gbeta)`.
pub fn film_backward(
    x: &Array4<f64>,
    gamma: &Array2<f64>,
    gy: &Array4<f64>,
) -> (Array4<f64>, Array2<f64>, Array2<f64>) {
    let (b, c, h, w) = dims4(x);
    let mut gx = Array4::<f64>::zeros((b, c, h, w));
    let mut ggamma = Array2::<f64>::zeros((b, c));
    let mut gbeta = Array2::<f64>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let g = 1.0 + gamma[[bi, ci]];
            let mut sg = 0.0;
            let mut sb = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let gv = gy[[bi, ci, i, j]];
                    gx[[bi, ci, i, j]] = gv * g;
                    sg += gv * x[[bi, ci, i, j]];
                    sb += gv;
                }
            }
            ggamma[[bi, ci]] = sg;
            gbeta[[bi, ci]] = sb;
        }
    }
    (gx, ggamma, gbeta)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Adds `delta` to the `flat_index`-th scalar parameter (flat across the
/// visit order). Returns false if the index is out of range.
pub fn perturb_param(net: &mut dyn ParamSet, flat_index: usize, delta: f64) -> bool {
    let mut offset = 0usize;
    let mut hit = false;
    net.visit(&mut |_, mut p| {
        let len = p.value.len();
        if !hit && flat_index >= offset && flat_index < offset + len {
            let local = flat_index - offset;
            if let Some(v) = p.value.iter_mut().nth(local) {
                *v += delta;
                hit = true;
            }
        }
        offset += len;
    });
    hit
}

/// Reads the analytic gradient of the `flat_index`-th scalar parameter.
pub fn read_grad(net: &mut dyn ParamSet, flat_index: usize) -> Option<f64> {
    let mut offset = 0usize;
    let mut out = None;
    net.visit(&mut |_, p| {
        let len = p.grad.len();
        if out.is_none() && flat_index >= offset && flat_index < offset + len {
            out = p.grad.iter().nth(flat_index - offset).copied();
        }
        offset += len;
    });
    out
}

/// Central-difference gradient check.
///
/// `compute_grads` must zero the accumulators, run forward + backward, and
/// return the loss; `loss_only` must run the same forward and return the
/// loss without touching gradients. Returns the maximum relative error over
/// the probed flat parameter indices, where
/// `rel = |fd − analytic| / max(1, |fd|, |analytic|)`.
pub fn gradient_check<N: ParamSet>(
    net: &mut N,
    mut compute_grads: impl FnMut(&mut N) -> f64,
    mut loss_only: impl FnMut(&mut N) -> f64,
    indices: &[usize],
    eps: f64,
) -> f64 {
    let _ = compute_grads(net);
    let analytic: Vec<f64> = indices
        .iter()
        .map(|&k| read_grad(net, k).expect("probe index in range"))
        .collect();
    let mut worst = 0.0f64;
    for (&k, &an) in indices.iter().zip(&analytic) {
        assert!(perturb_param(net, k, eps));
        let lp = loss_only(net);
        assert!(perturb_param(net, k, -2.0 * eps));
        let lm = loss_only(net);
        assert!(perturb_param(net, k, eps));
        let fd = (lp - lm) / (2.0 * eps);
        let rel = (fd - an).abs() / 1.0_f64.max(fd.abs()).max(an.abs());
        worst = worst.max(rel);
    }
    worst
}
