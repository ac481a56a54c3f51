//! Differentiable multi-plane-image rendering.
//!
//! An MPI is a stack of fronto-parallel planes in the reference camera's
//! frame: one shared RGB texture plus a per-plane alpha map, both on the
//! reference pixel grid, at plane depths strictly increasing front-to-back.
//! Rendering a novel view warps every plane by its induced homography and
//! over-composites front to back:
//!
//! ```text
//! rgb = Σᵢ cᵢ·αᵢ'·Πⱼ<ᵢ(1−αⱼ')
//! ```
//!
//! Depth is composited with the same weights over the plane depths, and the
//! background (opaque, default black) fills whatever transmittance is left.
//! [`render_with_tape`] additionally records what the backward pass needs so
//! GAN and encoder training can push image-space gradients through warping
//! and compositing analytically — no division by alphas anywhere, so fully
//! transparent and fully opaque planes are safe.

use crate::camera::{plane_homography_between, Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::imgmath::{sample_bilinear, scatter_bilinear, Image};
use crate::linalg::inv3;
use ndarray::{Array1, Array2, Array3, Axis};

/// N fronto-parallel RGBA planes with a shared color texture.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPlaneImage {
    /// Shared RGB texture, `(3, H, W)`, values in `[0, 1]`.
    pub color: Image,
    /// Per-plane alpha maps, `(N, H, W)`, values in `[0, 1]`.
    pub alphas: Array3<f64>,
    /// Plane depths in scene units, strictly increasing front-to-back.
    pub depths: Array1<f64>,
}

impl MultiPlaneImage {
    pub fn new(color: Image, alphas: Array3<f64>, depths: Array1<f64>) -> Result<Self> {
        if color.shape()[0] != 3 {
            return Err(Error::shape("mpi color", "(3, H, W)", format!("{:?}", color.shape())));
        }
        let (h, w) = (color.shape()[1], color.shape()[2]);
        if alphas.shape()[1] != h || alphas.shape()[2] != w {
            return Err(Error::shape(
                "mpi alphas",
                format!("(N, {h}, {w})"),
                format!("{:?}", alphas.shape()),
            ));
        }
        if alphas.shape()[0] != depths.len() || depths.is_empty() {
            return Err(Error::shape(
                "mpi depths",
                format!("{} entries", alphas.shape()[0]),
                format!("{}", depths.len()),
            ));
        }
        if color.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("mpi color outside [0,1]".into()));
        }
        if alphas.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("mpi alpha outside [0,1]".into()));
        }
        if depths.iter().any(|d| *d <= 0.0) || depths.windows(2).into_iter().any(|p| p[1] <= p[0]) {
            return Err(Error::Domain(
                "mpi depths must be positive and strictly increasing".into(),
            ));
        }
        Ok(MultiPlaneImage { color, alphas, depths })
    }

    pub fn n_planes(&self) -> usize {
        self.depths.len()
    }

    pub fn height(&self) -> usize {
        self.color.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.color.shape()[2]
    }

    pub fn d_near(&self) -> f64 {
        self.depths[0]
    }

    pub fn d_far(&self) -> f64 {
        self.depths[self.depths.len() - 1]
    }

    /// Depth of the inverse-depth midpoint of the stack — the natural orbit
    /// pivot distance.
    pub fn pivot_depth(&self) -> f64 {
        2.0 / (1.0 / self.d_near() + 1.0 / self.d_far())
    }

    /// Native intrinsics: reference pinhole on the MPI's own pixel grid.
    pub fn native_intrinsics(&self) -> Intrinsics {
        Intrinsics::for_dims(self.height(), self.width())
    }
}

/// `n` plane depths uniformly spaced in inverse depth over `[d_near, d_far]`.
pub fn plane_depths(n: usize, d_near: f64, d_far: f64) -> Result<Array1<f64>> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 planes, got {n}")));
    }
    if !(0.0 < d_near && d_near < d_far) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < d_near < d_far, got {d_near} and {d_far}"
        )));
    }
    let inv_near = 1.0 / d_near;
    let inv_far = 1.0 / d_far;
    Ok(Array1::from_iter((0..n).map(|i| {
        let s = i as f64 / (n - 1) as f64;
        1.0 / (inv_near + s * (inv_far - inv_near))
    })))
}

/// One rendered view of an MPI.
#[derive(Debug, Clone)]
pub struct RenderedView {
    /// Composited RGB, `(3, H, W)` in `[0, 1]`.
    pub rgb: Image,
    /// Alpha-weighted mean plane depth; `d_far` where nothing was hit.
    pub depth: Array2<f64>,
    /// Total plane coverage, in `[0, 1]`.
    pub accumulated_alpha: Array2<f64>,
}

/// Per-plane warped textures plus the source coordinates that produced them.
struct WarpedPlanes {
    /// Per plane: alpha map in the target raster.
    alphas: Vec<Array2<f64>>,
    /// Per plane: color in the target raster.
    colors: Vec<Image>,
    /// Per plane: source-pixel x and y for every target pixel.
    src: Vec<(Array2<f64>, Array2<f64>)>,
}

fn warp_planes(mpi: &MultiPlaneImage, cam: &Camera, out_h: usize, out_w: usize) -> Result<WarpedPlanes> {
    let reference = mpi.native_intrinsics();
    let n = mpi.n_planes();
    let mut alphas = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut src = Vec::with_capacity(n);
    for i in 0..n {
        let h = plane_homography_between(reference, cam, mpi.depths[i])?;
        let h_inv = inv3(&h).ok_or_else(|| Error::Domain("degenerate plane homography".into()))?;
        let mut sx = Array2::<f64>::zeros((out_h, out_w));
        let mut sy = Array2::<f64>::zeros((out_h, out_w));
        let mut a = Array2::<f64>::zeros((out_h, out_w));
        let mut c = Array3::<f64>::zeros((3, out_h, out_w));
        let alpha_plane = mpi.alphas.index_axis(Axis(0), i);
        for y in 0..out_h {
            for x in 0..out_w {
                let px = h_inv[[0, 0]] * x as f64 + h_inv[[0, 1]] * y as f64 + h_inv[[0, 2]];
                let py = h_inv[[1, 0]] * x as f64 + h_inv[[1, 1]] * y as f64 + h_inv[[1, 2]];
                let pw = h_inv[[2, 0]] * x as f64 + h_inv[[2, 1]] * y as f64 + h_inv[[2, 2]];
                if pw.abs() < 1e-12 {
                    // point at infinity: leave alpha 0, park the source
                    // coordinate far out of bounds so scatter is a no-op
                    sx[[y, x]] = -1e9;
                    sy[[y, x]] = -1e9;
                    continue;
                }
                let u = px / pw;
                let v = py / pw;
                sx[[y, x]] = u;
                sy[[y, x]] = v;
                a[[y, x]] = sample_bilinear(&alpha_plane, u, v);
                for ch in 0..3 {
                    c[[ch, y, x]] = sample_bilinear(&mpi.color.index_axis(Axis(0), ch), u, v);
                }
            }
        }
        alphas.push(a);
        colors.push(c);
        src.push((sx, sy));
    }
    Ok(WarpedPlanes { alphas, colors, src })
}

/// Renders at the MPI's native resolution with an opaque black background.
pub fn render(mpi: &MultiPlaneImage, cam: &Camera) -> Result<RenderedView> {
    render_sized(mpi, cam, mpi.height(), mpi.width(), [0.0; 3])
}

/// Renders into an `out_h x out_w` raster. `cam.intrinsics` must describe
/// that raster (see [`Intrinsics::scaled`] for supersampling).
pub fn render_sized(
    mpi: &MultiPlaneImage,
    cam: &Camera,
    out_h: usize,
    out_w: usize,
    background: [f64; 3],
) -> Result<RenderedView> {
    let warped = warp_planes(mpi, cam, out_h, out_w)?;
    Ok(composite_front_to_back(mpi, &warped, out_h, out_w, background))
}

fn composite_front_to_back(
    mpi: &MultiPlaneImage,
    warped: &WarpedPlanes,
    out_h: usize,
    out_w: usize,
    background: [f64; 3],
) -> RenderedView {
    let mut rgb = Array3::<f64>::zeros((3, out_h, out_w));
    let mut acc = Array2::<f64>::zeros((out_h, out_w));
    let mut depth_num = Array2::<f64>::zeros((out_h, out_w));
    let mut trans = Array2::<f64>::from_elem((out_h, out_w), 1.0);
    for i in 0..mpi.n_planes() {
        let a = &warped.alphas[i];
        let c = &warped.colors[i];
        let d = mpi.depths[i];
        for y in 0..out_h {
            for x in 0..out_w {
                let wgt = a[[y, x]] * trans[[y, x]];
                for ch in 0..3 {
                    rgb[[ch, y, x]] += c[[ch, y, x]] * wgt;
                }
                acc[[y, x]] += wgt;
                depth_num[[y, x]] += d * wgt;
                trans[[y, x]] *= 1.0 - a[[y, x]];
            }
        }
    }
    let d_far = mpi.d_far();
    let mut depth = Array2::<f64>::zeros((out_h, out_w));
    for y in 0..out_h {
        for x in 0..out_w {
            for ch in 0..3 {
                rgb[[ch, y, x]] += background[ch] * trans[[y, x]];
            }
            depth[[y, x]] = if acc[[y, x]] > 1e-12 {
                depth_num[[y, x]] / acc[[y, x]]
            } else {
                d_far
            };
        }
    }
    RenderedView {
        rgb,
        depth,
        accumulated_alpha: acc,
    }
}

/// Independent compositing route for verification: back-to-front
/// premultiplied over, `out ← cᵢ·αᵢ + (1−αᵢ)·out`, seeded with the
/// background. Must agree with the front-to-back sum within float error.
pub fn render_back_to_front(
    mpi: &MultiPlaneImage,
    cam: &Camera,
    background: [f64; 3],
) -> Result<Image> {
    let (out_h, out_w) = (mpi.height(), mpi.width());
    let warped = warp_planes(mpi, cam, out_h, out_w)?;
    let mut out = Array3::<f64>::zeros((3, out_h, out_w));
    for ch in 0..3 {
        out.index_axis_mut(Axis(0), ch).fill(background[ch]);
    }
    for i in (0..mpi.n_planes()).rev() {
        let a = &warped.alphas[i];
        let c = &warped.colors[i];
        for y in 0..out_h {
            for x in 0..out_w {
                let av = a[[y, x]];
                for ch in 0..3 {
                    out[[ch, y, x]] = c[[ch, y, x]] * av + (1.0 - av) * out[[ch, y, x]];
                }
            }
        }
    }
    Ok(out)
}

/// Forward render plus everything the analytic backward pass needs.
pub struct RenderTape {
    out_h: usize,
    out_w: usize,
    mpi_h: usize,
    mpi_w: usize,
    depths: Array1<f64>,
    warped: WarpedPlanes,
    /// Transmittance *in front of* each plane, per plane.
    trans: Vec<Array2<f64>>,
    background: [f64; 3],
}

/// Gradients of a scalar loss with respect to the MPI's textures.
pub struct MpiGrads {
    /// `(3, H, W)` gradient for the shared color texture.
    pub color: Image,
    /// `(N, H, W)` gradient for the per-plane alphas.
    pub alphas: Array3<f64>,
}

/// Renders and records intermediates for [`RenderTape::backward`].
pub fn render_with_tape(
    mpi: &MultiPlaneImage,
    cam: &Camera,
    background: [f64; 3],
) -> Result<(RenderedView, RenderTape)> {
    let (out_h, out_w) = (mpi.height(), mpi.width());
    let warped = warp_planes(mpi, cam, out_h, out_w)?;
    // per-plane transmittance prefix
    let mut trans = Vec::with_capacity(mpi.n_planes());
    let mut t = Array2::<f64>::from_elem((out_h, out_w), 1.0);
    for i in 0..mpi.n_planes() {
        trans.push(t.clone());
        t = &t * &warped.alphas[i].mapv(|a| 1.0 - a);
    }
    let view = composite_front_to_back(mpi, &warped, out_h, out_w, background);
    let tape = RenderTape {
        out_h,
        out_w,
        mpi_h: mpi.height(),
        mpi_w: mpi.width(),
        depths: mpi.depths.clone(),
        warped,
        trans,
        background,
    };
    Ok((view, tape))
}

impl RenderTape {
    /// Pushes `d loss / d rgb` back to the MPI textures.
    ///
    /// Per pixel, with transmittance `Tᵢ = Πⱼ<ᵢ(1−αⱼ)` and the back-to-front
    /// partial composite `Rᵢ₊₁` (what is visible behind plane `i`):
    ///
    /// ```text
    /// ∂rgb/∂cᵢ = Tᵢ·αᵢ          ∂rgb/∂αᵢ = Tᵢ·(cᵢ − Rᵢ₊₁)
    /// ```
    ///
    /// Both are division-free, so planes with `α = 0` or `α = 1` pose no
    /// numerical hazard. Gradients then scatter through the bilinear warp
    /// taps back onto the MPI's native grid.
    pub fn backward(&self, grad_rgb: &Image) -> MpiGrads {
        assert_eq!(
            grad_rgb.shape(),
            [3, self.out_h, self.out_w],
            "grad_rgb shape mismatch"
        );
        let n = self.depths.len();
        let mut grad_color = Array3::<f64>::zeros((3, self.mpi_h, self.mpi_w));
        let mut grad_alphas = Array3::<f64>::zeros((n, self.mpi_h, self.mpi_w));
        // r_next[ch] = what composites behind the current plane
        let mut r_next = Array3::<f64>::zeros((3, self.out_h, self.out_w));
        for ch in 0..3 {
            r_next.index_axis_mut(Axis(0), ch).fill(self.background[ch]);
        }
        for i in (0..n).rev() {
            let a = &self.warped.alphas[i];
            let c = &self.warped.colors[i];
            let t = &self.trans[i];
            let (sx, sy) = &self.warped.src[i];
            let mut ga_plane = grad_alphas.index_axis_mut(Axis(0), i);
            for y in 0..self.out_h {
                for x in 0..self.out_w {
                    let av = a[[y, x]];
                    let tv = t[[y, x]];
                    let mut ga = 0.0;
                    for ch in 0..3 {
                        let g = grad_rgb[[ch, y, x]];
                        let cv = c[[ch, y, x]];
                        let rv = r_next[[ch, y, x]];
                        // color gradient at the warped tap
                        let gc = g * av * tv;
                        scatter_bilinear(
                            &mut grad_color.index_axis_mut(Axis(0), ch),
                            sx[[y, x]],
                            sy[[y, x]],
                            gc,
                        );
                        ga += g * tv * (cv - rv);
                        // roll the behind-composite forward (to the next
                        // nearer plane)
                        r_next[[ch, y, x]] = cv * av + (1.0 - av) * rv;
                    }
                    scatter_bilinear(&mut ga_plane, sx[[y, x]], sy[[y, x]], ga);
                }
            }
        }
        MpiGrads {
            color: grad_color,
            alphas: grad_alphas,
        }
    }
}

/// Renders `n_views` cameras at uniformly spaced yaw in
/// `[-yaw_range/2, +yaw_range/2]` degrees, orbiting the inverse-depth
/// midpoint of the stack at fixed distance. A single view renders frontal.
pub fn render_orbit(mpi: &MultiPlaneImage, n_views: usize, yaw_range_deg: f64) -> Result<Vec<RenderedView>> {
    if n_views == 0 {
        return Err(Error::InvalidConfig("orbit needs at least one view".into()));
    }
    let intr = mpi.native_intrinsics();
    let pivot = mpi.pivot_depth();
    let mut views = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let yaw = if n_views == 1 {
            0.0
        } else {
            -yaw_range_deg / 2.0 + yaw_range_deg * i as f64 / (n_views - 1) as f64
        };
        let cam = Camera::orbit_deg(intr, pivot, yaw, 0.0)?;
        views.push(render(mpi, &cam)?);
    }
    Ok(views)
}

/// Yaw angles used by [`render_orbit`], exposed for reporting.
pub fn orbit_yaws(n_views: usize, yaw_range_deg: f64) -> Vec<f64> {
    (0..n_views)
        .map(|i| {
            if n_views == 1 {
                0.0
            } else {
                -yaw_range_deg / 2.0 + yaw_range_deg * i as f64 / (n_views - 1) as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgmath::{l1_diff, linf_diff, warp_image};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn const_plane(h: usize, w: usize, v: f64) -> Array2<f64> {
        Array2::from_elem((h, w), v)
    }

    fn mpi_from_parts(colors: Image, alpha_planes: Vec<Array2<f64>>, depths: Vec<f64>) -> MultiPlaneImage {
        let n = alpha_planes.len();
        let (h, w) = (colors.shape()[1], colors.shape()[2]);
        let mut alphas = Array3::<f64>::zeros((n, h, w));
        for (i, p) in alpha_planes.into_iter().enumerate() {
            alphas.index_axis_mut(Axis(0), i).assign(&p);
        }
        MultiPlaneImage::new(colors, alphas, Array1::from_vec(depths)).unwrap()
    }

    fn random_mpi(rng: &mut ChaCha12Rng, n: usize, h: usize, w: usize) -> MultiPlaneImage {
        let color = Array3::from_shape_fn((3, h, w), |_| rng.gen::<f64>());
        let alphas = Array3::from_shape_fn((n, h, w), |_| rng.gen::<f64>());
        let depths = plane_depths(n, 4.0, 12.0).unwrap();
        MultiPlaneImage::new(color, alphas, depths).unwrap()
    }

    #[test]
    fn plane_depths_increase_in_inverse_depth() {
        let d = plane_depths(5, 4.0, 12.0).unwrap();
        assert!((d[0] - 4.0).abs() < 1e-12);
        assert!((d[4] - 12.0).abs() < 1e-12);
        let inv: Vec<f64> = d.iter().map(|x| 1.0 / x).collect();
        let step = inv[1] - inv[0];
        for k in 1..4 {
            assert!((inv[k + 1] - inv[k] - step).abs() < 1e-12);
        }
    }

    #[test]
    fn opaque_single_plane_passes_color_through() {
        let mut color = Array3::<f64>::zeros((3, 4, 4));
        color[[0, 1, 2]] = 0.8;
        color[[2, 3, 0]] = 0.3;
        let mpi = mpi_from_parts(color.clone(), vec![const_plane(4, 4, 1.0)], vec![6.0]);
        let cam = Camera::reference(mpi.native_intrinsics());
        let view = render(&mpi, &cam).unwrap();
        assert!(linf_diff(&view.rgb, &color) < 1e-12);
        assert!(view.accumulated_alpha.iter().all(|a| (a - 1.0).abs() < 1e-12));
        assert!(view.depth.iter().all(|d| (d - 6.0).abs() < 1e-12));
    }

    #[test]
    fn two_plane_blend_matches_hand_compositing() {
        // front alpha 0.5, back alpha 1 -> rgb = 0.5*c + 0.5*c = c when the
        // color texture is shared; weights are 0.5 and 0.5
        let mut color = Array3::<f64>::zeros((3, 2, 2));
        color.fill(0.6);
        let mpi = mpi_from_parts(
            color,
            vec![const_plane(2, 2, 0.5), const_plane(2, 2, 1.0)],
            vec![4.0, 8.0],
        );
        let cam = Camera::reference(mpi.native_intrinsics());
        let view = render(&mpi, &cam).unwrap();
        for v in view.rgb.iter() {
            assert!((v - 0.6).abs() < 1e-12);
        }
        // depth blends the two plane depths evenly: 0.5*4 + 0.5*8 = 6
        for d in view.depth.iter() {
            assert!((d - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn opaque_front_plane_occludes() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut mpi = random_mpi(&mut rng, 4, 6, 6);
        mpi.alphas.index_axis_mut(Axis(0), 0).fill(1.0);
        let cam = Camera::reference(mpi.native_intrinsics());
        let view = render(&mpi, &cam).unwrap();
        // only the front plane contributes
        assert!(linf_diff(&view.rgb, &mpi.color) < 1e-12);
        assert!(view.depth.iter().all(|d| (d - mpi.depths[0]).abs() < 1e-12));
    }

    #[test]
    fn front_to_back_matches_back_to_front() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(2..9);
            let mpi = random_mpi(&mut rng, n, 8, 8);
            let cam = Camera::reference(mpi.native_intrinsics());
            let bg = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let f2b = render_sized(&mpi, &cam, 8, 8, bg).unwrap();
            let b2f = render_back_to_front(&mpi, &cam, bg).unwrap();
            assert!(linf_diff(&f2b.rgb, &b2f) < 1e-6);
        }
    }

    #[test]
    fn energy_bound_holds() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..10 {
            let mpi = random_mpi(&mut rng, 5, 8, 8);
            let cam = Camera::orbit_deg(mpi.native_intrinsics(), mpi.pivot_depth(), 10.0, 3.0).unwrap();
            let view = render(&mpi, &cam).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let acc = view.accumulated_alpha[[y, x]];
                    assert!((-1e-12..=1.0 + 1e-12).contains(&acc));
                    for ch in 0..3 {
                        // black background: rgb bounded by coverage
                        assert!(view.rgb[[ch, y, x]] <= acc + 1e-12);
                    }
                    if acc > 0.0 {
                        assert!(view.depth[[y, x]] >= mpi.d_near() - 1e-9);
                        assert!(view.depth[[y, x]] <= mpi.d_far() + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn warp_equivalence_single_plane() {
        // rendering one plane at a yawed camera should equal warping the
        // frontal render by that plane's homography, away from the border
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let size = 32;
        // smooth texture so bilinear resampling differences stay tiny
        let color = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            0.5 + 0.4 * ((x as f64 / 9.0 + c as f64).sin() * (y as f64 / 7.0).cos())
        });
        let alpha = Array2::from_shape_fn((size, size), |(y, x)| {
            0.5 + 0.45 * ((x as f64 / 5.0).cos() * (y as f64 / 6.0).sin())
        });
        let _ = &mut rng;
        let mpi = mpi_from_parts(color, vec![alpha], vec![8.0]);
        let cam = Camera::orbit_deg(mpi.native_intrinsics(), 8.0, 6.0, 0.0).unwrap();
        let direct = render(&mpi, &cam).unwrap();

        let frontal = render(&mpi, &Camera::reference(mpi.native_intrinsics())).unwrap();
        let h = crate::camera::plane_homography(&cam, 8.0).unwrap();
        let warped = warp_image(&frontal.rgb, &h, size, size).unwrap();

        let margin = 3;
        let mut max_err = 0.0f64;
        for ch in 0..3 {
            for y in margin..size - margin {
                for x in margin..size - margin {
                    max_err = max_err.max((direct.rgb[[ch, y, x]] - warped[[ch, y, x]]).abs());
                }
            }
        }
        assert!(max_err < 2.0 / 255.0, "interior L_inf {max_err}");
    }

    #[test]
    fn resolution_equivariance_within_tolerance() {
        // content must not touch the raster border: out-of-bounds taps are
        // defined as alpha zero, and the two rasters tap the border band
        // differently by construction, so the invariant is about sampling
        // error on interior content
        let size = 16;
        let window = |y: usize, x: usize| {
            let wy = (std::f64::consts::PI * y as f64 / (size - 1) as f64).sin();
            let wx = (std::f64::consts::PI * x as f64 / (size - 1) as f64).sin();
            (wy * wx).powi(2)
        };
        let color = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            0.5 + 0.3 * ((x as f64 / 6.0 + c as f64 * 0.7).sin() + (y as f64 / 5.0).cos()) / 2.0
        });
        let a0 = Array2::from_shape_fn((size, size), |(y, x)| {
            window(y, x) * (0.4 + 0.3 * ((x as f64 / 7.0).sin() * (y as f64 / 4.0).cos()))
        });
        let a1 = Array2::from_shape_fn((size, size), |(y, x)| 0.9 * window(y, x));
        let mpi = mpi_from_parts(color, vec![a0, a1], vec![5.0, 10.0]);
        let intr = mpi.native_intrinsics();
        let cam = Camera::orbit_deg(intr, mpi.pivot_depth(), 8.0, 0.0).unwrap();
        let native = render(&mpi, &cam).unwrap();

        let cam2 = Camera {
            intrinsics: intr.scaled(2.0),
            rotation: cam.rotation.clone(),
            translation: cam.translation.clone(),
        };
        let double = render_sized(&mpi, &cam2, size * 2, size * 2, [0.0; 3]).unwrap();
        let down = crate::imgmath::box_downsample2(&double.rgb);
        assert!(linf_diff(&native.rgb, &down) < 4.0 / 255.0);
    }

    #[test]
    fn orbit_degenerate_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mpi = random_mpi(&mut rng, 3, 8, 8);
        let single = render_orbit(&mpi, 1, 60.0).unwrap();
        let frontal = render(&mpi, &Camera::reference(mpi.native_intrinsics())).unwrap();
        assert!(linf_diff(&single[0].rgb, &frontal.rgb) < 1e-12);

        let triple = render_orbit(&mpi, 3, 0.0).unwrap();
        assert!(linf_diff(&triple[0].rgb, &triple[1].rgb) < 1e-12);
        assert!(linf_diff(&triple[1].rgb, &triple[2].rgb) < 1e-12);
    }

    #[test]
    fn orbit_l1_grows_with_angular_gap() {
        // smooth MPI with real depth structure so views change gradually
        let size = 16;
        let color = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            0.5 + 0.4 * ((x as f64 / 4.0 + c as f64).sin() * (y as f64 / 5.0).cos())
        });
        let a0 = Array2::from_shape_fn((size, size), |(y, x)| {
            let dx = x as f64 - 7.5;
            let dy = y as f64 - 7.5;
            if dx * dx + dy * dy < 16.0 {
                0.9
            } else {
                0.0
            }
        });
        let a1 = const_plane(size, size, 1.0);
        let mpi = mpi_from_parts(color, vec![a0, a1], vec![5.0, 11.0]);
        let views = render_orbit(&mpi, 9, 60.0).unwrap();
        for i in 0..8 {
            assert!(l1_diff(&views[i].rgb, &views[i + 1].rgb) > 0.0);
        }
        // mean L1 between views 1 apart < views 4 apart
        let mut gap1 = 0.0;
        let mut gap4 = 0.0;
        for i in 0..8 {
            gap1 += l1_diff(&views[i].rgb, &views[i + 1].rgb);
        }
        for i in 0..5 {
            gap4 += l1_diff(&views[i].rgb, &views[i + 4].rgb);
        }
        assert!(gap1 / 8.0 < gap4 / 5.0);
    }

    #[test]
    fn tape_backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mpi = random_mpi(&mut rng, 3, 5, 5);
        // clamp away from 0/1 so the +-eps probes stay in the valid domain
        let mpi = MultiPlaneImage::new(
            mpi.color.mapv(|v| 0.1 + 0.8 * v),
            mpi.alphas.mapv(|v| 0.1 + 0.8 * v),
            mpi.depths.clone(),
        )
        .unwrap();
        let cam = Camera::orbit_deg(mpi.native_intrinsics(), mpi.pivot_depth(), 7.0, 2.0).unwrap();
        let bg = [0.2, 0.0, 0.1];
        let (view, tape) = render_with_tape(&mpi, &cam, bg).unwrap();
        // loss = sum of rgb * fixed random weights
        let wgt = Array3::from_shape_fn((3, 5, 5), |_| rng.gen::<f64>() - 0.5);
        let loss = |v: &Image| (v * &wgt).sum();
        let _ = loss(&view.rgb);
        let grads = tape.backward(&wgt);

        let eps = 1e-6;
        // probe a handful of color and alpha entries
        for _ in 0..12 {
            let c = rng.gen_range(0..3);
            let y = rng.gen_range(0..5);
            let x = rng.gen_range(0..5);
            let mut plus = mpi.clone();
            plus.color[[c, y, x]] += eps;
            let mut minus = mpi.clone();
            minus.color[[c, y, x]] -= eps;
            let lp = loss(&render_sized(&plus, &cam, 5, 5, bg).unwrap().rgb);
            let lm = loss(&render_sized(&minus, &cam, 5, 5, bg).unwrap().rgb);
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads.color[[c, y, x]];
            assert!(
                (fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())),
                "color grad at ({c},{y},{x}): fd {fd} vs analytic {an}"
            );
        }
        for _ in 0..12 {
            let p = rng.gen_range(0..3);
            let y = rng.gen_range(0..5);
            let x = rng.gen_range(0..5);
            let mut plus = mpi.clone();
            plus.alphas[[p, y, x]] += eps;
            let mut minus = mpi.clone();
            minus.alphas[[p, y, x]] -= eps;
            let lp = loss(&render_sized(&plus, &cam, 5, 5, bg).unwrap().rgb);
            let lm = loss(&render_sized(&minus, &cam, 5, 5, bg).unwrap().rgb);
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads.alphas[[p, y, x]];
            assert!(
                (fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())),
                "alpha grad at ({p},{y},{x}): fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn invalid_mpis_rejected() {
        let color = Array3::<f64>::zeros((3, 2, 2));
        let alphas = Array3::<f64>::zeros((2, 2, 2));
        // non-increasing depths
        assert!(MultiPlaneImage::new(color.clone(), alphas.clone(), array![5.0, 5.0]).is_err());
        // out-of-range alpha
        let mut bad = alphas.clone();
        bad[[0, 0, 0]] = 1.5;
        assert!(MultiPlaneImage::new(color.clone(), bad, array![4.0, 8.0]).is_err());
        // plane count / depth count mismatch
        assert!(MultiPlaneImage::new(color, alphas, array![4.0, 8.0, 12.0]).is_err());
    }
}
