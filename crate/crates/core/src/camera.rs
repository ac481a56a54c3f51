//! Pinhole camera with an explicit, documented convention.
//!
//! Right-handed coordinates, `x` right, `y` up, and the camera looking down
//! `-z`. The reference camera sits at the origin with identity rotation; the
//! MPI plane stack is perpendicular to its optical axis at `z = -depth`,
//! `depth > 0`. Extrinsics map world to camera as `X_c = R * X_w + t`.
//! A camera-frame point at viewing depth `delta = -z` projects to
//! `u = cx + focal * x / delta`, `v = cy - focal * y / delta`
//! (image rows grow downward, hence the sign on `y`).

use crate::error::{Error, Result};
use crate::linalg::inv3;
use ndarray::{array, Array1, Array2};

/// Pixel-unit pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Default intrinsics for a square render target: focal equal to the
    /// image side, principal point at the raster center.
    pub fn for_size(size: usize) -> Self {
        Intrinsics {
            focal: size as f64,
            cx: (size as f64 - 1.0) / 2.0,
            cy: (size as f64 - 1.0) / 2.0,
        }
    }

    /// Default intrinsics for a possibly non-square target: focal equal to
    /// the image width, principal point at the raster center.
    pub fn for_dims(height: usize, width: usize) -> Self {
        Intrinsics {
            focal: width as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    /// Scales intrinsics for a render target `factor` times larger.
    pub fn scaled(&self, factor: f64) -> Self {
        Intrinsics {
            focal: self.focal * factor,
            // pixel centers shift under resampling: x' = factor*x + (factor-1)/2
            cx: self.cx * factor + (factor - 1.0) / 2.0,
            cy: self.cy * factor + (factor - 1.0) / 2.0,
        }
    }

    /// Projection matrix `K` adapted to the look-down-`-z` convention, such
    /// that `K * X_c` is the homogeneous pixel (divide by the third entry).
    pub fn projection_matrix(&self) -> Array2<f64> {
        array![
            [self.focal, 0.0, -self.cx],
            [0.0, -self.focal, -self.cy],
            [0.0, 0.0, -1.0]
        ]
    }
}

/// Rigid pose plus intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World-to-camera rotation (orthonormal, det +1).
    pub rotation: Array2<f64>,
    /// World-to-camera translation: `X_c = R * X_w + t`.
    pub translation: Array1<f64>,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Array2<f64>, translation: Array1<f64>) -> Result<Self> {
        if rotation.shape() != [3, 3] || translation.len() != 3 {
            return Err(Error::shape(
                "camera pose",
                "3x3 rotation and 3-vector translation",
                format!("{:?} and {}", rotation.shape(), translation.len()),
            ));
        }
        let rtr = rotation.t().dot(&rotation);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rtr[[i, j]] - want).abs() > 1e-9 {
                    return Err(Error::Domain("camera rotation is not orthonormal".into()));
                }
            }
        }
        let det = det3(&rotation);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "camera rotation determinant {det}, expected +1"
            )));
        }
        Ok(Camera {
            intrinsics,
            rotation,
            translation,
        })
    }

    /// The reference camera: identity pose at the origin.
    pub fn reference(intrinsics: Intrinsics) -> Self {
        Camera {
            intrinsics,
            rotation: Array2::eye(3),
            translation: Array1::zeros(3),
        }
    }

    /// Reference camera moved forward (toward the plane stack) by `delta`
    /// scene units.
    pub fn translated_forward(intrinsics: Intrinsics, delta: f64) -> Self {
        Camera {
            intrinsics,
            rotation: Array2::eye(3),
            translation: array![0.0, 0.0, delta],
        }
    }

    /// Camera on an orbit of radius `pivot_depth` around the point
    /// `(0, 0, -pivot_depth)`, looking at it. Zero yaw and pitch reproduce
    /// the reference camera. Angles in radians.
    pub fn orbit(intrinsics: Intrinsics, pivot_depth: f64, yaw: f64, pitch: f64) -> Result<Self> {
        if pivot_depth <= 0.0 {
            return Err(Error::Domain("orbit pivot depth must be positive".into()));
        }
        let pivot = array![0.0, 0.0, -pivot_depth];
        let dir = array![
            yaw.sin() * pitch.cos(),
            pitch.sin(),
            yaw.cos() * pitch.cos()
        ];
        let center = &pivot + &(dir.clone() * pivot_depth);
        // camera-frame axes expressed in world coordinates
        let z_cam = dir;
        let up = array![0.0, 1.0, 0.0];
        let x_cam = cross(&up, &z_cam);
        let nx = x_cam.dot(&x_cam).sqrt();
        if nx < 1e-9 {
            return Err(Error::Domain("orbit pitch too close to +-90 degrees".into()));
        }
        let x_cam = x_cam / nx;
        let y_cam = cross(&z_cam, &x_cam);
        let mut rotation = Array2::<f64>::zeros((3, 3));
        for k in 0..3 {
            rotation[[0, k]] = x_cam[k];
            rotation[[1, k]] = y_cam[k];
            rotation[[2, k]] = z_cam[k];
        }
        let translation = -rotation.dot(&center);
        Camera::new(intrinsics, rotation, translation)
    }

    /// Yaw-only orbit pose with angles in degrees.
    pub fn orbit_deg(intrinsics: Intrinsics, pivot_depth: f64, yaw_deg: f64, pitch_deg: f64) -> Result<Self> {
        Camera::orbit(
            intrinsics,
            pivot_depth,
            yaw_deg.to_radians(),
            pitch_deg.to_radians(),
        )
    }

    pub fn is_reference_pose(&self) -> bool {
        let eye = Array2::<f64>::eye(3);
        self.rotation
            .iter()
            .zip(eye.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12)
            && self.translation.iter().all(|v| v.abs() < 1e-12)
    }
}

/// Homography in pixel coordinates mapping the reference camera's view of
/// the fronto-parallel plane at `depth` to `cam`'s view of it:
/// `H = K (R - t n^T / depth) K^-1` with `n = (0, 0, 1)` in the reference
/// frame. The reference camera yields the identity matrix.
pub fn plane_homography(cam: &Camera, depth: f64) -> Result<Array2<f64>> {
    plane_homography_between(cam.intrinsics, cam, depth)
}

/// [`plane_homography`] generalized to a reference raster with its own
/// intrinsics (used when the render target's resolution differs from the
/// MPI's native resolution).
pub fn plane_homography_between(
    reference: Intrinsics,
    cam: &Camera,
    depth: f64,
) -> Result<Array2<f64>> {
    if depth <= 0.0 {
        return Err(Error::Domain(format!(
            "plane depth must be positive, got {depth}"
        )));
    }
    let k = cam.intrinsics.projection_matrix();
    let k_inv = inv3(&reference.projection_matrix())
        .ok_or_else(|| Error::Domain("singular projection matrix".into()))?;
    let mut mid = cam.rotation.clone();
    for i in 0..3 {
        // subtract t * n^T / depth; n = e_z so only the last column moves
        mid[[i, 2]] -= cam.translation[i] / depth;
    }
    Ok(k.dot(&mid).dot(&k_inv))
}

fn cross(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    array![
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0]
    ]
}

fn det3(m: &Array2<f64>) -> f64 {
    m[[0, 0]] * (m[[1, 1]] * m[[2, 2]] - m[[1, 2]] * m[[2, 1]])
        - m[[0, 1]] * (m[[1, 0]] * m[[2, 2]] - m[[1, 2]] * m[[2, 0]])
        + m[[0, 2]] * (m[[1, 0]] * m[[2, 1]] - m[[1, 1]] * m[[2, 0]])
}

/// Applies a 3x3 homography to a pixel position.
pub fn apply_homography(h: &Array2<f64>, x: f64, y: f64) -> (f64, f64) {
    let px = h[[0, 0]] * x + h[[0, 1]] * y + h[[0, 2]];
    let py = h[[1, 0]] * x + h[[1, 1]] * y + h[[1, 2]];
    let pw = h[[2, 0]] * x + h[[2, 1]] * y + h[[2, 2]];
    (px / pw, py / pw)
}

#[cfg(test)]
mod tests {
    use super::*;

    const INTR: Intrinsics = Intrinsics {
        focal: 32.0,
        cx: 15.5,
        cy: 15.5,
    };

    #[test]
    fn reference_homography_is_identity() {
        let cam = Camera::reference(INTR);
        for depth in [0.5, 2.0, 11.0] {
            let h = plane_homography(&cam, depth).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((h[[i, j]] - want).abs() < 1e-12, "depth {depth}");
                }
            }
        }
    }

    #[test]
    fn forward_translation_scales_about_principal_point() {
        let (d, delta) = (10.0, 3.0);
        let cam = Camera::translated_forward(INTR, delta);
        let h = plane_homography(&cam, d).unwrap();
        let scale = d / (d - delta);
        for (x, y) in [(0.0, 0.0), (31.0, 4.0), (12.25, 27.5)] {
            let (u, v) = apply_homography(&h, x, y);
            assert!((u - (INTR.cx + (x - INTR.cx) * scale)).abs() < 1e-9);
            assert!((v - (INTR.cy + (y - INTR.cy) * scale)).abs() < 1e-9);
        }
    }

    #[test]
    fn nonpositive_depth_rejected() {
        let cam = Camera::reference(INTR);
        assert!(plane_homography(&cam, 0.0).is_err());
        assert!(plane_homography(&cam, -1.0).is_err());
    }

    #[test]
    fn yawed_homography_matches_point_transport() {
        // project-unproject the 4 plane corners explicitly and compare
        let cam = Camera::orbit_deg(INTR, 10.0, 5.0, 0.0).unwrap();
        let depth = 10.0;
        let h = plane_homography(&cam, depth).unwrap();
        for (u, v) in [(0.0, 0.0), (31.0, 0.0), (0.0, 31.0), (31.0, 31.0)] {
            // reference pixel -> 3D point on the plane z = -depth
            let x = (u - INTR.cx) * depth / INTR.focal;
            let y = -(v - INTR.cy) * depth / INTR.focal;
            let pw = ndarray::array![x, y, -depth];
            // world -> camera -> pixel
            let pc = cam.rotation.dot(&pw) + &cam.translation;
            let viewing_depth = -pc[2];
            assert!(viewing_depth > 0.0);
            let uu = INTR.cx + INTR.focal * pc[0] / viewing_depth;
            let vv = INTR.cy - INTR.focal * pc[1] / viewing_depth;
            let (hu, hv) = apply_homography(&h, u, v);
            assert!((hu - uu).abs() < 1e-9, "corner ({u},{v})");
            assert!((hv - vv).abs() < 1e-9, "corner ({u},{v})");
        }
    }

    #[test]
    fn orbit_zero_angles_is_reference() {
        let cam = Camera::orbit_deg(INTR, 8.0, 0.0, 0.0).unwrap();
        assert!(cam.is_reference_pose());
    }

    #[test]
    fn orbit_rotation_is_orthonormal() {
        for yaw in [-30.0, -5.0, 12.0, 30.0] {
            for pitch in [-10.0, 0.0, 10.0] {
                let cam = Camera::orbit_deg(INTR, 9.0, yaw, pitch).unwrap();
                let rtr = cam.rotation.t().dot(&cam.rotation);
                for i in 0..3 {
                    for j in 0..3 {
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert!((rtr[[i, j]] - want).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
