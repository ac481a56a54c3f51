//! Image helpers shared across the pipeline.
//!
//! Images are `Array3<f64>` in channel-first `(3, H, W)` layout with values
//! in `[0, 1]`. PNG encoding quantizes to 8 bits; depth maps are written as
//! 16-bit grayscale PNG.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use std::path::Path;

pub type Image = Array3<f64>;

/// Clamps to `[0,1]` and quantizes a channel value to `u8`.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_dims(img: &Image) -> (usize, usize) {
    (img.shape()[1], img.shape()[2])
}

/// Encodes an RGB image to PNG bytes.
pub fn encode_png(img: &Image) -> Vec<u8> {
    let (h, w) = image_dims(img);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(img[[0, y, x]]),
                    to_u8(img[[1, y, x]]),
                    to_u8(img[[2, y, x]]),
                ]),
            );
        }
    }
    let mut out = Vec::new();
    image::DynamicImage::ImageRgb8(buf)
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("png encode into memory");
    out
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(img)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let img = image::load_from_memory(&data)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = p[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Loads a single-channel image as raw integer label codes.
pub fn load_label_png(path: &Path) -> Result<Array2<u8>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let img = image::load_from_memory(&data)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = img.get_pixel(x as u32, y as u32)[0];
        }
    }
    Ok(out)
}

/// Writes a binary mask as an 8-bit grayscale PNG (0 or 255).
pub fn save_mask_png(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = (mask.nrows(), mask.ncols());
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([if mask[[y, x]] { 255 } else { 0 }]));
        }
    }
    let mut out = Vec::new();
    image::DynamicImage::ImageLuma8(buf)
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("png encode into memory");
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes a depth map normalized over `[near, far]` as 16-bit grayscale PNG.
pub fn save_depth_png(depth: &Array2<f64>, near: f64, far: f64, path: &Path) -> Result<()> {
    let (h, w) = (depth.nrows(), depth.ncols());
    let span = (far - near).max(f64::MIN_POSITIVE);
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let t = ((depth[[y, x]] - near) / span).clamp(0.0, 1.0);
            buf.put_pixel(x as u32, y as u32, image::Luma([(t * 65535.0).round() as u16]));
        }
    }
    let mut out = Vec::new();
    image::DynamicImage::ImageLuma16(buf)
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("png encode into memory");
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Bilinear sample of channel plane `img[c]` at continuous position
/// `(x, y)` in pixel coordinates; out-of-bounds taps contribute zero.
#[inline]
pub fn sample_bilinear(plane: &ndarray::ArrayView2<f64>, x: f64, y: f64) -> f64 {
    let h = plane.nrows() as isize;
    let w = plane.ncols() as isize;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as isize;
    let y0 = y0 as isize;
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        let yy = y0 + dy;
        if yy < 0 || yy >= h {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            let xx = x0 + dx;
            if xx < 0 || xx >= w {
                continue;
            }
            acc += wy * wx * plane[[yy as usize, xx as usize]];
        }
    }
    acc
}

/// Scatters `grad` back through [`sample_bilinear`] into `grad_plane`.
#[inline]
pub fn scatter_bilinear(grad_plane: &mut ndarray::ArrayViewMut2<f64>, x: f64, y: f64, grad: f64) {
    let h = grad_plane.nrows() as isize;
    let w = grad_plane.ncols() as isize;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as isize;
    let y0 = y0 as isize;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        let yy = y0 + dy;
        if yy < 0 || yy >= h {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            let xx = x0 + dx;
            if xx < 0 || xx >= w {
                continue;
            }
            grad_plane[[yy as usize, xx as usize]] += wy * wx * grad;
        }
    }
}

/// Warps an image by a homography `h` mapping source pixels to target pixels.
/// Each target pixel back-projects through `h^-1` and samples bilinearly,
/// zero outside the source.
pub fn warp_image(img: &Image, h: &Array2<f64>, out_h: usize, out_w: usize) -> Result<Image> {
    let h_inv = crate::linalg::inv3(h)
        .ok_or_else(|| Error::Domain("homography is singular".into()))?;
    let mut out = Array3::<f64>::zeros((3, out_h, out_w));
    for y in 0..out_h {
        for x in 0..out_w {
            let px = h_inv[[0, 0]] * x as f64 + h_inv[[0, 1]] * y as f64 + h_inv[[0, 2]];
            let py = h_inv[[1, 0]] * x as f64 + h_inv[[1, 1]] * y as f64 + h_inv[[1, 2]];
            let pw = h_inv[[2, 0]] * x as f64 + h_inv[[2, 1]] * y as f64 + h_inv[[2, 2]];
            if pw.abs() < 1e-12 {
                continue;
            }
            let sx = px / pw;
            let sy = py / pw;
            for c in 0..3 {
                out[[c, y, x]] = sample_bilinear(&img.index_axis(ndarray::Axis(0), c), sx, sy);
            }
        }
    }
    Ok(out)
}

/// 2x box downsample; panics if dimensions are odd.
pub fn box_downsample2(img: &Image) -> Image {
    let (h, w) = image_dims(img);
    assert!(h % 2 == 0 && w % 2 == 0, "box_downsample2 needs even dims");
    let mut out = Array3::<f64>::zeros((3, h / 2, w / 2));
    for c in 0..3 {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                out[[c, y, x]] = 0.25
                    * (img[[c, 2 * y, 2 * x]]
                        + img[[c, 2 * y, 2 * x + 1]]
                        + img[[c, 2 * y + 1, 2 * x]]
                        + img[[c, 2 * y + 1, 2 * x + 1]]);
            }
        }
    }
    out
}

/// Maximum absolute channel difference.
pub fn linf_diff(a: &Image, b: &Image) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Mean absolute channel difference.
pub fn l1_diff(a: &Image, b: &Image) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Euclidean norm of the pixel-wise difference.
pub fn l2_diff(a: &Image, b: &Image) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Lays out equally sized tiles in a `rows x cols` grid with a 1px separator.
pub fn contact_sheet(tiles: &[Image], cols: usize) -> Image {
    assert!(!tiles.is_empty());
    let (th, tw) = image_dims(&tiles[0]);
    let rows = tiles.len().div_ceil(cols);
    let gap = 1;
    let out_h = rows * th + (rows - 1) * gap;
    let out_w = cols * tw + (cols - 1) * gap;
    let mut out = Array3::<f64>::from_elem((3, out_h, out_w), 1.0);
    for (i, tile) in tiles.iter().enumerate() {
        let r = i / cols;
        let c = i % cols;
        let oy = r * (th + gap);
        let ox = c * (tw + gap);
        for ch in 0..3 {
            for y in 0..th {
                for x in 0..tw {
                    out[[ch, oy + y, ox + x]] = tile[[ch, y, x]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bilinear_interpolates_center() {
        let plane = array![[0.0, 1.0], [1.0, 1.0]];
        let v = sample_bilinear(&plane.view(), 0.5, 0.5);
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn bilinear_zero_outside() {
        let plane = array![[1.0, 1.0], [1.0, 1.0]];
        assert_eq!(sample_bilinear(&plane.view(), -2.0, 0.0), 0.0);
        assert_eq!(sample_bilinear(&plane.view(), 0.0, 5.0), 0.0);
    }

    #[test]
    fn scatter_matches_sample_adjoint() {
        // <sample(img, p), g> == <img, scatter(g, p)> for the linear map
        let plane = array![[0.2, 0.9], [0.4, 0.1]];
        let (x, y, g) = (0.3, 0.6, 2.0);
        let s = sample_bilinear(&plane.view(), x, y);
        let mut grad = Array2::<f64>::zeros((2, 2));
        scatter_bilinear(&mut grad.view_mut(), x, y, g);
        let lhs = s * g;
        let rhs: f64 = (&plane * &grad).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn png_roundtrip_is_lossless_at_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = Array3::<f64>::zeros((3, 4, 5));
        for (i, v) in img.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert!(linf_diff(&img, &back) < 1e-9);
    }

    #[test]
    fn downsample_averages() {
        let mut img = Array3::<f64>::zeros((3, 2, 2));
        img[[0, 0, 0]] = 1.0;
        let out = box_downsample2(&img);
        assert!((out[[0, 0, 0]] - 0.25).abs() < 1e-12);
    }
}
