use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::GrayImage;

/// Windowed SSIM parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the inputs.
    pub range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

fn window_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(j, &t)| t * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(j, &t)| t * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid Gaussian windows. Windows larger than the image
/// shrink to the largest odd size that fits.
pub fn ssim_with(a: &GrayImage, b: &GrayImage, cfg: &SsimConfig) -> Result<f32> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: vec![a.height(), a.width()],
            rhs: vec![b.height(), b.width()],
        });
    }
    let (h, w) = (a.height(), a.width());
    if h == 0 || w == 0 {
        return Err(Error::invalid("ssim of an empty image"));
    }
    let mut size = cfg.window.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let taps = window_taps(size.max(1), cfg.sigma);
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mu_x = filter_valid(&x, h, w, &taps);
    let mu_y = filter_valid(&y, h, w, &taps);
    let e_xx = filter_valid(&xx, h, w, &taps);
    let e_yy = filter_valid(&yy, h, w, &taps);
    let e_xy = filter_valid(&xy, h, w, &taps);
    let c1 = (cfg.k1 * cfg.range).powi(2);
    let c2 = (cfg.k2 * cfg.range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok((total / mu_x.len() as f64) as f32)
}

pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f32> {
    ssim_with(a, b, &SsimConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(n: usize, cell: usize, invert: bool) -> GrayImage {
        GrayImage::from_fn(n, n, |y, x| {
            let on = ((y / cell) + (x / cell)).is_multiple_of(2);
            if on ^ invert {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Direct per-window evaluation: explicit 2D weights, no separable or
    /// shared-intermediate shortcuts.
    fn direct_ssim(a: &GrayImage, b: &GrayImage) -> f64 {
        let size = 11usize;
        let sigma = 1.5f64;
        let mut wts = vec![0.0f64; size * size];
        let mut total = 0.0;
        for i in 0..size {
            for j in 0..size {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                wts[i * size + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
                total += wts[i * size + j];
            }
        }
        wts.iter_mut().for_each(|v| *v /= total);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut acc = 0.0;
        let mut count = 0;
        for oy in 0..=a.height() - size {
            for ox in 0..=a.width() - size {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let w = wts[i * size + j];
                        mx += w * a.get(oy + i, ox + j) as f64;
                        my += w * b.get(oy + i, ox + j) as f64;
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let w = wts[i * size + j];
                        let dx = a.get(oy + i, ox + j) as f64 - mx;
                        let dy = b.get(oy + i, ox + j) as f64 - my;
                        vx += w * dx * dx;
                        vy += w * dy * dy;
                        cov += w * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        let img = GrayImage::from_fn(20, 17, |y, x| ((y * 7 + x * 3) % 11) as f32 / 10.0);
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
        let zeros = GrayImage::filled(16, 16, 0.0);
        assert_eq!(ssim(&zeros, &zeros).unwrap(), 1.0);
    }

    #[test]
    fn symmetric() {
        let a = GrayImage::from_fn(16, 16, |y, x| ((y + x) % 5) as f32 / 4.0);
        let b = GrayImage::from_fn(16, 16, |y, x| ((y * x) % 7) as f32 / 6.0);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-7);
        assert!(ab.abs() <= 1.0);
    }

    #[test]
    fn checkerboard_against_direct_formula() {
        let a = checkerboard(24, 3, false);
        let b = checkerboard(24, 3, true);
        let fast = ssim(&a, &b).unwrap() as f64;
        let slow = direct_ssim(&a, &b);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        assert!(fast < 0.0);
        let c = GrayImage::from_fn(24, 24, |y, x| ((y * 5 + x * x) % 13) as f32 / 12.0);
        let fast = ssim(&a, &c).unwrap() as f64;
        assert!((fast - direct_ssim(&a, &c)).abs() < 1e-6);
    }

    #[test]
    fn mismatched_dims_error() {
        let a = GrayImage::filled(8, 8, 0.0);
        let b = GrayImage::filled(8, 9, 0.0);
        assert!(ssim(&a, &b).is_err());
    }
}
