use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::perturb::blur_plane;
use crate::video::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CannyConfig {
    /// Hysteresis thresholds as fractions of the maximum gradient magnitude.
    pub low: f32,
    pub high: f32,
    pub sigma: f32,
}

impl Default for CannyConfig {
    fn default() -> Self {
        CannyConfig {
            low: 0.1,
            high: 0.25,
            sigma: 1.0,
        }
    }
}

/// Sobel derivatives with replicated borders.
pub fn sobel(img: &GrayImage) -> (Vec<f32>, Vec<f32>) {
    let (h, w) = (img.height(), img.width());
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dy: isize, dx: isize| img.get_clamped(y + dy, x + dx);
            let i = y as usize * w + x as usize;
            gx[i] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            gy[i] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
        }
    }
    (gx, gy)
}

/// Magnitude-weighted histogram of unsigned gradient orientation
/// (`[0, pi)`), normalised to sum to one. All zeros for a flat image.
pub fn orientation_histogram(img: &GrayImage, bins: usize) -> Vec<f32> {
    let (gx, gy) = sobel(img);
    let mut hist = vec![0.0f64; bins];
    for (&x, &y) in gx.iter().zip(&gy) {
        let mag = (x as f64).hypot(y as f64);
        if mag == 0.0 {
            continue;
        }
        let theta = (y as f64).atan2(x as f64).rem_euclid(std::f64::consts::PI);
        let bin = ((theta / std::f64::consts::PI * bins as f64) as usize).min(bins - 1);
        hist[bin] += mag;
    }
    let total: f64 = hist.iter().sum();
    hist.iter()
        .map(|&v| if total > 0.0 { (v / total) as f32 } else { 0.0 })
        .collect()
}

/// Binary edge map (values 0 or 1).
pub fn canny_with(img: &GrayImage, cfg: &CannyConfig) -> GrayImage {
    let (h, w) = (img.height(), img.width());
    let smooth = GrayImage::new(h, w, blur_plane(img.data(), h, w, cfg.sigma)).expect("same dims");
    let (gx, gy) = sobel(&smooth);
    let mag: Vec<f32> = gx.iter().zip(&gy).map(|(&a, &b)| a.hypot(b)).collect();
    let max = mag.iter().fold(0.0f32, |m, &v| m.max(v));
    if max <= 0.0 {
        return GrayImage::filled(h, w, 0.0);
    }
    // Near-equal magnitudes count as ties; ties go to the pixel on the
    // negative side of the gradient direction.
    let eps = 1e-5 * max;
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        mag[yy * w + xx]
    };
    let mut thin = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m <= 0.0 {
                continue;
            }
            let angle = (gy[i] as f64).atan2(gx[i] as f64).to_degrees().rem_euclid(180.0);
            let sector = (((angle + 22.5) / 45.0) as usize) % 4;
            let (dy, dx) = match sector {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let (yi, xi) = (y as isize, x as isize);
            let ahead = at(yi + dy, xi + dx);
            let behind = at(yi - dy, xi - dx);
            if m > behind + eps && m >= ahead - eps {
                thin[i] = m;
            }
        }
    }
    let (low, high) = (cfg.low * max, cfg.high * max);
    let mut edges = vec![0.0f32; h * w];
    let mut queue = VecDeque::new();
    for i in 0..h * w {
        if thin[i] >= high {
            edges[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if edges[j] == 0.0 && thin[j] >= low {
                    edges[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    GrayImage::new(h, w, edges).expect("same dims")
}

pub fn canny(img: &GrayImage) -> GrayImage {
    canny_with(img, &CannyConfig::default())
}
