//! Dual-branch data perturbations.
//!
//! The structure branch ([`perturb_high`]) blurs or elastically warps a
//! reference frame so that only its colour and illumination survive. The
//! colour branch ([`perturb_low`]) jitters the photometry of a whole clip while
//! keeping its geometry. Every function here is a pure function of its input,
//! the configuration and a seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::video::{GrayImage, Image, VideoClip};

const STREAM_HIGH: u64 = 0x4849_4748;
const STREAM_LOW: u64 = 0x4c4f_5700;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub p_blur: f32,
    pub p_elastic: f32,
    pub blur_sigma: [f32; 2],
    pub elastic_alpha: [f32; 2],
    pub elastic_sigma: [f32; 2],
    pub brightness: [f32; 2],
    pub contrast: [f32; 2],
    pub saturation: [f32; 2],
    /// Hue shift in turns.
    pub hue: [f32; 2],
    pub gamma: [f32; 2],
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            p_blur: 0.3,
            p_elastic: 0.7,
            blur_sigma: [1.0, 3.0],
            elastic_alpha: [4.0, 10.0],
            elastic_sigma: [4.0, 8.0],
            brightness: [0.6, 1.4],
            contrast: [0.6, 1.4],
            saturation: [0.5, 1.5],
            hue: [-0.1, 0.1],
            gamma: [0.7, 1.4],
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f32| (0.0..=1.0).contains(&p);
        if !prob_ok(self.p_blur) || !prob_ok(self.p_elastic) || (self.p_blur + self.p_elastic - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "p_blur ({}) and p_elastic ({}) must be probabilities summing to 1",
                self.p_blur, self.p_elastic
            )));
        }
        let ranges = [
            ("blur_sigma", self.blur_sigma, true),
            ("elastic_alpha", self.elastic_alpha, true),
            ("elastic_sigma", self.elastic_sigma, true),
            ("brightness", self.brightness, true),
            ("contrast", self.contrast, true),
            ("saturation", self.saturation, true),
            ("hue", self.hue, false),
            ("gamma", self.gamma, true),
        ];
        for (name, [lo, hi], positive) in ranges {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::invalid(format!("{name} range [{lo}, {hi}] is empty")));
            }
            if positive && lo <= 0.0 {
                return Err(Error::invalid(format!(
                    "{name} range must be strictly positive, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

fn sample_range(rng: &mut impl Rng, [lo, hi]: [f32; 2]) -> f32 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Normalised 1D Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / s2).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|&t| (t / total) as f32).collect()
}

/// Separable Gaussian blur of one `h x w` plane with reflect padding.
pub fn blur_plane(plane: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    if sigma == 0.0 {
        return plane.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (j, &k) in kernel.iter().enumerate() {
                let xx = reflect_index(x as isize + j as isize - radius, w);
                acc += k as f64 * plane[y * w + xx] as f64;
            }
            tmp[y * w + x] = acc as f32;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (j, &k) in kernel.iter().enumerate() {
                let yy = reflect_index(y as isize + j as isize - radius, h);
                acc += k as f64 * tmp[yy * w + x] as f64;
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

pub fn gaussian_blur(img: &Image, sigma: f32) -> Result<Image> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("blur sigma must be >= 0, got {sigma}")));
    }
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for c in 0..3 {
        let blurred = blur_plane(img.plane(c), h, w, sigma);
        out.plane_mut(c).copy_from_slice(&blurred);
    }
    Ok(out)
}

pub fn gaussian_blur_gray(img: &GrayImage, sigma: f32) -> Result<GrayImage> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("blur sigma must be >= 0, got {sigma}")));
    }
    GrayImage::new(
        img.height(),
        img.width(),
        blur_plane(img.data(), img.height(), img.width(), sigma),
    )
}

fn bilinear_reflect(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| plane[reflect_index(yy, h) * w + reflect_index(xx, w)] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Smooth random displacement field with maximum vector norm `alpha`.
fn displacement_field(h: usize, w: usize, alpha: f32, sigma: f32, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = stream(seed, &[0x454c_4153]);
    let dx: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
    let dy: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
    let mut dx = blur_plane(&dx, h, w, sigma);
    let mut dy = blur_plane(&dy, h, w, sigma);
    let max_norm = dx
        .iter()
        .zip(&dy)
        .map(|(&a, &b)| ((a as f64).powi(2) + (b as f64).powi(2)).sqrt())
        .fold(0.0f64, f64::max);
    if max_norm > 0.0 {
        let scale = alpha as f64 / max_norm;
        dx.iter_mut().for_each(|v| *v = (*v as f64 * scale) as f32);
        dy.iter_mut().for_each(|v| *v = (*v as f64 * scale) as f32);
    }
    (dx, dy)
}

/// Warp by a smoothed random displacement field (bilinear, reflect border).
pub fn elastic_transform(img: &Image, alpha: f32, sigma: f32, seed: u64) -> Result<Image> {
    if !(alpha > 0.0 && sigma > 0.0) {
        return Err(Error::invalid(format!(
            "elastic alpha and sigma must be > 0 (got {alpha}, {sigma})"
        )));
    }
    let (h, w) = (img.height(), img.width());
    let (dx, dy) = displacement_field(h, w, alpha, sigma, seed);
    let mut out = img.clone();
    for c in 0..3 {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                dst[i] = bilinear_reflect(src, h, w, y as f64 + dy[i] as f64, x as f64 + dx[i] as f64);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// colour space helpers

/// RGB in [0,1] to (hue in turns, saturation, value).
pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h.rem_euclid(1.0), s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue (turns) of the mean chroma vector of an image.
///
/// The chroma vector `(R - (G+B)/2, sqrt(3)/2 (G - B))` is linear in RGB, so
/// its mean is unchanged by any mass-preserving resampling of the pixels.
pub fn mean_hue(img: &Image) -> f32 {
    let (mut a, mut b) = (0.0f64, 0.0f64);
    let n = img.height() * img.width();
    let (r, g, bl) = (img.plane(0), img.plane(1), img.plane(2));
    for i in 0..n {
        a += r[i] as f64 - 0.5 * (g[i] as f64 + bl[i] as f64);
        b += 0.75f64.sqrt() * (g[i] as f64 - bl[i] as f64);
    }
    (b.atan2(a) / std::f64::consts::TAU).rem_euclid(1.0) as f32
}

/// Circular distance between two hues in turns.
pub fn hue_distance(a: f32, b: f32) -> f32 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

// ---------------------------------------------------------------------------
// colour jitter

/// One draw of photometric jitter parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub gamma: f32,
}

impl JitterParams {
    pub const IDENTITY: JitterParams = JitterParams {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
        gamma: 1.0,
    };

    pub fn draw(cfg: &PerturbConfig, seed: u64) -> Self {
        let mut rng = stream(seed, &[STREAM_LOW]);
        JitterParams {
            brightness: sample_range(&mut rng, cfg.brightness),
            contrast: sample_range(&mut rng, cfg.contrast),
            saturation: sample_range(&mut rng, cfg.saturation),
            hue: sample_range(&mut rng, cfg.hue),
            gamma: sample_range(&mut rng, cfg.gamma),
        }
    }
}

/// Apply jitter to a flat run of `frames` RGB frames of `plane` pixels each.
/// Stages run brightness, contrast, saturation, hue, gamma; identity stages
/// are skipped so identity parameters reproduce the input bit-exactly.
fn jitter_frames(data: &mut [f32], plane: usize, p: &JitterParams) {
    let frame_len = 3 * plane;
    let clamp = |v: f32| v.clamp(0.0, 1.0);
    if p.brightness != 1.0 {
        data.iter_mut().for_each(|v| *v = clamp(*v * p.brightness));
    }
    if p.contrast != 1.0 {
        let mut total = 0.0f64;
        for frame in data.chunks(frame_len) {
            for i in 0..plane {
                total += luma_at(frame, plane, i) as f64;
            }
        }
        let mean = (total / (data.len() / 3) as f64) as f32;
        data.iter_mut()
            .for_each(|v| *v = clamp((*v - mean) * p.contrast + mean));
    }
    if p.saturation != 1.0 {
        for frame in data.chunks_mut(frame_len) {
            for i in 0..plane {
                let gray = luma_at(frame, plane, i);
                for c in 0..3 {
                    let v = &mut frame[c * plane + i];
                    *v = clamp(gray + p.saturation * (*v - gray));
                }
            }
        }
    }
    if p.hue != 0.0 {
        for frame in data.chunks_mut(frame_len) {
            for i in 0..plane {
                let [h, s, v] = rgb_to_hsv([frame[i], frame[plane + i], frame[2 * plane + i]]);
                let rgb = hsv_to_rgb([h + p.hue, s, v]);
                for (c, val) in rgb.into_iter().enumerate() {
                    frame[c * plane + i] = clamp(val);
                }
            }
        }
    }
    if p.gamma != 1.0 {
        data.iter_mut().for_each(|v| *v = clamp(v.max(0.0).powf(p.gamma)));
    }
}

fn luma_at(frame: &[f32], plane: usize, i: usize) -> f32 {
    0.299 * frame[i] + 0.587 * frame[plane + i] + 0.114 * frame[2 * plane + i]
}

pub fn color_jitter_image(img: &Image, params: &JitterParams) -> Image {
    let mut out = img.clone();
    let plane = img.height() * img.width();
    jitter_frames(out.data_mut(), plane, params);
    out
}

/// Jitter a whole clip with a single parameter set shared by all frames.
pub fn color_jitter(video: &VideoClip, params: &JitterParams) -> VideoClip {
    let mut out = video.clone();
    let plane = video.height() * video.width();
    jitter_frames(out.data_mut(), plane, params);
    out
}

// ---------------------------------------------------------------------------
// the two branches

/// Structure-destroying perturbation chosen for one reference image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HighPerturbation {
    Blur { sigma: f32 },
    Elastic { alpha: f32, sigma: f32, seed: u64 },
}

impl HighPerturbation {
    pub fn draw(cfg: &PerturbConfig, seed: u64) -> Self {
        let mut rng = stream(seed, &[STREAM_HIGH]);
        let u: f32 = rng.gen();
        if u < cfg.p_blur {
            HighPerturbation::Blur {
                sigma: sample_range(&mut rng, cfg.blur_sigma),
            }
        } else {
            HighPerturbation::Elastic {
                alpha: sample_range(&mut rng, cfg.elastic_alpha),
                sigma: sample_range(&mut rng, cfg.elastic_sigma),
                seed: rng.gen(),
            }
        }
    }

    pub fn is_blur(&self) -> bool {
        matches!(self, HighPerturbation::Blur { .. })
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        match *self {
            HighPerturbation::Blur { sigma } => gaussian_blur(img, sigma),
            HighPerturbation::Elastic { alpha, sigma, seed } => elastic_transform(img, alpha, sigma, seed),
        }
    }
}

pub fn perturb_high(img: &Image, cfg: &PerturbConfig, seed: u64) -> Result<Image> {
    HighPerturbation::draw(cfg, seed).apply(img)
}

pub fn perturb_low(video: &VideoClip, cfg: &PerturbConfig, seed: u64) -> VideoClip {
    perturb_low_with_params(video, cfg, seed).0
}

/// Like [`perturb_low`], also returning the single parameter draw used for
/// every frame.
pub fn perturb_low_with_params(video: &VideoClip, cfg: &PerturbConfig, seed: u64) -> (VideoClip, JitterParams) {
    let params = JitterParams::draw(cfg, seed);
    (color_jitter(video, &params), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, SceneParams, SceneSpec};
    use crate::metrics::orientation_histogram;

    fn scene_frame(seed: u64, size: usize) -> Image {
        let params = SceneParams {
            height: size,
            width: size,
            frames: 1,
            ..SceneParams::default()
        };
        render(&SceneSpec::random(seed, &params).unwrap())
            .unwrap()
            .first_frame()
    }

    fn test_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |c, y, x| {
            let fy = y as f32 / h as f32;
            let fx = x as f32 / w as f32;
            let disc = ((fx - 0.4).powi(2) + (fy - 0.5).powi(2)).sqrt() < 0.25;
            let base = match c {
                0 => 0.7 * fx + 0.1,
                1 => 0.3 + 0.4 * fy,
                _ => 0.2 + 0.1 * (fx * 6.0).sin().abs(),
            };
            if disc {
                [0.9, 0.3, 0.2][c]
            } else {
                base
            }
        })
    }

    fn naive_blur(plane: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
        let r = (3.0 * sigma).ceil() as isize;
        let mut weights = Vec::new();
        let mut total = 0.0f64;
        for dy in -r..=r {
            for dx in -r..=r {
                let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * (sigma as f64).powi(2))).exp();
                weights.push((dy, dx, wgt));
                total += wgt;
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for &(dy, dx, wgt) in &weights {
                    let yy = reflect_index(y as isize + dy, h);
                    let xx = reflect_index(x as isize + dx, w);
                    acc += wgt / total * plane[yy * w + xx] as f64;
                }
                out[y * w + x] = acc as f32;
            }
        }
        out
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-7, 1), 0);
    }

    #[test]
    fn blur_sigma_zero_is_identity_and_negative_is_error() {
        let img = test_image(12, 10);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
        assert!(gaussian_blur(&img, -0.5).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(9, 9, 0.37);
        let out = gaussian_blur(&img, 2.3).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn blur_impulse_matches_direct_2d_convolution() {
        let (h, w) = (15, 15);
        let mut plane = vec![0.0f32; h * w];
        plane[7 * w + 7] = 1.0;
        let fast = blur_plane(&plane, h, w, 1.0);
        let slow = naive_blur(&plane, h, w, 1.0);
        let diff = fast.iter().zip(&slow).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-5, "diff {diff}");
        // also on a non-impulse image with reflect borders in play
        let img = test_image(11, 13);
        let fast = blur_plane(img.plane(1), 11, 13, 1.7);
        let slow = naive_blur(img.plane(1), 11, 13, 1.7);
        let diff = fast.iter().zip(&slow).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-5, "diff {diff}");
    }

    #[test]
    fn elastic_tiny_alpha_is_identity() {
        let img = test_image(16, 16);
        let out = elastic_transform(&img, 1e-7, 4.0, 3).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-6);
        assert!(elastic_transform(&img, 0.0, 4.0, 3).is_err());
    }

    #[test]
    fn elastic_is_seed_deterministic() {
        let img = test_image(16, 16);
        let a = elastic_transform(&img, 6.0, 5.0, 11).unwrap();
        let b = elastic_transform(&img, 6.0, 5.0, 11).unwrap();
        let c = elastic_transform(&img, 6.0, 5.0, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.max_abs_diff(&img) > 1e-3);
    }

    #[test]
    fn elastic_roughly_preserves_mean() {
        for seed in 0..5 {
            let img = scene_frame(seed, 128);
            let out = elastic_transform(&img, 8.0, 6.0, seed).unwrap();
            let rel = (out.mean() - img.mean()).abs() / img.mean();
            assert!(rel < 0.02, "seed {seed}: relative mean change {rel}");
        }
    }

    #[test]
    fn identity_jitter_is_exact() {
        let img = test_image(8, 8);
        assert_eq!(color_jitter_image(&img, &JitterParams::IDENTITY), img);
    }

    #[test]
    fn brightness_scales() {
        let img = Image::filled(2, 2, 0.2);
        let p = JitterParams {
            brightness: 2.0,
            ..JitterParams::IDENTITY
        };
        let out = color_jitter_image(&img, &p);
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn double_half_turn_hue_shift_restores_hue() {
        let img = test_image(10, 10);
        let half = JitterParams {
            hue: 0.5,
            ..JitterParams::IDENTITY
        };
        let twice = color_jitter_image(&color_jitter_image(&img, &half), &half);
        for y in 0..10 {
            for x in 0..10 {
                let [h0, s0, v0] = rgb_to_hsv(img.rgb(y, x));
                let [h1, s1, v1] = rgb_to_hsv(twice.rgb(y, x));
                if s0 > 1e-3 {
                    assert!(hue_distance(h0, h1) < 1e-4, "hue {h0} -> {h1}");
                }
                assert!((s0 - s1).abs() < 1e-4);
                assert!((v0 - v1).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn hsv_roundtrip() {
        for &rgb in &[
            [0.2, 0.4, 0.9],
            [1.0, 0.0, 0.0],
            [0.5, 0.5, 0.5],
            [0.1, 0.8, 0.3],
            [0.9, 0.1, 0.6],
        ] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blur_branch_draw_matches_direct_blur() {
        let cfg = PerturbConfig::default();
        let img = test_image(16, 16);
        let (seed, sigma) = (0..100u64)
            .find_map(|s| match HighPerturbation::draw(&cfg, s) {
                HighPerturbation::Blur { sigma } => Some((s, sigma)),
                _ => None,
            })
            .expect("some seed selects the blur branch");
        assert_eq!(
            perturb_high(&img, &cfg, seed).unwrap(),
            gaussian_blur(&img, sigma).unwrap()
        );
    }

    #[test]
    fn blur_branch_frequency_matches_mixture() {
        let cfg = PerturbConfig::default();
        let blur = (0..10_000u64)
            .filter(|&s| HighPerturbation::draw(&cfg, s).is_blur())
            .count();
        let freq = blur as f64 / 10_000.0;
        assert!((0.28..=0.32).contains(&freq), "blur frequency {freq}");
    }

    #[test]
    fn structure_branch_keeps_hue() {
        let cfg = PerturbConfig::default();
        for seed in 0..20 {
            let img = scene_frame(seed, 128);
            let out = perturb_high(&img, &cfg, seed).unwrap();
            let d = hue_distance(mean_hue(&out), mean_hue(&img));
            assert!(d < 0.02, "seed {seed}: hue shift {d}");
        }
    }

    #[test]
    fn luma_affine_stages_keep_orientation_statistics() {
        // brightness, contrast and saturation act affinely on luma (up to
        // clamping); hue rotation and gamma do not
        let cfg = PerturbConfig::default();
        for seed in 0..20 {
            let clip = VideoClip::repeat(&scene_frame(seed, 64), 2);
            let before = orientation_histogram(&clip.frame(0).luma(), 16);
            let d = JitterParams::draw(&cfg, seed);
            let stages = [
                JitterParams {
                    brightness: d.brightness,
                    ..JitterParams::IDENTITY
                },
                JitterParams {
                    contrast: d.contrast,
                    ..JitterParams::IDENTITY
                },
                JitterParams {
                    saturation: d.saturation,
                    ..JitterParams::IDENTITY
                },
            ];
            for p in stages {
                let after = orientation_histogram(&color_jitter(&clip, &p).frame(0).luma(), 16);
                let l1: f32 = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).sum();
                assert!(l1 < 0.15, "seed {seed} {p:?}: L1 {l1}");
            }
        }
    }

    #[test]
    fn colour_branch_uses_one_draw_for_all_frames() {
        let cfg = PerturbConfig::default();
        let img = test_image(8, 8);
        let clip = VideoClip::repeat(&img, 4);
        let (out, params) = perturb_low_with_params(&clip, &cfg, 9);
        assert_eq!(params, JitterParams::draw(&cfg, 9));
        for t in 1..4 {
            assert_eq!(out.frame(t), out.frame(0));
        }
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn config_validation() {
        assert!(PerturbConfig::default().validate().is_ok());
        let bad = PerturbConfig {
            p_blur: 0.5,
            ..PerturbConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PerturbConfig {
            gamma: [1.2, 0.8],
            ..PerturbConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PerturbConfig {
            contrast: [0.0, 1.0],
            ..PerturbConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
