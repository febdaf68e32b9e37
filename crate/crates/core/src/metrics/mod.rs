//! Video fidelity metrics.
//!
//! `sf` and `mc` follow their usual definitions (SSIM of Canny edge maps and
//! SSIM of optical-flow components). `sc_proxy` and `tc_proxy` replace the
//! pretrained-feature metrics with fixed, seeded, dependency-free stand-ins
//! and are reported under their own names.

mod canny;
mod flow;
mod ssim;

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use canny::{canny, canny_with, orientation_histogram, sobel, CannyConfig};
pub use flow::{horn_schunck, horn_schunck_with, FlowField, HornSchunckConfig};
pub use ssim::{ssim, ssim_with, SsimConfig};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor};
use crate::video::{GrayImage, VideoClip};

/// Seed of the frozen random feature extractor behind `sc_proxy`.
pub const SC_PROXY_SEED: u64 = 0x5C_F00D_2024;
pub const PSNR_CAP: f32 = 99.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub ssim: SsimConfig,
    pub canny: CannyConfig,
    pub flow: HornSchunckConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sf: f32,
    pub mc: f32,
    pub sc_proxy: f32,
    pub tc_proxy: f32,
    pub psnr_gt: Option<f32>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "sample,sf,mc,sc_proxy,tc_proxy,psnr_gt";

    pub fn csv_row(&self, sample: &str) -> String {
        let psnr = self.psnr_gt.map(|p| format!("{p:.6}")).unwrap_or_default();
        format!(
            "{sample},{:.6},{:.6},{:.6},{:.6},{psnr}",
            self.sf, self.mc, self.sc_proxy, self.tc_proxy
        )
    }

    /// Column-wise mean; `psnr_gt` is averaged over the reports that have it.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f32| (reports.iter().map(|r| f(r) as f64).sum::<f64>() / n) as f32;
        let psnrs: Vec<f64> = reports.iter().filter_map(|r| r.psnr_gt.map(|p| p as f64)).collect();
        Some(MetricsReport {
            sf: avg(|r| r.sf),
            mc: avg(|r| r.mc),
            sc_proxy: avg(|r| r.sc_proxy),
            tc_proxy: avg(|r| r.tc_proxy),
            psnr_gt: (!psnrs.is_empty()).then(|| (psnrs.iter().sum::<f64>() / psnrs.len() as f64) as f32),
        })
    }
}

fn check_pair(op: &'static str, a: &VideoClip, b: &VideoClip) -> Result<()> {
    a.ensure_same_shape(op, b)
}

fn need_two_frames(op: &'static str, v: &VideoClip) -> Result<()> {
    if v.frames() < 2 {
        Err(Error::invalid(format!(
            "{op} needs at least 2 frames, got {}",
            v.frames()
        )))
    } else {
        Ok(())
    }
}

fn lumas(v: &VideoClip) -> Vec<GrayImage> {
    v.iter_frames().map(|f| f.luma()).collect()
}

/// Structural fidelity: mean SSIM between per-frame Canny edge maps.
pub fn metric_sf_with(src: &VideoClip, out: &VideoClip, cfg: &MetricsConfig) -> Result<f32> {
    check_pair("metric_sf", src, out)?;
    let mut total = 0.0f64;
    for (a, b) in lumas(src).iter().zip(&lumas(out)) {
        total += ssim_with(&canny_with(a, &cfg.canny), &canny_with(b, &cfg.canny), &cfg.ssim)? as f64;
    }
    Ok((total / src.frames() as f64) as f32)
}

pub fn metric_sf(src: &VideoClip, out: &VideoClip) -> Result<f32> {
    metric_sf_with(src, out, &MetricsConfig::default())
}

/// Motion consistency: SSIM between the Horn–Schunck flows of `src` and
/// `out`, averaged over both components and all consecutive frame pairs.
pub fn metric_mc_with(src: &VideoClip, out: &VideoClip, cfg: &MetricsConfig) -> Result<f32> {
    check_pair("metric_mc", src, out)?;
    need_two_frames("metric_mc", src)?;
    let (ls, lo) = (lumas(src), lumas(out));
    let mut total = 0.0f64;
    for i in 0..ls.len() - 1 {
        let fs = horn_schunck_with(&ls[i], &ls[i + 1], &cfg.flow)?;
        let fo = horn_schunck_with(&lo[i], &lo[i + 1], &cfg.flow)?;
        total += 0.5 * (ssim_with(&fs.u, &fo.u, &cfg.ssim)? as f64 + ssim_with(&fs.v, &fo.v, &cfg.ssim)? as f64);
    }
    Ok((total / (ls.len() - 1) as f64) as f32)
}

pub fn metric_mc(src: &VideoClip, out: &VideoClip) -> Result<f32> {
    metric_mc_with(src, out, &MetricsConfig::default())
}

/// Frozen three-layer random conv feature extractor (3 -> 8 -> 16 -> 16).
pub struct FeatureExtractor {
    weights: Vec<Tensor<f32>>,
}

impl FeatureExtractor {
    pub const CHANNELS: [usize; 4] = [3, 8, 16, 16];

    pub fn from_seed(seed: u64) -> Self {
        let mut rng = stream(seed, &[]);
        let weights = Self::CHANNELS
            .windows(2)
            .map(|pair| {
                let (cin, cout) = (pair[0], pair[1]);
                let bound = (6.0f32 / (cin * 9) as f32).sqrt();
                let data = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..=bound)).collect();
                Tensor::new(vec![cout, cin, 3, 3], data).expect("weight shape")
            })
            .collect();
        FeatureExtractor { weights }
    }

    /// The extractor shared by every `sc_proxy` computation.
    pub fn shared() -> &'static FeatureExtractor {
        static CELL: OnceLock<FeatureExtractor> = OnceLock::new();
        CELL.get_or_init(|| FeatureExtractor::from_seed(SC_PROXY_SEED))
    }

    pub fn weights(&self) -> &[Tensor<f32>] {
        &self.weights
    }

    /// Features of every frame, `[T, 16, H, W]` flattened per frame.
    pub fn features(&self, video: &VideoClip) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::<f32>::new();
        let mut h = g.constant(video.to_tensor());
        for w in &self.weights {
            let wv = g.constant(w.clone());
            let conv = g.conv2d(h, wv, 1, 1)?;
            let shape = g.shape(conv).to_vec();
            let relu: Vec<f32> = g.data(conv).iter().map(|&v| v.max(0.0)).collect();
            h = g.constant(Tensor::new(shape, relu)?);
        }
        let per_frame = g.value(h).numel() / video.frames();
        Ok(g.data(h).chunks(per_frame).map(|c| c.to_vec()).collect())
    }
}

/// Mean MSE between consecutive-frame features (lower is more consistent).
pub fn metric_sc_proxy(video: &VideoClip) -> Result<f32> {
    need_two_frames("metric_sc_proxy", video)?;
    let feats = FeatureExtractor::shared().features(video)?;
    let total: f64 = feats
        .windows(2)
        .map(|p| {
            p[0].iter()
                .zip(&p[1])
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / p[0].len() as f64
        })
        .sum();
    Ok((total / (feats.len() - 1) as f64) as f32)
}

/// 8x8 area-downsampled luma followed by a 16-bin orientation histogram.
pub fn frame_descriptor(luma: &GrayImage) -> Vec<f32> {
    const GRID: usize = 8;
    let (h, w) = (luma.height(), luma.width());
    let mut sums = vec![0.0f64; GRID * GRID];
    let mut counts = vec![0usize; GRID * GRID];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * GRID / h) * GRID + x * GRID / w;
            sums[cell] += luma.get(y, x) as f64;
            counts[cell] += 1;
        }
    }
    let mut desc: Vec<f32> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { (s / c as f64) as f32 } else { 0.0 })
        .collect();
    desc.extend(orientation_histogram(luma, 16));
    desc
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Mean cosine similarity of consecutive-frame descriptors.
pub fn metric_tc_proxy(video: &VideoClip) -> Result<f32> {
    need_two_frames("metric_tc_proxy", video)?;
    let descs: Vec<Vec<f32>> = lumas(video).iter().map(frame_descriptor).collect();
    let total: f64 = descs.windows(2).map(|p| cosine(&p[0], &p[1])).sum();
    Ok((total / (descs.len() - 1) as f64) as f32)
}

/// PSNR with peak 1.0, capped at [`PSNR_CAP`] (also used for identical input).
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f32> {
    check_pair("psnr", a, b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok(((10.0 * (1.0 / mse).log10()) as f32).min(PSNR_CAP))
}

pub fn evaluate_with(
    src: &VideoClip,
    out: &VideoClip,
    gt: Option<&VideoClip>,
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        sf: metric_sf_with(src, out, cfg)?,
        mc: metric_mc_with(src, out, cfg)?,
        sc_proxy: metric_sc_proxy(out)?,
        tc_proxy: metric_tc_proxy(out)?,
        psnr_gt: gt.map(|g| psnr(out, g)).transpose()?,
    })
}

pub fn evaluate(src: &VideoClip, out: &VideoClip, gt: Option<&VideoClip>) -> Result<MetricsReport> {
    evaluate_with(src, out, gt, &MetricsConfig::default())
}
