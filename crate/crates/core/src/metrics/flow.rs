use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::GrayImage;

/// Horn–Schunck parameters. Intensities are rescaled from `[0,1]` to the
/// 8-bit range before differentiation, which is the scale `alpha` refers to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HornSchunckConfig {
    pub alpha: f32,
    pub iterations: usize,
    pub intensity_scale: f32,
}

impl Default for HornSchunckConfig {
    fn default() -> Self {
        HornSchunckConfig {
            alpha: 1.0,
            iterations: 100,
            intensity_scale: 255.0,
        }
    }
}

/// Dense flow field `(u, v)` in pixels per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: GrayImage,
    pub v: GrayImage,
}

impl FlowField {
    pub fn mean_u(&self) -> f32 {
        mean(self.u.data())
    }

    pub fn mean_v(&self) -> f32 {
        mean(self.v.data())
    }
}

fn mean(d: &[f32]) -> f32 {
    (d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64) as f32
}

/// Weighted neighbourhood average with kernel
/// `[1/12 1/6 1/12; 1/6 0 1/6; 1/12 1/6 1/12]`, replicated borders.
fn neighbourhood_average(f: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| f[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let edge = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1);
            let corner = at(y - 1, x - 1) + at(y - 1, x + 1) + at(y + 1, x - 1) + at(y + 1, x + 1);
            out[y as usize * w + x as usize] = edge / 6.0 + corner / 12.0;
        }
    }
    out
}

pub fn horn_schunck_with(f1: &GrayImage, f2: &GrayImage, cfg: &HornSchunckConfig) -> Result<FlowField> {
    if f1.height() != f2.height() || f1.width() != f2.width() {
        return Err(Error::ShapeMismatch {
            op: "horn_schunck",
            lhs: vec![f1.height(), f1.width()],
            rhs: vec![f2.height(), f2.width()],
        });
    }
    let (h, w) = (f1.height(), f1.width());
    let s = cfg.intensity_scale as f64;
    let a: Vec<f64> = f1.data().iter().map(|&v| v as f64 * s).collect();
    let b: Vec<f64> = f2.data().iter().map(|&v| v as f64 * s).collect();
    let at = |p: &[f64], y: isize, x: isize| {
        p[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
    };
    let mut ix = vec![0.0; h * w];
    let mut iy = vec![0.0; h * w];
    let mut it = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let dx = |p: &[f64]| 0.5 * (at(p, y, x + 1) - at(p, y, x - 1));
            let dy = |p: &[f64]| 0.5 * (at(p, y + 1, x) - at(p, y - 1, x));
            ix[i] = 0.5 * (dx(&a) + dx(&b));
            iy[i] = 0.5 * (dy(&a) + dy(&b));
            it[i] = b[i] - a[i];
        }
    }
    let alpha2 = (cfg.alpha as f64).powi(2);
    let mut u = vec![0.0f64; h * w];
    let mut v = vec![0.0f64; h * w];
    for _ in 0..cfg.iterations {
        let ub = neighbourhood_average(&u, h, w);
        let vb = neighbourhood_average(&v, h, w);
        for i in 0..h * w {
            let num = ix[i] * ub[i] + iy[i] * vb[i] + it[i];
            let den = alpha2 + ix[i] * ix[i] + iy[i] * iy[i];
            u[i] = ub[i] - ix[i] * num / den;
            v[i] = vb[i] - iy[i] * num / den;
        }
    }
    let to_img = |d: Vec<f64>| GrayImage::new(h, w, d.into_iter().map(|x| x as f32).collect()).expect("same dims");
    Ok(FlowField {
        u: to_img(u),
        v: to_img(v),
    })
}

pub fn horn_schunck(f1: &GrayImage, f2: &GrayImage) -> Result<FlowField> {
    horn_schunck_with(f1, f2, &HornSchunckConfig::default())
}
