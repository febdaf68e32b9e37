//! Plain pixel containers: RGB images, RGB video clips, grayscale planes.
//!
//! All buffers are channel-major (`C x H x W` per frame) `f32`, matching the
//! tensor layout consumed by the velocity network.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHANNELS: usize = 3;

/// Rec. 601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// `3 x H x W` RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::InvalidShape {
                op: "image",
                detail: format!(
                    "{}x{height}x{width} needs {} values, got {}",
                    CHANNELS,
                    CHANNELS * height * width,
                    data.len()
                ),
            });
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let n = self.height * self.width;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * n + i] = v;
        }
    }

    pub fn luma(&self) -> GrayImage {
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| LUMA[0] * self.data[i] + LUMA[1] * self.data[n + i] + LUMA[2] * self.data[2 * n + i])
            .collect();
        GrayImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        max_abs_diff(&self.data, &other.data)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![CHANNELS, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("image buffer matches its shape")
    }
}

/// `T x 3 x H x W` RGB video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * CHANNELS * height * width {
            return Err(Error::InvalidShape {
                op: "video",
                detail: format!(
                    "{frames}x{CHANNELS}x{height}x{width} needs {} values, got {}",
                    frames * CHANNELS * height * width,
                    data.len()
                ),
            });
        }
        Ok(VideoClip {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        VideoClip {
            frames,
            height,
            width,
            data: vec![0.0; frames * CHANNELS * height * width],
        }
    }

    pub fn from_frames(frames: &[Image]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("video needs at least one frame"))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(frames.len() * CHANNELS * h * w);
        for f in frames {
            if f.height() != h || f.width() != w {
                return Err(Error::ShapeMismatch {
                    op: "video",
                    lhs: vec![h, w],
                    rhs: vec![f.height(), f.width()],
                });
            }
            data.extend_from_slice(f.data());
        }
        VideoClip::new(frames.len(), h, w, data)
    }

    /// Clip whose every frame is `image`.
    pub fn repeat(image: &Image, frames: usize) -> Self {
        let mut data = Vec::with_capacity(frames * image.data.len());
        for _ in 0..frames {
            data.extend_from_slice(&image.data);
        }
        VideoClip {
            frames,
            height: image.height,
            width: image.width,
            data,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, CHANNELS, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn frame_len(&self) -> usize {
        CHANNELS * self.height * self.width
    }

    pub fn frame(&self, t: usize) -> Image {
        let n = self.frame_len();
        Image {
            height: self.height,
            width: self.width,
            data: self.data[t * n..(t + 1) * n].to_vec(),
        }
    }

    pub fn frame_slice(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn set_frame(&mut self, t: usize, image: &Image) {
        let n = self.frame_len();
        self.data[t * n..(t + 1) * n].copy_from_slice(&image.data);
    }

    pub fn first_frame(&self) -> Image {
        self.frame(0)
    }

    pub fn iter_frames(&self) -> impl Iterator<Item = Image> + '_ {
        (0..self.frames).map(|t| self.frame(t))
    }

    pub fn same_shape(&self, other: &VideoClip) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, op: &'static str, other: &VideoClip) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            })
        }
    }

    /// Elementwise combination of two same-shaped clips.
    pub fn zip_map(&self, other: &VideoClip, f: impl Fn(f32, f32) -> f32) -> Result<VideoClip> {
        self.ensure_same_shape("zip_map", other)?;
        Ok(VideoClip {
            frames: self.frames,
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> VideoClip {
        VideoClip {
            frames: self.frames,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn max_abs_diff(&self, other: &VideoClip) -> f32 {
        max_abs_diff(&self.data, &other.data)
    }

    pub fn mean_abs_diff(&self, other: &VideoClip) -> f32 {
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs() as f64)
            .sum();
        (s / self.data.len() as f64) as f32
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape().to_vec(),
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("clip buffer matches its shape")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<VideoClip> {
        match t.shape() {
            &[f, c, h, w] if c == CHANNELS => {
                VideoClip::new(f, h, w, t.data().iter().map(|v| v.to_f64_lossy() as f32).collect())
            }
            s => Err(Error::InvalidShape {
                op: "video",
                detail: format!("expected [T,3,H,W], got {s:?}"),
            }),
        }
    }
}

/// Velocity prediction or target over a clip-shaped state.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField(VideoClip);

impl VelocityField {
    pub fn from_clip(clip: VideoClip) -> Self {
        VelocityField(clip)
    }

    pub fn zeros_like(clip: &VideoClip) -> Self {
        VelocityField(VideoClip::zeros(clip.frames(), clip.height(), clip.width()))
    }

    pub fn as_clip(&self) -> &VideoClip {
        &self.0
    }

    pub fn into_clip(self) -> VideoClip {
        self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn shape(&self) -> [usize; 4] {
        self.0.shape()
    }

    pub fn zip_map(&self, other: &VelocityField, f: impl Fn(f32, f32) -> f32) -> Result<VelocityField> {
        Ok(VelocityField(self.0.zip_map(&other.0, f)?))
    }

    pub fn max_abs(&self) -> f32 {
        self.0.data().iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f32 {
        self.0
            .data()
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt() as f32
    }
}

/// Single-channel `H x W` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                op: "gray image",
                detail: format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            });
        }
        Ok(GrayImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        GrayImage {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        GrayImage { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Border-replicating access.
    pub fn get_clamped(&self, y: isize, x: isize) -> f32 {
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        self.data[yy * self.width + xx]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub(crate) fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |m, (&x, &y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip() {
        let img = Image::from_fn(4, 5, |c, y, x| (c * 100 + y * 10 + x) as f32 / 1000.0);
        let mut clip = VideoClip::repeat(&img, 3);
        assert_eq!(clip.shape(), [3, 3, 4, 5]);
        assert_eq!(clip.frame(2), img);
        let dark = img.map(|v| v * 0.5);
        clip.set_frame(1, &dark);
        assert_eq!(clip.frame(1), dark);
        assert_eq!(clip.frame(0), img);
    }

    #[test]
    fn luma_uses_rec601_weights() {
        let mut img = Image::filled(1, 1, 0.0);
        img.set_rgb(0, 0, [1.0, 0.0, 0.0]);
        assert!((img.luma().get(0, 0) - 0.299).abs() < 1e-7);
        img.set_rgb(0, 0, [1.0, 1.0, 1.0]);
        assert!((img.luma().get(0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bad_buffers_are_rejected() {
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
        assert!(VideoClip::new(2, 2, 2, vec![0.0; 23]).is_err());
        assert!(GrayImage::new(2, 3, vec![0.0; 5]).is_err());
    }
}
