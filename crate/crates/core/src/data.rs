//! Procedural scenes, paired samples with ground truth, and clip I/O.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::video::{GrayImage, Image, VideoClip, CHANNELS};

pub const CLIP_MAGIC: &[u8; 4] = b"VCLP";
pub const CLIP_VERSION: u32 = 1;
const CLIP_HEADER_LEN: usize = 4 + 4 * 5;

pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# lumaflow dataset v1";

/// Supersampling factor per axis.
const SUPERSAMPLE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Rect,
    Triangle,
}

/// One moving shape. Positions are shape centres in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    pub position: [f32; 2],
    pub velocity: [f32; 2],
    pub size: f32,
}

impl ShapeSpec {
    fn centre(&self, frame: usize) -> (f32, f32) {
        (
            self.position[0] + self.velocity[0] * frame as f32,
            self.position[1] + self.velocity[1] * frame as f32,
        )
    }

    fn contains(&self, frame: usize, x: f32, y: f32) -> bool {
        let (cx, cy) = self.centre(frame);
        let (dx, dy) = (x - cx, y - cy);
        let r = self.size * 0.5;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Rect => dx.abs() <= r && dy.abs() <= r,
            // upward isosceles triangle inscribed in the size×size box
            ShapeKind::Triangle => {
                let v = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&v) && dx.abs() <= r * v
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub color_a: [f32; 3],
    pub color_b: [f32; 3],
    /// Gradient direction in radians.
    pub angle: f32,
}

/// Global illumination and per-channel tint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Photometry {
    pub illumination: f32,
    pub tint: [f32; 3],
}

impl Photometry {
    pub const NEUTRAL: Photometry = Photometry {
        illumination: 1.0,
        tint: [1.0, 1.0, 1.0],
    };

    pub fn gain(&self, c: usize) -> f32 {
        self.illumination * self.tint[c]
    }

    pub fn random(params: &SceneParams, rng: &mut impl Rng) -> Self {
        let [lo, hi] = params.illumination;
        let [tlo, thi] = params.tint;
        Photometry {
            illumination: rng.gen_range(lo..=hi),
            tint: [
                rng.gen_range(tlo..=thi),
                rng.gen_range(tlo..=thi),
                rng.gen_range(tlo..=thi),
            ],
        }
    }
}

/// Distribution that random scenes are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub illumination: [f32; 2],
    pub tint: [f32; 2],
    /// Largest per-frame displacement of a shape centre, in pixels.
    pub max_speed: f32,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            frames: 8,
            height: 32,
            width: 32,
            min_shapes: 1,
            max_shapes: 4,
            illumination: [0.3, 1.0],
            tint: [0.8, 1.0],
            max_speed: 1.5,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height < 4 || self.width < 4 {
            return Err(Error::invalid("scenes need at least 1 frame and 4×4 pixels"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::invalid("shape count range must satisfy 1 <= min <= max"));
        }
        let [lo, hi] = self.illumination;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("illumination range must lie in (0, 1]"));
        }
        let [lo, hi] = self.tint;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("tint range must lie in (0, 1]"));
        }
        if !(self.max_speed >= 0.0) {
            return Err(Error::invalid("max_speed must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub shapes: Vec<ShapeSpec>,
    pub background: Background,
    pub photometry: Photometry,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

fn random_color(rng: &mut impl Rng, lo: f32) -> [f32; 3] {
    [
        rng.gen_range(lo..=1.0),
        rng.gen_range(lo..=1.0),
        rng.gen_range(lo..=1.0),
    ]
}

impl SceneSpec {
    pub fn random(seed: u64, params: &SceneParams) -> Result<Self> {
        params.validate()?;
        let mut rng = stream(seed, &[0x5343_454e]);
        let (w, h) = (params.width as f32, params.height as f32);
        let n = rng.gen_range(params.min_shapes..=params.max_shapes);
        let span = (params.frames.max(2) - 1) as f32;
        let shapes = (0..n)
            .map(|_| {
                let kind = match rng.gen_range(0..3) {
                    0 => ShapeKind::Circle,
                    1 => ShapeKind::Rect,
                    _ => ShapeKind::Triangle,
                };
                let size = rng.gen_range(0.2..=0.45) * w.min(h);
                // start and end centres both inside the frame keep the whole
                // linear path in frame
                let start = [rng.gen_range(0.15 * w..=0.85 * w), rng.gen_range(0.15 * h..=0.85 * h)];
                let reach = params.max_speed * span;
                let end = [
                    (start[0] + rng.gen_range(-reach..=reach)).clamp(0.1 * w, 0.9 * w),
                    (start[1] + rng.gen_range(-reach..=reach)).clamp(0.1 * h, 0.9 * h),
                ];
                let velocity = if params.frames > 1 {
                    [(end[0] - start[0]) / span, (end[1] - start[1]) / span]
                } else {
                    [0.0, 0.0]
                };
                ShapeSpec {
                    kind,
                    color: random_color(&mut rng, 0.1),
                    position: start,
                    velocity,
                    size,
                }
            })
            .collect();
        let background = Background {
            color_a: random_color(&mut rng, 0.0),
            color_b: random_color(&mut rng, 0.0),
            angle: rng.gen_range(0.0..std::f32::consts::TAU),
        };
        let photometry = Photometry::random(params, &mut rng);
        Ok(SceneSpec {
            seed,
            shapes,
            background,
            photometry,
            frames: params.frames,
            height: params.height,
            width: params.width,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        let in_unit = |c: &[f32; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.background.color_a) || !in_unit(&self.background.color_b) {
            return Err(Error::invalid("background colours must lie in [0, 1]"));
        }
        for s in &self.shapes {
            if !in_unit(&s.color) || !(s.size > 0.0) {
                return Err(Error::invalid("shape colours must lie in [0, 1] and sizes be positive"));
            }
        }
        Ok(())
    }

    fn background_at(&self, x: f32, y: f32) -> [f32; 3] {
        let (w, h) = (self.width as f32, self.height as f32);
        let (dx, dy) = (self.background.angle.cos(), self.background.angle.sin());
        let extent = 0.5 * (w * dx.abs() + h * dy.abs());
        let proj = (x - 0.5 * w) * dx + (y - 0.5 * h) * dy;
        let s = if extent > 0.0 {
            (proj / extent * 0.5 + 0.5).clamp(0.0, 1.0)
        } else {
            0.5
        };
        let (a, b) = (self.background.color_a, self.background.color_b);
        [0, 1, 2].map(|c| (1.0 - s) * a[c] + s * b[c])
    }
}

/// Rendered clip plus the union shape-coverage mask of every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub clip: VideoClip,
    pub coverage: Vec<GrayImage>,
}

/// Rasterise with the scene's own photometry.
pub fn render(spec: &SceneSpec) -> Result<VideoClip> {
    Ok(render_with(spec, &spec.photometry)?.clip)
}

/// Rasterise with 2×2 supersampling, then scale every pixel by
/// `illumination · tint` and clamp.
pub fn render_with(spec: &SceneSpec, photometry: &Photometry) -> Result<Rendered> {
    let mut r = render_unclamped(spec, photometry)?;
    r.clip.clamp01();
    Ok(r)
}

fn render_unclamped(spec: &SceneSpec, photometry: &Photometry) -> Result<Rendered> {
    spec.validate()?;
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let mut clip = VideoClip::zeros(t_n, h, w);
    let mut coverage = Vec::with_capacity(t_n);
    let plane = h * w;
    let sub = SUPERSAMPLE * SUPERSAMPLE;
    let offsets: Vec<(f32, f32)> = (0..sub)
        .map(|k| {
            let (i, j) = (k / SUPERSAMPLE, k % SUPERSAMPLE);
            (
                (j as f32 + 0.5) / SUPERSAMPLE as f32,
                (i as f32 + 0.5) / SUPERSAMPLE as f32,
            )
        })
        .collect();
    for f in 0..t_n {
        let mut mask = vec![0.0f32; plane];
        let frame = &mut clip.data_mut()[f * CHANNELS * plane..(f + 1) * CHANNELS * plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                let mut covered = 0usize;
                for &(ox, oy) in &offsets {
                    let (sx, sy) = (x as f32 + ox, y as f32 + oy);
                    let mut colour = spec.background_at(sx, sy);
                    let mut hit = false;
                    for s in &spec.shapes {
                        if s.contains(f, sx, sy) {
                            colour = s.color;
                            hit = true;
                        }
                    }
                    covered += hit as usize;
                    for c in 0..3 {
                        acc[c] += colour[c];
                    }
                }
                let i = y * w + x;
                for c in 0..3 {
                    frame[c * plane + i] = acc[c] / sub as f32 * photometry.gain(c);
                }
                mask[i] = covered as f32 / sub as f32;
            }
        }
        coverage.push(GrayImage::new(h, w, mask)?);
    }
    Ok(Rendered { clip, coverage })
}

/// Source, reference and ground-truth target sharing one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub source: VideoClip,
    /// First frame of `target_gt`.
    pub reference: Image,
    pub target_gt: VideoClip,
}

pub fn make_paired(spec: &SceneSpec, a: &Photometry, b: &Photometry) -> Result<PairedSample> {
    let src = render_with(spec, a)?;
    let tgt = render_with(spec, b)?;
    if src.coverage != tgt.coverage {
        return Err(Error::invalid("paired renders disagree on shape coverage"));
    }
    Ok(PairedSample {
        reference: tgt.clip.first_frame(),
        source: src.clip,
        target_gt: tgt.clip,
    })
}

/// Per-sample seed of dataset entry `index`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, &[index as u64])
}

pub fn generate_clips(count: usize, seed: u64, params: &SceneParams) -> Result<Vec<(u64, VideoClip)>> {
    (0..count)
        .map(|i| {
            let s = sample_seed(seed, i);
            Ok((s, render(&SceneSpec::random(s, params)?)?))
        })
        .collect()
}

pub fn paired_from_seed(seed: u64, params: &SceneParams) -> Result<PairedSample> {
    let spec = SceneSpec::random(seed, params)?;
    let mut rng = stream(seed, &[0x5041_4952]);
    let b = Photometry::random(params, &mut rng);
    make_paired(&spec, &spec.photometry, &b)
}

pub fn generate_paired(count: usize, seed: u64, params: &SceneParams) -> Result<Vec<(u64, PairedSample)>> {
    (0..count)
        .map(|i| {
            let s = sample_seed(seed, i);
            Ok((s, paired_from_seed(s, params)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// clip container

pub fn encode_clip(clip: &VideoClip) -> Vec<u8> {
    let [t, c, h, w] = clip.shape();
    let mut buf = Vec::with_capacity(CLIP_HEADER_LEN + clip.data().len() * 4);
    buf.extend_from_slice(CLIP_MAGIC);
    for v in [CLIP_VERSION, t as u32, c as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in clip.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_clip(buf: &[u8]) -> Result<VideoClip> {
    if buf.len() < CLIP_HEADER_LEN {
        return Err(Error::format("VCLP", format!("header truncated ({} bytes)", buf.len())));
    }
    if &buf[..4] != CLIP_MAGIC {
        return Err(Error::format("VCLP", "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != CLIP_VERSION {
        return Err(Error::format("VCLP", format!("unsupported version {version}")));
    }
    let (t, c, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    if c != CHANNELS {
        return Err(Error::format("VCLP", format!("expected {CHANNELS} channels, got {c}")));
    }
    let n = t
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format("VCLP", "dimensions overflow"))?;
    let body = &buf[CLIP_HEADER_LEN..];
    if body.len() != n * 4 {
        return Err(Error::format(
            "VCLP",
            format!("expected {} data bytes, found {}", n * 4, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    VideoClip::new(t, h, w, data)
}

pub fn write_clip(path: impl AsRef<Path>, clip: &VideoClip) -> Result<()> {
    fs::write(path, encode_clip(clip))?;
    Ok(())
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<VideoClip> {
    decode_clip(&fs::read(path)?)
}

/// Reads a clip and returns its first frame (images are stored as one-frame clips).
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    Ok(read_clip(path)?.first_frame())
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_clip(path, &VideoClip::repeat(img, 1))
}

/// `round(v · 255)` with halves rounded up, after clamping to [0, 1].
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            buf.extend(img.rgb(y, x).map(to_u8));
        }
    }
    buf
}

/// Writes `<stem>_<frame>.ppm` for every frame and returns the paths.
pub fn export_frames(clip: &VideoClip, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    clip.iter_frames()
        .enumerate()
        .map(|(i, frame)| {
            let path = dir.join(format!("{stem}_{i:03}.ppm"));
            fs::write(&path, encode_ppm(&frame))?;
            Ok(path)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// dataset directories

/// One manifest line: the files of a sample followed by its scene seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub paths: Vec<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub paired: bool,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MANIFEST_HEADER}\n# kind {}\n",
            if self.paired { "paired" } else { "clips" }
        );
        for e in &self.entries {
            s.push_str(&e.paths.join(" "));
            s.push_str(&format!(" {}\n", e.seed));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::format("manifest", "missing header"));
        }
        let paired = match lines.next() {
            Some("# kind paired") => true,
            Some("# kind clips") => false,
            other => return Err(Error::format("manifest", format!("bad kind line {other:?}"))),
        };
        let expected = if paired { 4 } else { 2 };
        let entries = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let fields: Vec<&str> = l.split_whitespace().collect();
                if fields.len() != expected {
                    return Err(Error::format(
                        "manifest",
                        format!("expected {expected} fields in `{l}`"),
                    ));
                }
                let seed = fields[expected - 1]
                    .parse()
                    .map_err(|_| Error::format("manifest", format!("bad seed in `{l}`")))?;
                Ok(ManifestEntry {
                    paths: fields[..expected - 1].iter().map(|s| s.to_string()).collect(),
                    seed,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Manifest { paired, entries })
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(dir.as_ref().join(MANIFEST_NAME))?)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(dir.as_ref().join(MANIFEST_NAME))?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }
}

/// Generate `count` clips (or paired triples) into `dir` with a manifest.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    count: usize,
    seed: u64,
    params: &SceneParams,
    paired: bool,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        paired,
        entries: Vec::with_capacity(count),
    };
    for i in 0..count {
        let s = sample_seed(seed, i);
        let paths = if paired {
            let p = paired_from_seed(s, params)?;
            let names = [
                format!("{i:05}_source.vclp"),
                format!("{i:05}_reference.vclp"),
                format!("{i:05}_target.vclp"),
            ];
            write_clip(dir.join(&names[0]), &p.source)?;
            write_image(dir.join(&names[1]), &p.reference)?;
            write_clip(dir.join(&names[2]), &p.target_gt)?;
            names.to_vec()
        } else {
            let name = format!("{i:05}.vclp");
            write_clip(dir.join(&name), &render(&SceneSpec::random(s, params)?)?)?;
            vec![name]
        };
        manifest.entries.push(ManifestEntry { paths, seed: s });
    }
    manifest.write(dir)?;
    Ok(manifest)
}

/// Training clips of a dataset directory (sources, for paired datasets).
pub fn load_clips(dir: impl AsRef<Path>) -> Result<Vec<VideoClip>> {
    let dir = dir.as_ref();
    let m = Manifest::read(dir)?;
    m.entries.iter().map(|e| read_clip(dir.join(&e.paths[0]))).collect()
}

pub fn load_paired(dir: impl AsRef<Path>) -> Result<Vec<PairedSample>> {
    let dir = dir.as_ref();
    let m = Manifest::read(dir)?;
    if !m.paired {
        return Err(Error::invalid(format!("{} is not a paired dataset", dir.display())));
    }
    m.entries
        .iter()
        .map(|e| {
            Ok(PairedSample {
                source: read_clip(dir.join(&e.paths[0]))?,
                reference: read_image(dir.join(&e.paths[1]))?,
                target_gt: read_clip(dir.join(&e.paths[2]))?,
            })
        })
        .collect()
}

/// Re-render every paired entry from its seed and check the stored files
/// match and that the geometry of source and target agree.
pub fn validate_paired_dataset(dir: impl AsRef<Path>, params: &SceneParams) -> Result<usize> {
    let dir = dir.as_ref();
    let m = Manifest::read(dir)?;
    for (i, (e, p)) in m.entries.iter().zip(load_paired(dir)?).enumerate() {
        let spec = SceneSpec::random(e.seed, params)?;
        let ca = render_with(&spec, &Photometry::NEUTRAL)?.coverage;
        let cb = render_with(
            &spec,
            &Photometry {
                illumination: 0.5,
                tint: [0.7, 0.9, 0.6],
            },
        )?
        .coverage;
        if ca != cb || p != paired_from_seed(e.seed, params)? {
            return Err(Error::invalid(format!("paired sample {i} failed validation")));
        }
    }
    Ok(m.entries.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::canny;

    fn params() -> SceneParams {
        SceneParams::default()
    }

    #[test]
    fn render_is_deterministic() {
        let spec = SceneSpec::random(5, &params()).unwrap();
        assert_eq!(render(&spec).unwrap(), render(&spec).unwrap());
        assert_eq!(SceneSpec::random(5, &params()).unwrap(), spec);
        assert_ne!(SceneSpec::random(6, &params()).unwrap(), spec);
    }

    #[test]
    fn illumination_is_multiplicative() {
        let spec = SceneSpec::random(7, &params()).unwrap();
        let full = render_unclamped(&spec, &Photometry::NEUTRAL).unwrap().clip;
        let half = render_unclamped(
            &spec,
            &Photometry {
                illumination: 0.5,
                tint: [1.0; 3],
            },
        )
        .unwrap()
        .clip;
        for (a, b) in full.data().iter().zip(half.data()) {
            assert!((0.5 * a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn static_scene_frames_are_identical() {
        let mut spec = SceneSpec::random(8, &params()).unwrap();
        spec.shapes.iter_mut().for_each(|s| s.velocity = [0.0, 0.0]);
        let clip = render(&spec).unwrap();
        for f in 1..clip.frames() {
            assert_eq!(clip.frame_slice(f), clip.frame_slice(0));
        }
    }

    #[test]
    fn shapes_stay_in_frame_and_values_in_range() {
        for seed in 0..50 {
            let spec = SceneSpec::random(seed, &params()).unwrap();
            assert!((1..=4).contains(&spec.shapes.len()));
            for s in &spec.shapes {
                for f in 0..spec.frames {
                    let (x, y) = s.centre(f);
                    assert!(x >= 0.0 && x <= spec.width as f32 && y >= 0.0 && y <= spec.height as f32);
                }
            }
            let r = render_with(&spec, &spec.photometry).unwrap();
            assert!(r.clip.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(r.coverage.iter().all(|m| m.data().iter().any(|&v| v > 0.0)));
        }
    }

    #[test]
    fn paired_samples_share_geometry() {
        let spec = SceneSpec::random(3, &params()).unwrap();
        let same = make_paired(&spec, &spec.photometry, &spec.photometry).unwrap();
        assert_eq!(same.source, same.target_gt);
        let b = Photometry {
            illumination: 0.6,
            tint: [0.9, 0.7, 1.0],
        };
        let p = make_paired(&spec, &spec.photometry, &b).unwrap();
        assert_eq!(p.reference, p.target_gt.first_frame());
        let ca = render_with(&spec, &spec.photometry).unwrap().coverage;
        let cb = render_with(&spec, &b).unwrap().coverage;
        assert_eq!(ca, cb);
    }

    fn edge_iou(a: &VideoClip, b: &VideoClip, f: usize) -> f32 {
        let ea = canny(&a.frame(f).luma());
        let eb = canny(&b.frame(f).luma());
        let inter = ea
            .data()
            .iter()
            .zip(eb.data())
            .filter(|(x, y)| **x > 0.5 && **y > 0.5)
            .count();
        let union = ea
            .data()
            .iter()
            .zip(eb.data())
            .filter(|(x, y)| **x > 0.5 || **y > 0.5)
            .count();
        if union == 0 {
            1.0
        } else {
            inter as f32 / union as f32
        }
    }

    #[test]
    fn illumination_pairs_keep_edges_per_frame() {
        for seed in 0..20 {
            let spec = SceneSpec::random(seed, &params()).unwrap();
            let b = Photometry {
                illumination: 0.35,
                tint: spec.photometry.tint,
            };
            let p = make_paired(&spec, &spec.photometry, &b).unwrap();
            for f in 0..p.source.frames() {
                let iou = edge_iou(&p.source, &p.target_gt, f);
                assert!(iou >= 0.9, "seed {seed} frame {f}: IoU {iou}");
            }
        }
    }

    #[test]
    fn tinted_pairs_keep_edges_on_average() {
        // per-channel tint re-weights luma contrast between colours, so
        // individual weak edges can cross the relative Canny thresholds
        let mut ious = Vec::new();
        for seed in 0..20 {
            let p = paired_from_seed(seed, &params()).unwrap();
            ious.extend((0..p.source.frames()).map(|f| edge_iou(&p.source, &p.target_gt, f)));
        }
        let mean = ious.iter().sum::<f32>() / ious.len() as f32;
        assert!(mean >= 0.9, "mean IoU {mean}");
    }

    #[test]
    fn clip_roundtrip_and_guards() {
        let clip = render(&SceneSpec::random(1, &params()).unwrap()).unwrap();
        let bytes = encode_clip(&clip);
        assert_eq!(&bytes[..4], b"VCLP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = decode_clip(&bytes).unwrap();
        assert_eq!(back, clip);
        assert_eq!(encode_clip(&back), bytes);
        assert!(decode_clip(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_clip(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode_clip(&bad).is_err());
        bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_clip(&bad).is_err());
    }

    #[test]
    fn ppm_rounds_half_up() {
        let img = Image::filled(2, 3, 0.5);
        let ppm = encode_ppm(&img);
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert!(ppm[header.len()..].iter().all(|&b| b == 128));
        assert_eq!(ppm.len(), header.len() + 18);
        assert_eq!(to_u8(0.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(2.0), 255);
    }

    #[test]
    fn dataset_directories_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let small = SceneParams {
            frames: 2,
            height: 8,
            width: 8,
            ..params()
        };
        let m = write_dataset(dir.path().join("a"), 3, 11, &small, true).unwrap();
        assert_eq!(Manifest::read(dir.path().join("a")).unwrap(), m);
        assert_eq!(validate_paired_dataset(dir.path().join("a"), &small).unwrap(), 3);
        let paired = load_paired(dir.path().join("a")).unwrap();
        assert_eq!(paired[1], paired_from_seed(sample_seed(11, 1), &small).unwrap());

        write_dataset(dir.path().join("b"), 0, 11, &small, false).unwrap();
        assert!(load_clips(dir.path().join("b")).unwrap().is_empty());

        write_dataset(dir.path().join("c"), 2, 4, &small, false).unwrap();
        write_dataset(dir.path().join("d"), 2, 4, &small, false).unwrap();
        for name in [MANIFEST_NAME, "00000.vclp", "00001.vclp"] {
            assert_eq!(
                fs::read(dir.path().join("c").join(name)).unwrap(),
                fs::read(dir.path().join("d").join(name)).unwrap()
            );
        }
    }
}
