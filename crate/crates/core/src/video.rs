//! Frame sequences, PPM + JSON manifest I/O, synthetic clips and metrics.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `T×H×W×C` frames with values in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
    pub frame_rate_hint: Option<(u32, u32)>,
}

impl FrameSequence {
    pub fn new(t: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if t == 0 {
            return Err(Error::EmptyVideo);
        }
        if c != 1 && c != 3 {
            return Err(Error::Invalid(format!("channel count must be 1 or 3, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Invalid(format!("frame size {h}x{w}")));
        }
        if data.len() != t * h * w * c {
            return Err(Error::Shape(format!("{} values for {t}x{h}x{w}x{c} frames", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("frame value {bad} outside [0, 1]")));
        }
        Ok(Self { t, h, w, c, data, frame_rate_hint: None })
    }

    /// Clamps `data` into `[0, 1]` before construction (NaN becomes 0).
    pub fn from_clamped(t: usize, h: usize, w: usize, c: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(t, h, w, c, data)
    }

    pub fn from_frames(frames: &[&[f32]], h: usize, w: usize, c: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * h * w * c);
        for f in frames {
            if f.len() != h * w * c {
                return Err(Error::Shape(format!("frame of {} values, expected {}", f.len(), h * w * c)));
            }
            data.extend_from_slice(f);
        }
        Self::new(frames.len(), h, w, c, data)
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.t, self.h, self.w, self.c]
    }

    pub fn frame_size(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_size();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t {
            return Err(Error::Invalid(format!("frame range {start}..{end} of {}", self.t)));
        }
        let n = self.frame_size();
        Self::new(end - start, self.h, self.w, self.c, self.data[start * n..end * n].to_vec())
    }

    /// Repeats the last frame `extra` more times.
    pub fn pad_repeat_last(&self, extra: usize) -> Self {
        let mut data = self.data.clone();
        let last = self.frame(self.t - 1).to_vec();
        for _ in 0..extra {
            data.extend_from_slice(&last);
        }
        Self { t: self.t + extra, data, ..self.clone() }
    }

    pub fn same_shape(&self, other: &FrameSequence) -> bool {
        self.dims() == other.dims()
    }
}

// ----- file I/O -----

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frame_count: usize,
    pub frame_files: Vec<String>,
    pub generator_seed: Option<u64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn quantize(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encodes one frame as binary PPM (3 channels) or PGM (1 channel).
pub fn encode_pnm(frame: &[f32], h: usize, w: usize, c: usize) -> Vec<u8> {
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.iter().map(|&v| quantize(v)));
    out
}

fn decode_pnm(bytes: &[u8], file: &str) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bad = |reason: &str| Error::BadFrame { file: file.to_string(), reason: reason.to_string() };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
    }
    pos += 1; // single whitespace byte after maxval
    let c = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(bad(&format!("unsupported magic {other}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field {s:?}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit frames are supported"));
    }
    let n = w * h * c;
    if bytes.len() < pos + n {
        return Err(bad("truncated pixel data"));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok((h, w, c, data))
}

/// Writes one PPM per frame plus `manifest.json` into `dir`.
pub fn save_video(seq: &FrameSequence, dir: &Path) -> Result<VideoManifest> {
    save_video_with_seed(seq, dir, None)
}

pub fn save_video_with_seed(seq: &FrameSequence, dir: &Path, seed: Option<u64>) -> Result<VideoManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = if seq.c == 3 { "ppm" } else { "pgm" };
    let mut files = Vec::with_capacity(seq.t);
    for t in 0..seq.t {
        let name = format!("frame_{t:05}.{ext}");
        let path = dir.join(&name);
        fs::write(&path, encode_pnm(seq.frame(t), seq.h, seq.w, seq.c)).map_err(|e| Error::io(&path, e))?;
        files.push(name);
    }
    let manifest = VideoManifest {
        width: seq.w,
        height: seq.h,
        channels: seq.c,
        frame_count: seq.t,
        frame_files: files,
        generator_seed: seed,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<VideoManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest { path: path.to_path_buf(), reason: e.to_string() })
}

/// Resolves a manifest path given either the file itself or its directory.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn load_video(manifest_path: &Path) -> Result<FrameSequence> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.frame_files.is_empty() {
        return Err(Error::EmptyVideo);
    }
    if manifest.frame_count != manifest.frame_files.len() {
        return Err(Error::Manifest {
            path: manifest_path.to_path_buf(),
            reason: format!(
                "frame_count {} but {} frame files listed",
                manifest.frame_count,
                manifest.frame_files.len()
            ),
        });
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let (h, w, c) = (manifest.height, manifest.width, manifest.channels);
    let mut data = Vec::with_capacity(manifest.frame_count * h * w * c);
    for name in &manifest.frame_files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (fh, fw, fc, px) = decode_pnm(&bytes, name)?;
        if (fh, fw, fc) != (h, w, c) {
            return Err(Error::FrameMismatch {
                file: name.clone(),
                expected: format!("{w}x{h}x{c}"),
                found: format!("{fw}x{fh}x{fc}"),
            });
        }
        data.extend(px);
    }
    FrameSequence::new(manifest.frame_count, h, w, c, data)
}

// ----- synthetic clips -----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Linear,
    Sinusoidal,
    Bounce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Solid,
    Gradient,
    NoiseTexture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape_count: usize,
    pub motion_kind: MotionKind,
    /// Pixels per frame.
    pub speed_range: (f32, f32),
    /// Shape diameter in pixels.
    pub size_range: (u32, u32),
    pub background: Background,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shape_count: 3,
            motion_kind: MotionKind::Bounce,
            speed_range: (0.5, 2.0),
            size_range: (6, 12),
            background: Background::Gradient,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.speed_range;
        let (z0, z1) = self.size_range;
        if !(s0 >= 0.0 && s0 <= s1 && s1.is_finite()) {
            return Err(Error::Invalid(format!("speed_range {:?} must be non-negative and ordered", self.speed_range)));
        }
        if z0 == 0 || z0 > z1 {
            return Err(Error::Invalid(format!("size_range {:?} must be positive and ordered", self.size_range)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Sprite {
    round: bool,
    radius: f32,
    color: [f32; 3],
    start: [f32; 2],
    velocity: [f32; 2],
    omega: f32,
    phase: f32,
}

const SINE_OMEGA: (f32, f32) = (0.15, 0.45);

/// Reflects an unbounded coordinate into `[lo, hi]`.
fn fold(p: f32, lo: f32, hi: f32) -> f32 {
    let span = hi - lo;
    if span <= 0.0 {
        return 0.5 * (lo + hi);
    }
    let q = (p - lo).rem_euclid(2.0 * span);
    lo + if q > span { 2.0 * span - q } else { q }
}

impl Sprite {
    fn center(&self, t: f32, motion: MotionKind, h: usize, w: usize) -> [f32; 2] {
        match motion {
            MotionKind::Linear => [self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t],
            MotionKind::Sinusoidal => {
                let k = ((self.omega * t + self.phase).sin() - self.phase.sin()) / self.omega;
                [self.start[0] + self.velocity[0] * k, self.start[1] + self.velocity[1] * k]
            }
            MotionKind::Bounce => [
                fold(self.start[0] + self.velocity[0] * t, self.radius, h as f32 - self.radius),
                fold(self.start[1] + self.velocity[1] * t, self.radius, w as f32 - self.radius),
            ],
        }
    }

    fn coverage(&self, y: f32, x: f32, c: [f32; 2]) -> f32 {
        if self.round {
            let d = ((y - c[0]).powi(2) + (x - c[1]).powi(2)).sqrt();
            (self.radius + 0.5 - d).clamp(0.0, 1.0)
        } else {
            let cy = (self.radius + 0.5 - (y - c[0]).abs()).clamp(0.0, 1.0);
            let cx = (self.radius + 0.5 - (x - c[1]).abs()).clamp(0.0, 1.0);
            cy * cx
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

fn render_background(kind: Background, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut bg = vec![0.0f32; h * w * 3];
    match kind {
        Background::Solid => {
            let c = random_color(rng);
            for px in bg.chunks_mut(3) {
                px.copy_from_slice(&c);
            }
        }
        Background::Gradient => {
            let (a, b) = (random_color(rng), random_color(rng));
            let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let (dy, dx) = (angle.sin(), angle.cos());
            let proj = |y: f32, x: f32| y * dy + x * dx;
            let corners = [proj(0.0, 0.0), proj(h as f32, 0.0), proj(0.0, w as f32), proj(h as f32, w as f32)];
            let lo = corners.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = corners.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            for y in 0..h {
                for x in 0..w {
                    let s = (proj(y as f32 + 0.5, x as f32 + 0.5) - lo) / (hi - lo).max(1e-6);
                    for ch in 0..3 {
                        bg[(y * w + x) * 3 + ch] = a[ch] + (b[ch] - a[ch]) * s;
                    }
                }
            }
        }
        Background::NoiseTexture => {
            const CELL: usize = 8;
            let gh = h / CELL + 2;
            let gw = w / CELL + 2;
            let grid: Vec<[f32; 3]> = (0..gh * gw).map(|_| random_color(rng)).collect();
            for y in 0..h {
                for x in 0..w {
                    let fy = y as f32 / CELL as f32;
                    let fx = x as f32 / CELL as f32;
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
                    for ch in 0..3 {
                        let g = |yy: usize, xx: usize| grid[yy * gw + xx][ch];
                        let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
                        let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
                        bg[(y * w + x) * 3 + ch] = top * (1.0 - ty) + bot * ty;
                    }
                }
            }
        }
    }
    bg
}

fn sprites(spec: &SyntheticSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<Sprite> {
    (0..spec.shape_count)
        .map(|_| {
            let round = rng.gen_bool(0.5);
            let size = rng.gen_range(spec.size_range.0..=spec.size_range.1);
            let radius = size as f32 / 2.0;
            let color = random_color(rng);
            let place = |rng: &mut ChaCha8Rng, extent: usize| {
                let lo = radius.min(extent as f32 / 2.0);
                let hi = (extent as f32 - radius).max(lo);
                if hi > lo {
                    rng.gen_range(lo..=hi)
                } else {
                    lo
                }
            };
            let start = [place(rng, h), place(rng, w)];
            let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let (s0, s1) = spec.speed_range;
            let speed = if s1 > s0 { rng.gen_range(s0..=s1) } else { s0 };
            let omega = rng.gen_range(SINE_OMEGA.0..SINE_OMEGA.1);
            let phase = rng.gen_range(0.0..std::f32::consts::TAU);
            Sprite { round, radius, color, start, velocity: [speed * angle.sin(), speed * angle.cos()], omega, phase }
        })
        .collect()
}

/// Per-frame `[row, col]` centers of every shape, in pixel units.
pub fn shape_tracks(spec: &SyntheticSpec, t: usize, h: usize, w: usize, seed: u64) -> Vec<Vec<[f32; 2]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let _ = render_background(spec.background, h, w, &mut rng);
    sprites(spec, h, w, &mut rng)
        .iter()
        .map(|s| (0..t).map(|f| s.center(f as f32, spec.motion_kind, h, w)).collect())
        .collect()
}

/// Renders a deterministic clip of moving anti-aliased shapes over a static background.
pub fn gen_synthetic(spec: &SyntheticSpec, t: usize, h: usize, w: usize, seed: u64) -> Result<FrameSequence> {
    spec.validate()?;
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!("clip dimensions {t}x{h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = render_background(spec.background, h, w, &mut rng);
    let shapes = sprites(spec, h, w, &mut rng);
    let mut data = Vec::with_capacity(t * h * w * 3);
    for f in 0..t {
        let mut frame = bg.clone();
        for s in &shapes {
            let c = s.center(f as f32, spec.motion_kind, h, w);
            for y in 0..h {
                for x in 0..w {
                    let a = s.coverage(y as f32 + 0.5, x as f32 + 0.5, c);
                    if a > 0.0 {
                        let px = &mut frame[(y * w + x) * 3..(y * w + x) * 3 + 3];
                        for ch in 0..3 {
                            px[ch] = px[ch] * (1.0 - a) + s.color[ch] * a;
                        }
                    }
                }
            }
        }
        data.extend(frame);
    }
    FrameSequence::from_clamped(t, h, w, 3, data)
}

// ----- temporal resampling and metrics -----

/// Keeps frames `0, s, 2s, …, T−1`.
pub fn downsample_temporal(seq: &FrameSequence, s: usize) -> Result<FrameSequence> {
    if s == 0 {
        return Err(Error::Invalid("temporal factor must be >= 1".into()));
    }
    if !(seq.t - 1).is_multiple_of(s) {
        return Err(Error::Divisibility(format!("(T-1) = {} is not divisible by s = {s}", seq.t - 1)));
    }
    let frames: Vec<&[f32]> = (0..seq.t).step_by(s).map(|t| seq.frame(t)).collect();
    FrameSequence::from_frames(&frames, seq.h, seq.w, seq.c)
}

pub const PSNR_CAP_DB: f64 = 99.0;

fn check_same(a: &FrameSequence, b: &FrameSequence) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &FrameSequence, b: &FrameSequence) -> Result<f64> {
    check_same(a, b)?;
    Ok(mse_slices(&a.data, &b.data))
}

fn mse_slices(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum();
    sum / a.len() as f64
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    }
}

/// PSNR in dB with peak 1.0, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &FrameSequence, b: &FrameSequence) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// PSNR restricted to the listed frame indices (MSE pooled over them).
pub fn psnr_frames(a: &FrameSequence, b: &FrameSequence, frames: &[usize]) -> Result<f64> {
    check_same(a, b)?;
    if frames.is_empty() {
        return Err(Error::Invalid("no frames selected".into()));
    }
    let mut total = 0.0;
    for &t in frames {
        if t >= a.t {
            return Err(Error::Invalid(format!("frame {t} out of range")));
        }
        total += mse_slices(a.frame(t), b.frame(t));
    }
    Ok(psnr_from_mse(total / frames.len() as f64))
}

/// Mean squared second temporal difference.
pub fn flicker(seq: &FrameSequence) -> Result<f64> {
    if seq.t < 3 {
        return Err(Error::Invalid(format!("flicker needs at least 3 frames, got {}", seq.t)));
    }
    let n = seq.frame_size();
    let mut total = 0.0f64;
    for t in 1..seq.t - 1 {
        let (p, c, f) = (seq.frame(t - 1), seq.frame(t), seq.frame(t + 1));
        for i in 0..n {
            let d = f64::from(f[i]) - 2.0 * f64::from(c[i]) + f64::from(p[i]);
            total += d * d;
        }
    }
    Ok(total / ((seq.t - 2) * n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(t: usize, v: f32) -> FrameSequence {
        FrameSequence::new(t, 2, 2, 3, vec![v; t * 12]).unwrap()
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(FrameSequence::new(1, 1, 1, 3, vec![0.0, 1.5, 0.0]).is_err());
        assert!(matches!(FrameSequence::new(0, 1, 1, 3, vec![]), Err(Error::EmptyVideo)));
    }

    #[test]
    fn save_quantization_rule() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        let bytes = encode_pnm(&[1.0, 1.0, 1.0], 1, 1, 3);
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 255, 255]);
        assert!(bytes.starts_with(b"P6\n1 1\n255\n"));
    }

    #[test]
    fn psnr_closed_forms() {
        let a = constant(2, 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!((psnr(&a, &constant(2, 1.0)).unwrap() - 0.0).abs() < 1e-12);
        assert!((psnr(&a, &constant(2, 0.1)).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &constant(3, 0.0)).is_err());
    }

    #[test]
    fn flicker_closed_forms() {
        assert_eq!(flicker(&constant(4, 0.3)).unwrap(), 0.0);
        let t = 5;
        let fade: Vec<f32> = (0..t).flat_map(|f| vec![f as f32 / 4.0; 12]).collect();
        let fade = FrameSequence::new(t, 2, 2, 3, fade).unwrap();
        assert!(flicker(&fade).unwrap() < 1e-12);
        for t in 3..7 {
            let alt: Vec<f32> = (0..t).flat_map(|f| vec![(f % 2) as f32; 12]).collect();
            let alt = FrameSequence::new(t, 2, 2, 3, alt).unwrap();
            assert_eq!(flicker(&alt).unwrap(), 4.0);
        }
        assert!(flicker(&constant(2, 0.0)).is_err());
    }

    #[test]
    fn downsample_index_rule() {
        let seq: Vec<f32> = (0..17).flat_map(|f| vec![f as f32 / 16.0; 12]).collect();
        let seq = FrameSequence::new(17, 2, 2, 3, seq).unwrap();
        let d = downsample_temporal(&seq, 4).unwrap();
        assert_eq!(d.len(), 5);
        for (k, t) in [0, 4, 8, 12, 16].iter().enumerate() {
            assert_eq!(d.frame(k), seq.frame(*t));
        }
        assert_eq!(downsample_temporal(&seq, 1).unwrap(), seq);
        let nine = seq.slice(0, 9).unwrap();
        assert_eq!(downsample_temporal(&nine, 8).unwrap().len(), 2);
        assert!(matches!(downsample_temporal(&seq, 3), Err(Error::Divisibility(_))));
    }

    #[test]
    fn fold_stays_in_bounds() {
        for i in -100..100 {
            let p = fold(i as f32 * 3.7, 2.0, 10.0);
            assert!((2.0..=10.0).contains(&p));
        }
    }
}
