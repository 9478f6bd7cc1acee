//! Conditioning channels: nearest-neighbour temporal upsampling of the
//! low-frame-rate input, the keyframe mask and its latent encoding, and the
//! channel concatenation fed to the denoiser.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::video::FrameSequence;

/// Index of the keyframe nearest to high-rate frame `t`, ties going to the earlier one.
pub fn nearest_keyframe(t: usize, s: usize) -> usize {
    let (q, r) = (t / s, t % s);
    if 2 * r > s {
        q + 1
    } else {
        q
    }
}

/// Output length `s·(T−1)+1`, frame `t` copied from keyframe `nearest_keyframe(t, s)`.
pub fn nn_upsample(lq: &FrameSequence, s: usize) -> Result<FrameSequence> {
    if s == 0 {
        return Err(Error::Invalid("temporal factor must be >= 1".into()));
    }
    let n = s * (lq.len() - 1) + 1;
    let frames: Vec<&[f32]> = (0..n).map(|t| lq.frame(nearest_keyframe(t, s))).collect();
    FrameSequence::from_frames(&frames, lq.height(), lq.width(), lq.channels())
}

/// Reference conditioner for comparisons: keyframes in place, zeros elsewhere.
pub fn zero_pad_upsample(lq: &FrameSequence, s: usize) -> Result<FrameSequence> {
    if s == 0 {
        return Err(Error::Invalid("temporal factor must be >= 1".into()));
    }
    let n = s * (lq.len() - 1) + 1;
    let mut data = vec![0.0; n * lq.frame_size()];
    for k in 0..lq.len() {
        let t = k * s;
        data[t * lq.frame_size()..(t + 1) * lq.frame_size()].copy_from_slice(lq.frame(k));
    }
    FrameSequence::new(n, lq.height(), lq.width(), lq.channels(), data)
}

/// Per-pixel binary mask `T×H×W×1`; each frame is constant.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeMask {
    pub values: Tensor<f32>,
}

impl KeyframeMask {
    /// Mask with frame `t` set iff `observed[t]`.
    pub fn from_flags(observed: &[bool], h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(observed.len() * h * w);
        for &o in observed {
            data.extend(std::iter::repeat_n(if o { 1.0 } else { 0.0 }, h * w));
        }
        Self { values: Tensor::new(vec![observed.len(), h, w, 1], data) }
    }

    pub fn len(&self) -> usize {
        self.values.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-frame flag, read from the frame's first pixel.
    pub fn observed(&self, t: usize) -> bool {
        let n = self.values.dim(1) * self.values.dim(2);
        self.values.data()[t * n] != 0.0
    }
}

/// Ones on frames `t ≡ 0 (mod s)`.
pub fn build_mask(t_hq: usize, s: usize, h: usize, w: usize) -> Result<KeyframeMask> {
    if s == 0 || t_hq == 0 {
        return Err(Error::Invalid("frame count and temporal factor must be >= 1".into()));
    }
    if !(t_hq - 1).is_multiple_of(s) {
        return Err(Error::Divisibility(format!("(T-1) = {} is not divisible by s = {s}", t_hq - 1)));
    }
    let flags: Vec<bool> = (0..t_hq).map(|t| t % s == 0).collect();
    Ok(KeyframeMask::from_flags(&flags, h, w))
}

/// `[T, H, W, C]` → `[T/r, H, W, r·C]`; channel `o·C + c` of output frame `k` is channel `c` of frame `r·k + o`.
pub fn time_to_channels<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [t, h, w, c] = dims4(x)?;
    if r == 0 || t % r != 0 {
        return Err(Error::Divisibility(format!("{t} frames not divisible by temporal stride {r}")));
    }
    let mut out = Vec::with_capacity(x.numel());
    let d = x.data();
    for k in 0..t / r {
        for p in 0..h * w {
            for o in 0..r {
                let s = ((r * k + o) * h * w + p) * c;
                out.extend_from_slice(&d[s..s + c]);
            }
        }
    }
    Ok(Tensor::new(vec![t / r, h, w, r * c], out))
}

/// Inverse of [`time_to_channels`].
pub fn channels_to_time<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let index = channels_to_time_index(x.shape(), r)?;
    let [t, h, w, rc] = dims4(x)?;
    let d = x.data();
    Ok(Tensor::new(vec![t * r, h, w, rc / r], index.iter().map(|&i| d[i]).collect()))
}

/// Gather indices implementing [`channels_to_time`] for a tensor of `shape`.
pub fn channels_to_time_index(shape: &[usize], r: usize) -> Result<Vec<usize>> {
    let &[t, h, w, rc] = shape else {
        return Err(Error::Shape(format!("expected a 4-D tensor, got {shape:?}")));
    };
    if r == 0 || rc % r != 0 {
        return Err(Error::Divisibility(format!("{rc} channels not divisible by temporal stride {r}")));
    }
    let c = rc / r;
    let mut index = Vec::with_capacity(t * h * w * rc);
    for f in 0..t * r {
        let (k, o) = (f / r, f % r);
        for p in 0..h * w {
            for ch in 0..c {
                index.push((k * h * w + p) * rc + o * c + ch);
            }
        }
    }
    Ok(index)
}

fn dims4<T: Copy>(x: &Tensor<T>) -> Result<[usize; 4]> {
    match *x.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::Shape(format!("expected a 4-D tensor, got {s:?}"))),
    }
}

/// Spatial nearest downsample by `r_s` (pixel `(i·r_s, j·r_s)`) followed by time-to-channels.
pub fn encode_mask(mask: &KeyframeMask, r_s: usize, r_t: usize) -> Result<Tensor<f32>> {
    let [t, h, w, _] = dims4(&mask.values)?;
    if r_s == 0 || h % r_s != 0 || w % r_s != 0 {
        return Err(Error::Divisibility(format!("mask {h}x{w} not divisible by spatial stride {r_s}")));
    }
    let (hl, wl) = (h / r_s, w / r_s);
    let d = mask.values.data();
    let mut small = Vec::with_capacity(t * hl * wl);
    for f in 0..t {
        for i in 0..hl {
            for j in 0..wl {
                small.push(d[(f * h + i * r_s) * w + j * r_s]);
            }
        }
    }
    time_to_channels(&Tensor::new(vec![t, hl, wl, 1], small), r_t)
}

/// Inverse of [`encode_mask`]: channels-to-time then nearest spatial upsample.
pub fn decode_mask(latent: &Tensor<f32>, r_s: usize, r_t: usize) -> Result<KeyframeMask> {
    let small = channels_to_time(latent, r_t)?;
    let [t, hl, wl, _] = dims4(&small)?;
    let (h, w) = (hl * r_s, wl * r_s);
    let d = small.data();
    let mut data = Vec::with_capacity(t * h * w);
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                data.push(d[(f * hl + y / r_s) * wl + x / r_s]);
            }
        }
    }
    Ok(KeyframeMask { values: Tensor::new(vec![t, h, w, 1], data) })
}

/// Encoded low-frame-rate content and keyframe mask at latent resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionLatent {
    /// `[T', H', W', C']`.
    pub lq_latent: Tensor<f32>,
    /// `[T', H', W', r_t]`.
    pub mask_latent: Tensor<f32>,
}

impl ConditionLatent {
    pub fn new(lq_latent: Tensor<f32>, mask_latent: Tensor<f32>) -> Result<Self> {
        let (a, b) = (dims4(&lq_latent)?, dims4(&mask_latent)?);
        if a[..3] != b[..3] {
            return Err(Error::Shape(format!("condition latent {a:?} vs mask latent {b:?}")));
        }
        Ok(Self { lq_latent, mask_latent })
    }

    pub fn channels(&self) -> usize {
        self.lq_latent.dim(3) + self.mask_latent.dim(3)
    }

    /// Latent frames `[start, end)` of both parts.
    pub fn frames(&self, start: usize, end: usize) -> Self {
        Self { lq_latent: frame_range(&self.lq_latent, start, end), mask_latent: frame_range(&self.mask_latent, start, end) }
    }
}

pub(crate) fn frame_range<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let per: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, x.data()[start * per..end * per].to_vec())
}

/// Channel concatenation in the order `(noised, lq_latent, mask_latent)`.
pub fn concat_condition(noised: &Tensor<f32>, cond: &ConditionLatent) -> Result<Tensor<f32>> {
    concat_channels(&[noised, &cond.lq_latent, &cond.mask_latent])
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = dims4(parts[0])?;
    let mut total = 0;
    for p in parts {
        let d = dims4(p)?;
        if d[..3] != first[..3] {
            return Err(Error::Shape(format!("cannot concatenate {d:?} with {first:?}")));
        }
        total += d[3];
    }
    let rows = first[0] * first[1] * first[2];
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let c = p.dim(3);
            out.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
        }
    }
    Ok(Tensor::new(vec![first[0], first[1], first[2], total], out))
}
