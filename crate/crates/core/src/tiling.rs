//! Tiled, chunked latent codec.
//!
//! Frames are split into overlapping spatial tiles and non-overlapping
//! temporal chunks. Each (chunk, tile) block goes through a [`FrameCodec`]
//! independently; neighbouring tiles are mixed with linear ramps over their
//! overlap (vertical neighbour first, then horizontal neighbour) and only the
//! stride region of every tile is kept. Decoding mirrors the procedure in
//! pixel space.
//!
//! Assembly walks the tile grid in raster order and carries only the overlap
//! strips needed by the next row and the next column, so working memory is one
//! codec block plus an `overlap × width` strip regardless of frame height.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{read_f32_le, write_f32_le};
use crate::tensor::{Scalar, Tensor};
use crate::video::FrameSequence;

/// Half-open interval `[start, end)` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub frame_h: usize,
    pub frame_w: usize,
    pub tile_h: usize,
    pub tile_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    rows: Vec<Span>,
    cols: Vec<Span>,
}

fn axis_spans(frame: usize, tile: usize, stride: usize, axis: &str) -> Result<Vec<Span>> {
    if frame == 0 || tile == 0 || stride == 0 {
        return Err(Error::Invalid(format!("{axis}: sizes must be positive (frame {frame}, tile {tile}, stride {stride})")));
    }
    if stride > tile {
        return Err(Error::Invalid(format!("{axis}: stride {stride} exceeds tile {tile}")));
    }
    if tile > frame {
        return Err(Error::Invalid(format!("{axis}: tile {tile} exceeds frame {frame}")));
    }
    Ok((0..frame)
        .step_by(stride)
        .map(|start| Span { start, end: (start + tile).min(frame) })
        .collect())
}

impl TilePlan {
    pub fn new(frame_h: usize, frame_w: usize, tile: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        let rows = axis_spans(frame_h, tile.0, stride.0, "height")?;
        let cols = axis_spans(frame_w, tile.1, stride.1, "width")?;
        Ok(Self { frame_h, frame_w, tile_h: tile.0, tile_w: tile.1, stride_h: stride.0, stride_w: stride.1, rows, cols })
    }

    pub fn square(frame_h: usize, frame_w: usize, tile: usize, stride: usize) -> Result<Self> {
        Self::new(frame_h, frame_w, (tile, tile), (stride, stride))
    }

    /// A plan with a single tile covering the whole frame.
    pub fn single(frame_h: usize, frame_w: usize) -> Self {
        Self::new(frame_h, frame_w, (frame_h, frame_w), (frame_h, frame_w)).expect("non-empty frame")
    }

    pub fn rows(&self) -> &[Span] {
        &self.rows
    }

    pub fn cols(&self) -> &[Span] {
        &self.cols
    }

    pub fn origins(&self) -> Vec<(usize, usize)> {
        self.rows.iter().flat_map(|r| self.cols.iter().map(move |c| (r.start, c.start))).collect()
    }

    pub fn tile_count(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    /// Nominal overlap per axis, `tile − stride`.
    pub fn overlap(&self) -> (usize, usize) {
        (self.tile_h - self.stride_h, self.tile_w - self.stride_w)
    }

    /// The same plan in units of `factor` pixels (latent coordinates).
    pub fn scaled_down(&self, factor: usize) -> Result<Self> {
        let all = [self.frame_h, self.frame_w, self.tile_h, self.tile_w, self.stride_h, self.stride_w];
        if factor == 0 || all.iter().any(|v| v % factor != 0) {
            return Err(Error::Divisibility(format!(
                "frame {}x{}, tile {}x{} and stride {}x{} must all be divisible by spatial stride {factor}",
                self.frame_h, self.frame_w, self.tile_h, self.tile_w, self.stride_h, self.stride_w
            )));
        }
        Self::new(
            self.frame_h / factor,
            self.frame_w / factor,
            (self.tile_h / factor, self.tile_w / factor),
            (self.stride_h / factor, self.stride_w / factor),
        )
    }

    /// Kept (stride-region) extent of tile `idx` along an axis.
    fn kept(spans: &[Span], idx: usize) -> usize {
        match spans.get(idx + 1) {
            Some(next) => next.start - spans[idx].start,
            None => spans[idx].len(),
        }
    }

    /// Overlap between tile `idx − 1` and tile `idx` along an axis.
    fn overlap_before(spans: &[Span], idx: usize) -> usize {
        if idx == 0 {
            0
        } else {
            spans[idx - 1].end.saturating_sub(spans[idx].start)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub chunk_len: usize,
    pub chunk_count: usize,
    pub total_frames: usize,
}

impl ChunkPlan {
    pub fn new(total_frames: usize, chunk_len: usize) -> Result<Self> {
        if chunk_len == 0 || total_frames == 0 {
            return Err(Error::Invalid("chunk length and frame count must be positive".into()));
        }
        if !total_frames.is_multiple_of(chunk_len) {
            return Err(Error::Divisibility(format!("{total_frames} frames do not split into chunks of {chunk_len}")));
        }
        Ok(Self { chunk_len, chunk_count: total_frames / chunk_len, total_frames })
    }

    /// Smallest plan covering `frames`, and the number of padding frames it needs.
    pub fn covering(frames: usize, chunk_len: usize) -> Result<(Self, usize)> {
        if chunk_len == 0 {
            return Err(Error::Invalid("chunk length must be positive".into()));
        }
        let count = frames.div_ceil(chunk_len).max(1);
        let plan = Self::new(count * chunk_len, chunk_len)?;
        Ok((plan, plan.total_frames - frames))
    }

    pub fn frames(&self, chunk: usize) -> std::ops::Range<usize> {
        chunk * self.chunk_len..(chunk + 1) * self.chunk_len
    }
}

/// A codec over single `chunk_len × tile_h × tile_w × C` blocks.
pub trait FrameCodec {
    fn spatial_stride(&self) -> usize;
    fn temporal_stride(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn codec_id(&self) -> String;
    /// `[F, h, w, C]` pixels to `[F/r_t, h/r_s, w/r_s, C']` latents.
    fn encode_block(&self, block: &Tensor<f32>) -> Result<Tensor<f32>>;
    /// Inverse of [`FrameCodec::encode_block`]; `guide` is the aligned
    /// low-frame-rate pixel block for conditional decoders.
    fn decode_block(&self, latent: &Tensor<f32>, guide: Option<&Tensor<f32>>) -> Result<Tensor<f32>>;
}

/// Pass-through codec with unit strides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentityCodec {
    pub channels: usize,
}

impl FrameCodec for IdentityCodec {
    fn spatial_stride(&self) -> usize {
        1
    }

    fn temporal_stride(&self) -> usize {
        1
    }

    fn latent_channels(&self) -> usize {
        self.channels
    }

    fn codec_id(&self) -> String {
        "identity".into()
    }

    fn encode_block(&self, block: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(block.clone())
    }

    fn decode_block(&self, latent: &Tensor<f32>, _guide: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        Ok(latent.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    /// `[T', H', W', C']`.
    pub values: Tensor<f32>,
    pub chunk_len_latent: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    pub latent_channels: usize,
    pub codec_id: String,
}

#[derive(Serialize, Deserialize)]
struct LatentHeader {
    dims: [usize; 4],
    strides: LatentStrides,
    chunk_len_latent: usize,
    codec_id: String,
}

#[derive(Serialize, Deserialize)]
struct LatentStrides {
    spatial: usize,
    temporal: usize,
}

impl LatentGrid {
    /// Zero grid shaped for `codec` applied under `tiles` and `chunks`.
    pub fn zeros_for(codec: &dyn FrameCodec, tiles: &TilePlan, chunks: &ChunkPlan) -> Result<Self> {
        check_geometry(codec, tiles, chunks)?;
        let (rs, rt) = (codec.spatial_stride(), codec.temporal_stride());
        let cl = chunks.chunk_len / rt;
        let dims = vec![chunks.chunk_count * cl, tiles.frame_h / rs, tiles.frame_w / rs, codec.latent_channels()];
        Ok(Self {
            values: Tensor::zeros(dims),
            chunk_len_latent: cl,
            spatial_stride: rs,
            temporal_stride: rt,
            latent_channels: codec.latent_channels(),
            codec_id: codec.codec_id(),
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.values.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn chunk_count(&self) -> usize {
        self.values.dim(0) / self.chunk_len_latent
    }

    fn chunk_elems(&self) -> usize {
        let [_, h, w, c] = self.dims();
        self.chunk_len_latent * h * w * c
    }

    /// Latent chunk `k` as `[chunk_len_latent, H', W', C']`.
    pub fn chunk(&self, k: usize) -> Tensor<f32> {
        let n = self.chunk_elems();
        let [_, h, w, c] = self.dims();
        Tensor::new(vec![self.chunk_len_latent, h, w, c], self.values.data()[k * n..(k + 1) * n].to_vec())
    }

    pub fn chunk_slice_mut(&mut self, k: usize) -> &mut [f32] {
        let n = self.chunk_elems();
        &mut self.values.data_mut()[k * n..(k + 1) * n]
    }

    pub fn set_chunk(&mut self, k: usize, values: &Tensor<f32>) -> Result<()> {
        if values.numel() != self.chunk_elems() {
            return Err(Error::Shape(format!("chunk of {} values, expected {}", values.numel(), self.chunk_elems())));
        }
        self.chunk_slice_mut(k).copy_from_slice(values.data());
        Ok(())
    }

    /// Writes `<stem>.json` (header) and `<stem>.bin` (little-endian f32 payload).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let header = LatentHeader {
            dims: self.dims(),
            strides: LatentStrides { spatial: self.spatial_stride, temporal: self.temporal_stride },
            chunk_len_latent: self.chunk_len_latent,
            codec_id: self.codec_id.clone(),
        };
        let json_path = stem.with_extension("json");
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        write_f32_le(&stem.with_extension("bin"), self.values.data())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let json_path = stem.with_extension("json");
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let header: LatentHeader = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest { path: json_path.clone(), reason: e.to_string() })?;
        let n = header.dims.iter().product();
        let data = read_f32_le(&stem.with_extension("bin"), n)?;
        if header.chunk_len_latent == 0 || !header.dims[0].is_multiple_of(header.chunk_len_latent) {
            return Err(Error::Manifest { path: json_path, reason: "chunk_len_latent does not divide T'".into() });
        }
        Ok(Self {
            values: Tensor::new(header.dims.to_vec(), data),
            chunk_len_latent: header.chunk_len_latent,
            spatial_stride: header.strides.spatial,
            temporal_stride: header.strides.temporal,
            latent_channels: header.dims[3],
            codec_id: header.codec_id,
        })
    }
}

fn check_geometry(codec: &dyn FrameCodec, tiles: &TilePlan, chunks: &ChunkPlan) -> Result<()> {
    let rt = codec.temporal_stride();
    if rt == 0 || !chunks.chunk_len.is_multiple_of(rt) {
        return Err(Error::Divisibility(format!("chunk length {} not divisible by temporal stride {rt}", chunks.chunk_len)));
    }
    tiles.scaled_down(codec.spatial_stride()).map(|_| ())
}

/// Linear ramp over `overlap` lines of `line_len` values:
/// `out[k] = prev[k]·(1 − k/overlap) + cur[k]·(k/overlap)`.
pub fn blend_ramp<T: Scalar>(prev: &[T], cur: &[T], overlap: usize, line_len: usize) -> Result<Vec<T>> {
    if overlap == 0 || prev.len() < overlap * line_len || cur.len() < overlap * line_len {
        return Err(Error::Invalid(format!(
            "overlap {overlap} exceeds the provided extents ({} and {} values of line length {line_len})",
            prev.len(),
            cur.len()
        )));
    }
    let mut out = cur[..overlap * line_len].to_vec();
    for k in 0..overlap {
        let w = T::lit(k as f64 / overlap as f64);
        for (o, &p) in out[k * line_len..(k + 1) * line_len].iter_mut().zip(&prev[k * line_len..]) {
            *o = p * (T::one() - w) + *o * w;
        }
    }
    Ok(out)
}

/// Block shape `[F, h, w, C]`.
#[derive(Clone, Copy)]
struct BlockShape {
    f: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl BlockShape {
    fn of(t: &Tensor<impl Copy>) -> Result<Self> {
        match t.shape() {
            [f, h, w, c] => Ok(Self { f: *f, h: *h, w: *w, c: *c }),
            s => Err(Error::Shape(format!("expected a 4-D block, got {s:?}"))),
        }
    }

    fn at(&self, f: usize, y: usize, x: usize) -> usize {
        ((f * self.h + y) * self.w + x) * self.c
    }
}

/// Blends and assembles one chunk. `tile(i, j)` yields block `[F, th, tw, C]`
/// for tile `(i, j)` of `plan`; the result is written into `out`, laid out as
/// `[F, frame_h, frame_w, C]`.
fn assemble<T: Scalar>(
    plan: &TilePlan,
    frames: usize,
    channels: usize,
    out: &mut [T],
    mut tile: impl FnMut(usize, usize) -> Result<Tensor<T>>,
) -> Result<()> {
    let (rows, cols) = (plan.rows(), plan.cols());
    let full = BlockShape { f: frames, h: plan.frame_h, w: plan.frame_w, c: channels };
    assert_eq!(out.len(), frames * plan.frame_h * plan.frame_w * channels, "assembly buffer size");
    let mut above: Vec<Option<Tensor<T>>> = vec![None; cols.len()];
    for (i, rspan) in rows.iter().enumerate() {
        let mut left: Option<Tensor<T>> = None;
        for (j, cspan) in cols.iter().enumerate() {
            let mut t = tile(i, j)?;
            let b = BlockShape::of(&t)?;
            if (b.f, b.h, b.w, b.c) != (frames, rspan.len(), cspan.len(), channels) {
                return Err(Error::Shape(format!(
                    "tile ({i},{j}) has shape {:?}, expected [{frames}, {}, {}, {channels}]",
                    t.shape(),
                    rspan.len(),
                    cspan.len()
                )));
            }
            let td = t.data_mut();
            if let Some(a) = above[j].take() {
                let ext = TilePlan::overlap_before(rows, i);
                let ad = a.data();
                for f in 0..b.f {
                    for k in 0..ext {
                        let w = T::lit(k as f64 / ext as f64);
                        let (src, dst) = ((f * ext + k) * b.w * b.c, b.at(f, k, 0));
                        for x in 0..b.w * b.c {
                            td[dst + x] = ad[src + x] * (T::one() - w) + td[dst + x] * w;
                        }
                    }
                }
            }
            if let Some(l) = left.take() {
                let ext = TilePlan::overlap_before(cols, j);
                let ld = l.data();
                for f in 0..b.f {
                    for y in 0..b.h {
                        for k in 0..ext {
                            let w = T::lit(k as f64 / ext as f64);
                            let src = ((f * b.h + y) * ext + k) * b.c;
                            let dst = b.at(f, y, k);
                            for ch in 0..b.c {
                                td[dst + ch] = ld[src + ch] * (T::one() - w) + td[dst + ch] * w;
                            }
                        }
                    }
                }
            }
            let (kh, kw) = (TilePlan::kept(rows, i), TilePlan::kept(cols, j));
            for f in 0..b.f {
                for y in 0..kh {
                    let src = b.at(f, y, 0);
                    let dst = full.at(f, rspan.start + y, cspan.start);
                    out[dst..dst + kw * b.c].copy_from_slice(&td[src..src + kw * b.c]);
                }
            }
            if i + 1 < rows.len() {
                let ext = TilePlan::overlap_before(rows, i + 1);
                if ext > 0 {
                    let mut strip = Vec::with_capacity(b.f * ext * b.w * b.c);
                    for f in 0..b.f {
                        let s = b.at(f, b.h - ext, 0);
                        strip.extend_from_slice(&td[s..s + ext * b.w * b.c]);
                    }
                    above[j] = Some(Tensor::new(vec![b.f, ext, b.w, b.c], strip));
                }
            }
            if j + 1 < cols.len() {
                let ext = TilePlan::overlap_before(cols, j + 1);
                if ext > 0 {
                    let mut strip = Vec::with_capacity(b.f * b.h * ext * b.c);
                    for f in 0..b.f {
                        for y in 0..b.h {
                            let s = b.at(f, y, b.w - ext);
                            strip.extend_from_slice(&td[s..s + ext * b.c]);
                        }
                    }
                    left = Some(Tensor::new(vec![b.f, b.h, ext, b.c], strip));
                }
            }
        }
    }
    Ok(())
}

/// Copies `[frames, rows, cols]` out of a `[F_total, H, W, C]` buffer.
fn extract<T: Scalar>(src: &[T], full: [usize; 4], frames: std::ops::Range<usize>, rows: Span, cols: Span) -> Tensor<T> {
    let [_, h, w, c] = full;
    let mut out = Vec::with_capacity(frames.len() * rows.len() * cols.len() * c);
    for f in frames.clone() {
        for y in rows.start..rows.end {
            let s = ((f * h + y) * w + cols.start) * c;
            out.extend_from_slice(&src[s..s + cols.len() * c]);
        }
    }
    Tensor::new(vec![frames.len(), rows.len(), cols.len(), c], out)
}

fn check_frames(frames: &FrameSequence, tiles: &TilePlan, chunks: &ChunkPlan) -> Result<()> {
    if frames.height() != tiles.frame_h || frames.width() != tiles.frame_w {
        return Err(Error::Shape(format!(
            "frames are {}x{} but the tile plan expects {}x{}",
            frames.height(),
            frames.width(),
            tiles.frame_h,
            tiles.frame_w
        )));
    }
    if frames.len() != chunks.total_frames {
        return Err(Error::Shape(format!("{} frames but the chunk plan covers {}", frames.len(), chunks.total_frames)));
    }
    Ok(())
}

/// Encodes into a caller-provided grid (see [`LatentGrid::zeros_for`]).
pub fn tiled_encode_into(
    frames: &FrameSequence,
    codec: &dyn FrameCodec,
    tiles: &TilePlan,
    chunks: &ChunkPlan,
    out: &mut LatentGrid,
) -> Result<()> {
    check_geometry(codec, tiles, chunks)?;
    check_frames(frames, tiles, chunks)?;
    let latent_plan = tiles.scaled_down(codec.spatial_stride())?;
    let cl = chunks.chunk_len / codec.temporal_stride();
    let expect = [chunks.chunk_count * cl, latent_plan.frame_h, latent_plan.frame_w, codec.latent_channels()];
    if out.dims() != expect {
        return Err(Error::Shape(format!("latent grid is {:?}, expected {expect:?}", out.dims())));
    }
    let full = frames.dims();
    let (rows, cols) = (tiles.rows(), tiles.cols());
    for k in 0..chunks.chunk_count {
        let span = chunks.frames(k);
        assemble(&latent_plan, cl, codec.latent_channels(), out.chunk_slice_mut(k), |i, j| {
            let block = extract(frames.data(), full, span.clone(), rows[i], cols[j]);
            codec.encode_block(&block)
        })?;
    }
    Ok(())
}

pub fn tiled_encode(
    frames: &FrameSequence,
    codec: &dyn FrameCodec,
    tiles: &TilePlan,
    chunks: &ChunkPlan,
) -> Result<LatentGrid> {
    let mut out = LatentGrid::zeros_for(codec, tiles, chunks)?;
    tiled_encode_into(frames, codec, tiles, chunks, &mut out)?;
    Ok(out)
}

/// Decodes a latent grid; `guide` (same geometry as the output) is handed to
/// the codec tile by tile for conditional decoding.
pub fn tiled_decode(
    latent: &LatentGrid,
    codec: &dyn FrameCodec,
    tiles: &TilePlan,
    chunks: &ChunkPlan,
    guide: Option<&FrameSequence>,
) -> Result<FrameSequence> {
    let data = tiled_decode_raw(latent, codec, tiles, chunks, guide, 3)?;
    FrameSequence::from_clamped(chunks.total_frames, tiles.frame_h, tiles.frame_w, data.1, data.0)
}

/// Like [`tiled_decode`] but returns the unclamped assembled buffer and its channel count.
pub fn tiled_decode_raw(
    latent: &LatentGrid,
    codec: &dyn FrameCodec,
    tiles: &TilePlan,
    chunks: &ChunkPlan,
    guide: Option<&FrameSequence>,
    pixel_channels: usize,
) -> Result<(Vec<f32>, usize)> {
    check_geometry(codec, tiles, chunks)?;
    let latent_plan = tiles.scaled_down(codec.spatial_stride())?;
    let cl = chunks.chunk_len / codec.temporal_stride();
    let expect = [chunks.chunk_count * cl, latent_plan.frame_h, latent_plan.frame_w, codec.latent_channels()];
    if latent.dims() != expect {
        return Err(Error::Shape(format!("latent grid is {:?}, expected {expect:?}", latent.dims())));
    }
    if let Some(g) = guide {
        check_frames(g, tiles, chunks)?;
    }
    let channels = match guide {
        Some(g) => g.channels(),
        None if codec.spatial_stride() == 1 && codec.temporal_stride() == 1 => codec.latent_channels(),
        None => pixel_channels,
    };
    let frame_elems = tiles.frame_h * tiles.frame_w * channels;
    let mut out = vec![0.0f32; chunks.total_frames * frame_elems];
    let (rows_l, cols_l) = (latent_plan.rows(), latent_plan.cols());
    for k in 0..chunks.chunk_count {
        let lspan = k * cl..(k + 1) * cl;
        let pspan = chunks.frames(k);
        let dst = &mut out[pspan.start * frame_elems..pspan.end * frame_elems];
        assemble(tiles, chunks.chunk_len, channels, dst, |i, j| {
            let lt = extract(latent.values.data(), latent.dims(), lspan.clone(), rows_l[i], cols_l[j]);
            let gt = guide.map(|g| extract(g.data(), g.dims(), pspan.clone(), tiles.rows()[i], tiles.cols()[j]));
            codec.decode_block(&lt, gt.as_ref())
        })?;
    }
    Ok((out, channels))
}

/// Sum over tiles of the effective blend weight at every pixel of a single
/// frame, obtained by assembling indicator tiles. A seam-free plan yields 1
/// everywhere.
pub fn seam_weight_sums(plan: &TilePlan) -> Result<Vec<f64>> {
    let n = plan.frame_h * plan.frame_w;
    let mut total = vec![0.0f64; n];
    let mut buf = vec![0.0f64; n];
    for ti in 0..plan.rows().len() {
        for tj in 0..plan.cols().len() {
            assemble(plan, 1, 1, &mut buf, |i, j| {
                let (h, w) = (plan.rows()[i].len(), plan.cols()[j].len());
                let v = if (i, j) == (ti, tj) { 1.0 } else { 0.0 };
                Ok(Tensor::full(vec![1, h, w, 1], v))
            })?;
            for (t, b) in total.iter_mut().zip(&buf) {
                *t += b;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origins(spans: &[Span]) -> Vec<usize> {
        spans.iter().map(|s| s.start).collect()
    }

    #[test]
    fn plan_origin_rule() {
        let p = TilePlan::square(512, 512, 256, 192).unwrap();
        assert_eq!(origins(p.rows()), vec![0, 192, 384]);
        assert_eq!(
            p.rows(),
            &[Span { start: 0, end: 256 }, Span { start: 192, end: 448 }, Span { start: 384, end: 512 }]
        );
        let single = TilePlan::square(64, 64, 64, 64).unwrap();
        assert_eq!(single.origins(), vec![(0, 0)]);
        let p = TilePlan::square(10, 10, 4, 3).unwrap();
        assert_eq!(origins(p.rows()), vec![0, 3, 6, 9]);
        assert_eq!(p.rows()[3].len(), 1);
    }

    #[test]
    fn plan_rejects_bad_sizes() {
        assert!(TilePlan::square(10, 10, 3, 4).is_err());
        assert!(TilePlan::square(10, 10, 0, 0).is_err());
        assert!(TilePlan::square(10, 10, 12, 4).is_err());
        let p = TilePlan::square(64, 64, 32, 24).unwrap();
        assert!(matches!(p.scaled_down(16), Err(Error::Divisibility(_))));
    }

    #[test]
    fn ramp_examples() {
        let out = blend_ramp(&[1.0, 2.0], &[5.0, 6.0], 2, 1).unwrap();
        assert_eq!(out, vec![1.0, 0.5 * 2.0 + 0.5 * 6.0]);
        assert_eq!(blend_ramp(&[3.0f64, 3.0], &[7.0, 7.0], 1, 2).unwrap(), vec![3.0, 3.0]);
        assert_eq!(blend_ramp(&[4.0f64; 6], &[4.0; 6], 3, 2).unwrap(), vec![4.0; 6]);
        assert!(blend_ramp(&[1.0f64], &[1.0, 2.0], 2, 1).is_err());
    }

    #[test]
    fn covering_chunk_plan_pads() {
        let (p, pad) = ChunkPlan::covering(33, 8).unwrap();
        assert_eq!((p.chunk_count, pad), (5, 7));
        let (p, pad) = ChunkPlan::covering(16, 8).unwrap();
        assert_eq!((p.chunk_count, pad), (2, 0));
        assert!(ChunkPlan::new(10, 4).is_err());
    }

    #[test]
    fn corner_weights_follow_sequential_blend() {
        // 2x2 tiles of 4 with stride 2: the 2x2 corner overlap at rows/cols [2, 4).
        let plan = TilePlan::square(6, 6, 4, 2).unwrap();
        let sums = seam_weight_sums(&plan).unwrap();
        for s in &sums {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
