//! End-to-end interpolation: condition construction, plan execution with the
//! denoiser, conditional decoding and evaluation helpers.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conditioning::{concat_channels, encode_mask, nn_upsample, zero_pad_upsample, KeyframeMask};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::flow::{euler_sample_from, ChunkRole, ShiftSchedule};
use crate::scheduler::{GenerationPlan, PlanMode, WindowConfig};
use crate::tensor::Tensor;
use crate::tiling::{tiled_decode, tiled_encode, ChunkPlan, FrameCodec, TilePlan};
use crate::train::{normal_tensor, step_rng};
use crate::vae::{ToyVae, Unconditional};
use crate::video::{psnr_frames, FrameSequence};

/// Upsampled condition video padded to whole chunks, with its keyframe flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVideo {
    pub frames: FrameSequence,
    pub observed: Vec<bool>,
    /// Output length before padding.
    pub length: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioner {
    Nearest,
    ZeroPad,
}

pub fn condition_video(lq: &FrameSequence, s: usize, chunk_len: usize, conditioner: Conditioner) -> Result<ConditionVideo> {
    let up = match conditioner {
        Conditioner::Nearest => nn_upsample(lq, s)?,
        Conditioner::ZeroPad => zero_pad_upsample(lq, s)?,
    };
    let length = up.len();
    let (_, padding) = ChunkPlan::covering(length, chunk_len)?;
    let observed = (0..length + padding).map(|t| t < length && t % s == 0).collect();
    Ok(ConditionVideo { frames: up.pad_repeat_last(padding), observed, length, padding })
}

/// Encoded condition `[T', H', W', C' + r_t]` for chunk `k` of `video`.
pub fn encode_condition_chunk(
    video: &ConditionVideo,
    codec: &dyn FrameCodec,
    tiles: &TilePlan,
    chunk_len: usize,
    k: usize,
) -> Result<Tensor<f32>> {
    let range = k * chunk_len..(k + 1) * chunk_len;
    let frames = video.frames.slice(range.start, range.end)?;
    let latent = tiled_encode(&frames, codec, tiles, &ChunkPlan::new(chunk_len, chunk_len)?)?;
    let mask = KeyframeMask::from_flags(&video.observed[range], tiles.frame_h, tiles.frame_w);
    let mask_latent = encode_mask(&mask, codec.spatial_stride(), codec.temporal_stride())?;
    concat_channels(&[&latent.values, &mask_latent])
}

/// Frame `t` copies keyframe `⌊t/s⌋`.
pub fn repeat_previous_keyframe(lq: &FrameSequence, s: usize) -> Result<FrameSequence> {
    if s == 0 {
        return Err(Error::Invalid("temporal factor must be >= 1".into()));
    }
    let n = s * (lq.len() - 1) + 1;
    let frames: Vec<&[f32]> = (0..n).map(|t| lq.frame(t / s)).collect();
    FrameSequence::from_frames(&frames, lq.height(), lq.width(), lq.channels())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Conditional,
    Unconditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub s: usize,
    pub mode: PlanMode,
    pub skip_period: usize,
    pub steps: usize,
    pub shift: f64,
    pub seed: u64,
    pub decoder: DecoderKind,
    pub window: WindowConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            s: 2,
            mode: PlanMode::SkipConcat,
            skip_period: 2,
            steps: 16,
            shift: 8.0,
            seed: 0,
            decoder: DecoderKind::Conditional,
            window: WindowConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub mode: PlanMode,
    pub seed: u64,
    pub s: usize,
    pub frame_count: usize,
    pub padding_frames: usize,
    pub chunk_count: usize,
    pub plan_steps: usize,
    /// Most latent chunks (generated or condition) held at once.
    pub peak_resident_chunks: usize,
    /// PSNR of the generated frames at keyframe positions before passthrough.
    pub generated_keyframe_psnr: Option<f64>,
    /// Wall-clock time; kept out of serialized reports so they stay byte-stable.
    #[serde(skip)]
    pub seconds: f64,
}

/// Interpolates `lq` by a factor of `cfg.s`, generating `chunk_len` output
/// frames per chunk.
pub fn run_inference(
    lq: &FrameSequence,
    vae: &ToyVae<f32>,
    dit: &Denoiser<f32>,
    tiles: &TilePlan,
    chunk_len: usize,
    cfg: &InferenceConfig,
) -> Result<(FrameSequence, InferenceReport)> {
    let start = Instant::now();
    if cfg.s == 0 {
        return Err(Error::Invalid("temporal factor must be >= 1".into()));
    }
    if lq.height() != tiles.frame_h || lq.width() != tiles.frame_w {
        return Err(Error::Shape(format!(
            "input is {}x{} but the tile plan expects {}x{}",
            lq.height(),
            lq.width(),
            tiles.frame_h,
            tiles.frame_w
        )));
    }
    let mut report = InferenceReport {
        mode: cfg.mode,
        seed: cfg.seed,
        s: cfg.s,
        frame_count: lq.len(),
        padding_frames: 0,
        chunk_count: 0,
        plan_steps: 0,
        peak_resident_chunks: 0,
        generated_keyframe_psnr: None,
        seconds: 0.0,
    };
    if cfg.s == 1 {
        report.seconds = start.elapsed().as_secs_f64();
        return Ok((lq.clone(), report));
    }
    let rt = vae.cfg.temporal_stride;
    if !chunk_len.is_multiple_of(rt) {
        return Err(Error::Divisibility(format!("chunk length {} not divisible by r_t = {rt}", chunk_len)));
    }
    let cl = chunk_len / rt;
    let video = condition_video(lq, cfg.s, chunk_len, Conditioner::Nearest)?;
    let chunk_count = video.frames.len() / chunk_len;
    let plan = GenerationPlan::build(cfg.mode, chunk_count, cfg.skip_period)?;
    plan.validate(&cfg.window)?;
    let last_use = plan.last_use();
    let schedule = ShiftSchedule::new(cfg.steps, cfg.shift)?;
    let latent_dims = [cl, tiles.frame_h / vae.cfg.spatial_stride, tiles.frame_w / vae.cfg.spatial_stride];
    let chunk_shape = [latent_dims[0], latent_dims[1], latent_dims[2], vae.cfg.latent_channels];
    let single = ChunkPlan::new(chunk_len, chunk_len)?;

    let mut conds: HashMap<usize, Tensor<f32>> = HashMap::new();
    let mut generated: HashMap<usize, Tensor<f32>> = HashMap::new();
    let mut out = vec![0.0f32; video.frames.data().len()];
    let frame_elems = video.frames.frame_size();
    for (si, step) in plan.steps.iter().enumerate() {
        let window = step.window();
        if window.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Invalid(format!("step {si} window {window:?} is not contiguous")));
        }
        for &c in &window {
            if let std::collections::hash_map::Entry::Vacant(e) = conds.entry(c) {
                e.insert(encode_condition_chunk(&video, vae, tiles, chunk_len, c)?);
            }
        }
        report.peak_resident_chunks = report.peak_resident_chunks.max(conds.len() + generated.len());
        let cond_parts: Vec<&Tensor<f32>> = window.iter().map(|c| &conds[c]).collect();
        let cond_window = stack_frames(&cond_parts);
        let roles: Vec<ChunkRole> =
            window.iter().map(|c| if step.targets.contains(c) { ChunkRole::Target } else { ChunkRole::Context }).collect();
        let contexts: Vec<Option<&Tensor<f32>>> = window.iter().map(|c| generated.get(c)).collect();
        // Starting noise is keyed by chunk, so both generation orders see the
        // same draws and differ only through their contexts.
        let noise: Vec<Tensor<f32>> = window
            .iter()
            .filter(|c| step.targets.contains(c))
            .map(|&c| normal_tensor(&mut step_rng(cfg.seed, c as u64), chunk_shape.to_vec()))
            .collect();
        let noise: Vec<&Tensor<f32>> = noise.iter().collect();
        let field = |x: &Tensor<f32>, taus: &[f64]| {
            let input = concat_channels(&[x, &cond_window])?;
            dit.denoise(&input, taus, cl)
        };
        let targets = euler_sample_from(field, &roles, &contexts, &noise, &chunk_shape, &schedule)?;
        for (&c, latent) in step.targets.iter().zip(targets) {
            let mut grid = crate::tiling::LatentGrid::zeros_for(vae, tiles, &single)?;
            grid.set_chunk(0, &latent)?;
            let range = c * chunk_len..(c + 1) * chunk_len;
            let frames = match cfg.decoder {
                DecoderKind::Conditional => {
                    let guide = video.frames.slice(range.start, range.end)?;
                    tiled_decode(&grid, vae, tiles, &single, Some(&guide))?
                }
                DecoderKind::Unconditional => tiled_decode(&grid, &Unconditional(vae), tiles, &single, None)?,
            };
            out[range.start * frame_elems..range.end * frame_elems].copy_from_slice(frames.data());
            generated.insert(c, latent);
        }
        report.peak_resident_chunks = report.peak_resident_chunks.max(conds.len() + generated.len());
        conds.retain(|c, _| last_use[*c] > si);
        generated.retain(|c, _| last_use[*c] > si);
    }

    out.truncate(video.length * frame_elems);
    let generated_video = FrameSequence::new(video.length, lq.height(), lq.width(), lq.channels(), out)?;
    let keyframes: Vec<usize> = (0..video.length).step_by(cfg.s).collect();
    let reference = nn_upsample(lq, cfg.s)?;
    report.generated_keyframe_psnr = Some(psnr_frames(&generated_video, &reference, &keyframes)?);
    let mut data = generated_video.into_data();
    for (k, &t) in keyframes.iter().enumerate() {
        data[t * frame_elems..(t + 1) * frame_elems].copy_from_slice(lq.frame(k));
    }
    let result = FrameSequence::new(video.length, lq.height(), lq.width(), lq.channels(), data)?;
    report.frame_count = result.len();
    report.padding_frames = video.padding;
    report.chunk_count = chunk_count;
    report.plan_steps = plan.steps.len();
    report.seconds = start.elapsed().as_secs_f64();
    Ok((result, report))
}

/// Concatenates `[F_i, ...]` tensors along the first axis.
pub(crate) fn stack_frames(parts: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.dim(0)).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

/// VAE reconstruction PSNR at keyframe positions when the condition video is
/// built with `conditioner`.
pub fn keyframe_reconstruction_psnr(
    gt: &FrameSequence,
    s: usize,
    vae: &ToyVae<f32>,
    tiles: &TilePlan,
    chunk_len: usize,
    conditioner: Conditioner,
) -> Result<f64> {
    let lq = crate::video::downsample_temporal(gt, s)?;
    let video = condition_video(&lq, s, chunk_len, conditioner)?;
    let chunks = ChunkPlan::new(video.frames.len(), chunk_len)?;
    let latent = tiled_encode(&video.frames, vae, tiles, &chunks)?;
    let recon = tiled_decode(&latent, &Unconditional(vae), tiles, &chunks, None)?;
    let recon = recon.slice(0, video.length)?;
    let keyframes: Vec<usize> = (0..video.length).step_by(s).collect();
    psnr_frames(&recon, gt, &keyframes)
}

/// One row of the sampling-order / decoder ablation, averaged over clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingRow {
    pub mode: PlanMode,
    pub decoder: DecoderKind,
    pub psnr: f64,
    pub flicker: f64,
}

/// One row of the conditioning ablation, averaged over clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningRow {
    pub conditioner: Conditioner,
    pub keyframe_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sampling: Vec<SamplingRow>,
    pub conditioning: Vec<ConditioningRow>,
}

pub const SAMPLING_ROWS: [(PlanMode, DecoderKind); 3] = [
    (PlanMode::Causal, DecoderKind::Unconditional),
    (PlanMode::SkipConcat, DecoderKind::Unconditional),
    (PlanMode::SkipConcat, DecoderKind::Conditional),
];

fn mode_name(mode: PlanMode) -> &'static str {
    match mode {
        PlanMode::Causal => "causal",
        PlanMode::SkipConcat => "skip_concat",
    }
}

fn decoder_name(decoder: DecoderKind) -> &'static str {
    match decoder {
        DecoderKind::Conditional => "cond",
        DecoderKind::Unconditional => "uncond",
    }
}

impl AblationTable {
    pub fn sampling_row(&self, mode: PlanMode, decoder: DecoderKind) -> Option<&SamplingRow> {
        self.sampling.iter().find(|r| r.mode == mode && r.decoder == decoder)
    }

    pub fn conditioning_row(&self, conditioner: Conditioner) -> Option<&ConditioningRow> {
        self.conditioning.iter().find(|r| r.conditioner == conditioner)
    }

    /// `row,psnr,flicker,keyframe_psnr`, leaving inapplicable cells empty.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("row,psnr,flicker,keyframe_psnr\n");
        for r in &self.sampling {
            let _ = writeln!(out, "{}/{},{:.6},{:.8},", mode_name(r.mode), decoder_name(r.decoder), r.psnr, r.flicker);
        }
        for r in &self.conditioning {
            let name = match r.conditioner {
                Conditioner::Nearest => "nearest",
                Conditioner::ZeroPad => "zero_pad",
            };
            let _ = writeln!(out, "{name},,,{:.6}", r.keyframe_psnr);
        }
        out
    }
}

/// Runs every ablation row over the ground-truth `clips`, subsampled by `base.s`.
pub fn run_ablation(
    clips: &[FrameSequence],
    vae: &ToyVae<f32>,
    dit: &Denoiser<f32>,
    tiles: &TilePlan,
    chunk_len: usize,
    base: &InferenceConfig,
) -> Result<AblationTable> {
    if clips.is_empty() {
        return Err(Error::EmptyVideo);
    }
    let n = clips.len() as f64;
    let mut sampling = Vec::new();
    for (mode, decoder) in SAMPLING_ROWS {
        let cfg = InferenceConfig { mode, decoder, ..*base };
        let (mut p, mut f) = (0.0, 0.0);
        for clip in clips {
            let lq = crate::video::downsample_temporal(clip, base.s)?;
            let (out, _) = run_inference(&lq, vae, dit, tiles, chunk_len, &cfg)?;
            p += crate::video::psnr(&out, clip)?;
            f += crate::video::flicker(&out)?;
        }
        sampling.push(SamplingRow { mode, decoder, psnr: p / n, flicker: f / n });
    }
    let mut conditioning = Vec::new();
    for conditioner in [Conditioner::ZeroPad, Conditioner::Nearest] {
        let mut p = 0.0;
        for clip in clips {
            p += keyframe_reconstruction_psnr(clip, base.s, vae, tiles, chunk_len, conditioner)?;
        }
        conditioning.push(ConditioningRow { conditioner, keyframe_psnr: p / n });
    }
    Ok(AblationTable { sampling, conditioning })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(values: &[f32]) -> FrameSequence {
        FrameSequence::new(values.len(), 1, 1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn repeat_baseline_copies_previous_keyframe() {
        let out = repeat_previous_keyframe(&seq(&[0.1, 0.5, 0.9]), 4).unwrap();
        let v: Vec<f32> = (0..out.len()).map(|t| out.frame(t)[0]).collect();
        assert_eq!(v, vec![0.1, 0.1, 0.1, 0.1, 0.5, 0.5, 0.5, 0.5, 0.9]);
    }

    #[test]
    fn condition_video_pads_with_unobserved_frames() {
        let v = condition_video(&seq(&[0.1, 0.5, 0.9]), 2, 4, Conditioner::Nearest).unwrap();
        assert_eq!((v.length, v.padding, v.frames.len()), (5, 3, 8));
        assert_eq!(v.observed, vec![true, false, true, false, true, false, false, false]);
        assert_eq!(v.frames.frame(7), v.frames.frame(4));
    }
}
