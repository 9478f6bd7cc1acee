//! Training loops for the codec and the denoiser.
//!
//! Each step draws its minibatch from a generator seeded by `(seed, step)`, so
//! an interrupted run resumed from a checkpoint continues bit-identically.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::conditioning::{concat_channels, nearest_keyframe};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Gradients};
use crate::flow::flow_sample;
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::pipeline::{condition_video, encode_condition_chunk, stack_frames, Conditioner};
use crate::store::{load_tensors, save_tensors, take_prefixed};
use crate::tensor::Tensor;
use crate::tiling::{tiled_encode, ChunkPlan, TilePlan};
use crate::vae::{LatentNorm, LossBreakdown, ToyVae, VaeConfig};
use crate::video::{downsample_temporal, FrameSequence};

/// Generator for training step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
}

/// Linear warmup over the first 2% of steps, then cosine decay to 10% of `base`.
pub fn scheduled_lr(base: f64, step: u64, total: u64) -> f64 {
    let total = total.max(1) as f64;
    let warm = (0.02 * total).max(1.0);
    let s = step as f64;
    if s < warm {
        return base * (s + 1.0) / warm;
    }
    let progress = ((s - warm) / (total - warm).max(1.0)).min(1.0);
    base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Gradients in store order, failing on the first non-finite entry.
pub(crate) fn checked_grads(grads: &Gradients<f32>, store: &ParamStore<f32>, step: u64) -> Result<Vec<Tensor<f32>>> {
    let out = grads.for_store(store);
    for (id, g) in store.ids().zip(&out) {
        if !g.all_finite() {
            return Err(Error::Diverged { step: step as usize, what: format!("non-finite gradient for {}", store.name(id)) });
        }
    }
    Ok(out)
}

/// Parameters plus optimizer moments, saved under `param.*`, `adam_m.*`, `adam_v.*`.
pub(crate) fn save_state<M: Serialize>(
    stem: &Path,
    kind: &str,
    meta: &M,
    store: &ParamStore<f32>,
    opt: &Adam<f32>,
) -> Result<()> {
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (prefix, values) in [("param.", None), ("adam_m.", Some(&opt.m)), ("adam_v.", Some(&opt.v))] {
        for (i, (name, t)) in store.iter().enumerate() {
            names.push(format!("{prefix}{name}"));
            tensors.push(values.map_or(t, |v| &v[i]));
        }
    }
    let pairs: Vec<(&str, &Tensor<f32>)> = names.iter().map(String::as_str).zip(tensors).collect();
    save_tensors(stem, kind, meta, &pairs)
}

pub(crate) fn load_state<M: DeserializeOwned>(
    stem: &Path,
    kind: &str,
    store: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
) -> Result<M> {
    let bad = |e: Error| Error::Checkpoint { path: stem.to_path_buf(), reason: e.to_string() };
    let mut file = load_tensors::<M>(stem, kind)?;
    let params = take_prefixed(&mut file.tensors, "param.");
    let m = take_prefixed(&mut file.tensors, "adam_m.");
    let v = take_prefixed(&mut file.tensors, "adam_v.");
    store.assign(params).map_err(bad)?;
    let mut ms = store.clone();
    ms.assign(m).map_err(bad)?;
    let mut vs = store.clone();
    vs.assign(v).map_err(bad)?;
    opt.m = ms.iter().map(|(_, t)| t.clone()).collect();
    opt.v = vs.iter().map(|(_, t)| t.clone()).collect();
    Ok(file.meta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub steps: u64,
    pub batch: usize,
    /// Square crop side in pixels; a multiple of the spatial stride.
    pub crop: usize,
    pub lr: f64,
    /// Inclusive range of temporal factors used to build guide frames.
    pub s_range: (usize, usize),
    /// Chance that a block is treated as the last of its chunk, so its
    /// following guide is its own.
    pub block_end_prob: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch: 8, crop: 32, lr: 2e-3, s_range: (2, 4), block_end_prob: 0.25, seed: 0 }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self, vae: &VaeConfig) -> Result<()> {
        if self.batch == 0 || self.crop == 0 || !self.crop.is_multiple_of(vae.spatial_stride) {
            return Err(Error::Config(format!(
                "batch must be positive and crop {} a multiple of the spatial stride {}",
                self.crop, vae.spatial_stride
            )));
        }
        if self.s_range.0 == 0 || self.s_range.0 > self.s_range.1 {
            return Err(Error::Config(format!("temporal factor range {:?} is empty", self.s_range)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.block_end_prob) {
            return Err(Error::Config(format!("block_end_prob {} is not a probability", self.block_end_prob)));
        }
        Ok(())
    }
}

/// Frames `[batch·r_t, crop, crop, C]` with the guide and following guide of
/// each block.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeBatch {
    pub frames: Tensor<f32>,
    pub guide: Tensor<f32>,
    pub next_guide: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub loss: LossBreakdown,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,l1,kl,total\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.loss.l1, r.loss.kl, r.loss.total);
    }
    out
}

/// Index of the keyframe used as guide for frame `t` of a clip of `len` frames
/// subsampled by `s`, clamped to the last keyframe inside the clip.
pub fn guide_frame(t: usize, s: usize, len: usize) -> usize {
    (nearest_keyframe(t, s) * s).min((len - 1) / s * s)
}

#[derive(Clone, Debug)]
pub struct VaeTrainer {
    pub vae: ToyVae<f32>,
    pub opt: Adam<f32>,
    pub cfg: VaeTrainConfig,
    pub step: u64,
    pub trace: Vec<TraceRow>,
}

#[derive(Serialize, Deserialize)]
struct VaeTrainMeta {
    vae: VaeConfig,
    train: VaeTrainConfig,
    step: u64,
    trace: Vec<TraceRow>,
}

const VAE_STATE_KIND: &str = "toy-vae-training";

impl VaeTrainer {
    pub fn new(vae_cfg: VaeConfig, cfg: VaeTrainConfig) -> Result<Self> {
        cfg.validate(&vae_cfg)?;
        let vae = ToyVae::new(vae_cfg, cfg.seed)?;
        let opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &vae.params);
        Ok(Self { vae, opt, cfg, step: 0, trace: Vec::new() })
    }

    /// Pixel batch for step `step` and the generator positioned after it.
    pub fn sample_batch(&self, corpus: &[FrameSequence], step: u64) -> Result<(VaeBatch, ChaCha8Rng)> {
        let vc = &self.vae.cfg;
        let (rt, crop) = (vc.temporal_stride, self.cfg.crop);
        let mut rng = step_rng(self.cfg.seed, step);
        let c = vc.image_channels;
        let cap = self.cfg.batch * rt * crop * crop * c;
        let (mut x, mut guide, mut next) = (Vec::with_capacity(cap), Vec::with_capacity(cap), Vec::with_capacity(cap));
        for _ in 0..self.cfg.batch {
            let clip = &corpus[rng.gen_range(0..corpus.len())];
            if clip.len() < rt || clip.height() < crop || clip.width() < crop || clip.channels() != c {
                return Err(Error::Shape(format!(
                    "training clip {:?} cannot provide {rt} frames of {crop}x{crop}x{c}",
                    clip.dims()
                )));
            }
            let s = rng.gen_range(self.cfg.s_range.0..=self.cfg.s_range.1);
            let t0 = rt * rng.gen_range(0..clip.len() / rt);
            let y0 = rng.gen_range(0..=clip.height() - crop);
            let x0 = rng.gen_range(0..=clip.width() - crop);
            let block_end = rng.gen_bool(self.cfg.block_end_prob) || t0 + 2 * rt > clip.len();
            let crop_into = |dst: &mut Vec<f32>, frame: &[f32]| {
                for y in y0..y0 + crop {
                    let start = (y * clip.width() + x0) * c;
                    dst.extend_from_slice(&frame[start..start + crop * c]);
                }
            };
            for t in t0..t0 + rt {
                crop_into(&mut x, clip.frame(t));
                crop_into(&mut guide, clip.frame(guide_frame(t, s, clip.len())));
                let following = if block_end { t } else { t + rt };
                crop_into(&mut next, clip.frame(guide_frame(following, s, clip.len())));
            }
        }
        let shape = vec![self.cfg.batch * rt, crop, crop, c];
        let batch = VaeBatch {
            frames: Tensor::new(shape.clone(), x),
            guide: Tensor::new(shape.clone(), guide),
            next_guide: Tensor::new(shape, next),
        };
        Ok((batch, rng))
    }

    /// One optimizer step; returns its loss breakdown.
    pub fn train_step(&mut self, corpus: &[FrameSequence]) -> Result<LossBreakdown> {
        if corpus.is_empty() {
            return Err(Error::EmptyVideo);
        }
        let (batch, mut rng) = self.sample_batch(corpus, self.step)?;
        let vc = self.vae.cfg;
        let l = self.cfg.crop / vc.spatial_stride;
        let noise = normal_tensor(&mut rng, vec![self.cfg.batch, l, l, vc.latent_channels]);
        let mut g = Graph::new();
        let (total, loss) = self.vae.training_loss(&mut g, &batch.frames, &batch.guide, &batch.next_guide, noise)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step: self.step as usize, what: "non-finite loss".into() });
        }
        let grads = checked_grads(&g.backward(total), &self.vae.params, self.step)?;
        drop(g);
        self.opt.cfg.lr = scheduled_lr(self.cfg.lr, self.step, self.cfg.steps);
        self.opt.update(&mut self.vae.params, &grads);
        self.trace.push(TraceRow { step: self.step, loss });
        self.step += 1;
        Ok(loss)
    }

    /// Runs until `cfg.steps`, calling `on_step` after each step.
    pub fn run(&mut self, corpus: &[FrameSequence], mut on_step: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.steps {
            self.train_step(corpus)?;
            on_step(self)?;
        }
        Ok(())
    }

    /// Fits the latent normalization to encoder means over `corpus`.
    pub fn fit_norm(&mut self, corpus: &[FrameSequence]) -> Result<()> {
        let rt = self.vae.cfg.temporal_stride;
        let mut samples = Vec::new();
        for clip in corpus {
            let usable = clip.len() / rt * rt;
            if usable == 0 {
                continue;
            }
            let block = Tensor::new(
                vec![usable, clip.height(), clip.width(), clip.channels()],
                clip.data()[..usable * clip.frame_size()].to_vec(),
            );
            samples.extend_from_slice(self.vae.encode(&block)?.mean.data());
        }
        self.vae.norm = LatentNorm::fit(&samples, self.vae.cfg.latent_channels);
        Ok(())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = VaeTrainMeta { vae: self.vae.cfg, train: self.cfg, step: self.step, trace: self.trace.clone() };
        save_state(stem, VAE_STATE_KIND, &meta, &self.vae.params, &self.opt)
    }

    pub fn resume(stem: &Path) -> Result<Self> {
        let file = load_tensors::<VaeTrainMeta>(stem, VAE_STATE_KIND)?;
        let mut t = Self::new(file.meta.vae, file.meta.train)?;
        let meta: VaeTrainMeta = load_state(stem, VAE_STATE_KIND, &mut t.vae.params, &mut t.opt)?;
        t.step = meta.step;
        t.opt.step = meta.step;
        t.trace = meta.trace;
        Ok(t)
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        fs::write(path, trace_csv(&self.trace)).map_err(|e| Error::io(path, e))
    }
}

/// Frozen-codec latents of one training clip: ground truth plus one
/// condition per temporal factor.
#[derive(Clone, Debug)]
pub struct DitExample {
    /// `[N·chunk_len, H', W', C']`.
    pub target: Tensor<f32>,
    /// `(s, [N·chunk_len, H', W', C' + r_t])`.
    pub conditions: Vec<(usize, Tensor<f32>)>,
    /// Latent frames per chunk.
    pub chunk_len: usize,
}

impl DitExample {
    pub fn chunk_count(&self) -> usize {
        self.target.dim(0) / self.chunk_len
    }
}

/// Encodes `clip` and its conditions with the frozen codec. Temporal factors in
/// `s_range` that do not divide `len − 1` are skipped.
pub fn prepare_dit_example(
    clip: &FrameSequence,
    vae: &ToyVae<f32>,
    tiles: &TilePlan,
    chunk_len: usize,
    s_range: (usize, usize),
) -> Result<DitExample> {
    let (chunks, padding) = ChunkPlan::covering(clip.len(), chunk_len)?;
    let padded = clip.pad_repeat_last(padding);
    let target = tiled_encode(&padded, vae, tiles, &chunks)?.values;
    let mut conditions = Vec::new();
    for s in s_range.0..=s_range.1 {
        if s < 2 || !(clip.len() - 1).is_multiple_of(s) {
            continue;
        }
        let lq = downsample_temporal(clip, s)?;
        let video = condition_video(&lq, s, chunk_len, Conditioner::Nearest)?;
        let parts = (0..chunks.chunk_count)
            .map(|k| encode_condition_chunk(&video, vae, tiles, chunk_len, k))
            .collect::<Result<Vec<_>>>()?;
        conditions.push((s, stack_frames(&parts.iter().collect::<Vec<_>>())));
    }
    if conditions.is_empty() {
        return Err(Error::Config(format!(
            "no temporal factor in {s_range:?} divides the clip length minus one ({})",
            clip.len() - 1
        )));
    }
    Ok(DitExample { target, conditions, chunk_len: chunk_len / vae.cfg.temporal_stride })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Shift applied to the per-chunk noise level draws.
    pub shift: f64,
    /// Largest window drawn, in chunks.
    pub max_window: usize,
    pub seed: u64,
}

impl Default for DitTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch: 4, lr: 1e-3, shift: 4.0, max_window: 3, seed: 0 }
    }
}

impl DitTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.max_window == 0 {
            return Err(Error::Config("batch and window must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.shift > 0.0) {
            return Err(Error::Config("learning rate and shift must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitTraceRow {
    pub step: u64,
    pub loss: f64,
}

pub fn dit_trace_csv(trace: &[DitTraceRow]) -> String {
    let mut out = String::from("step,loss\n");
    for r in trace {
        let _ = writeln!(out, "{},{}", r.step, r.loss);
    }
    out
}

#[derive(Clone, Debug)]
pub struct DitTrainer {
    pub model: Denoiser<f32>,
    pub opt: Adam<f32>,
    pub cfg: DitTrainConfig,
    pub step: u64,
    pub trace: Vec<DitTraceRow>,
}

#[derive(Serialize, Deserialize)]
struct DitTrainMeta {
    model: DenoiserConfig,
    train: DitTrainConfig,
    step: u64,
    trace: Vec<DitTraceRow>,
}

const DIT_STATE_KIND: &str = "denoiser-training";

impl DitTrainer {
    pub fn new(model_cfg: DenoiserConfig, cfg: DitTrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Denoiser::new(model_cfg, cfg.seed)?;
        let opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.params);
        Ok(Self { model, opt, cfg, step: 0, trace: Vec::new() })
    }

    /// Draws one window: example, temporal factor, start chunk and length.
    fn sample_window(&self, corpus: &[DitExample], rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>, usize, usize) {
        let ex = &corpus[rng.gen_range(0..corpus.len())];
        let cl = ex.chunk_len;
        let (_, cond) = &ex.conditions[rng.gen_range(0..ex.conditions.len())];
        let n = ex.chunk_count();
        let len = rng.gen_range(1..=self.cfg.max_window.min(n));
        let start = rng.gen_range(0..=n - len);
        let frames = |t: &Tensor<f32>| {
            let per = t.numel() / t.dim(0);
            let mut shape = t.shape().to_vec();
            shape[0] = len * cl;
            Tensor::new(shape, t.data()[start * cl * per..(start + len) * cl * per].to_vec())
        };
        (frames(&ex.target), frames(cond), len, cl)
    }

    /// One optimizer step over `cfg.batch` windows; returns the mean loss.
    pub fn train_step(&mut self, corpus: &[DitExample]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::EmptyVideo);
        }
        if let Some(bad) = corpus.iter().find(|e| e.chunk_len == 0 || e.target.dim(0) % e.chunk_len != 0 || e.target.dim(0) == 0) {
            return Err(Error::Shape(format!(
                "{} latent frames are not whole chunks of {}",
                bad.target.dim(0),
                bad.chunk_len
            )));
        }
        let mut rng = step_rng(self.cfg.seed, self.step);
        let mut total: Option<Vec<Tensor<f32>>> = None;
        let mut loss_sum = 0.0;
        let weight = 1.0 / self.cfg.batch as f32;
        for _ in 0..self.cfg.batch {
            let (target, cond, len, cl) = self.sample_window(corpus, &mut rng);
            let sample = flow_sample(&target, len, self.cfg.shift, &mut rng)?;
            let input = concat_channels(&[&sample.noised, &cond])?;
            let mut g = Graph::new();
            let x = g.input(input);
            let pred = self.model.forward_graph(&mut g, x, &sample.taus, cl)?;
            let loss = g.mse(pred, sample.velocity);
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { step: self.step as usize, what: "non-finite loss".into() });
            }
            loss_sum += value;
            let grads = checked_grads(&g.backward(loss), &self.model.params, self.step)?;
            match total.as_mut() {
                None => {
                    total = Some(grads.into_iter().map(|mut t| {
                        t.scale_inplace(weight);
                        t
                    }).collect())
                }
                Some(acc) => {
                    for (a, mut t) in acc.iter_mut().zip(grads) {
                        t.scale_inplace(weight);
                        a.add_assign(&t);
                    }
                }
            }
        }
        self.opt.cfg.lr = scheduled_lr(self.cfg.lr, self.step, self.cfg.steps);
        self.opt.update(&mut self.model.params, &total.expect("batch is positive"));
        let loss = loss_sum / self.cfg.batch as f64;
        self.trace.push(DitTraceRow { step: self.step, loss });
        self.step += 1;
        Ok(loss)
    }

    /// Runs until `cfg.steps`, calling `on_step` after each step.
    pub fn run(&mut self, corpus: &[DitExample], mut on_step: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.steps {
            self.train_step(corpus)?;
            on_step(self)?;
        }
        Ok(())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = DitTrainMeta { model: self.model.cfg, train: self.cfg, step: self.step, trace: self.trace.clone() };
        save_state(stem, DIT_STATE_KIND, &meta, &self.model.params, &self.opt)
    }

    pub fn resume(stem: &Path) -> Result<Self> {
        let file = load_tensors::<DitTrainMeta>(stem, DIT_STATE_KIND)?;
        let mut t = Self::new(file.meta.model, file.meta.train)?;
        let meta: DitTrainMeta = load_state(stem, DIT_STATE_KIND, &mut t.model.params, &mut t.opt)?;
        t.step = meta.step;
        t.opt.step = meta.step;
        t.trace = meta.trace;
        Ok(t)
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        fs::write(path, dit_trace_csv(&self.trace)).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{gen_synthetic, SyntheticSpec};

    fn small() -> (VaeConfig, VaeTrainConfig, Vec<FrameSequence>) {
        let vc = VaeConfig { base_width: 4, ..VaeConfig::default() };
        let tc = VaeTrainConfig { steps: 3, batch: 2, crop: 16, ..VaeTrainConfig::default() };
        let corpus = (0..2).map(|i| gen_synthetic(&SyntheticSpec::default(), 9, 24, 24, i).unwrap()).collect();
        (vc, tc, corpus)
    }

    #[test]
    fn guide_frames_follow_nearest_rule() {
        assert_eq!((0..9).map(|t| guide_frame(t, 4, 9)).collect::<Vec<_>>(), vec![0, 0, 0, 4, 4, 4, 4, 8, 8]);
        assert_eq!(guide_frame(9, 4, 10), 8);
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let (vc, mut tc, corpus) = small();
        tc.steps = 0;
        let mut t = VaeTrainer::new(vc, tc).unwrap();
        let init = t.vae.params.clone();
        t.run(&corpus, |_| Ok(())).unwrap();
        assert_eq!(t.vae.params, init);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (vc, tc, corpus) = small();
        let mut full = VaeTrainer::new(vc, tc).unwrap();
        full.run(&corpus, |_| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("state");
        let mut part = VaeTrainer::new(vc, tc).unwrap();
        part.train_step(&corpus).unwrap();
        part.save(&stem).unwrap();
        let mut resumed = VaeTrainer::resume(&stem).unwrap();
        resumed.run(&corpus, |_| Ok(())).unwrap();
        assert_eq!(resumed.vae.params, full.vae.params);
        assert_eq!(resumed.trace, full.trace);
    }
}
