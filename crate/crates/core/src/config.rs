//! Single JSON configuration for the whole pipeline.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::pipeline::InferenceConfig;
use crate::tiling::TilePlan;
use crate::train::{DitTrainConfig, VaeTrainConfig};
use crate::vae::VaeConfig;
use crate::video::{gen_synthetic, FrameSequence, SyntheticSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    pub train_count: usize,
    pub eval_count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { synthetic: SyntheticSpec::default(), train_count: 16, eval_count: 4, frames: 33, height: 64, width: 64, seed: 0 }
    }
}

/// Corpus split; held-out clips draw from a disjoint seed range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl DataConfig {
    pub fn clip_seed(&self, split: Split, index: usize) -> u64 {
        let offset = match split {
            Split::Train => 0,
            Split::Eval => 1 << 32,
        };
        self.seed.wrapping_add(offset + index as u64)
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Eval => self.eval_count,
        }
    }

    pub fn clip(&self, split: Split, index: usize) -> Result<FrameSequence> {
        gen_synthetic(&self.synthetic, self.frames, self.height, self.width, self.clip_seed(split, index))
    }

    pub fn clips(&self, split: Split) -> Result<Vec<FrameSequence>> {
        (0..self.count(split)).map(|i| self.clip(split, i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub tile: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    /// Pixel frames per chunk.
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub vae: VaeTrainConfig,
    pub dit: DitTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub codec: VaeConfig,
    pub tiles: TileConfig,
    pub chunks: ChunkConfig,
    pub denoiser: DenoiserConfig,
    pub training: TrainingConfig,
    pub inference: InferenceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let codec = VaeConfig { latent_channels: 8, ..VaeConfig::default() };
        let denoiser = DenoiserConfig {
            latent_channels: codec.latent_channels,
            cond_channels: codec.latent_channels + codec.temporal_stride,
            ..DenoiserConfig::default()
        };
        Self {
            data: DataConfig::default(),
            codec,
            tiles: TileConfig { tile: 32, stride: 16 },
            chunks: ChunkConfig { len: 8 },
            denoiser,
            training: TrainingConfig { vae: VaeTrainConfig::default(), dit: DitTrainConfig::default() },
            inference: InferenceConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn tile_plan(&self) -> Result<TilePlan> {
        TilePlan::square(self.data.height, self.data.width, self.tiles.tile, self.tiles.stride)
    }

    /// Checks every cross-module constraint before any compute runs.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        self.data.synthetic.validate().map_err(|e| Error::Config(format!("data.synthetic: {e}")))?;
        if self.data.frames < 2 {
            return fail(format!("data.frames = {} but clips need at least 2 frames", self.data.frames));
        }
        self.codec.validate().map_err(|e| Error::Config(format!("codec: {e}")))?;
        let (rs, rt) = (self.codec.spatial_stride, self.codec.temporal_stride);
        if self.tiles.stride == 0 || self.tiles.stride > self.tiles.tile {
            return fail(format!("tiles.stride = {} must be in 1..={}", self.tiles.stride, self.tiles.tile));
        }
        for (name, v) in [("tiles.tile", self.tiles.tile), ("tiles.stride", self.tiles.stride), ("data.height", self.data.height), ("data.width", self.data.width)] {
            if v % rs != 0 {
                return fail(format!("{name} = {v} is not a multiple of the codec spatial stride {rs}"));
            }
        }
        if self.chunks.len == 0 || !self.chunks.len.is_multiple_of(rt) {
            return fail(format!("chunks.len = {} must be a positive multiple of the codec temporal stride {rt}", self.chunks.len));
        }
        let d = &self.denoiser;
        d.validate().map_err(|e| Error::Config(format!("denoiser: {e}")))?;
        if d.latent_channels != self.codec.latent_channels {
            return fail(format!(
                "denoiser.latent_channels = {} must equal codec.latent_channels = {}",
                d.latent_channels, self.codec.latent_channels
            ));
        }
        if d.cond_channels != self.codec.latent_channels + rt {
            return fail(format!(
                "denoiser.cond_channels = {} must equal codec.latent_channels + temporal stride = {}",
                d.cond_channels,
                self.codec.latent_channels + rt
            ));
        }
        let (lh, lw) = (self.data.height / rs, self.data.width / rs);
        if lh % d.spatial_chunk != 0 || lw % d.spatial_chunk != 0 {
            return fail(format!(
                "latent frame {lh}x{lw} is not a whole number of denoiser spatial chunks of {}",
                d.spatial_chunk
            ));
        }
        self.training.vae.validate(&self.codec).map_err(|e| Error::Config(format!("training.vae: {e}")))?;
        if self.training.vae.crop > self.data.height.min(self.data.width) {
            return fail(format!("training.vae.crop = {} exceeds the frame size", self.training.vae.crop));
        }
        self.training.dit.validate().map_err(|e| Error::Config(format!("training.dit: {e}")))?;
        let (s0, s1) = self.training.vae.s_range;
        if !(s0..=s1).any(|s| s >= 2 && (self.data.frames - 1).is_multiple_of(s)) {
            return fail(format!(
                "no temporal factor in training.vae.s_range {:?} divides data.frames - 1 = {}",
                self.training.vae.s_range,
                self.data.frames - 1
            ));
        }
        let inf = &self.inference;
        if inf.s == 0 || inf.steps == 0 || !(inf.shift > 0.0) {
            return fail("inference.s, inference.steps and inference.shift must be positive".into());
        }
        if inf.skip_period < 2 {
            return fail(format!("inference.skip_period = {} must be >= 2", inf.skip_period));
        }
        let needed = match inf.mode {
            crate::scheduler::PlanMode::Causal => 2,
            crate::scheduler::PlanMode::SkipConcat => inf.skip_period + 1,
        };
        if inf.window.max_chunks_per_invocation < needed {
            return fail(format!(
                "inference.window.max_chunks_per_invocation = {} but the plan needs {needed}",
                inf.window.max_chunks_per_invocation
            ));
        }
        self.tile_plan().map_err(|e| Error::Config(format!("tiles: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn divisibility_violations_are_rejected() {
        let mut bad = PipelineConfig::default();
        bad.chunks.len = 7;
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("chunks.len")));
        let mut bad = PipelineConfig::default();
        bad.tiles.stride = 18;
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("tiles.stride")));
        let mut bad = PipelineConfig::default();
        bad.denoiser.cond_channels = 3;
        assert!(bad.validate().is_err());
        let mut bad = PipelineConfig::default();
        bad.data.frames = 32;
        bad.training.vae.s_range = (2, 2);
        assert!(bad.validate().is_err());
    }
}
