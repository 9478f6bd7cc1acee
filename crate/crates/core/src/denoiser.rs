//! Small diffusion transformer predicting per-chunk velocities.
//!
//! The model input is a window of consecutive temporal chunks, already
//! concatenated with the condition channels. Latents are cut into
//! `token_patch × token_patch` patches and laid out chunk-major so that the
//! sparse attention operator sees one contiguous run of tokens per
//! (temporal chunk, spatial chunk). Every block is modulated by an embedding of
//! its own chunk's noise level (adaptive layer norm with zero-initialized
//! gates).

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{ChunkGrid, WindowSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{uniform, ParamStore};
use crate::store::{load_tensors, save_tensors};
use crate::tensor::{Scalar, Tensor};

const CHECKPOINT_KIND: &str = "denoiser";
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub head_count: usize,
    pub layer_count: usize,
    /// Latent pixels per token along each spatial axis.
    pub token_patch: usize,
    /// Side of one spatial attention chunk, in latent pixels.
    pub spatial_chunk: usize,
    pub latent_channels: usize,
    /// Condition channels appended after the noised latent.
    pub cond_channels: usize,
    pub mlp_ratio: usize,
    pub window: WindowSpec,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            head_count: 4,
            layer_count: 4,
            token_patch: 2,
            spatial_chunk: 4,
            latent_channels: 4,
            cond_channels: 6,
            mlp_ratio: 4,
            window: WindowSpec::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_count == 0 || !self.model_dim.is_multiple_of(self.head_count) {
            return Err(Error::Config(format!("model dim {} not divisible by {} heads", self.model_dim, self.head_count)));
        }
        if !self.model_dim.is_multiple_of(2) {
            return Err(Error::Config("model dim must be even for sinusoidal encodings".into()));
        }
        if self.layer_count == 0 || self.token_patch == 0 || self.latent_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("layer count, token patch, latent channels and mlp ratio must be positive".into()));
        }
        if self.spatial_chunk == 0 || !self.spatial_chunk.is_multiple_of(self.token_patch) {
            return Err(Error::Config(format!(
                "spatial chunk {} must be a positive multiple of the token patch {}",
                self.spatial_chunk, self.token_patch
            )));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.latent_channels + self.cond_channels
    }
}

/// Token layout of one model invocation.
#[derive(Clone, Debug)]
pub struct TokenLayout {
    pub grid: ChunkGrid,
    /// Latent dims of the whole window `[chunks·chunk_len, h, w]`.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub chunk_len: usize,
    pub patch: usize,
    /// Temporal chunk of each token.
    pub token_chunk: Vec<usize>,
    /// `(frame, token row, token col)` of each token.
    pub token_pos: Vec<(usize, usize, usize)>,
}

impl TokenLayout {
    pub fn new(chunks: usize, chunk_len: usize, height: usize, width: usize, patch: usize, spatial_chunk: usize) -> Result<Self> {
        if !height.is_multiple_of(spatial_chunk) || !width.is_multiple_of(spatial_chunk) || !spatial_chunk.is_multiple_of(patch) {
            return Err(Error::Divisibility(format!(
                "latent {height}x{width} must split into spatial chunks of {spatial_chunk}, themselves split into patches of {patch}"
            )));
        }
        let sc = spatial_chunk / patch;
        let (nh, nw) = (height / spatial_chunk, width / spatial_chunk);
        let grid = ChunkGrid::new(chunks, nh, nw, chunk_len * sc * sc);
        let mut token_chunk = Vec::with_capacity(grid.token_count());
        let mut token_pos = Vec::with_capacity(grid.token_count());
        for t in 0..chunks {
            for i in 0..nh {
                for j in 0..nw {
                    for f in 0..chunk_len {
                        for r in 0..sc {
                            for c in 0..sc {
                                token_chunk.push(t);
                                token_pos.push((t * chunk_len + f, i * sc + r, j * sc + c));
                            }
                        }
                    }
                }
            }
        }
        Ok(Self { grid, frames: chunks * chunk_len, height, width, chunk_len, patch, token_chunk, token_pos })
    }

    pub fn token_count(&self) -> usize {
        self.token_pos.len()
    }

    /// Flat source index of every `(token, py, px, channel)` slot for a latent with `channels` channels.
    pub fn patch_index(&self, channels: usize) -> Vec<usize> {
        let p = self.patch;
        let mut index = Vec::with_capacity(self.token_count() * p * p * channels);
        for &(f, r, c) in &self.token_pos {
            for py in 0..p {
                for px in 0..p {
                    let base = ((f * self.height + r * p + py) * self.width + c * p + px) * channels;
                    index.extend(base..base + channels);
                }
            }
        }
        index
    }

    /// Inverse of [`TokenLayout::patch_index`]: token-slot index for every latent element.
    pub fn unpatch_index(&self, channels: usize) -> Vec<usize> {
        let fwd = self.patch_index(channels);
        let mut inv = vec![0; fwd.len()];
        for (slot, &src) in fwd.iter().enumerate() {
            inv[src] = slot;
        }
        inv
    }
}

/// `[F, H, W, C]` latent → tokens `[N, p·p·C]` in chunk-major order.
pub fn patchify<T: Scalar>(x: &Tensor<T>, chunk_len: usize, patch: usize, spatial_chunk: usize) -> Result<(Tensor<T>, TokenLayout)> {
    let &[f, h, w, c] = x.shape() else {
        return Err(Error::Shape(format!("expected a 4-D latent, got {:?}", x.shape())));
    };
    if chunk_len == 0 || f % chunk_len != 0 {
        return Err(Error::Divisibility(format!("{f} latent frames do not split into chunks of {chunk_len}")));
    }
    let layout = TokenLayout::new(f / chunk_len, chunk_len, h, w, patch, spatial_chunk)?;
    let d = x.data();
    let tokens = layout.patch_index(c).into_iter().map(|i| d[i]).collect();
    Ok((Tensor::new(vec![layout.token_count(), patch * patch * c], tokens), layout))
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, layout: &TokenLayout) -> Result<Tensor<T>> {
    let p2 = layout.patch * layout.patch;
    if tokens.rank() != 2 || tokens.dim(0) != layout.token_count() || !tokens.dim(1).is_multiple_of(p2) {
        return Err(Error::Shape(format!("tokens {:?} do not match the layout", tokens.shape())));
    }
    let c = tokens.dim(1) / p2;
    let d = tokens.data();
    let data = layout.unpatch_index(c).into_iter().map(|i| d[i]).collect();
    Ok(Tensor::new(vec![layout.frames, layout.height, layout.width, c], data))
}

/// Sinusoidal features of `pos` in `dim` channels (`dim` even).
fn sinusoid(pos: f64, dim: usize, out: &mut Vec<f64>) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out.push((pos * freq).sin());
        out.push((pos * freq).cos());
    }
}

/// Separable positional encoding over (frame, row, col).
fn positional<T: Scalar>(layout: &TokenLayout, dim: usize) -> Tensor<T> {
    let spatial = (dim / 3) / 2 * 2;
    let temporal = dim - 2 * spatial;
    let mut data = Vec::with_capacity(layout.token_count() * dim);
    let mut row = Vec::with_capacity(dim);
    for &(f, r, c) in &layout.token_pos {
        row.clear();
        sinusoid(f as f64, temporal, &mut row);
        sinusoid(r as f64, spatial, &mut row);
        sinusoid(c as f64, spatial, &mut row);
        data.extend(row.iter().map(|&v| T::lit(v)));
    }
    Tensor::new(vec![layout.token_count(), dim], data)
}

/// Noise-level features `[n, dim]`; `τ` is scaled by 1000 before the sinusoid.
fn time_features<T: Scalar>(taus: &[f64], dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(taus.len() * dim);
    for &tau in taus {
        let mut row = Vec::with_capacity(dim);
        sinusoid(tau * 1000.0, dim, &mut row);
        data.extend(row.into_iter().map(T::lit));
    }
    Tensor::new(vec![taus.len(), dim], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T = f32> {
    pub cfg: DenoiserConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = cfg.model_dim;
        let p2 = cfg.token_patch * cfg.token_patch;
        let mut dense = |p: &mut ParamStore<T>, name: &str, i: usize, o: usize, zero: bool| {
            let w = if zero { Tensor::zeros(vec![i, o]) } else { uniform(&mut rng, &[i, o], (6.0 / (i + o) as f64).sqrt()) };
            p.add(format!("{name}.w"), w);
            p.add(format!("{name}.b"), Tensor::zeros(vec![o]));
        };
        dense(&mut p, "embed", p2 * cfg.in_channels(), d, false);
        dense(&mut p, "time.fc1", d, d, false);
        dense(&mut p, "time.fc2", d, d, false);
        for l in 0..cfg.layer_count {
            for m in ["shift1", "scale1", "gate1", "shift2", "scale2", "gate2"] {
                dense(&mut p, &format!("block{l}.mod.{m}"), d, d, true);
            }
            dense(&mut p, &format!("block{l}.qkv"), d, 3 * d, false);
            dense(&mut p, &format!("block{l}.proj"), d, d, false);
            dense(&mut p, &format!("block{l}.fc1"), d, cfg.mlp_ratio * d, false);
            dense(&mut p, &format!("block{l}.fc2"), cfg.mlp_ratio * d, d, false);
        }
        dense(&mut p, "final.mod.shift", d, d, true);
        dense(&mut p, "final.mod.scale", d, d, true);
        dense(&mut p, "head", d, p2 * cfg.latent_channels, true);
        Ok(Self { cfg, params: p })
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser { cfg: self.cfg, params: self.params.cast() }
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, name: &str) -> Var {
        let w = g.param(&self.params, self.id(&format!("{name}.w")));
        let b = g.param(&self.params, self.id(&format!("{name}.b")));
        g.linear(x, w, b)
    }

    fn id(&self, name: &str) -> crate::params::ParamId {
        self.params.id(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Per-token modulation vector from the per-chunk conditioning `cond [n, D]`.
    fn modulation(&self, g: &mut Graph<T>, cond: Var, name: &str, rows: &[usize]) -> Var {
        let table = self.linear(g, cond, name);
        g.index_rows(table, rows)
    }

    fn modulate(&self, g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Var {
        let h = g.layer_norm(x, LN_EPS);
        let s1 = g.add_scalar(scale, T::one());
        let h = g.mul(h, s1);
        g.add(h, shift)
    }

    /// Window input `[n·chunk_len, H, W, C_in]` and one noise level per chunk
    /// → velocity `[n·chunk_len, H, W, C']`.
    pub fn forward_graph(&self, g: &mut Graph<T>, input: Var, taus: &[f64], chunk_len: usize) -> Result<Var> {
        let shape = g.shape(input).to_vec();
        let &[f, h, w, c] = shape.as_slice() else {
            return Err(Error::Shape(format!("expected a 4-D window, got {shape:?}")));
        };
        if c != self.cfg.in_channels() {
            return Err(Error::Shape(format!("window has {c} channels, model expects {}", self.cfg.in_channels())));
        }
        if chunk_len == 0 || f != taus.len() * chunk_len {
            return Err(Error::Shape(format!(
                "{} noise levels for {f} latent frames with chunk length {chunk_len}",
                taus.len()
            )));
        }
        let cfg = &self.cfg;
        let layout = TokenLayout::new(taus.len(), chunk_len, h, w, cfg.token_patch, cfg.spatial_chunk)?;
        let n = layout.token_count();
        let p2 = cfg.token_patch * cfg.token_patch;
        let d = cfg.model_dim;

        let tokens = g.gather(input, Arc::new(layout.patch_index(c)), vec![n, p2 * c]);
        let x = self.linear(g, tokens, "embed");
        let pos = g.input(positional(&layout, d));
        let mut x = g.add(x, pos);

        let tf = g.input(time_features(taus, d));
        let t = self.linear(g, tf, "time.fc1");
        let t = g.silu(t);
        let t = self.linear(g, t, "time.fc2");
        let cond = g.silu(t);
        let rows = &layout.token_chunk;

        for l in 0..cfg.layer_count {
            let m = |s: &Self, g: &mut Graph<T>, k: &str| s.modulation(g, cond, &format!("block{l}.mod.{k}"), rows);
            let (shift1, scale1, gate1) = (m(self, g, "shift1"), m(self, g, "scale1"), m(self, g, "gate1"));
            let hn = self.modulate(g, x, shift1, scale1);
            let qkv = self.linear(g, hn, &format!("block{l}.qkv"));
            let a = g.attention(qkv, cfg.head_count, layout.grid, cfg.window);
            let a = self.linear(g, a, &format!("block{l}.proj"));
            let a = g.mul(a, gate1);
            x = g.add(x, a);

            let (shift2, scale2, gate2) = (m(self, g, "shift2"), m(self, g, "scale2"), m(self, g, "gate2"));
            let hn = self.modulate(g, x, shift2, scale2);
            let hm = self.linear(g, hn, &format!("block{l}.fc1"));
            let hm = g.silu(hm);
            let hm = self.linear(g, hm, &format!("block{l}.fc2"));
            let hm = g.mul(hm, gate2);
            x = g.add(x, hm);
        }
        let shift = self.modulation(g, cond, "final.mod.shift", rows);
        let scale = self.modulation(g, cond, "final.mod.scale", rows);
        let hn = self.modulate(g, x, shift, scale);
        let out = self.linear(g, hn, "head");
        let oc = cfg.latent_channels;
        Ok(g.gather(out, Arc::new(layout.unpatch_index(oc)), vec![f, h, w, oc]))
    }

    /// Inference forward pass.
    pub fn denoise(&self, input: &Tensor<T>, taus: &[f64], chunk_len: usize) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.input(input.clone());
        let out = self.forward_graph(&mut g, x, taus, chunk_len)?;
        Ok(g.take(out))
    }
}

#[derive(Serialize, Deserialize)]
struct DenoiserMeta {
    config: DenoiserConfig,
}

impl Denoiser<f32> {
    pub fn save(&self, stem: &Path) -> Result<()> {
        let tensors: Vec<(&str, &Tensor<f32>)> = self.params.iter().collect();
        save_tensors(stem, CHECKPOINT_KIND, &DenoiserMeta { config: self.cfg }, &tensors)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let file = load_tensors::<DenoiserMeta>(stem, CHECKPOINT_KIND)?;
        let mut model = Self::new(file.meta.config, 0)?;
        model
            .params
            .assign(file.tensors)
            .map_err(|e| Error::Checkpoint { path: stem.to_path_buf(), reason: e.to_string() })?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            model_dim: 8,
            head_count: 2,
            layer_count: 2,
            token_patch: 1,
            spatial_chunk: 2,
            latent_channels: 2,
            cond_channels: 3,
            mlp_ratio: 2,
            window: WindowSpec::new(1),
        }
    }

    #[test]
    fn patch_examples() {
        let x = Tensor::new(vec![4, 8, 8, 3], (0..768).map(|v| v as f32).collect());
        let (tok, layout) = patchify(&x, 2, 2, 8).unwrap();
        assert_eq!((layout.grid.nt, layout.grid.nh, layout.grid.nw), (2, 1, 1));
        assert_eq!(layout.grid.tokens_per_chunk, 2 * 4 * 4);
        assert_eq!(tok.shape(), &[64, 12]);
        assert_eq!(unpatchify(&tok, &layout).unwrap(), x);
        let (tok1, _) = patchify(&x, 4, 1, 4).unwrap();
        assert_eq!(tok1.dim(0), 4 * 64);
        assert!(patchify(&x, 3, 2, 8).is_err());
        assert!(patchify(&x, 2, 2, 3).is_err());
    }

    #[test]
    fn zero_head_predicts_zero() {
        let m = Denoiser::<f32>::new(tiny(), 1).unwrap();
        let x = Tensor::full(vec![4, 4, 4, 5], 0.3);
        let v = m.denoise(&x, &[0.2, 0.9], 2).unwrap();
        assert_eq!(v.shape(), &[4, 4, 4, 2]);
        assert!(v.data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn rejects_mismatched_noise_levels() {
        let m = Denoiser::<f32>::new(tiny(), 1).unwrap();
        let x = Tensor::zeros(vec![4, 4, 4, 5]);
        assert!(m.denoise(&x, &[0.5], 2).is_err());
        assert!(m.denoise(&Tensor::zeros(vec![4, 4, 4, 4]), &[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Denoiser::<f32>::new(tiny(), 4).unwrap();
        m.save(&dir.path().join("dit")).unwrap();
        assert_eq!(Denoiser::load(&dir.path().join("dit")).unwrap(), m);
        assert!(crate::vae::ToyVae::load(&dir.path().join("dit")).is_err());
    }
}
