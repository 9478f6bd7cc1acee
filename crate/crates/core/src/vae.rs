//! Small convolutional VAE used as the per-tile frame codec.
//!
//! Each group of `r_t` consecutive frames is folded into channels and
//! processed by 2-D convolutions; `level_count − 1` stride-2 stages give the
//! spatial stride. The conditional decoder adds, at every decoder level, a
//! feature map computed from the aligned low-frame-rate pixels through a
//! zero-initialized 1×1 projection, so at initialization it reproduces the
//! unconditional decoder exactly.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{channels_to_time_index, concat_channels, time_to_channels};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{uniform, ParamStore};
use crate::store::{load_tensors, save_tensors};
use crate::tensor::{Scalar, Tensor};
use crate::tiling::FrameCodec;

pub const KL_WEIGHT: f64 = 1e-6;
const CHECKPOINT_KIND: &str = "toy-vae";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    pub latent_channels: usize,
    pub base_width: usize,
    pub level_count: usize,
    #[serde(default = "rgb")]
    pub image_channels: usize,
}

fn rgb() -> usize {
    3
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { spatial_stride: 4, temporal_stride: 2, latent_channels: 4, base_width: 16, level_count: 3, image_channels: 3 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_count == 0 || self.spatial_stride != 1 << (self.level_count - 1) {
            return Err(Error::Config(format!(
                "spatial stride {} must equal 2^(levels-1) with {} levels",
                self.spatial_stride, self.level_count
            )));
        }
        if self.latent_channels == 0 || self.base_width == 0 || self.temporal_stride == 0 {
            return Err(Error::Config("latent channels, base width and temporal stride must be positive".into()));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::Config(format!("image channels must be 1 or 3, got {}", self.image_channels)));
        }
        Ok(())
    }

    /// Channel width at level `l` (level 0 is full resolution).
    pub fn width(&self, level: usize) -> usize {
        (self.base_width << level).min(64).max(1)
    }

    fn folded_channels(&self) -> usize {
        self.image_channels * self.temporal_stride
    }
}

/// Posterior statistics, each shaped like the latent block.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats<T = f32> {
    pub mean: Tensor<T>,
    pub log_var: Tensor<T>,
}

/// Per-channel affine map applied to encoder means so the denoiser sees
/// roughly unit-scale latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNorm {
    pub shift: Vec<f32>,
    pub scale: Vec<f32>,
}

impl LatentNorm {
    pub fn identity(channels: usize) -> Self {
        Self { shift: vec![0.0; channels], scale: vec![1.0; channels] }
    }

    /// Shift/scale from the per-channel mean and standard deviation of `[.., C]` samples.
    pub fn fit(samples: &[f32], channels: usize) -> Self {
        let rows = (samples.len() / channels).max(1) as f64;
        let mut shift = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        for row in samples.chunks(channels) {
            for (c, &v) in row.iter().enumerate() {
                shift[c] += v as f64;
                sq[c] += v as f64 * v as f64;
            }
        }
        let mut norm = Self::identity(channels);
        for c in 0..channels {
            let mu = shift[c] / rows;
            let var = (sq[c] / rows - mu * mu).max(0.0);
            norm.shift[c] = mu as f32;
            norm.scale[c] = var.sqrt().max(1e-3) as f32;
        }
        norm
    }

    pub fn normalize(&self, z: &mut Tensor<f32>) {
        let c = self.shift.len();
        for row in z.data_mut().chunks_mut(c) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - self.shift[i]) / self.scale[i];
            }
        }
    }

    pub fn denormalize(&self, z: &mut Tensor<f32>) {
        let c = self.shift.len();
        for row in z.data_mut().chunks_mut(c) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * self.scale[i] + self.shift[i];
            }
        }
    }
}

/// Low-frame-rate guide pixels folded and average-pooled to every decoder
/// level, `levels[l]` at resolution `h/2^l`. Each latent frame sees its own
/// guide and the guide of the following latent frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CondFeatures<T = f32> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> CondFeatures<T> {
    /// `guide`: `[F, h, w, C]` pixels aligned with the block being decoded. The
    /// last latent frame of the block reuses its own guide as the following one.
    pub fn from_guide(guide: &Tensor<T>, cfg: &VaeConfig) -> Result<Self> {
        let own = time_to_channels(guide, cfg.temporal_stride)?;
        let n = own.dim(0);
        let per = own.numel() / n.max(1);
        let mut next = Vec::with_capacity(own.numel());
        for j in 0..n {
            let k = (j + 1).min(n - 1);
            next.extend_from_slice(&own.data()[k * per..(k + 1) * per]);
        }
        Self::from_folded(&own, &Tensor::new(own.shape().to_vec(), next), cfg)
    }

    /// Like [`CondFeatures::from_guide`] with the following guide supplied per
    /// latent frame; both are `[F, h, w, C]`.
    pub fn from_pair(guide: &Tensor<T>, next: &Tensor<T>, cfg: &VaeConfig) -> Result<Self> {
        if guide.shape() != next.shape() {
            return Err(Error::Shape(format!("guide {:?} vs following guide {:?}", guide.shape(), next.shape())));
        }
        let own = time_to_channels(guide, cfg.temporal_stride)?;
        let next = time_to_channels(next, cfg.temporal_stride)?;
        Self::from_folded(&own, &next, cfg)
    }

    fn from_folded(own: &Tensor<T>, next: &Tensor<T>, cfg: &VaeConfig) -> Result<Self> {
        let mut cur = concat_channels(&[own, next])?;
        let mut levels = vec![cur.clone()];
        for _ in 1..cfg.level_count {
            cur = avg_pool2(&cur)?;
            levels.push(cur.clone());
        }
        Ok(Self { levels })
    }
}

fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, h, w, c] = x.shape() else { unreachable!("4-D by construction") };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Divisibility(format!("cannot pool {h}x{w} by 2")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let d = x.data();
    let mut out = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let o = ((b * ho + y) * wo + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        out[o + ch] += d[s + ch] * quarter;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, ho, wo, c], out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyVae<T = f32> {
    pub cfg: VaeConfig,
    pub params: ParamStore<T>,
    pub norm: LatentNorm,
}

#[derive(Serialize, Deserialize)]
struct VaeMeta {
    config: VaeConfig,
    norm: LatentNorm,
}

/// Per-term training loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub kl: f64,
    pub total: f64,
}

/// `l1 = mean|x − x̂|`, `kl` = mean per-element KL to the unit normal, `total = l1 + 1e-6·kl`.
pub fn vae_loss<T: Scalar>(x: &Tensor<T>, recon: &Tensor<T>, stats: &LatentStats<T>) -> Result<LossBreakdown> {
    if x.shape() != recon.shape() || stats.mean.shape() != stats.log_var.shape() {
        return Err(Error::Shape(format!("loss operands {:?} vs {:?}", x.shape(), recon.shape())));
    }
    let l1 = x.data().iter().zip(recon.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>()
        / x.numel().max(1) as f64;
    let kl = stats
        .mean
        .data()
        .iter()
        .zip(stats.log_var.data())
        .map(|(m, lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum::<f64>()
        / stats.mean.numel().max(1) as f64;
    Ok(LossBreakdown { l1, kl, total: l1 + KL_WEIGHT * kl })
}

fn conv_bound(k: usize, cin: usize) -> f64 {
    (3.0 / (k * k * cin) as f64).sqrt()
}

impl<T: Scalar> ToyVae<T> {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let conv = |p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, k: usize, cin: usize, cout: usize| {
            p.add(format!("{name}.w"), uniform(rng, &[k, k, cin, cout], conv_bound(k, cin)));
            p.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        };
        let levels = cfg.level_count;
        let fc = cfg.folded_channels();
        conv(&mut p, &mut rng, "enc.in", 3, fc, cfg.width(0));
        for l in 1..levels {
            conv(&mut p, &mut rng, &format!("enc.down{l}"), 3, cfg.width(l - 1), cfg.width(l));
            conv(&mut p, &mut rng, &format!("enc.mix{l}"), 3, cfg.width(l), cfg.width(l));
        }
        conv(&mut p, &mut rng, "enc.out", 3, cfg.width(levels - 1), 2 * cfg.latent_channels);
        conv(&mut p, &mut rng, "dec.in", 3, cfg.latent_channels, cfg.width(levels - 1));
        conv(&mut p, &mut rng, &format!("dec.mix{}", levels - 1), 3, cfg.width(levels - 1), cfg.width(levels - 1));
        for l in (0..levels - 1).rev() {
            conv(&mut p, &mut rng, &format!("dec.up{l}"), 3, cfg.width(l + 1), cfg.width(l));
            conv(&mut p, &mut rng, &format!("dec.mix{l}"), 3, cfg.width(l), cfg.width(l));
        }
        conv(&mut p, &mut rng, "dec.out", 3, cfg.width(0), fc);
        for l in 0..levels {
            conv(&mut p, &mut rng, &format!("cond.feat{l}"), 3, 2 * fc, cfg.width(l));
            conv(&mut p, &mut rng, &format!("cond.mix{l}"), 3, cfg.width(l), cfg.width(l));
            p.add(format!("cond.proj{l}.w"), Tensor::zeros(vec![1, 1, cfg.width(l), cfg.width(l)]));
            p.add(format!("cond.proj{l}.b"), Tensor::zeros(vec![cfg.width(l)]));
        }
        Ok(Self { cfg, params: p, norm: LatentNorm::identity(cfg.latent_channels) })
    }

    pub fn cast<U: Scalar>(&self) -> ToyVae<U> {
        ToyVae { cfg: self.cfg, params: self.params.cast(), norm: self.norm.clone() }
    }

    fn param(&self, g: &mut Graph<T>, name: &str) -> Var {
        let id = self.params.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        g.param(&self.params, id)
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, name: &str, stride: usize) -> Var {
        let w = self.param(g, &format!("{name}.w"));
        let b = self.param(g, &format!("{name}.b"));
        let pad = g.shape(w)[0] / 2;
        let y = g.conv2d(x, w, stride, pad);
        g.add_bias(y, b)
    }

    fn conv_silu(&self, g: &mut Graph<T>, x: Var, name: &str, stride: usize) -> Var {
        let y = self.conv(g, x, name, stride);
        g.silu(y)
    }

    /// Folded pixels `[N, h, w, r_t·C]` → `(mean, log_var)` Vars `[N, h/r_s, w/r_s, C']`.
    pub fn encode_graph(&self, g: &mut Graph<T>, folded: Var) -> (Var, Var) {
        let mut h = self.conv_silu(g, folded, "enc.in", 1);
        for l in 1..self.cfg.level_count {
            h = self.conv_silu(g, h, &format!("enc.down{l}"), 2);
            h = self.conv_silu(g, h, &format!("enc.mix{l}"), 1);
        }
        let out = self.conv(g, h, "enc.out", 1);
        let c = self.cfg.latent_channels;
        (g.slice_last(out, 0, c), g.slice_last(out, c, c))
    }

    /// Per-level injections from pooled guide features.
    pub fn cond_graph(&self, g: &mut Graph<T>, feats: &CondFeatures<T>) -> Vec<Var> {
        (0..self.cfg.level_count)
            .map(|l| {
                let x = g.input(feats.levels[l].clone());
                let h = self.conv_silu(g, x, &format!("cond.feat{l}"), 1);
                let h = self.conv_silu(g, h, &format!("cond.mix{l}"), 1);
                self.conv(g, h, &format!("cond.proj{l}"), 1)
            })
            .collect()
    }

    /// Latent `[N, h', w', C']` → folded pixels in `(0, 1)`, `[N, h, w, r_t·C]`.
    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var, inject: Option<&[Var]>) -> Var {
        let top = self.cfg.level_count - 1;
        let mut h = self.conv_silu(g, z, "dec.in", 1);
        h = self.conv_silu(g, h, &format!("dec.mix{top}"), 1);
        if let Some(inj) = inject {
            h = g.add(h, inj[top]);
        }
        for l in (0..top).rev() {
            h = g.upsample2x(h);
            h = self.conv_silu(g, h, &format!("dec.up{l}"), 1);
            h = self.conv_silu(g, h, &format!("dec.mix{l}"), 1);
            if let Some(inj) = inject {
                h = g.add(h, inj[l]);
            }
        }
        let out = self.conv(g, h, "dec.out", 1);
        g.sigmoid(out)
    }

    /// Folded `[N, h, w, r_t·C]` Var → frames `[N·r_t, h, w, C]`.
    pub fn unfold_graph(&self, g: &mut Graph<T>, folded: Var) -> Var {
        let shape = g.shape(folded).to_vec();
        let r = self.cfg.temporal_stride;
        let index = channels_to_time_index(&shape, r).expect("folded channels divide by r_t");
        let out_shape = vec![shape[0] * r, shape[1], shape[2], shape[3] / r];
        g.gather(folded, Arc::new(index), out_shape)
    }

    fn check_block(&self, block: &Tensor<T>) -> Result<()> {
        let &[f, h, w, c] = block.shape() else {
            return Err(Error::Shape(format!("expected [F, h, w, C] block, got {:?}", block.shape())));
        };
        let (rs, rt) = (self.cfg.spatial_stride, self.cfg.temporal_stride);
        if c != self.cfg.image_channels {
            return Err(Error::Shape(format!("block has {c} channels, codec expects {}", self.cfg.image_channels)));
        }
        if f % rt != 0 || h % rs != 0 || w % rs != 0 {
            return Err(Error::Divisibility(format!("block {f}x{h}x{w} vs strides r_t={rt}, r_s={rs}")));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        match z.shape() {
            [_, _, _, c] if *c == self.cfg.latent_channels => Ok(()),
            s => Err(Error::Shape(format!("latent block {s:?} does not have {} channels", self.cfg.latent_channels))),
        }
    }

    /// Raw (unnormalized) posterior statistics of a pixel block `[F, h, w, C]`.
    pub fn encode(&self, block: &Tensor<T>) -> Result<LatentStats<T>> {
        self.check_block(block)?;
        let mut g = Graph::inference();
        let x = g.input(time_to_channels(block, self.cfg.temporal_stride)?);
        let (m, lv) = self.encode_graph(&mut g, x);
        Ok(LatentStats { mean: g.value(m).clone(), log_var: g.value(lv).clone() })
    }

    /// Unconditional decode of a raw latent block `[F', h', w', C']`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(z)?;
        let mut g = Graph::inference();
        let zv = g.input(z.clone());
        let folded = self.decode_graph(&mut g, zv, None);
        let out = self.unfold_graph(&mut g, folded);
        Ok(g.take(out))
    }

    /// Decode with injections from the aligned low-frame-rate guide `[F, h, w, C]`.
    pub fn cond_decode(&self, z: &Tensor<T>, guide: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(z)?;
        self.check_block(guide)?;
        let (rs, rt) = (self.cfg.spatial_stride, self.cfg.temporal_stride);
        let zs = z.shape();
        let gs = guide.shape();
        if gs[0] != zs[0] * rt || gs[1] != zs[1] * rs || gs[2] != zs[2] * rs {
            return Err(Error::Shape(format!("guide {gs:?} is not aligned with latent {zs:?}")));
        }
        let feats = CondFeatures::from_guide(guide, &self.cfg)?;
        let mut g = Graph::inference();
        let inject = self.cond_graph(&mut g, &feats);
        let zv = g.input(z.clone());
        let folded = self.decode_graph(&mut g, zv, Some(&inject));
        let out = self.unfold_graph(&mut g, folded);
        Ok(g.take(out))
    }

    /// Training objective on pixel block `x` `[N·r_t, h, w, C]` with its guide and
    /// following guide of the same shape: `L1(uncond) + L1(cond) + 1e-6·KL`, with a
    /// reparameterized latent drawn from `noise`.
    pub fn training_loss(
        &self,
        g: &mut Graph<T>,
        x: &Tensor<T>,
        guide: &Tensor<T>,
        next_guide: &Tensor<T>,
        noise: Tensor<T>,
    ) -> Result<(Var, LossBreakdown)> {
        self.check_block(x)?;
        let folded = g.input(time_to_channels(x, self.cfg.temporal_stride)?);
        let (m, lv) = self.encode_graph(g, folded);
        let z = g.reparameterize(m, lv, noise);
        let feats = CondFeatures::from_pair(guide, next_guide, &self.cfg)?;
        let inject = self.cond_graph(g, &feats);
        let plain = self.decode_graph(g, z, None);
        let plain = self.unfold_graph(g, plain);
        let cond = self.decode_graph(g, z, Some(&inject));
        let cond = self.unfold_graph(g, cond);
        let l1_plain = g.mean_abs(plain, x.clone());
        let l1_cond = g.mean_abs(cond, x.clone());
        let kl = g.kl_unit(m, lv);
        let total = g.weighted_sum(&[(l1_plain, T::one()), (l1_cond, T::one()), (kl, T::lit(KL_WEIGHT))]);
        let l1 = 0.5 * (g.value(l1_plain).item().as_f64() + g.value(l1_cond).item().as_f64());
        let klv = g.value(kl).item().as_f64();
        Ok((total, LossBreakdown { l1, kl: klv, total: g.value(total).item().as_f64() }))
    }
}

impl ToyVae<f32> {
    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = VaeMeta { config: self.cfg, norm: self.norm.clone() };
        let tensors: Vec<(&str, &Tensor<f32>)> = self.params.iter().collect();
        save_tensors(stem, CHECKPOINT_KIND, &meta, &tensors)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let file = load_tensors::<VaeMeta>(stem, CHECKPOINT_KIND)?;
        let mut vae = Self::new(file.meta.config, 0)?;
        vae.params.assign(file.tensors).map_err(|e| Error::Checkpoint {
            path: stem.to_path_buf(),
            reason: e.to_string(),
        })?;
        vae.norm = file.meta.norm;
        Ok(vae)
    }
}

/// Adapter exposing a trained VAE as a tile codec: encoding yields normalized
/// posterior means; decoding is conditional when a guide is supplied.
impl FrameCodec for ToyVae<f32> {
    fn spatial_stride(&self) -> usize {
        self.cfg.spatial_stride
    }

    fn temporal_stride(&self) -> usize {
        self.cfg.temporal_stride
    }

    fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    fn codec_id(&self) -> String {
        format!(
            "toy-vae/rs{}-rt{}-c{}-w{}",
            self.cfg.spatial_stride, self.cfg.temporal_stride, self.cfg.latent_channels, self.cfg.base_width
        )
    }

    fn encode_block(&self, block: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut z = self.encode(block)?.mean;
        self.norm.normalize(&mut z);
        Ok(z)
    }

    fn decode_block(&self, latent: &Tensor<f32>, guide: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        let mut z = latent.clone();
        self.norm.denormalize(&mut z);
        match guide {
            Some(gd) => self.cond_decode(&z, gd),
            None => self.decode(&z),
        }
    }
}

/// The same codec with the conditional path switched off.
pub struct Unconditional<'a>(pub &'a ToyVae<f32>);

impl FrameCodec for Unconditional<'_> {
    fn spatial_stride(&self) -> usize {
        self.0.spatial_stride()
    }

    fn temporal_stride(&self) -> usize {
        self.0.temporal_stride()
    }

    fn latent_channels(&self) -> usize {
        self.0.latent_channels()
    }

    fn codec_id(&self) -> String {
        self.0.codec_id()
    }

    fn encode_block(&self, block: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.0.encode_block(block)
    }

    fn decode_block(&self, latent: &Tensor<f32>, _guide: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        self.0.decode_block(latent, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> VaeConfig {
        VaeConfig { spatial_stride: 2, temporal_stride: 2, latent_channels: 2, base_width: 2, level_count: 2, image_channels: 3 }
    }

    #[test]
    fn encode_shapes() {
        let vae = ToyVae::<f32>::new(VaeConfig { base_width: 4, ..VaeConfig::default() }, 1).unwrap();
        let x = Tensor::zeros(vec![8, 32, 32, 3]);
        let s = vae.encode(&x).unwrap();
        assert_eq!(s.mean.shape(), &[4, 8, 8, 4]);
        assert!(s.mean.all_finite() && s.log_var.all_finite());
        assert_eq!(vae.encode(&x).unwrap(), s);
        let y = vae.decode(&s.mean).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(vae.encode(&Tensor::zeros(vec![3, 32, 32, 3])), Err(Error::Divisibility(_))));
    }

    #[test]
    fn config_validation() {
        assert!(VaeConfig { level_count: 2, ..VaeConfig::default() }.validate().is_err());
        assert!(VaeConfig { latent_channels: 0, ..VaeConfig::default() }.validate().is_err());
        assert_eq!(VaeConfig { base_width: 48, ..VaeConfig::default() }.width(2), 64);
    }

    #[test]
    fn loss_closed_forms() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.2f64, 0.4]);
        let zero = LatentStats { mean: Tensor::zeros(vec![1]), log_var: Tensor::zeros(vec![1]) };
        assert_eq!(vae_loss(&x, &x, &zero).unwrap().total, 0.0);
        let shifted = x.map(|v| v + 0.1);
        assert!((vae_loss(&x, &shifted, &zero).unwrap().l1 - 0.1).abs() < 1e-12);
        let one = LatentStats { mean: Tensor::full(vec![1], 1.0), log_var: Tensor::zeros(vec![1]) };
        assert!((vae_loss(&x, &x, &one).unwrap().kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_init_condition_is_identity() {
        let vae = ToyVae::<f32>::new(tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::new(vec![2, 2, 2, 2], (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let guide = Tensor::new(vec![4, 4, 4, 3], (0..192).map(|_| rng.gen::<f32>()).collect());
        let a = vae.decode(&z).unwrap();
        let b = vae.cond_decode(&z, &guide).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn latent_norm_round_trip() {
        let samples = [1.0, 10.0, 3.0, 14.0];
        let norm = LatentNorm::fit(&samples, 2);
        assert_eq!(norm.shift, vec![2.0, 12.0]);
        assert_eq!(norm.scale, vec![1.0, 2.0]);
        let mut z = Tensor::new(vec![2, 2], samples.to_vec());
        norm.normalize(&mut z);
        assert_eq!(z.data(), &[-1.0, -1.0, 1.0, 1.0]);
        norm.denormalize(&mut z);
        assert_eq!(z.data(), &samples);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut vae = ToyVae::<f32>::new(tiny(), 3).unwrap();
        vae.norm = LatentNorm { shift: vec![0.5, -0.5], scale: vec![2.0, 3.0] };
        vae.save(&dir.path().join("vae")).unwrap();
        assert_eq!(ToyVae::load(&dir.path().join("vae")).unwrap(), vae);
    }
}
