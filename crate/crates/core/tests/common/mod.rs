//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfi_core::attention::{ChunkGrid, WindowSpec};
use vfi_core::denoiser::{Denoiser, DenoiserConfig};
use vfi_core::graph::Graph;
use vfi_core::params::ParamStore;
use vfi_core::vae::{ToyVae, VaeConfig};
use vfi_core::Tensor;

/// Chunk-major token → (temporal chunk, chunk row, chunk col).
pub fn coords(grid: &ChunkGrid, token: usize) -> (usize, usize, usize) {
    let c = token / grid.tokens_per_chunk;
    (c / (grid.nh * grid.nw), (c / grid.nw) % grid.nh, c % grid.nw)
}

pub fn visible(grid: &ChunkGrid, spec: &WindowSpec, q: usize, k: usize) -> bool {
    let (a, b) = (coords(grid, q), coords(grid, k));
    let cheb = a.1.abs_diff(b.1).max(a.2.abs_diff(b.2));
    cheb <= spec.radius && (spec.temporal || a.0 == b.0)
}

/// Dense attention with a boolean mask, accumulated in f64. Inputs are `[N, heads, dh]` flattened.
pub fn masked_dense(q: &[f64], k: &[f64], v: &[f64], heads: usize, dh: usize, grid: &ChunkGrid, spec: &WindowSpec) -> Vec<f64> {
    let n = grid.token_count();
    let d = heads * dh;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    visible(grid, spec, i, j).then(|| {
                        (0..dh).map(|e| q[i * d + h * dh + e] * k[j * d + h * dh + e]).sum::<f64>() / (dh as f64).sqrt()
                    })
                })
                .collect();
            let max = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let z: f64 = weights.iter().sum();
            for (j, w) in weights.iter().enumerate() {
                for e in 0..dh {
                    out[i * d + h * dh + e] += w / z * v[j * d + h * dh + e];
                }
            }
        }
    }
    out
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Replaces every parameter (including zero-initialized ones) with small random
/// values so all paths carry gradient.
fn scramble(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
    }
}

/// Worst relative error between `analytic` and central differences, probing
/// three entries of every parameter tensor. Also names the worst entry.
fn check_store(
    store: &ParamStore<f64>,
    analytic: &[Tensor<f64>],
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> (f64, String) {
    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    for (slot, id) in store.ids().enumerate() {
        let n = store.get(id).numel();
        for i in [0, n / 2, n - 1] {
            let mut p = store.clone();
            p.get_mut(id).data_mut()[i] += h;
            let up = loss(&p);
            p.get_mut(id).data_mut()[i] -= 2.0 * h;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h);
            let an = analytic[slot].data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            if rel >= worst.0 {
                worst = (rel, format!("{}[{i}]: fd {fd:e} vs analytic {an:e}", store.name(id)));
            }
        }
    }
    worst
}

/// Gradient check of the full codec objective on a minimal configuration.
pub fn codec_gradient_error() -> (f64, String) {
    let cfg =
        VaeConfig { spatial_stride: 2, temporal_stride: 2, latent_channels: 2, base_width: 3, level_count: 2, image_channels: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut vae = ToyVae::<f64>::new(cfg, 3).unwrap();
    scramble(&mut vae.params, &mut rng);
    let x = random(&mut rng, vec![4, 4, 4, 3], 0.0, 1.0);
    let guide = random(&mut rng, vec![4, 4, 4, 3], 0.0, 1.0);
    let next = random(&mut rng, vec![4, 4, 4, 3], 0.0, 1.0);
    let noise = random(&mut rng, vec![2, 2, 2, 2], -1.0, 1.0);
    let eval = |vae: &ToyVae<f64>| {
        let mut g = Graph::new();
        let (total, _) = vae.training_loss(&mut g, &x, &guide, &next, noise.clone()).unwrap();
        (g.value(total).item(), g.backward(total).for_store(&vae.params))
    };
    let (_, grads) = eval(&vae);
    let mut probe = vae.clone();
    check_store(&vae.params, &grads, |p| {
        probe.params = p.clone();
        eval(&probe).0
    })
}

/// Gradient check of the velocity regression through the denoiser, with two
/// chunks at different noise levels.
pub fn denoiser_gradient_error() -> (f64, String) {
    let cfg = DenoiserConfig {
        model_dim: 8,
        head_count: 2,
        layer_count: 2,
        token_patch: 1,
        spatial_chunk: 2,
        latent_channels: 2,
        cond_channels: 3,
        mlp_ratio: 2,
        window: WindowSpec::new(0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Denoiser::<f64>::new(cfg, 5).unwrap();
    scramble(&mut model.params, &mut rng);
    let input = random(&mut rng, vec![4, 4, 4, 5], -1.0, 1.0);
    let target = random(&mut rng, vec![4, 4, 4, 2], -1.0, 1.0);
    let taus = [0.3, 0.8];
    let eval = |m: &Denoiser<f64>| {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let pred = m.forward_graph(&mut g, x, &taus, 2).unwrap();
        let loss = g.mse(pred, target.clone());
        (g.value(loss).item(), g.backward(loss).for_store(&m.params))
    };
    let (_, grads) = eval(&model);
    let mut probe = model.clone();
    check_store(&model.params, &grads, |p| {
        probe.params = p.clone();
        eval(&probe).0
    })
}
