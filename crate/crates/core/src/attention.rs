//! Chunk-sparse attention: a sliding window over spatial chunks combined with
//! dense attention across temporal chunks.
//!
//! Tokens are laid out chunk-major: token `t` belongs to chunk
//! `t / tokens_per_chunk`, and chunks are numbered `(τ·nH + i)·nW + j`.
//! For every query chunk the kernel only visits the key chunks admitted by the
//! window, so the largest score block ever materialized is
//! `tokens_per_chunk × allowed_keys`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Scalar, Tensor};

/// Chunk coordinates `(τ, i, j)`: temporal chunk, spatial chunk row, spatial chunk column.
pub type ChunkIndex = (usize, usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkGrid {
    pub nt: usize,
    pub nh: usize,
    pub nw: usize,
    pub tokens_per_chunk: usize,
}

impl ChunkGrid {
    pub fn new(nt: usize, nh: usize, nw: usize, tokens_per_chunk: usize) -> Self {
        assert!(nt > 0 && nh > 0 && nw > 0 && tokens_per_chunk > 0, "empty chunk grid");
        Self { nt, nh, nw, tokens_per_chunk }
    }

    pub fn chunk_count(&self) -> usize {
        self.nt * self.nh * self.nw
    }

    pub fn token_count(&self) -> usize {
        self.chunk_count() * self.tokens_per_chunk
    }

    pub fn chunk_id(&self, (t, i, j): ChunkIndex) -> usize {
        (t * self.nh + i) * self.nw + j
    }

    pub fn chunk_coords(&self, id: usize) -> ChunkIndex {
        let j = id % self.nw;
        let i = (id / self.nw) % self.nh;
        let t = id / (self.nw * self.nh);
        (t, i, j)
    }

    /// Chunk coordinates and chunk-local slot of a token.
    pub fn chunk_of_token(&self, token: usize) -> (ChunkIndex, usize) {
        (self.chunk_coords(token / self.tokens_per_chunk), token % self.tokens_per_chunk)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Chebyshev radius in spatial-chunk units.
    pub radius: usize,
    /// Attend across temporal chunks. `false` restricts attention to the
    /// query's own temporal chunk (diagnostic wiring mode).
    #[serde(default = "default_true")]
    pub temporal: bool,
}

fn default_true() -> bool {
    true
}

impl WindowSpec {
    pub fn new(radius: usize) -> Self {
        Self { radius, temporal: true }
    }

    pub fn full() -> Self {
        Self::new(usize::MAX)
    }

    pub fn chunk_allowed(&self, q: ChunkIndex, k: ChunkIndex) -> bool {
        q.1.abs_diff(k.1) <= self.radius
            && q.2.abs_diff(k.2) <= self.radius
            && (self.temporal || q.0 == k.0)
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self::new(1)
    }
}

/// Whether `q_token` may attend to `k_token`.
pub fn allowed(grid: &ChunkGrid, spec: &WindowSpec, q_token: usize, k_token: usize) -> bool {
    let (qc, _) = grid.chunk_of_token(q_token);
    let (kc, _) = grid.chunk_of_token(k_token);
    spec.chunk_allowed(qc, kc)
}

/// Key chunks visible from query chunk `q`, in ascending chunk-id order.
pub fn key_chunks(grid: &ChunkGrid, spec: &WindowSpec, q: usize) -> Vec<usize> {
    let qc = grid.chunk_coords(q);
    let span = |c: usize, n: usize| {
        let lo = c.saturating_sub(spec.radius);
        let hi = c.saturating_add(spec.radius).min(n - 1);
        lo..=hi
    };
    let times = if spec.temporal { 0..grid.nt } else { qc.0..qc.0 + 1 };
    let mut out = Vec::new();
    for t in times {
        for i in span(qc.1, grid.nh) {
            for j in span(qc.2, grid.nw) {
                out.push(grid.chunk_id((t, i, j)));
            }
        }
    }
    out
}

/// Number of keys a token in query chunk `q` attends to.
pub fn allowed_key_count(grid: &ChunkGrid, spec: &WindowSpec, q: usize) -> usize {
    key_chunks(grid, spec, q).len() * grid.tokens_per_chunk
}

/// Query–key score evaluations: allowed chunk pairs × tokens_per_chunk².
pub fn flop_estimate(grid: &ChunkGrid, spec: &WindowSpec) -> u64 {
    let axis_pairs = |n: usize| -> u64 {
        (0..n)
            .map(|a| {
                let lo = a.saturating_sub(spec.radius);
                let hi = a.saturating_add(spec.radius).min(n - 1);
                (hi - lo + 1) as u64
            })
            .sum()
    };
    let temporal = if spec.temporal { (grid.nt * grid.nt) as u64 } else { grid.nt as u64 };
    let tpc = grid.tokens_per_chunk as u64;
    temporal * axis_pairs(grid.nh) * axis_pairs(grid.nw) * tpc * tpc
}

struct Dims {
    heads: usize,
    dh: usize,
    d: usize,
    tpc: usize,
}

fn check_inputs<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, grid: &ChunkGrid) -> Dims {
    assert_eq!(q.rank(), 3, "attention expects [tokens, heads, head_dim]");
    assert_eq!(q.shape(), k.shape(), "Q/K shape mismatch");
    assert_eq!(q.shape(), v.shape(), "Q/V shape mismatch");
    assert_eq!(q.dim(0), grid.token_count(), "token count does not match chunk grid");
    let (heads, dh) = (q.dim(1), q.dim(2));
    Dims { heads, dh, d: heads * dh, tpc: grid.tokens_per_chunk }
}

fn softmax_rows<T: Scalar>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        assert!(m.is_finite(), "query with no admissible keys");
        let mut z = T::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        let inv = T::one() / z;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// Fills `p` (`tpc × keys.len()·tpc`) with softmax probabilities for one head
/// of one query chunk.
fn chunk_probs<T: Scalar>(
    q: &[T],
    k: &[T],
    qc: usize,
    keys: &[usize],
    h: usize,
    dims: &Dims,
    scale: T,
    p: &mut [T],
) {
    let nk = keys.len() * dims.tpc;
    let qoff = qc * dims.tpc * dims.d + h * dims.dh;
    for (b, &kc) in keys.iter().enumerate() {
        let koff = kc * dims.tpc * dims.d + h * dims.dh;
        gemm(
            dims.tpc,
            dims.dh,
            dims.tpc,
            scale,
            (&q[qoff..], dims.d, 1),
            (&k[koff..], 1, dims.d),
            T::zero(),
            &mut p[b * dims.tpc..],
            nk,
            1,
        );
    }
    softmax_rows(p, nk);
}

/// Multi-head attention restricted to the chunk window. Inputs and output are
/// `[tokens, heads, head_dim]`; scores are scaled by `1/√head_dim`.
pub fn sparse_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    grid: &ChunkGrid,
    spec: &WindowSpec,
) -> Tensor<T> {
    let dims = check_inputs(q, k, v, grid);
    let scale = T::one() / T::lit(dims.dh as f64).sqrt();
    let mut out = Tensor::zeros(q.shape().to_vec());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    out.data_mut()
        .par_chunks_mut(dims.tpc * dims.d)
        .enumerate()
        .for_each(|(qc, out_rows)| {
            let keys = key_chunks(grid, spec, qc);
            let nk = keys.len() * dims.tpc;
            let mut p = vec![T::zero(); dims.tpc * nk];
            for h in 0..dims.heads {
                chunk_probs(qd, kd, qc, &keys, h, &dims, scale, &mut p);
                for (b, &kc) in keys.iter().enumerate() {
                    let voff = kc * dims.tpc * dims.d + h * dims.dh;
                    gemm(
                        dims.tpc,
                        dims.tpc,
                        dims.dh,
                        T::one(),
                        (&p[b * dims.tpc..], nk, 1),
                        (&vd[voff..], dims.d, 1),
                        T::one(),
                        &mut out_rows[h * dims.dh..],
                        dims.d,
                        1,
                    );
                }
            }
        });
    out
}

/// Reverse pass of [`sparse_attention`]: returns `(dQ, dK, dV)` for output
/// gradient `dout`. Probabilities are recomputed rather than stored.
pub fn sparse_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dout: &Tensor<T>,
    grid: &ChunkGrid,
    spec: &WindowSpec,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let dims = check_inputs(q, k, v, grid);
    assert_eq!(dout.shape(), q.shape(), "dout shape mismatch");
    let scale = T::one() / T::lit(dims.dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape().to_vec());
    let mut dk = Tensor::zeros(q.shape().to_vec());
    let mut dv = Tensor::zeros(q.shape().to_vec());
    let (qd, kd, vd, god) = (q.data(), k.data(), v.data(), dout.data());
    let (tpc, d, dh) = (dims.tpc, dims.d, dims.dh);
    for qc in 0..grid.chunk_count() {
        let keys = key_chunks(grid, spec, qc);
        let nk = keys.len() * tpc;
        let mut p = vec![T::zero(); tpc * nk];
        let mut dp = vec![T::zero(); tpc * nk];
        for h in 0..dims.heads {
            chunk_probs(qd, kd, qc, &keys, h, &dims, scale, &mut p);
            let qoff = qc * tpc * d + h * dh;
            for (b, &kc) in keys.iter().enumerate() {
                let koff = kc * tpc * d + h * dh;
                // dP = dO · Vᵀ
                gemm(tpc, dh, tpc, T::one(), (&god[qoff..], d, 1), (&vd[koff..], 1, d), T::zero(), &mut dp[b * tpc..], nk, 1);
                // dV += Pᵀ · dO
                gemm(tpc, tpc, dh, T::one(), (&p[b * tpc..], 1, nk), (&god[qoff..], d, 1), T::one(), &mut dv.data_mut()[koff..], d, 1);
            }
            for (prow, dprow) in p.chunks(nk).zip(dp.chunks_mut(nk)) {
                let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in dprow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot);
                }
            }
            for (b, &kc) in keys.iter().enumerate() {
                let koff = kc * tpc * d + h * dh;
                // dQ += s · dS · K
                gemm(tpc, tpc, dh, scale, (&dp[b * tpc..], nk, 1), (&kd[koff..], d, 1), T::one(), &mut dq.data_mut()[qoff..], d, 1);
                // dK += s · dSᵀ · Q
                gemm(tpc, tpc, dh, scale, (&dp[b * tpc..], 1, nk), (&qd[qoff..], d, 1), T::one(), &mut dk.data_mut()[koff..], d, 1);
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_radius_allows_everything() {
        let g = ChunkGrid::new(2, 3, 3, 2);
        let s = WindowSpec::new(5);
        for a in 0..g.token_count() {
            for b in 0..g.token_count() {
                assert!(allowed(&g, &s, a, b));
            }
        }
    }

    #[test]
    fn distance_two_blocked_at_radius_one() {
        let g = ChunkGrid::new(1, 1, 3, 1);
        let s = WindowSpec::new(1);
        assert!(!allowed(&g, &s, 0, 2));
        assert!(allowed(&g, &s, 0, 1));
    }

    #[test]
    fn temporal_chunks_always_visible() {
        let g = ChunkGrid::new(4, 2, 2, 3);
        let s = WindowSpec::new(0);
        let q = g.chunk_id((0, 1, 0)) * 3;
        let k = g.chunk_id((3, 1, 0)) * 3 + 2;
        assert!(allowed(&g, &s, q, k));
        let diag = WindowSpec { radius: 0, temporal: false };
        assert!(!allowed(&g, &diag, q, k));
    }

    #[test]
    fn flop_estimate_closed_forms() {
        let dense = ChunkGrid::new(3, 1, 1, 4);
        assert_eq!(flop_estimate(&dense, &WindowSpec::new(1)), 9 * 16);
        let g = ChunkGrid::new(1, 5, 7, 3);
        assert_eq!(flop_estimate(&g, &WindowSpec::new(0)), 35 * 9);
    }

    #[test]
    fn constant_values_pass_through() {
        let g = ChunkGrid::new(2, 2, 2, 2);
        let n = g.token_count();
        let q = Tensor::new(vec![n, 1, 3], (0..n * 3).map(|i| (i as f64 * 0.37).sin()).collect());
        let k = q.map(|x| x * 1.3 - 0.2);
        let mut v = Tensor::zeros(vec![n, 1, 3]);
        for row in v.data_mut().chunks_mut(3) {
            row.copy_from_slice(&[0.5, -1.0, 2.0]);
        }
        let out = sparse_attention(&q, &k, &v, &g, &WindowSpec::new(0));
        for row in out.data().chunks(3) {
            assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] + 1.0).abs() < 1e-12 && (row[2] - 2.0).abs() < 1e-12);
        }
    }
}
