//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order. Each recorded node
//! owns its forward value and, when any input requires a gradient, a closure
//! that maps the node's output gradient onto its inputs. [`Graph::backward`]
//! walks the tape in reverse and collects gradients for parameters and leaves.
//! Graphs built with [`Graph::inference`] record no closures at all.

use std::collections::HashMap;
use std::sync::Arc;

use crate::attention::{sparse_attention, sparse_attention_backward, ChunkGrid, WindowSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<'_, T>)>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    back: Option<Backward<T>>,
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "gradient shape mismatch");
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    /// One gradient per stored parameter, zeros for parameters the forward pass never touched.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| match self.params.get(&id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(id).shape().to_vec()),
            })
            .collect()
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records gradients for parameters and leaves.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A graph that records values only.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, requires_grad, param, back: None });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// A differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.leaf(value, rg, None)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let rg = self.grad_enabled;
        self.leaf(store.get(id).clone(), rg, Some(id))
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        back: impl Fn(&Tensor<T>, &mut GradSink<'_, T>) + 'static,
    ) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let back: Option<Backward<T>> = if requires_grad { Some(Box::new(back)) } else { None };
        self.nodes.push(Node { value, requires_grad, param: None, back });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass seeded with ones at `out` (normally a scalar loss).
    pub fn backward(&self, out: Var) -> Gradients<T> {
        let seed = Tensor::full(self.shape(out).to_vec(), T::one());
        self.backward_with(out, seed)
    }

    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(out), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=out.0).map(|_| None).collect();
        let mut result = Gradients { params: HashMap::new(), leaves: HashMap::new() };
        if !self.nodes[out.0].requires_grad {
            return result;
        }
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.back {
                Some(back) => {
                    let mut sink = GradSink { nodes: &self.nodes, grads: &mut grads[..i] };
                    back(&g, &mut sink);
                }
                None => {
                    if let Some(pid) = node.param {
                        match result.params.get_mut(&pid) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                result.params.insert(pid, g);
                            }
                        }
                    } else {
                        result.leaves.insert(Var(i), g);
                    }
                }
            }
        }
        result
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, &[a, b], move |g, s| {
            s.add(a, g.clone());
            s.add(b, g.clone());
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, &[a, b], move |g, s| {
            s.add(a, g.clone());
            s.add(b, g.map(|x| -x));
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, &[a, b], move |g, s| {
            if s.wants(a) {
                let ga = g.zip_map(s.value(b), |x, y| x * y);
                s.add(a, ga);
            }
            if s.wants(b) {
                let gb = g.zip_map(s.value(a), |x, y| x * y);
                s.add(b, gb);
            }
        })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, &[a], move |g, s| s.add(a, g.map(|x| x * c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, &[a], move |g, s| s.add(a, g.clone()))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        self.push(v, &[a], move |g, s| {
            let ga = g.zip_map(s.value(a), |gy, x| {
                let sig = T::one() / (T::one() + (-x).exp());
                gy * sig * (T::one() + x * (T::one() - sig))
            });
            s.add(a, ga);
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(v, &[a], move |g, s| {
            let ga = g.zip_map(s.value(a), |gy, x| {
                let sig = T::one() / (T::one() + (-x).exp());
                gy * sig * (T::one() - sig)
            });
            s.add(a, ga);
        })
    }

    /// `mean + exp(½·log_var) ⊙ eps` with `eps` held constant.
    pub fn reparameterize(&mut self, mean: Var, log_var: Var, eps: Tensor<T>) -> Var {
        let half = T::lit(0.5);
        let std = self.value(log_var).map(|lv| (half * lv).exp());
        let noise = std.zip_map(&eps, |a, b| a * b);
        let v = self.value(mean).zip_map(&noise, |m, n| m + n);
        self.push(v, &[mean, log_var], move |g, s| {
            s.add(mean, g.clone());
            if s.wants(log_var) {
                let gl = g.zip_map(&noise, |gy, n| gy * half * n);
                s.add(log_var, gl);
            }
        })
    }

    // ----- linear algebra -----

    /// `x[.., k] · w[k, n] -> [.., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (k, n) = {
            let ws = self.shape(w);
            assert_eq!(ws.len(), 2, "matmul weight must be 2-D");
            (ws[0], ws[1])
        };
        let xv = self.value(x);
        assert_eq!(xv.last_dim(), k, "matmul inner dimension mismatch");
        let m = xv.numel() / k;
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), (xv.data(), k, 1), (self.value(w).data(), n, 1), T::zero(), &mut out, n, 1);
        self.push(Tensor::new(shape, out), &[x, w], move |g, s| {
            if s.wants(x) {
                let mut gx = vec![T::zero(); m * k];
                gemm(m, n, k, T::one(), (g.data(), n, 1), (s.value(w).data(), 1, n), T::zero(), &mut gx, k, 1);
                let shape = s.value(x).shape().to_vec();
                s.add(x, Tensor::new(shape, gx));
            }
            if s.wants(w) {
                let mut gw = vec![T::zero(); k * n];
                gemm(k, m, n, T::one(), (s.value(x).data(), 1, k), (g.data(), n, 1), T::zero(), &mut gw, n, 1);
                s.add(w, Tensor::new(vec![k, n], gw));
            }
        })
    }

    /// Adds `b[n]` to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = self.value(b).numel();
        assert_eq!(self.value(x).last_dim(), n, "bias length mismatch");
        let mut v = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for row in v.data_mut().chunks_mut(n) {
            for (a, &c) in row.iter_mut().zip(&bv) {
                *a += c;
            }
        }
        self.push(v, &[x, b], move |g, s| {
            s.add(x, g.clone());
            if s.wants(b) {
                let mut gb = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (a, &c) in gb.iter_mut().zip(row) {
                        *a += c;
                    }
                }
                let shape = s.value(b).shape().to_vec();
                s.add(b, Tensor::new(shape, gb));
            }
        })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    /// 2-D convolution over NHWC input with weights `[kh, kw, c_in, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects NHWC input");
        assert_eq!(ws.len(), 4, "conv2d expects [kh, kw, cin, cout] weights");
        assert_eq!(xs[3], ws[2], "conv2d channel mismatch");
        let geo = ConvGeom::new(&xs, &ws, stride, pad);
        let col = geo.im2col(self.value(x).data());
        let rows = geo.rows();
        let kk = geo.k();
        let co = ws[3];
        let mut out = vec![T::zero(); rows * co];
        gemm(rows, kk, co, T::one(), (&col, kk, 1), (self.value(w).data(), co, 1), T::zero(), &mut out, co, 1);
        drop(col);
        let oshape = vec![xs[0], geo.ho, geo.wo, co];
        self.push(Tensor::new(oshape, out), &[x, w], move |g, s| {
            if s.wants(w) {
                let col = geo.im2col(s.value(x).data());
                let mut gw = vec![T::zero(); kk * co];
                gemm(kk, rows, co, T::one(), (&col, 1, kk), (g.data(), co, 1), T::zero(), &mut gw, co, 1);
                s.add(w, Tensor::new(ws.clone(), gw));
            }
            if s.wants(x) {
                let mut gcol = vec![T::zero(); rows * kk];
                gemm(rows, co, kk, T::one(), (g.data(), co, 1), (s.value(w).data(), 1, co), T::zero(), &mut gcol, kk, 1);
                s.add(x, Tensor::new(xs.clone(), geo.col2im(&gcol)));
            }
        })
    }

    /// Nearest-neighbour ×2 spatial upsampling of NHWC input.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * 4 * h * w * c];
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let si = ((b * h + y / 2) * w + xx / 2) * c;
                    let di = ((b * 2 * h + y) * 2 * w + xx) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        self.push(Tensor::new(vec![n, 2 * h, 2 * w, c], out), &[x], move |g, s| {
            let mut gx = vec![T::zero(); n * h * w * c];
            let gd = g.data();
            for b in 0..n {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let si = ((b * 2 * h + y) * 2 * w + xx) * c;
                        let di = ((b * h + y / 2) * w + xx / 2) * c;
                        for ch in 0..c {
                            gx[di + ch] += gd[si + ch];
                        }
                    }
                }
            }
            s.add(x, Tensor::new(xs.clone(), gx));
        })
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let d = self.value(x).last_dim();
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            let (mu, rstd) = row_stats(row, dn, eps);
            for a in row.iter_mut() {
                *a = (*a - mu) * rstd;
            }
        }
        self.push(v, &[x], move |g, s| {
            let xv = s.value(x);
            let mut gx = vec![T::zero(); xv.numel()];
            for ((row, grow), out) in xv.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)) {
                let (mu, rstd) = row_stats(row, dn, eps);
                let mut mg = T::zero();
                let mut mgy = T::zero();
                for (&a, &gy) in row.iter().zip(grow) {
                    let y = (a - mu) * rstd;
                    mg += gy;
                    mgy += gy * y;
                }
                mg = mg / dn;
                mgy = mgy / dn;
                for ((o, &a), &gy) in out.iter_mut().zip(row).zip(grow) {
                    let y = (a - mu) * rstd;
                    *o = rstd * (gy - mg - y * mgy);
                }
            }
            let shape = xv.shape().to_vec();
            s.add(x, Tensor::new(shape, gx));
        })
    }

    // ----- data movement -----

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Var {
        let src = self.value(x).data();
        let out: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, out);
        self.push(value, &[x], move |g, s| {
            let xs = s.value(x).shape().to_vec();
            let mut gx = vec![T::zero(); xs.iter().product()];
            for (&i, &gv) in index.iter().zip(g.data()) {
                gx[i] += gv;
            }
            s.add(x, Tensor::new(xs, gx));
        })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let v = self.value(x).clone().reshape(shape);
        self.push(v, &[x], move |g, s| {
            let xs = s.value(x).shape().to_vec();
            s.add(x, g.clone().reshape(xs));
        })
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let lead: Vec<usize> = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading dims mismatch");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let mut shape = lead.clone();
        shape.push(total);
        let parts_owned = parts.to_vec();
        self.push(Tensor::new(shape, out), parts, move |g, s| {
            let mut off = 0;
            for (&p, &wd) in parts_owned.iter().zip(&widths) {
                if s.wants(p) {
                    let mut gp = vec![T::zero(); rows * wd];
                    for r in 0..rows {
                        gp[r * wd..(r + 1) * wd].copy_from_slice(&g.data()[r * total + off..r * total + off + wd]);
                    }
                    let ps = s.value(p).shape().to_vec();
                    s.add(p, Tensor::new(ps, gp));
                }
                off += wd;
            }
        })
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let d = xs[xs.len() - 1];
        assert!(start + len <= d, "slice out of range");
        let rows = self.value(x).numel() / d;
        let index: Vec<usize> = (0..rows).flat_map(|r| (start..start + len).map(move |c| r * d + c)).collect();
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = len;
        self.gather(x, Arc::new(index), shape)
    }

    /// Picks rows of `table[m, d]` by `rows[i]`, giving `[rows.len(), d]`.
    pub fn index_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let d = self.value(table).last_dim();
        let index: Vec<usize> = rows.iter().flat_map(|&r| (0..d).map(move |c| r * d + c)).collect();
        self.gather(table, Arc::new(index), vec![rows.len(), d])
    }

    // ----- attention -----

    /// Multi-head chunk-sparse self-attention over packed `qkv[N, 3D]`, returning `[N, D]`.
    pub fn attention(&mut self, qkv: Var, heads: usize, grid: ChunkGrid, spec: WindowSpec) -> Var {
        let shape = self.shape(qkv).to_vec();
        assert_eq!(shape.len(), 2, "attention expects [tokens, 3·dim]");
        let n = shape[0];
        let d = shape[1] / 3;
        assert_eq!(d * 3, shape[1], "qkv width must be 3·dim");
        assert_eq!(d % heads, 0, "dim not divisible by heads");
        let dh = d / heads;
        let split = move |t: &Tensor<T>| -> [Tensor<T>; 3] {
            let mut parts = [vec![T::zero(); n * d], vec![T::zero(); n * d], vec![T::zero(); n * d]];
            for (r, row) in t.data().chunks(3 * d).enumerate() {
                for (p, part) in parts.iter_mut().enumerate() {
                    part[r * d..(r + 1) * d].copy_from_slice(&row[p * d..(p + 1) * d]);
                }
            }
            parts.map(|p| Tensor::new(vec![n, heads, dh], p))
        };
        let [q, k, v] = split(self.value(qkv));
        let out = sparse_attention(&q, &k, &v, &grid, &spec).reshape(vec![n, d]);
        self.push(out, &[qkv], move |g, s| {
            let [q, k, v] = split(s.value(qkv));
            let go = g.clone().reshape(vec![n, heads, dh]);
            let (gq, gk, gv) = sparse_attention_backward(&q, &k, &v, &go, &grid, &spec);
            let mut gqkv = vec![T::zero(); n * 3 * d];
            for (r, row) in gqkv.chunks_mut(3 * d).enumerate() {
                row[..d].copy_from_slice(&gq.data()[r * d..(r + 1) * d]);
                row[d..2 * d].copy_from_slice(&gk.data()[r * d..(r + 1) * d]);
                row[2 * d..].copy_from_slice(&gv.data()[r * d..(r + 1) * d]);
            }
            s.add(qkv, Tensor::new(vec![n, 3 * d], gqkv));
        })
    }

    // ----- reductions and losses -----

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let v = Tensor::scalar(self.value(x).sum() / n);
        self.push(v, &[x], move |g, s| {
            let gv = g.item() / n;
            let shape = s.value(x).shape().to_vec();
            s.add(x, Tensor::full(shape, gv));
        })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let n = T::lit(target.numel() as f64);
        let diff = self.value(pred).zip_map(&target, |a, b| a - b);
        let v = Tensor::scalar(diff.data().iter().map(|&d| d * d).sum::<T>() / n);
        self.push(v, &[pred], move |g, s| {
            let c = T::lit(2.0) * g.item() / n;
            s.add(pred, diff.map(|d| d * c));
        })
    }

    /// Mean absolute error against a constant target.
    pub fn mean_abs(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let n = T::lit(target.numel() as f64);
        let diff = self.value(pred).zip_map(&target, |a, b| a - b);
        let v = Tensor::scalar(diff.data().iter().map(|d| d.abs()).sum::<T>() / n);
        self.push(v, &[pred], move |g, s| {
            let c = g.item() / n;
            s.add(
                pred,
                diff.map(|d| {
                    if d > T::zero() {
                        c
                    } else if d < T::zero() {
                        -c
                    } else {
                        T::zero()
                    }
                }),
            );
        })
    }

    /// Mean per-element KL divergence from `N(mean, exp(log_var))` to `N(0, 1)`.
    pub fn kl_unit(&mut self, mean: Var, log_var: Var) -> Var {
        let n = T::lit(self.value(mean).numel() as f64);
        let half = T::lit(0.5);
        let total: T = self
            .value(mean)
            .data()
            .iter()
            .zip(self.value(log_var).data())
            .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
            .sum();
        self.push(Tensor::scalar(total / n), &[mean, log_var], move |g, s| {
            let c = g.item() / n;
            if s.wants(mean) {
                let gm = s.value(mean).map(|m| m * c);
                s.add(mean, gm);
            }
            if s.wants(log_var) {
                let gl = s.value(log_var).map(|lv| half * (lv.exp() - T::one()) * c);
                s.add(log_var, gl);
            }
        })
    }

    /// `Σ wᵢ·xᵢ` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut v = self.value(terms[0].0).map(|x| x * terms[0].1);
        for &(t, w) in &terms[1..] {
            v = v.zip_map(self.value(t), |a, b| a + b * w);
        }
        let terms_owned = terms.to_vec();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(v, &vars, move |g, s| {
            for &(t, w) in &terms_owned {
                s.add(t, g.map(|x| x * w));
            }
        })
    }
}

fn row_stats<T: Scalar>(row: &[T], dn: T, eps: T) -> (T, T) {
    let mu = row.iter().copied().sum::<T>() / dn;
    let var = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() / dn;
    (mu, T::one() / (var + eps).sqrt())
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        let (h, w) = (xs[1], xs[2]);
        let (kh, kw) = (ws[0], ws[1]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Self { n: xs[0], h, w, ci: xs[3], kh, kw, stride, pad, ho, wo }
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn k(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    fn src(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let k = self.k();
        let ci = self.ci;
        let mut col = vec![T::zero(); self.rows() * k];
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((b * self.ho + oy) * self.wo + ox) * k;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            if let Some((iy, ix)) = self.src(oy, ky, ox, kx) {
                                let s = ((b * self.h + iy) * self.w + ix) * ci;
                                let d = row + (ky * self.kw + kx) * ci;
                                col[d..d + ci].copy_from_slice(&x[s..s + ci]);
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, col: &[T]) -> Vec<T> {
        let k = self.k();
        let ci = self.ci;
        let mut x = vec![T::zero(); self.n * self.h * self.w * ci];
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((b * self.ho + oy) * self.wo + ox) * k;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            if let Some((iy, ix)) = self.src(oy, ky, ox, kx) {
                                let s = ((b * self.h + iy) * self.w + ix) * ci;
                                let d = row + (ky * self.kw + kx) * ci;
                                for c in 0..ci {
                                    x[s + c] += col[d + c];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * 0.7311 + seed).sin()).collect()
    }

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a single-input op.
    fn check_unary(shape: &[usize], f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let n: usize = shape.iter().product();
        let x0 = det(n, 0.3);
        let eval = |x: &[f64]| -> (f64, Option<Tensor<f64>>) {
            let mut g = Graph::new();
            let xv = g.variable(Tensor::new(shape.to_vec(), x.to_vec()));
            let y = f(&mut g, xv);
            let wts = Tensor::new(g.shape(y).to_vec(), det(g.value(y).numel(), 1.9));
            let wv = g.input(wts);
            let p = g.mul(y, wv);
            let l = g.mean_all(p);
            let grads = g.backward(l);
            (g.value(l).item(), grads.wrt(xv).cloned())
        };
        let (_, grad) = eval(&x0);
        let grad = grad.expect("gradient for input");
        let h = 1e-6;
        for i in 0..n {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let an = grad.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "index {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn conv2d_gradients() {
        let w = Tensor::new(vec![3, 3, 2, 3], det(54, 0.1));
        check_unary(&[2, 5, 4, 2], move |g, x| {
            let wv = g.variable(w.clone());
            g.conv2d(x, wv, 2, 1)
        });
    }

    #[test]
    fn conv2d_weight_gradients() {
        let x = Tensor::new(vec![1, 4, 4, 2], det(32, 0.5));
        check_unary(&[3, 3, 2, 2], move |g, w| {
            let xv = g.input(x.clone());
            g.conv2d(xv, w, 1, 1)
        });
    }

    #[test]
    fn layer_norm_and_silu_gradients() {
        check_unary(&[3, 5], |g, x| g.layer_norm(x, 1e-5));
        check_unary(&[3, 5], |g, x| g.silu(x));
        check_unary(&[3, 5], |g, x| g.sigmoid(x));
        check_unary(&[1, 2, 3, 2], |g, x| g.upsample2x(x));
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let w = Tensor::new(vec![4, 3], det(12, 0.2));
        check_unary(&[2, 2, 4], move |g, x| {
            let wv = g.input(w.clone());
            g.matmul(x, wv)
        });
        let x = Tensor::new(vec![5, 4], det(20, 0.9));
        check_unary(&[4, 3], move |g, w| {
            let xv = g.input(x.clone());
            g.matmul(xv, w)
        });
        let x = Tensor::new(vec![5, 3], det(15, 0.4));
        check_unary(&[3], move |g, b| {
            let xv = g.input(x.clone());
            g.add_bias(xv, b)
        });
    }

    #[test]
    fn attention_op_gradients() {
        let grid = ChunkGrid::new(2, 1, 2, 2);
        check_unary(&[8, 12], move |g, x| g.attention(x, 2, grid, WindowSpec::new(0)));
    }

    #[test]
    fn movement_ops_gradients() {
        check_unary(&[3, 4], |g, x| g.slice_last(x, 1, 2));
        check_unary(&[3, 4], |g, x| g.index_rows(x, &[2, 0, 2, 1]));
        check_unary(&[2, 3], |g, x| {
            let y = g.scale(x, 2.0);
            g.concat_last(&[x, y])
        });
    }

    #[test]
    fn loss_gradients() {
        let t = Tensor::new(vec![2, 3], det(6, 2.2));
        let t2 = t.clone();
        check_unary(&[2, 3], move |g, x| g.mse(x, t.clone()));
        check_unary(&[2, 3], move |g, x| g.mean_abs(x, t2.clone()));
        check_unary(&[2, 3], |g, x| {
            let y = g.scale(x, 0.5);
            g.kl_unit(x, y)
        });
        let eps = Tensor::new(vec![2, 3], det(6, 3.3));
        check_unary(&[2, 3], move |g, x| {
            let lv = g.scale(x, -0.3);
            g.reparameterize(x, lv, eps.clone())
        });
    }

    #[test]
    fn inference_graph_records_no_gradients() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let mut g = Graph::inference();
        let x = g.input(Tensor::new(vec![1, 2], vec![3.0, 4.0]));
        let w = g.param(&store, id);
        let y = g.matmul(x, w);
        let l = g.mean_all(y);
        assert_eq!(g.value(l).item(), 3.5);
        assert!(g.backward(l).param(id).is_none());
    }

    #[test]
    fn loss_scaling_scales_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![3, 2], det(6, 0.7)));
        let run = |c: f64| {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![4, 3], det(12, 1.1)));
            let w = g.param(&store, id);
            let y = g.matmul(x, w);
            let y = g.silu(y);
            let l = g.mean_all(y);
            let l = g.scale(l, c);
            g.backward(l).param(id).cloned().unwrap()
        };
        let g1 = run(1.0);
        let g2 = run(2.0);
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }
}
