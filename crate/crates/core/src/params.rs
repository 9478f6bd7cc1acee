//! Named parameter storage, deterministic initialization and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every value from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn assign(&mut self, entries: impl IntoIterator<Item = (String, Tensor<T>)>) -> Result<()> {
        let mut seen = 0;
        for (name, value) in entries {
            let id = self.id(&name).ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                )));
            }
            self.values[id.0] = value;
            seen += 1;
        }
        if seen != self.len() {
            return Err(Error::Shape(format!("expected {} parameters, found {seen}", self.len())));
        }
        Ok(())
    }
}

/// Uniform(-bound, bound) tensor drawn in f64 then cast, so f32 and f64
/// models with the same seed start from the same point.
pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW with decoupled weight decay. Parameters whose name starts with a
/// frozen prefix are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub frozen: Vec<String>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| s.values.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { cfg, step: 0, m: zeros(store), v: zeros(store), frozen: Vec::new() }
    }

    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.step += 1;
        let c = self.cfg;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let wd = T::lit(c.weight_decay);
        for i in 0..store.len() {
            if self.is_frozen(&store.names[i]) {
                continue;
            }
            let p = store.values[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        opt.update(&mut store, &[Tensor::new(vec![2], vec![1.0, -1.0])]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_prefix_is_skipped() {
        let mut store = ParamStore::<f32>::new();
        store.add("enc.w", Tensor::new(vec![1], vec![1.0]));
        store.add("dec.w", Tensor::new(vec![1], vec![1.0]));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.freeze_prefix("enc.");
        let g = vec![Tensor::new(vec![1], vec![1.0]); 2];
        opt.update(&mut store, &g);
        assert_eq!(store.get(ParamId(0)).data()[0], 1.0);
        assert!(store.get(ParamId(1)).data()[0] < 1.0);
    }

    #[test]
    fn uniform_is_seed_deterministic_across_precisions() {
        let a: Tensor<f64> = uniform(&mut ChaCha8Rng::seed_from_u64(3), &[4, 4], 0.5);
        let b: Tensor<f32> = uniform(&mut ChaCha8Rng::seed_from_u64(3), &[4, 4], 0.5);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((*x as f32 - y).abs() == 0.0);
        }
    }
}
