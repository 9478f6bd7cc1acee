//! Flow matching with per-chunk noise levels and Euler sampling.
//!
//! Convention: `τ = 0` is data and `τ = 1` is noise, `x_τ = (1 − τ)·x0 + τ·x1`,
//! and the regression target is the constant velocity `x1 − x0`. Sampling
//! integrates from `τ = 1` down to `τ = 0`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::normal_tensor;

/// `τ = s·u / (1 + (s − 1)·u)`; pushes mass toward the noisy end for `s > 1`.
pub fn shift_time(u: f64, shift: f64) -> f64 {
    shift * u / (1.0 + (shift - 1.0) * u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSchedule {
    pub shift: f64,
    pub steps: usize,
    /// `steps + 1` knots from 1 down to 0.
    pub grid: Vec<f64>,
}

impl ShiftSchedule {
    pub fn new(steps: usize, shift: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !(shift >= 1.0 && shift.is_finite()) {
            return Err(Error::Config(format!("timestep shift must be >= 1, got {shift}")));
        }
        let grid = (0..=steps).map(|k| shift_time(1.0 - k as f64 / steps as f64, shift)).collect();
        Ok(Self { shift, steps, grid })
    }
}

pub fn interpolate_path(x0: &Tensor<f32>, x1: &Tensor<f32>, tau: f64) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Invalid(format!("noise level {tau} outside [0, 1]")));
    }
    if x0.shape() != x1.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x0.shape(), x1.shape())));
    }
    let (a, b) = ((1.0 - tau) as f32, tau as f32);
    Ok(x0.zip_map(x1, |p, q| a * p + b * q))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkRole {
    Target,
    Context,
}

/// Per-chunk noise levels of one model invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevelAssignment {
    pub taus: Vec<f64>,
    pub roles: Vec<ChunkRole>,
}

impl NoiseLevelAssignment {
    /// Targets at `tau`, contexts clean.
    pub fn at(roles: &[ChunkRole], tau: f64) -> Self {
        let taus = roles.iter().map(|r| if *r == ChunkRole::Target { tau } else { 0.0 }).collect();
        Self { taus, roles: roles.to_vec() }
    }
}

/// One training example for the velocity regression over `n` stacked chunks.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub taus: Vec<f64>,
    pub noised: Tensor<f32>,
    pub velocity: Tensor<f32>,
}

/// Independent `τ_i = shift(u_i)` and unit-normal noise per chunk of `gt`
/// (`[n·chunk_len, ...]`, chunks stacked along the first axis).
pub fn flow_sample(gt: &Tensor<f32>, chunk_count: usize, shift: f64, rng: &mut ChaCha8Rng) -> Result<FlowSample> {
    if chunk_count == 0 || !gt.dim(0).is_multiple_of(chunk_count) {
        return Err(Error::Shape(format!("{} latent frames do not split into {chunk_count} chunks", gt.dim(0))));
    }
    let taus: Vec<f64> = (0..chunk_count).map(|_| shift_time(rng.gen::<f64>(), shift)).collect();
    let noise = normal_tensor(rng, gt.shape().to_vec());
    let per = gt.numel() / chunk_count;
    let mut noised = Vec::with_capacity(gt.numel());
    for (i, &tau) in taus.iter().enumerate() {
        let (a, b) = ((1.0 - tau) as f32, tau as f32);
        let range = i * per..(i + 1) * per;
        noised.extend(gt.data()[range.clone()].iter().zip(&noise.data()[range]).map(|(&x0, &x1)| a * x0 + b * x1));
    }
    let velocity = noise.zip_map(gt, |x1, x0| x1 - x0);
    Ok(FlowSample { taus, noised: Tensor::new(gt.shape().to_vec(), noised), velocity })
}

/// Mean squared error between predicted and target velocities.
pub fn fm_loss(pred: &Tensor<f32>, velocity: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != velocity.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.shape(), velocity.shape())));
    }
    let sum: f64 = pred.data().iter().zip(velocity.data()).map(|(&p, &v)| ((p - v) as f64).powi(2)).sum();
    Ok(sum / pred.numel().max(1) as f64)
}

/// Integrates the target chunks of a window from noise to data.
///
/// `contexts[i]` must hold the clean latent of every context chunk; targets
/// start from unit-normal noise drawn from `rng`. `field(x, taus)` returns the
/// velocity for the stacked window `x`. Returns the target chunks in window order.
pub fn euler_sample(
    field: impl FnMut(&Tensor<f32>, &[f64]) -> Result<Tensor<f32>>,
    roles: &[ChunkRole],
    contexts: &[Option<&Tensor<f32>>],
    chunk_shape: &[usize],
    schedule: &ShiftSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor<f32>>> {
    let targets = roles.iter().filter(|r| **r == ChunkRole::Target).count();
    let noise: Vec<Tensor<f32>> = (0..targets).map(|_| normal_tensor(rng, chunk_shape.to_vec())).collect();
    let noise: Vec<&Tensor<f32>> = noise.iter().collect();
    euler_sample_from(field, roles, contexts, &noise, chunk_shape, schedule)
}

/// [`euler_sample`] with caller-supplied starting noise, one tensor per target
/// in window order.
pub fn euler_sample_from(
    mut field: impl FnMut(&Tensor<f32>, &[f64]) -> Result<Tensor<f32>>,
    roles: &[ChunkRole],
    contexts: &[Option<&Tensor<f32>>],
    noise: &[&Tensor<f32>],
    chunk_shape: &[usize],
    schedule: &ShiftSchedule,
) -> Result<Vec<Tensor<f32>>> {
    assert_eq!(roles.len(), contexts.len(), "one context slot per window chunk");
    let per: usize = chunk_shape.iter().product();
    let mut data = Vec::with_capacity(per * roles.len());
    let mut noise = noise.iter();
    for (i, role) in roles.iter().enumerate() {
        match (role, contexts[i]) {
            (ChunkRole::Context, Some(c)) if c.shape() == chunk_shape => data.extend_from_slice(c.data()),
            (ChunkRole::Context, Some(c)) => {
                return Err(Error::Shape(format!("context chunk {:?}, expected {chunk_shape:?}", c.shape())))
            }
            (ChunkRole::Context, None) => return Err(Error::MissingContext(i)),
            (ChunkRole::Target, _) => match noise.next() {
                Some(n) if n.numel() == per => data.extend_from_slice(n.data()),
                Some(n) => return Err(Error::Shape(format!("noise {:?}, expected {chunk_shape:?}", n.shape()))),
                None => return Err(Error::Invalid(format!("no starting noise for target at window slot {i}"))),
            },
        }
    }
    let mut shape = chunk_shape.to_vec();
    shape[0] *= roles.len();
    let mut x = Tensor::new(shape, data);
    for k in 0..schedule.steps {
        let (t_now, t_next) = (schedule.grid[k], schedule.grid[k + 1]);
        let assign = NoiseLevelAssignment::at(roles, t_now);
        let v = field(&x, &assign.taus)?;
        if v.shape() != x.shape() {
            return Err(Error::Shape(format!("velocity {:?} for window {:?}", v.shape(), x.shape())));
        }
        let h = (t_now - t_next) as f32;
        for (i, role) in roles.iter().enumerate() {
            if *role == ChunkRole::Target {
                let r = i * per..(i + 1) * per;
                for (a, &b) in x.data_mut()[r.clone()].iter_mut().zip(&v.data()[r]) {
                    *a -= h * b;
                }
            }
        }
    }
    Ok(roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == ChunkRole::Target)
        .map(|(i, _)| Tensor::new(chunk_shape.to_vec(), x.data()[i * per..(i + 1) * per].to_vec()))
        .collect())
}
