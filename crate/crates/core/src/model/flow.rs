//! Conditional flow matching: noisy-chunk construction, the regression loss
//! and Euler integration of a vector field.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Sampled chunks are clamped to this range.
pub const ACTION_CLAMP: (f64, f64) = (-0.1, 1.1);

/// Noisy chunk `τ·A + (1−τ)·ε` with the draws that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub noisy: Vec<f64>,
    pub tau: f64,
    pub noise: Vec<f64>,
}

impl FlowState {
    pub fn from_parts(actions: &[f64], noise: Vec<f64>, tau: f64) -> Self {
        let noisy = actions
            .iter()
            .zip(&noise)
            .map(|(a, e)| tau * a + (1.0 - tau) * e)
            .collect();
        FlowState { noisy, tau, noise }
    }

    /// Regression target `A − ε`.
    pub fn target(&self, actions: &[f64]) -> Vec<f64> {
        actions.iter().zip(&self.noise).map(|(a, e)| a - e).collect()
    }
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws `τ ~ U(0,1)` from `tau_rng` and `ε ~ N(0, I)` from `noise_rng`.
pub fn make_flow_state(actions: &[f64], tau_rng: &mut impl Rng, noise_rng: &mut impl Rng) -> FlowState {
    let tau: f64 = tau_rng.gen();
    let noise = standard_normal(noise_rng, actions.len());
    FlowState::from_parts(actions, noise, tau)
}

/// Mean squared error between the predicted field and `A − ε` over all
/// `H × 2` entries.
pub fn action_loss(t: &mut Tape, field: Var, actions: &[f64], noise: &[f64]) -> Result<Var> {
    let shape = t.value(field).shape().to_vec();
    let target: Vec<f64> = actions.iter().zip(noise).map(|(a, e)| a - e).collect();
    let target = t.constant(Tensor::new(shape, target)?);
    let diff = t.sub(field, target)?;
    let sq = t.mul(diff, diff)?;
    t.mean(sq)
}

/// Left-endpoint Euler integration from `τ = 0` to `1` in `steps` steps.
///
/// After `k` steps the displacement `(1/K)·Σ_{j<k} v_j` is evaluated as
/// `v_0·(k/K) + Σ_{j<k}(v_j − v_0)/K`. This is the usual `A ← A + v/K`
/// scheme, but a constant field `c` lands on `start + c` exactly.
pub fn euler_path<F>(start: Vec<f64>, steps: usize, mut field: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(Error::usage("denoising needs at least one step"));
    }
    let k_total = steps as f64;
    let mut reference: Option<Vec<f64>> = None;
    let mut deviation = vec![0.0; start.len()];
    let mut state = start.clone();
    for step in 0..steps {
        let tau = step as f64 / k_total;
        let v = field(&state, tau)?;
        if v.len() != state.len() {
            return Err(Error::Dimension {
                op: "integrate_euler",
                left: vec![state.len()],
                right: vec![v.len()],
            });
        }
        let r = reference.get_or_insert_with(|| v.clone());
        for ((d, vi), ri) in deviation.iter_mut().zip(&v).zip(r.iter()) {
            *d += vi - ri;
        }
        let frac = (step + 1) as f64 / k_total;
        for (((a, a0), d), ri) in state.iter_mut().zip(&start).zip(&deviation).zip(r.iter()) {
            *a = a0 + (ri * frac + d / k_total);
        }
    }
    Ok(state)
}

/// [`euler_path`] followed by the action clamp.
pub fn integrate_euler<F>(start: Vec<f64>, steps: usize, field: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    Ok(euler_path(start, steps, field)?
        .into_iter()
        .map(|a| a.clamp(ACTION_CLAMP.0, ACTION_CLAMP.1))
        .collect())
}

/// Draws `ε ~ N(0, I)` of length `2·horizon` from `rng` and integrates
/// `field` from it; the sampler behind [`crate::model::Model::sample_actions`].
pub fn sample_chunk<F>(rng: &mut impl Rng, horizon: usize, steps: usize, field: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(Error::usage("denoising needs at least one step"));
    }
    integrate_euler(standard_normal(rng, horizon * 2), steps, field)
}
