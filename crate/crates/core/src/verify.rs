//! Finite-difference verification of every training loss path on a tiny
//! model, with respect to all parameters at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{align_loss, build_target, combined_loss, positional_embedding, AlignmentTarget, DEFAULT_ALIGN_WEIGHT};
use crate::error::{Error, Result};
use crate::model::{action_loss, flow::standard_normal, FlowState, Model, ModelConfig, ModelInput};
use crate::numerics::gradcheck::DEFAULT_STEP;
use crate::numerics::{finite_diff_check, GradCheckReport, Tape, Tensor, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Seeds checked per loss path by default.
pub const DEFAULT_SEEDS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPath {
    /// Flow-matching regression.
    Action,
    /// Negative mean cosine to the positional teacher target.
    Align,
    /// A fixed random linear functional of the projected features.
    Projection,
    /// Action loss plus the weighted alignment loss.
    Combined,
}

impl LossPath {
    /// Reporting order.
    pub const ALL: [LossPath; 4] = [LossPath::Action, LossPath::Align, LossPath::Projection, LossPath::Combined];

    pub fn name(self) -> &'static str {
        match self {
            LossPath::Action => "action",
            LossPath::Align => "align",
            LossPath::Projection => "projection",
            LossPath::Combined => "combined",
        }
    }
}

/// Random inputs, flow draws and teacher target for one check.
struct Problem {
    model: Model,
    input: ModelInput,
    actions: Vec<f64>,
    flow: FlowState,
    target: AlignmentTarget,
    readout: Tensor,
}

impl Problem {
    fn new(seed: u64) -> Result<Self> {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(cfg.clone(), &mut rng)?;
        let visual = Tensor::new(
            vec![cfg.visual_tokens(), cfg.features],
            standard_normal(&mut rng, cfg.visual_tokens() * cfg.features),
        )?;
        let tokens = (0..cfg.instruction_len).map(|_| rng.gen_range(0..cfg.vocab)).collect();
        let state = [rng.gen(), rng.gen(), if rng.gen::<bool>() { 1.0 } else { 0.0 }];
        let actions: Vec<f64> = (0..cfg.horizon * 2).map(|_| rng.gen()).collect();
        // keep τ away from the endpoints so every term carries gradient
        let tau = 0.05 + 0.9 * rng.gen::<f64>();
        let flow = FlowState::from_parts(&actions, standard_normal(&mut rng, actions.len()), tau);
        let n = cfg.teacher_grid * cfg.teacher_grid;
        let z = Tensor::new(vec![n, cfg.teacher_dim], standard_normal(&mut rng, n * cfg.teacher_dim))?;
        let target = build_target(&z, &positional_embedding(n, cfg.teacher_dim)?)?;
        let readout = Tensor::new(vec![n, cfg.teacher_dim], standard_normal(&mut rng, n * cfg.teacher_dim))?;
        Ok(Problem {
            model,
            input: ModelInput { visual, tokens, state },
            actions,
            flow,
            target,
            readout,
        })
    }

    fn loss(&self, model: &Model, t: &mut Tape, path: LossPath) -> Result<Var> {
        let ctx = model.understand(t, &self.input)?;
        let action = |t: &mut Tape| -> Result<Var> {
            let cache = model.context_cache(t, &ctx)?;
            let noisy = t.constant(Tensor::new(vec![self.actions.len() / 2, 2], self.flow.noisy.clone())?);
            let field = model.vector_field(t, noisy, self.flow.tau, &cache)?;
            action_loss(t, field, &self.actions, &self.flow.noise)
        };
        match path {
            LossPath::Action => action(t),
            LossPath::Align => {
                let x = model.project(t, &ctx)?;
                align_loss(t, x, &self.target)
            }
            LossPath::Projection => {
                let x = model.project(t, &ctx)?;
                let r = t.constant(self.readout.clone());
                let weighted = t.mul(x, r)?;
                t.sum(weighted)
            }
            LossPath::Combined => {
                let a = action(t)?;
                let x = model.project(t, &ctx)?;
                let l = align_loss(t, x, &self.target)?;
                combined_loss(t, a, l, DEFAULT_ALIGN_WEIGHT)
            }
        }
    }
}

fn flatten(model: &Model) -> Vec<f64> {
    model.params.iter().flat_map(|(_, _, t)| t.data().to_vec()).collect()
}

fn unflatten(model: &mut Model, flat: &[f64]) {
    let mut offset = 0;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let dst = model.params.get_mut(id).data_mut();
        dst.copy_from_slice(&flat[offset..offset + dst.len()]);
        offset += dst.len();
    }
}

/// Checks the analytic gradient of `path` against central differences over
/// every parameter of a tiny model built from `seed`.
pub fn check_loss_path(path: LossPath, seed: u64) -> Result<GradCheckReport> {
    let problem = Problem::new(seed)?;
    let base = flatten(&problem.model);
    let mut t = Tape::new();
    let loss = problem.loss(&problem.model, &mut t, path)?;
    let grads = t.backward(loss)?;
    let mut analytic = Vec::with_capacity(base.len());
    for (id, _, value) in problem.model.params.iter() {
        match grads.param(id) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(value.numel())),
        }
    }
    let mut scratch = problem.model.clone();
    finite_diff_check(
        |p| {
            unflatten(&mut scratch, p);
            let mut t = Tape::new();
            let l = problem.loss(&scratch, &mut t, path)?;
            Ok(t.value(l).item())
        },
        &base,
        &analytic,
        DEFAULT_STEP,
    )
}

/// Worst report per loss path over `seeds` consecutive seeds.
pub fn check_all_paths(first_seed: u64, seeds: usize) -> Result<Vec<(LossPath, GradCheckReport)>> {
    if seeds == 0 {
        return Err(Error::usage("gradient check needs at least one seed"));
    }
    LossPath::ALL
        .iter()
        .map(|&path| {
            let mut worst: Option<GradCheckReport> = None;
            for s in 0..seeds as u64 {
                let r = check_loss_path(path, first_seed + s)?;
                if worst.map_or(true, |w| r.max_rel_error > w.max_rel_error) {
                    worst = Some(r);
                }
            }
            Ok((path, worst.expect("at least one seed")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_path_passes_on_one_seed() {
        for path in LossPath::ALL {
            let r = check_loss_path(path, 11).unwrap();
            assert!(r.max_rel_error <= DEFAULT_TOLERANCE, "{}: {:?}", path.name(), r);
        }
    }
}
