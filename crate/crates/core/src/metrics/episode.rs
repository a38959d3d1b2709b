//! Closed-loop episodes: render, ask a policy for a chunk, execute its first
//! waypoint, repeat.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Model, ModelInput};
use crate::world::{
    expert_chunk, generate_scene_from, is_success, render, step_robot, ActionChunk, Difficulty, Observation,
    RobotState, Scene, EXPERT_STEP_CAP, MAX_EPISODE_STEPS,
};

use super::report::{EvalReport, EvalRow};

/// Scene seeds used for evaluation start here by default, well clear of the
/// seeds that generate training data.
pub const DEFAULT_EVAL_SEED: u64 = 1_000_000;

pub trait Policy {
    fn chunk(&mut self, scene: &Scene, obs: &Observation) -> Result<ActionChunk>;
}

/// The demonstrator: steps straight toward the target with the capped step.
#[derive(Clone, Debug)]
pub struct ExpertPolicy {
    pub horizon: usize,
}

impl Policy for ExpertPolicy {
    fn chunk(&mut self, scene: &Scene, obs: &Observation) -> Result<ActionChunk> {
        let state = RobotState::from_array(obs.robot_state);
        Ok(expert_chunk(scene, &state, self.horizon, Some(EXPERT_STEP_CAP)))
    }
}

/// Jumps to a uniformly random point of the workspace every step.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    pub rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn chunk(&mut self, _scene: &Scene, _obs: &Observation) -> Result<ActionChunk> {
        Ok(ActionChunk {
            waypoints: vec![[self.rng.gen(), self.rng.gen()]],
        })
    }
}

/// Flow-matching sampling from a trained model. Never evaluates the teacher
/// or the projection head.
pub struct ModelPolicy<'m> {
    pub model: &'m Model,
    pub rng: ChaCha8Rng,
    pub steps: usize,
}

impl<'m> ModelPolicy<'m> {
    /// Sampling noise for an episode is seeded by the scene seed.
    pub fn for_scene(model: &'m Model, scene: &Scene) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        rng.set_stream(SAMPLING_STREAM);
        ModelPolicy {
            model,
            rng,
            steps: model.config.denoise_steps,
        }
    }
}

const SAMPLING_STREAM: u64 = 7;

impl Policy for ModelPolicy<'_> {
    fn chunk(&mut self, _scene: &Scene, obs: &Observation) -> Result<ActionChunk> {
        self.model
            .sample_actions(&ModelInput::from_observation(obs), &mut self.rng, self.steps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub success: bool,
    /// Gripper positions, starting position first.
    pub trajectory: Vec<[f64; 2]>,
}

/// Runs the full `MAX_EPISODE_STEPS` control steps; success is judged on the
/// final position.
pub fn run_episode(policy: &mut impl Policy, scene: &Scene) -> Result<Episode> {
    let mut state = RobotState::new(scene.gripper_start);
    let mut trajectory = vec![state.pos];
    for _ in 0..MAX_EPISODE_STEPS {
        let obs = render(scene, &state);
        let chunk = policy.chunk(scene, &obs)?;
        state = step_robot(&state, chunk.waypoints[0]);
        trajectory.push(state.pos);
    }
    Ok(Episode {
        success: is_success(scene, state.pos),
        trajectory,
    })
}

/// Success per trial for scene seeds `seed, seed+1, …`.
pub fn run_trials<P: Policy>(
    difficulty: Difficulty,
    trials: usize,
    seed: u64,
    mut make_policy: impl FnMut(&Scene) -> P,
) -> Result<Vec<(Scene, bool)>> {
    (0..trials as u64)
        .map(|i| {
            let scene = generate_scene_from(seed + i, difficulty);
            let mut policy = make_policy(&scene);
            let ep = run_episode(&mut policy, &scene)?;
            Ok((scene, ep.success))
        })
        .collect()
}

/// Success rates of a model over `trials` scenes per difficulty.
pub fn evaluate_model(model: &Model, difficulties: &[Difficulty], trials: usize, seed: u64) -> Result<EvalReport> {
    let mut rows: Vec<EvalRow> = Vec::new();
    for &difficulty in difficulties {
        let outcomes = run_trials(difficulty, trials, seed, |scene| ModelPolicy::for_scene(model, scene))?;
        rows.extend(EvalRow::tally(difficulty, &outcomes));
    }
    EvalReport::new(rows, seed, trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{success_radius, DEFAULT_HORIZON};

    #[test]
    fn expert_always_succeeds_on_easy() {
        let outcomes = run_trials(Difficulty::Easy, 100, 0, |_| ExpertPolicy {
            horizon: DEFAULT_HORIZON,
        })
        .unwrap();
        assert!(outcomes.iter().all(|(_, ok)| *ok));
    }

    #[test]
    fn random_policy_matches_disc_area() {
        // geometric probability of landing in the success disc
        let p = std::f64::consts::PI * success_radius().powi(2);
        let n = 1000;
        let mut seed = 0;
        let outcomes = run_trials(Difficulty::Easy, n, 0, |_| {
            seed += 1;
            RandomPolicy::new(seed)
        })
        .unwrap();
        let rate = outcomes.iter().filter(|(_, ok)| *ok).count() as f64 / n as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() <= 3.0 * sd, "rate {rate} vs {p} ± {}", 3.0 * sd);
    }

    #[test]
    fn episodes_are_deterministic() {
        let scene = generate_scene_from(4, Difficulty::Hard);
        let a = run_episode(&mut RandomPolicy::new(9), &scene).unwrap();
        let b = run_episode(&mut RandomPolicy::new(9), &scene).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectory.len(), MAX_EPISODE_STEPS + 1);
    }
}
