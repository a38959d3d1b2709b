//! Closed-form expert and the robot's kinematic step.

use super::render::{render, Observation, RobotState};
use super::scene::Scene;
use super::{is_success, GRID, MAX_EPISODE_STEPS};

/// Maximum distance the expert plans per waypoint.
pub const EXPERT_STEP_CAP: f64 = 0.1;

/// Moves shorter than this (in unit coordinates) close the gripper.
const GRIPPER_CLOSE_DISTANCE: f64 = 0.25 / GRID as f64;

/// `H` absolute 2D waypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub waypoints: Vec<[f64; 2]>,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.waypoints.len()
    }

    /// Row-major `H × 2` values.
    pub fn flat(&self) -> Vec<f64> {
        self.waypoints.iter().flat_map(|w| w.iter().copied()).collect()
    }

    pub fn from_flat(values: &[f64]) -> Self {
        ActionChunk {
            waypoints: values.chunks_exact(2).map(|w| [w[0], w[1]]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub scene: Scene,
    pub observations: Vec<Observation>,
    pub action_chunks: Vec<ActionChunk>,
    pub success_target: [f64; 2],
}

impl Demonstration {
    pub fn horizon(&self) -> usize {
        self.action_chunks.first().map_or(0, ActionChunk::horizon)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Waypoints from the robot position toward the success target.
///
/// With `step_cap = Some(c)` waypoint `j` (1-based) sits `min(j·c, dist)`
/// along the straight line; with `None` the line is split into `H` equal
/// steps. Waypoints are clipped to the unit square and rounded to `f32` so
/// they survive the dataset round trip unchanged.
pub fn expert_chunk(scene: &Scene, state: &RobotState, horizon: usize, step_cap: Option<f64>) -> ActionChunk {
    chunk_toward(state.pos, scene.success_target(), horizon, step_cap)
}

pub(crate) fn chunk_toward(from: [f64; 2], target: [f64; 2], horizon: usize, step_cap: Option<f64>) -> ActionChunk {
    let delta = [target[0] - from[0], target[1] - from[1]];
    let dist = delta[0].hypot(delta[1]);
    let waypoints = (1..=horizon)
        .map(|j| {
            let frac = match step_cap {
                _ if dist == 0.0 => 1.0,
                Some(cap) => (j as f64 * cap / dist).min(1.0),
                None => j as f64 / horizon as f64,
            };
            let p = if frac >= 1.0 {
                target
            } else {
                [from[0] + frac * delta[0], from[1] + frac * delta[1]]
            };
            [round_f32(p[0].clamp(0.0, 1.0)), round_f32(p[1].clamp(0.0, 1.0))]
        })
        .collect();
    ActionChunk { waypoints }
}

/// Executes one absolute waypoint. The gripper closes when the robot
/// (nearly) stops.
pub fn step_robot(state: &RobotState, action: [f64; 2]) -> RobotState {
    let pos = [round_f32(action[0].clamp(0.0, 1.0)), round_f32(action[1].clamp(0.0, 1.0))];
    let moved = (pos[0] - state.pos[0]).hypot(pos[1] - state.pos[1]);
    RobotState {
        pos,
        gripper_open: moved >= GRIPPER_CLOSE_DISTANCE,
    }
}

/// Expert rollout: executes the first waypoint of each expert chunk until the
/// robot sits on the target, then records one holding step there.
pub fn record_demonstration(scene: &Scene, horizon: usize) -> Demonstration {
    let target = scene.success_target();
    let mut state = RobotState::new(scene.gripper_start);
    let mut observations = Vec::new();
    let mut action_chunks = Vec::new();
    for _ in 0..MAX_EPISODE_STEPS {
        let chunk = expert_chunk(scene, &state, horizon, Some(EXPERT_STEP_CAP));
        observations.push(render(scene, &state));
        let at_target = state.pos == target;
        let next = step_robot(&state, chunk.waypoints[0]);
        action_chunks.push(chunk);
        if at_target {
            break;
        }
        state = next;
    }
    debug_assert!(is_success(scene, state.pos));
    Demonstration {
        scene: scene.clone(),
        observations,
        action_chunks,
        success_target: target,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::{generate_scene_from, Difficulty};

    #[test]
    fn at_target_repeats_target() {
        let c = chunk_toward([0.25, 0.5], [0.25, 0.5], 5, Some(0.1));
        assert_eq!(c.waypoints, vec![[0.25, 0.5]; 5]);
    }

    #[test]
    fn uncapped_interpolation() {
        let c = chunk_toward([0.0, 0.0], [1.0, 1.0], 2, None);
        assert_eq!(c.waypoints, vec![[0.5, 0.5], [1.0, 1.0]]);
    }

    #[test]
    fn capped_chunk_reaches_target_exactly() {
        let c = chunk_toward([0.0, 0.0], [0.0, 0.25], 4, Some(0.1));
        assert_eq!(c.waypoints[0], [0.0, round_f32(0.1)]);
        assert_eq!(c.waypoints[2], [0.0, 0.25]);
        assert_eq!(c.waypoints[3], [0.0, 0.25]);
    }

    #[test]
    fn demos_succeed_and_stay_in_bounds() {
        for seed in 0..200 {
            for d in [Difficulty::Easy, Difficulty::Hard] {
                let scene = generate_scene_from(seed, d);
                let demo = record_demonstration(&scene, 8);
                assert_eq!(demo.observations.len(), demo.action_chunks.len());
                assert!(demo.len() <= MAX_EPISODE_STEPS);
                let last = demo.action_chunks.last().unwrap();
                assert!(is_success(&scene, *last.waypoints.last().unwrap()));
                let end = demo.observations.last().unwrap().robot_state;
                assert!(is_success(&scene, [end[0], end[1]]));
                for c in &demo.action_chunks {
                    assert_eq!(c.horizon(), 8);
                    assert!(c.flat().iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }
}
