//! Procedural 2D desk world: scenes, token-grid rendering, expert
//! demonstrations and the on-disk dataset format.

pub mod dataset;
pub mod expert;
pub mod render;
pub mod scene;

pub use dataset::{decode_dataset, encode_dataset, read_dataset, write_dataset};
pub use expert::{
    expert_chunk, record_demonstration, step_robot, ActionChunk, Demonstration, EXPERT_STEP_CAP,
};
pub use render::{affordance_ground_truth, cell_center, render, target_part_mask, Observation, RobotState};
pub use scene::{
    affordance_part, generate_scene, generate_scene_from, supported_tasks, Difficulty,
    ObjectInstance, ObjectKind, Part, PartKind, Rect, Scene, TaskSpec, Verb,
};

/// Grid side length; the visual token grid is `GRID × GRID`.
pub const GRID: usize = 16;
/// Feature channels per grid cell.
pub const FEATURES: usize = 8;
/// Instruction length in tokens, padded with 0.
pub const INSTRUCTION_LEN: usize = 8;
/// Size of the closed instruction vocabulary.
pub const VOCAB_SIZE: usize = 64;
/// Width of the affordance heat kernel, in cells.
pub const HEAT_SIGMA_CELLS: f64 = 1.5;
/// Success radius around the target part centroid, in cells.
pub const SUCCESS_RADIUS_CELLS: f64 = 1.5;
/// Control steps per episode.
pub const MAX_EPISODE_STEPS: usize = 20;
/// Default action-chunk horizon.
pub const DEFAULT_HORIZON: usize = 8;

/// Success radius in unit coordinates.
pub fn success_radius() -> f64 {
    SUCCESS_RADIUS_CELLS / GRID as f64
}

/// True when `pos` lies within the success radius of the scene's target.
pub fn is_success(scene: &Scene, pos: [f64; 2]) -> bool {
    let t = scene.success_target();
    (pos[0] - t[0]).hypot(pos[1] - t[1]) <= success_radius()
}
