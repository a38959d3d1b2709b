//! Token-grid rendering and analytic affordance heat.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{ObjectKind, PartKind, Scene};
use super::{FEATURES, GRID, HEAT_SIGMA_CELLS, INSTRUCTION_LEN};

/// Channels carrying appearance; the last channel is reserved for the gripper.
pub const APPEARANCE_CHANNELS: usize = FEATURES - 1;
pub const GRIPPER_CHANNEL: usize = FEATURES - 1;
pub const FEATURE_CLAMP: f64 = 3.0;
const APPEARANCE_VARIANTS: usize = 4;

type Signature = [f64; APPEARANCE_CHANNELS];

struct Palette {
    background: Signature,
    part: [Signature; 5],
    tint: [Signature; 5],
    variant: [Signature; APPEARANCE_VARIANTS],
}

fn palette() -> &'static Palette {
    static PALETTE: OnceLock<Palette> = OnceLock::new();
    PALETTE.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0105);
        let mut draw = |scale: f64| -> Signature {
            std::array::from_fn(|_| rng.gen_range(-scale..scale))
        };
        Palette {
            background: draw(0.2),
            part: std::array::from_fn(|_| draw(1.5)),
            tint: std::array::from_fn(|_| draw(0.5)),
            variant: std::array::from_fn(|_| draw(0.3)),
        }
    })
}

pub fn background_signature() -> Signature {
    palette().background.map(round_f32)
}

/// Base appearance of a part: its part-kind family, tinted by object kind and
/// shifted by the appearance variant.
pub fn part_signature(object: ObjectKind, part: PartKind, appearance_id: u32) -> Signature {
    let p = palette();
    let base = &p.part[part.index()];
    let tint = &p.tint[object.index()];
    let var = &p.variant[appearance_id as usize % APPEARANCE_VARIANTS];
    std::array::from_fn(|c| round_f32(base[c] + 0.8 * tint[c] + var[c]))
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Gripper position plus open flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotState {
    pub pos: [f64; 2],
    pub gripper_open: bool,
}

impl RobotState {
    pub fn new(pos: [f64; 2]) -> Self {
        RobotState {
            pos,
            gripper_open: true,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.pos[0], self.pos[1], if self.gripper_open { 1.0 } else { 0.0 }]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        RobotState {
            pos: [a[0], a[1]],
            gripper_open: a[2] >= 0.5,
        }
    }
}

/// One timestep of policy input.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `GRID × GRID × FEATURES`, row-major by (row, col, channel).
    pub visual_grid: Vec<f64>,
    pub instruction_tokens: [u16; INSTRUCTION_LEN],
    pub robot_state: [f64; 3],
}

impl Observation {
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * GRID + col) * FEATURES;
        &self.visual_grid[i..i + FEATURES]
    }
}

pub fn cell_center(row: usize, col: usize) -> [f64; 2] {
    let g = GRID as f64;
    [(col as f64 + 0.5) / g, (row as f64 + 0.5) / g]
}

/// Renders the scene with the gripper at `state`.
///
/// Texture noise is a static per-scene pattern drawn from `noise_seed`, so the
/// observation is a pure function of the scene and the robot state.
pub fn render(scene: &Scene, state: &RobotState) -> Observation {
    let mut grid = vec![0.0; GRID * GRID * FEATURES];
    let mut noise = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    let amp = scene.texture_amplitude;
    for row in 0..GRID {
        for col in 0..GRID {
            let [x, y] = cell_center(row, col);
            let sig = match scene.part_at(x, y) {
                Some((obj, part)) => part_signature(obj.kind, part.kind, part.appearance_id),
                None => background_signature(),
            };
            let cell = &mut grid[(row * GRID + col) * FEATURES..(row * GRID + col + 1) * FEATURES];
            for c in 0..APPEARANCE_CHANNELS {
                let n = if amp > 0.0 { noise.gen_range(-amp..=amp) } else { 0.0 };
                cell[c] = round_f32((sig[c] + n).clamp(-FEATURE_CLAMP, FEATURE_CLAMP));
            }
        }
    }
    splat_gripper(&mut grid, state.pos);
    Observation {
        visual_grid: grid,
        instruction_tokens: scene.task.instruction_tokens,
        robot_state: state.as_array().map(round_f32),
    }
}

/// Bilinear splat of the gripper position over the four nearest cell centers.
fn splat_gripper(grid: &mut [f64], pos: [f64; 2]) {
    let g = GRID as f64;
    let u = pos[0] * g - 0.5;
    let v = pos[1] * g - 0.5;
    let (c0, r0) = (u.floor(), v.floor());
    let (fu, fv) = (u - c0, v - r0);
    for (dr, wr) in [(0.0, 1.0 - fv), (1.0, fv)] {
        for (dc, wc) in [(0.0, 1.0 - fu), (1.0, fu)] {
            let (r, c) = (r0 + dr, c0 + dc);
            if r < 0.0 || c < 0.0 || r >= g || c >= g {
                continue;
            }
            let idx = ((r as usize) * GRID + c as usize) * FEATURES + GRIPPER_CHANNEL;
            grid[idx] = round_f32(wr * wc);
        }
    }
}

/// Analytic heat `exp(−d²/2σ²)` with `d` the cell-center distance (in cells)
/// to the target part; 1 inside the part.
pub fn affordance_ground_truth(scene: &Scene) -> Vec<f64> {
    let rect = scene.target_part().rect;
    let s2 = 2.0 * HEAT_SIGMA_CELLS * HEAT_SIGMA_CELLS;
    (0..GRID * GRID)
        .map(|i| {
            let [x, y] = cell_center(i / GRID, i % GRID);
            let d = rect.distance(x, y) * GRID as f64;
            (-d * d / s2).exp()
        })
        .collect()
}

/// Cells whose centers lie inside the target part.
pub fn target_part_mask(scene: &Scene) -> Vec<bool> {
    let rect = scene.target_part().rect;
    (0..GRID * GRID)
        .map(|i| {
            let [x, y] = cell_center(i / GRID, i % GRID);
            rect.contains(x, y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::{generate_scene_from, Difficulty};

    #[test]
    fn background_and_part_cells_show_exact_signatures() {
        let scene = generate_scene_from(3, Difficulty::Easy);
        let obs = render(&scene, &RobotState::new([0.999, 0.999]));
        let mut saw_bg = false;
        let mut saw_part = false;
        for row in 0..GRID {
            for col in 0..GRID {
                let [x, y] = cell_center(row, col);
                let cell = &obs.cell(row, col)[..APPEARANCE_CHANNELS];
                match scene.part_at(x, y) {
                    None => {
                        assert_eq!(cell, background_signature());
                        saw_bg = true;
                    }
                    Some((o, p)) => {
                        assert_eq!(cell, part_signature(o.kind, p.kind, p.appearance_id));
                        saw_part = true;
                    }
                }
            }
        }
        assert!(saw_bg && saw_part);
    }

    #[test]
    fn noisy_render_is_reproducible_and_bounded() {
        let scene = generate_scene_from(11, Difficulty::Hard);
        let st = RobotState::new([0.3, 0.6]);
        let a = render(&scene, &st);
        let b = render(&scene, &st);
        assert_eq!(a, b);
        assert!(a.visual_grid.iter().all(|v| v.abs() <= FEATURE_CLAMP));
        let mut fixed = scene.clone();
        fixed.texture_amplitude = 0.5;
        assert_eq!(render(&fixed, &st), render(&fixed, &st));
        assert_ne!(render(&fixed, &st), a);
    }

    #[test]
    fn gripper_splat_sums_to_one_inside() {
        let scene = generate_scene_from(5, Difficulty::Easy);
        let obs = render(&scene, &RobotState::new([0.41, 0.77]));
        let total: f64 = (0..GRID * GRID).map(|i| obs.visual_grid[i * FEATURES + GRIPPER_CHANNEL]).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn heat_examples() {
        let scene = generate_scene_from(2, Difficulty::Easy);
        let heat = affordance_ground_truth(&scene);
        let mask = target_part_mask(&scene);
        let rect = scene.target_part().rect;
        for i in 0..GRID * GRID {
            assert!(heat[i] > 0.0 && heat[i] <= 1.0);
            assert_eq!(heat[i] == 1.0, mask[i]);
            let [x, y] = cell_center(i / GRID, i % GRID);
            let d = rect.distance(x, y) * GRID as f64;
            if (d - HEAT_SIGMA_CELLS).abs() < 1e-12 {
                assert!((heat[i] - (-0.5f64).exp()).abs() < 1e-12);
            }
            if d > 8.0 {
                assert!(heat[i] < 1e-6);
            }
        }
        // centroid cell
        let [cx, cy] = rect.centroid();
        let col = ((cx * GRID as f64) as usize).min(GRID - 1);
        let row = ((cy * GRID as f64) as usize).min(GRID - 1);
        assert_eq!(heat[row * GRID + col], 1.0);
    }

    #[test]
    fn heat_at_one_sigma() {
        // distance of exactly 1.5 cells: rect edge at 0.5/16 and cell centers at (k+0.5)/16
        let mut scene = generate_scene_from(2, Difficulty::Easy);
        let part = scene.target_part().kind;
        let target = scene.objects.iter_mut().find(|o| !o.is_distractor).unwrap();
        for p in target.parts.iter_mut() {
            if p.kind == part {
                p.rect = crate::world::scene::Rect::from_cells(4, 4, 2, 2);
            } else {
                p.rect = crate::world::scene::Rect::from_cells(12, 12, 2, 2);
            }
        }
        let heat = affordance_ground_truth(&scene);
        // cell (row 4, col 7): center x = 7.5 cells, rect spans cols 4..6 -> d = 1.5
        assert!((heat[4 * GRID + 7] - 0.60653).abs() < 1e-5);
    }
}
