//! Scene vocabulary and the procedural scene generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GRID, INSTRUCTION_LEN};
use crate::error::{Error, Result};

/// Placement attempts before a seed is declared unusable.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartKind {
    Handle,
    Head,
    Blade,
    Body,
    Opening,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectKind {
    Hammer,
    Knife,
    Skillet,
    Can,
    Marker,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verb {
    Grasp,
    Strike,
    Cut,
    PlaceInto,
    Pour,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl PartKind {
    pub const ALL: [PartKind; 5] = [
        PartKind::Handle,
        PartKind::Head,
        PartKind::Blade,
        PartKind::Body,
        PartKind::Opening,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 5] = [
        ObjectKind::Hammer,
        ObjectKind::Knife,
        ObjectKind::Skillet,
        ObjectKind::Can,
        ObjectKind::Marker,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The fixed pair of parts every instance of this kind is built from.
    pub fn parts(self) -> [PartKind; 2] {
        match self {
            ObjectKind::Hammer => [PartKind::Handle, PartKind::Head],
            ObjectKind::Knife => [PartKind::Handle, PartKind::Blade],
            ObjectKind::Skillet => [PartKind::Handle, PartKind::Opening],
            ObjectKind::Can => [PartKind::Body, PartKind::Opening],
            ObjectKind::Marker => [PartKind::Body, PartKind::Head],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Hammer => "hammer",
            ObjectKind::Knife => "knife",
            ObjectKind::Skillet => "skillet",
            ObjectKind::Can => "can",
            ObjectKind::Marker => "marker",
        }
    }

    fn token(self) -> u16 {
        30 + self as u16
    }
}

impl Verb {
    pub const ALL: [Verb; 5] = [
        Verb::Grasp,
        Verb::Strike,
        Verb::Cut,
        Verb::PlaceInto,
        Verb::Pour,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Verb::Grasp => "grasp",
            Verb::Strike => "strike",
            Verb::Cut => "cut",
            Verb::PlaceInto => "place_into",
            Verb::Pour => "pour",
        }
    }

    /// Part a verb acts on, independent of the object.
    pub fn acts_on(self) -> PartKind {
        match self {
            Verb::Grasp => PartKind::Handle,
            Verb::Strike => PartKind::Head,
            Verb::Cut => PartKind::Blade,
            Verb::PlaceInto | Verb::Pour => PartKind::Opening,
        }
    }

    fn token(self) -> u16 {
        10 + self as u16
    }
}

impl Difficulty {
    pub fn code(self) -> u8 {
        match self {
            Difficulty::Easy => 0,
            Difficulty::Hard => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Difficulty::Easy),
            1 => Some(Difficulty::Hard),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::usage(format!("unknown difficulty `{other}`"))),
        }
    }
}

/// Target part for a (verb, object) pair; `None` when the object lacks it.
pub fn affordance_part(verb: Verb, object: ObjectKind) -> Option<PartKind> {
    let part = verb.acts_on();
    object.parts().contains(&part).then_some(part)
}

/// Every (verb, object) pair the affordance table supports.
pub fn supported_tasks() -> Vec<(Verb, ObjectKind)> {
    let mut out = Vec::new();
    for object in ObjectKind::ALL {
        for verb in Verb::ALL {
            if affordance_part(verb, object).is_some() {
                out.push((verb, object));
            }
        }
    }
    out
}

/// Axis-aligned rectangle in unit coordinates: x grows with the column, y with the row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
}

impl Rect {
    /// Rectangle covering whole grid cells `[col0, col0+w) × [row0, row0+h)`.
    pub fn from_cells(col0: usize, row0: usize, w: usize, h: usize) -> Self {
        let g = GRID as f64;
        Rect {
            cx: (col0 as f64 + w as f64 / 2.0) / g,
            cy: (row0 as f64 + h as f64 / 2.0) / g,
            hx: w as f64 / (2.0 * g),
            hy: h as f64 / (2.0 * g),
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).abs() <= self.hx && (y - self.cy).abs() <= self.hy
    }

    /// Euclidean distance from a point to the rectangle (0 inside).
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let dx = ((x - self.cx).abs() - self.hx).max(0.0);
        let dy = ((y - self.cy).abs() - self.hy).max(0.0);
        (dx * dx + dy * dy).sqrt()
    }

    pub fn centroid(&self) -> [f64; 2] {
        [self.cx, self.cy]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Part {
    pub kind: PartKind,
    pub rect: Rect,
    pub appearance_id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstance {
    pub kind: ObjectKind,
    pub parts: [Part; 2],
    pub is_distractor: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub verb: Verb,
    pub object: ObjectKind,
    pub instruction_tokens: [u16; INSTRUCTION_LEN],
}

impl TaskSpec {
    pub fn new(verb: Verb, object: ObjectKind) -> Self {
        let mut tokens = [0u16; INSTRUCTION_LEN];
        // <bos> verb the object <eos>
        tokens[..5].copy_from_slice(&[1, verb.token(), 3, object.token(), 2]);
        TaskSpec {
            verb,
            object,
            instruction_tokens: tokens,
        }
    }

    pub fn name(&self) -> String {
        format!("{}_{}", self.verb.name(), self.object.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<ObjectInstance>,
    pub task: TaskSpec,
    pub gripper_start: [f64; 2],
    pub difficulty: Difficulty,
    pub noise_seed: u64,
    pub texture_amplitude: f64,
}

impl Scene {
    /// The single non-distractor object.
    pub fn target_object(&self) -> &ObjectInstance {
        self.objects
            .iter()
            .find(|o| !o.is_distractor)
            .expect("scene without target object")
    }

    pub fn target_part(&self) -> &Part {
        let kind = affordance_part(self.task.verb, self.task.object).expect("unsupported task in scene");
        self.target_object()
            .parts
            .iter()
            .find(|p| p.kind == kind)
            .expect("target object lacks its affordance part")
    }

    /// Centroid of the ground-truth affordance part.
    pub fn success_target(&self) -> [f64; 2] {
        self.target_part().rect.centroid()
    }

    /// Part covering a point, searching all objects.
    pub fn part_at(&self, x: f64, y: f64) -> Option<(&ObjectInstance, &Part)> {
        self.objects
            .iter()
            .flat_map(|o| o.parts.iter().map(move |p| (o, p)))
            .find(|(_, p)| p.rect.contains(x, y))
    }
}

/// Cell-aligned box used during placement.
#[derive(Clone, Copy, Debug)]
struct CellBox {
    col: usize,
    row: usize,
    w: usize,
    h: usize,
}

impl CellBox {
    fn overlaps_with_gap(&self, other: &CellBox) -> bool {
        let (a0, a1) = (self.col as isize - 1, (self.col + self.w) as isize + 1);
        let (b0, b1) = (other.col as isize, (other.col + other.w) as isize);
        let (c0, c1) = (self.row as isize - 1, (self.row + self.h) as isize + 1);
        let (d0, d1) = (other.row as isize, (other.row + other.h) as isize);
        a0 < b1 && b0 < a1 && c0 < d1 && d0 < c1
    }
}

fn sample_object(
    kind: ObjectKind,
    is_distractor: bool,
    rng: &mut ChaCha8Rng,
    placed: &[CellBox],
    attempts: &mut usize,
) -> Option<(ObjectInstance, CellBox)> {
    let mut kinds = kind.parts();
    if rng.gen_bool(0.5) {
        kinds.swap(0, 1);
    }
    let lens = [rng.gen_range(2..=4usize), rng.gen_range(2..=4usize)];
    let widths = [rng.gen_range(2..=3usize), rng.gen_range(2..=3usize)];
    let appearance = [rng.gen_range(0..4u32), rng.gen_range(0..4u32)];
    let horizontal = rng.gen_bool(0.5);
    let along = lens[0] + lens[1];
    let across = widths[0].max(widths[1]);
    let (bw, bh) = if horizontal { (along, across) } else { (across, along) };

    while *attempts < MAX_PLACEMENT_ATTEMPTS {
        *attempts += 1;
        let col = rng.gen_range(0..=GRID - bw);
        let row = rng.gen_range(0..=GRID - bh);
        let bbox = CellBox { col, row, w: bw, h: bh };
        if placed.iter().any(|p| bbox.overlaps_with_gap(p)) {
            continue;
        }
        let mut offset = 0;
        let parts = [0, 1].map(|i| {
            let rect = if horizontal {
                Rect::from_cells(col + offset, row, lens[i], widths[i])
            } else {
                Rect::from_cells(col, row + offset, widths[i], lens[i])
            };
            offset += lens[i];
            Part {
                kind: kinds[i],
                rect,
                appearance_id: appearance[i],
            }
        });
        return Some((
            ObjectInstance {
                kind,
                parts,
                is_distractor,
            },
            bbox,
        ));
    }
    None
}

/// Deterministic scene for `(seed, difficulty)`.
///
/// HARD scenes carry 2–4 distractors of other kinds; the first always shares
/// a part kind (and so a part appearance signature) with the target object.
pub fn generate_scene(seed: u64, difficulty: Difficulty) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = supported_tasks();
    let (verb, object) = tasks[rng.gen_range(0..tasks.len())];
    let task = TaskSpec::new(verb, object);
    let noise_seed = rng.gen::<u64>();

    let (n_distractors, texture_amplitude) = match difficulty {
        Difficulty::Easy => (0, 0.0),
        Difficulty::Hard => (rng.gen_range(2..=4usize), rng.gen_range(0.3..0.6)),
    };

    let mut attempts = 0;
    let mut placed = Vec::new();
    let mut objects = Vec::new();
    let fail = Error::Generation {
        seed,
        attempts: MAX_PLACEMENT_ATTEMPTS,
    };

    let (target, bbox) =
        sample_object(object, false, &mut rng, &placed, &mut attempts).ok_or(fail)?;
    objects.push(target);
    placed.push(bbox);

    let others: Vec<ObjectKind> = ObjectKind::ALL.into_iter().filter(|k| *k != object).collect();
    let sharing: Vec<ObjectKind> = others
        .iter()
        .copied()
        .filter(|k| k.parts().iter().any(|p| object.parts().contains(p)))
        .collect();
    for i in 0..n_distractors {
        let kind = if i == 0 {
            *sharing.choose(&mut rng).expect("every kind shares a part with another")
        } else {
            *others.choose(&mut rng).expect("non-empty")
        };
        let fail = Error::Generation {
            seed,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        };
        let (obj, bbox) = sample_object(kind, true, &mut rng, &placed, &mut attempts).ok_or(fail)?;
        objects.push(obj);
        placed.push(bbox);
    }

    let target = objects[0]
        .parts
        .iter()
        .find(|p| p.kind == verb.acts_on())
        .expect("supported task")
        .rect
        .centroid();
    let gripper_start = loop {
        if attempts >= MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Generation {
                seed,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
        attempts += 1;
        // f32-representable so datasets round-trip exactly
        let p = [rng.gen_range(0.05..0.95f32) as f64, rng.gen_range(0.05..0.95f32) as f64];
        if (p[0] - target[0]).hypot(p[1] - target[1]) >= 0.25 {
            break p;
        }
    };

    Ok(Scene {
        seed,
        objects,
        task,
        gripper_start,
        difficulty,
        noise_seed,
        texture_amplitude,
    })
}

/// First seed at or after `seed` whose scene generates successfully.
pub fn generate_scene_from(seed: u64, difficulty: Difficulty) -> Scene {
    let mut s = seed;
    loop {
        if let Ok(scene) = generate_scene(s, difficulty) {
            return scene;
        }
        s = s.wrapping_add(1);
    }
}
