//! Frozen analytic affordance teacher.
//!
//! Maps a task to a part-level concept and blends an orthonormal concept
//! embedding with a background embedding according to the analytic heat, so
//! every token target is known in closed form. The teacher owns no trainable
//! state.

use std::cell::Cell;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::metrics::saliency::{score_heat, SaliencyScores};
use crate::numerics::Tensor;
use crate::world::{affordance_ground_truth, affordance_part, Observation, ObjectKind, PartKind, Scene, TaskSpec, Verb, GRID};

/// Teacher representation width.
pub const TEACHER_DIM: usize = 32;
/// Tokens in the teacher grid.
pub const TEACHER_TOKENS: usize = GRID * GRID;
/// One concept per (object kind, part) pair.
pub const CONCEPT_COUNT: usize = 10;
const TABLE_SEED: u64 = 0x7eac_4e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConceptPrompt {
    pub verb: Verb,
    pub object: ObjectKind,
    pub target_part: PartKind,
    pub concept_id: usize,
}

/// Unit concept vectors plus a background vector, pairwise orthogonal.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptTable {
    concepts: Vec<[f64; TEACHER_DIM]>,
    background: [f64; TEACHER_DIM],
}

impl ConceptTable {
    /// Gram-Schmidt (applied twice) over Gaussian draws from a fixed seed.
    fn build() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TABLE_SEED);
        let mut basis: Vec<[f64; TEACHER_DIM]> = Vec::with_capacity(CONCEPT_COUNT + 1);
        while basis.len() < CONCEPT_COUNT + 1 {
            let mut v: [f64; TEACHER_DIM] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    for (x, y) in v.iter_mut().zip(b) {
                        *x -= d * y;
                    }
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-3 {
                continue;
            }
            basis.push(v.map(|x| x / n));
        }
        let background = basis.pop().expect("non-empty basis");
        ConceptTable {
            concepts: basis,
            background,
        }
    }

    /// The process-wide frozen table.
    pub fn shared() -> &'static ConceptTable {
        static TABLE: OnceLock<ConceptTable> = OnceLock::new();
        TABLE.get_or_init(ConceptTable::build)
    }

    pub fn concept(&self, id: usize) -> &[f64; TEACHER_DIM] {
        &self.concepts[id]
    }

    pub fn background(&self) -> &[f64; TEACHER_DIM] {
        &self.background
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Little-endian bytes of every entry, for fingerprinting.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.concepts
            .iter()
            .chain(std::iter::once(&self.background))
            .flat_map(|v| v.iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }
}

fn concept_id(object: ObjectKind, part: PartKind) -> usize {
    let slot = object.parts().iter().position(|p| *p == part).expect("part of object");
    2 * object.index() + slot
}

/// Deterministic lookup of the part-level concept for a task.
pub fn parse_task(task: &TaskSpec) -> Result<ConceptPrompt> {
    let part = affordance_part(task.verb, task.object).ok_or_else(|| Error::UnsupportedTask {
        verb: task.verb.name().into(),
        object: task.object.name().into(),
    })?;
    Ok(ConceptPrompt {
        verb: task.verb,
        object: task.object,
        target_part: part,
        concept_id: concept_id(task.object, part),
    })
}

/// Token representation `z_aff` (`N × d`) and heat map `m_aff` (`G × G`).
#[derive(Clone, Debug, PartialEq)]
pub struct AffordanceTarget {
    pub z_aff: Tensor,
    pub m_aff: Vec<f64>,
}

thread_local! {
    static TEACH_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `teach` evaluations on the current thread.
pub fn teach_calls() -> u64 {
    TEACH_CALLS.with(Cell::get)
}

/// `z_i = h_i·e_concept + (1 − h_i)·e_bg` with `h` the analytic heat.
pub fn teach(obs: &Observation, prompt: &ConceptPrompt, scene: &Scene) -> AffordanceTarget {
    debug_assert_eq!(obs.instruction_tokens, scene.task.instruction_tokens);
    TEACH_CALLS.with(|c| c.set(c.get() + 1));
    let table = ConceptTable::shared();
    let concept = table.concept(prompt.concept_id);
    let bg = table.background();
    let heat = affordance_ground_truth(scene);
    let mut data = Vec::with_capacity(TEACHER_TOKENS * TEACHER_DIM);
    for h in &heat {
        data.extend((0..TEACHER_DIM).map(|j| h * concept[j] + (1.0 - h) * bg[j]));
    }
    AffordanceTarget {
        z_aff: Tensor::new(vec![TEACHER_TOKENS, TEACHER_DIM], data).expect("teacher shape"),
        m_aff: heat,
    }
}

/// Scores each predicted heat grid against its truth.
pub fn teacher_self_eval(predictions: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<Vec<SaliencyScores>> {
    if predictions.len() != truths.len() {
        return Err(Error::Dimension {
            op: "teacher_self_eval",
            left: vec![predictions.len()],
            right: vec![truths.len()],
        });
    }
    predictions.iter().zip(truths).map(|(p, t)| score_heat(p, t)).collect()
}

/// Heat prediction with additive Gaussian noise of std `noise`, clipped at 0.
pub fn perturb_heat(heat: &[f64], noise: f64, seed: u64) -> Vec<f64> {
    if noise == 0.0 {
        return heat.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    heat.iter()
        .map(|h| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (h + noise * n).max(0.0)
        })
        .collect()
}
