//! How strongly projected visual features single out the task's functional
//! part.
//!
//! Per token, `s_i = cos(x̂_i − mean_j x̂_j, e_concept − e_bg)`: the direction
//! a token's projected feature deviates from the image average, compared with
//! the teacher's part-versus-background direction. The same probe serves
//! aligned models (trained head) and unaligned ones (head frozen at its
//! shared initialization).

use crate::error::{Error, Result};
use crate::model::{Model, ModelInput};
use crate::numerics::Tape;
use crate::teacher::{parse_task, ConceptTable};
use crate::world::{render, target_part_mask, RobotState, Scene};

/// Maps similarities from `[−1, 1]` to `[0, 1]` via `(s+1)/2` and returns
/// the mass inside `mask` over the total mass; 0 when the total is 0.
pub fn concentration_from_similarity(similarity: &[f64], mask: &[bool]) -> Result<f64> {
    if similarity.len() != mask.len() {
        return Err(Error::Dimension {
            op: "concentration",
            left: vec![similarity.len()],
            right: vec![mask.len()],
        });
    }
    let mapped = similarity.iter().map(|s| (s + 1.0) / 2.0);
    let (mut inside, mut total) = (0.0, 0.0);
    for (m, &in_part) in mapped.zip(mask) {
        total += m;
        if in_part {
            inside += m;
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `s_i` for every teacher-grid token of the scene's first observation.
pub fn similarity_map(model: &Model, scene: &Scene) -> Result<Vec<f64>> {
    let obs = render(scene, &RobotState::new(scene.gripper_start));
    let mut t = Tape::new();
    let ctx = model.understand(&mut t, &ModelInput::from_observation(&obs))?;
    let projected = model.project(&mut t, &ctx)?;
    let x = t.value(projected);
    let table = ConceptTable::shared();
    let prompt = parse_task(&scene.task)?;
    if x.cols() != table.background().len() {
        return Err(Error::Dimension {
            op: "similarity_map",
            left: x.shape().to_vec(),
            right: vec![table.background().len()],
        });
    }
    let direction: Vec<f64> = table
        .concept(prompt.concept_id)
        .iter()
        .zip(table.background())
        .map(|(c, b)| c - b)
        .collect();
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok((0..n)
        .map(|i| {
            let centered: Vec<f64> = x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
            cosine(&centered, &direction)
        })
        .collect())
}

/// Concentration of a model's projected features on the target part.
pub fn concentration_score(model: &Model, scene: &Scene) -> Result<f64> {
    let s = similarity_map(model, scene)?;
    let mask = target_part_mask(scene);
    if s.len() != mask.len() {
        return Err(Error::usage("concentration needs the projection grid to match the world grid"));
    }
    concentration_from_similarity(&s, &mask)
}
