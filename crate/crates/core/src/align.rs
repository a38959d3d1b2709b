//! Representation alignment: positional targets, the projection head from
//! intermediate visual features into the teacher space, and the cosine loss.

use std::cell::Cell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::layers::Linear;
use crate::model::params::ParamStore;
use crate::numerics::tape::COSINE_NORM_FLOOR;
use crate::numerics::{Tape, Tensor, Var};

/// Default weight of the alignment term.
pub const DEFAULT_ALIGN_WEIGHT: f64 = 0.5;
const POSITION_BASE: f64 = 10000.0;

fn perfect_square(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// `half` interleaved sin/cos values at frequencies `base^(−2k/half)`.
fn axis_encoding(position: f64, half: usize, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate().take(half) {
        let k = (j / 2) as f64;
        let angle = position * POSITION_BASE.powf(-2.0 * k / half as f64);
        *o = if j % 2 == 0 { angle.sin() } else { angle.cos() };
    }
}

/// Fixed 2D sinusoidal encoding of `N` tokens on a `√N × √N` grid: the first
/// `d/2` dims encode the row, the last `d/2` the column.
pub fn positional_embedding(n: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::usage(format!("positional embedding width {d} must be even")));
    }
    let side = perfect_square(n)
        .ok_or_else(|| Error::usage(format!("token count {n} is not a perfect square")))?;
    let half = d / 2;
    let mut data = vec![0.0; n * d];
    for (i, row) in data.chunks_exact_mut(d).enumerate() {
        let (r, c) = (i / side, i % side);
        let (first, second) = row.split_at_mut(half);
        axis_encoding(r as f64, half, first);
        axis_encoding(c as f64, half, second);
    }
    Tensor::new(vec![n, d], data)
}

/// Teacher tokens shifted by the positional encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTarget {
    pub z_tilde: Tensor,
}

pub fn build_target(z_aff: &Tensor, positions: &Tensor) -> Result<AlignmentTarget> {
    if z_aff.shape() != positions.shape() || z_aff.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "build_target",
            left: z_aff.shape().to_vec(),
            right: positions.shape().to_vec(),
        });
    }
    let data: Vec<f64> = z_aff.data().iter().zip(positions.data()).map(|(a, b)| a + b).collect();
    let z_tilde = Tensor::new(z_aff.shape().to_vec(), data)?;
    for r in 0..z_tilde.rows() {
        let norm = z_tilde.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= COSINE_NORM_FLOOR {
            return Err(Error::DegenerateNorm { op: "build_target", row: r });
        }
    }
    Ok(AlignmentTarget { z_tilde })
}

thread_local! {
    static PROJECTION_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of projection-head evaluations on the current thread.
pub fn projection_calls() -> u64 {
    PROJECTION_CALLS.with(Cell::get)
}

/// Two-layer head `W2·GELU(W1·x + b1) + b2`; parameters are named `align.*`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionMlp {
    pub(crate) w1: Linear,
    pub(crate) w2: Linear,
}

impl ProjectionMlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d_in: usize, hidden: usize, d_out: usize) -> Self {
        ProjectionMlp {
            w1: Linear::new(store, rng, "align.w1", d_in, hidden, true, 1.0),
            w2: Linear::new(store, rng, "align.w2", hidden, d_out, true, 1.0),
        }
    }

    pub fn param_ids(&self) -> Vec<crate::numerics::ParamId> {
        [self.w1, self.w2]
            .iter()
            .flat_map(|l| std::iter::once(l.w).chain(l.b))
            .collect()
    }
}

/// Reshape to a square grid, resize to `target_side²` tokens, normalize each
/// token and apply the projection head.
pub fn project_features(
    t: &mut Tape,
    store: &ParamStore,
    mlp: &ProjectionMlp,
    visual: Var,
    target_side: usize,
) -> Result<Var> {
    PROJECTION_CALLS.with(|c| c.set(c.get() + 1));
    let shape = t.value(visual).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension {
            op: "project_features",
            left: shape,
            right: vec![],
        });
    }
    let (nv, dv) = (shape[0], shape[1]);
    let side = perfect_square(nv)
        .ok_or_else(|| Error::usage(format!("visual token count {nv} is not a perfect square")))?;
    let mut x = visual;
    if side != target_side {
        let grid = t.reshape(x, &[side, side, dv])?;
        let resized = t.bilinear_resize(grid, target_side, target_side)?;
        x = t.reshape(resized, &[target_side * target_side, dv])?;
    }
    let x = t.layer_norm(x)?;
    let h = mlp.w1.forward(t, store, x)?;
    let h = t.gelu(h)?;
    mlp.w2.forward(t, store, h)
}

/// `−mean_i cos(x̂_i, z̃_i)`; the target is a constant.
pub fn align_loss(t: &mut Tape, projected: Var, target: &AlignmentTarget) -> Result<Var> {
    let z = t.constant(target.z_tilde.clone());
    let cos = t.cosine_rows(projected, z)?;
    let m = t.mean(cos)?;
    t.scale(m, -1.0)
}

/// `L_action + λ·L_align`.
pub fn combined_loss(t: &mut Tape, action: Var, align: Var, weight: f64) -> Result<Var> {
    if !(weight >= 0.0) {
        return Err(Error::usage(format!("alignment weight {weight} must be nonnegative")));
    }
    let scaled = t.scale(align, weight)?;
    t.add(action, scaled)
}

/// Scalar form of [`combined_loss`], used for logging.
pub fn combine(action: f64, align: f64, weight: f64) -> f64 {
    action + weight * align
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_examples() {
        let p = positional_embedding(256, 32).unwrap();
        let row0 = p.row(0);
        for (j, v) in row0.iter().enumerate() {
            assert_eq!(*v, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(p, positional_embedding(256, 32).unwrap());
        // token 17 sits at row 1, col 1: both halves carry the same phase
        let r = p.row(17);
        assert_eq!(&r[..16], &r[16..]);
        assert!((r[0] - 1f64.sin()).abs() < 1e-15);
        assert!(matches!(positional_embedding(256, 31), Err(Error::Usage(_))));
        assert!(matches!(positional_embedding(250, 32), Err(Error::Usage(_))));
    }

    #[test]
    fn target_examples() {
        let p = positional_embedding(4, 4).unwrap();
        let zero = Tensor::zeros(vec![4, 4]);
        assert_eq!(build_target(&zero, &p).unwrap().z_tilde, p);
        let z = Tensor::new(vec![4, 4], (0..16).map(|i| i as f64 + 1.0).collect()).unwrap();
        assert_eq!(build_target(&z, &zero).unwrap().z_tilde, z);
        let neg = Tensor::new(vec![4, 4], p.data().iter().map(|v| -v).collect()).unwrap();
        assert!(matches!(
            build_target(&neg, &p),
            Err(Error::DegenerateNorm { row: 0, .. })
        ));
    }

    #[test]
    fn loss_examples() {
        let target = AlignmentTarget {
            z_tilde: Tensor::new(vec![2, 2], vec![1.0, 2.0, -0.5, 3.0]).unwrap(),
        };
        let mut t = Tape::new();
        let scaled = t.constant(Tensor::new(vec![2, 2], vec![2.0, 4.0, -0.25, 1.5]).unwrap());
        let l = align_loss(&mut t, scaled, &target).unwrap();
        assert!((t.value(l).item() + 1.0).abs() < 1e-15);
        let orth = t.constant(Tensor::new(vec![2, 2], vec![-2.0, 1.0, 3.0, 0.5]).unwrap());
        let l = align_loss(&mut t, orth, &target).unwrap();
        assert!(t.value(l).item().abs() < 1e-15);
        let unit = AlignmentTarget {
            z_tilde: Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
        };
        let half = t.constant(Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 2.0]).unwrap());
        let l = align_loss(&mut t, half, &unit).unwrap();
        assert_eq!(t.value(l).item(), -0.5);
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combine(0.8, -0.6, 0.5), 0.5);
        assert_eq!(combine(0.8, -0.6, 0.0), 0.8);
        assert_eq!(combine(0.0, 0.0, 1.0), 0.0);
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(0.8));
        let b = t.constant(Tensor::scalar(-0.6));
        let c = combined_loss(&mut t, a, b, 0.5).unwrap();
        assert_eq!(t.value(c).item(), 0.5);
        assert!(combined_loss(&mut t, a, b, -1.0).is_err());
    }
}
