//! Understanding expert: embeds the visual grid, instruction and robot state
//! and fuses them with full self-attention.

use rand::Rng;

use super::layers::{bind, sinusoid, EncoderBlock, Linear};
use super::params::{normal_tensor, ParamStore};
use super::{ModelConfig, ModelInput};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, Tape, Tensor, Var};

/// Output of one understanding pass.
#[derive(Clone, Copy, Debug)]
pub struct Context {
    /// Final normalized features over `[visual, instruction, state]` tokens.
    pub tokens: Var,
    /// Visual-token features after the alignment layer (`N_v × width`).
    pub visual_at_align_layer: Var,
}

#[derive(Clone, Debug)]
pub(crate) struct UnderstandingExpert {
    patch: Linear,
    row_pos: ParamId,
    col_pos: ParamId,
    token_emb: ParamId,
    instr_pos: ParamId,
    state_x: ParamId,
    state_y: ParamId,
    state_grip: ParamId,
    blocks: Vec<EncoderBlock>,
}

/// Row table whose first half encodes the row index, and a column table
/// whose second half encodes the column, so the sum is a 2D sinusoid.
fn grid_position_tables(grid: usize, width: usize) -> (Tensor, Tensor) {
    let half = width / 2;
    let mut rows = vec![0.0; grid * width];
    let mut cols = vec![0.0; grid * width];
    for i in 0..grid {
        let s = sinusoid(i as f64, half, 10000.0);
        rows[i * width..i * width + half].copy_from_slice(&s);
        cols[i * width + half..i * width + 2 * half].copy_from_slice(&s);
    }
    (
        Tensor::new(vec![grid, width], rows).expect("shape"),
        Tensor::new(vec![grid, width], cols).expect("shape"),
    )
}

impl UnderstandingExpert {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.width;
        let patch = Linear::new(store, rng, "und.patch", cfg.features, d, true, 1.0);
        let (rows, cols) = grid_position_tables(cfg.grid, d);
        let row_pos = store.add("und.row_pos", rows);
        let col_pos = store.add("und.col_pos", cols);
        let token_emb = store.add("und.token_emb", normal_tensor(rng, &[cfg.vocab, d], 1.0));
        let instr_pos = store.add("und.instr_pos", normal_tensor(rng, &[cfg.instruction_len, d], 0.5));
        let state_x = store.add("und.state_x", normal_tensor(rng, &[cfg.state_bins, d], 1.0));
        let state_y = store.add("und.state_y", normal_tensor(rng, &[cfg.state_bins, d], 1.0));
        let state_grip = store.add("und.state_grip", normal_tensor(rng, &[2, d], 1.0));
        let blocks = (0..cfg.layers)
            .map(|l| EncoderBlock::new(store, rng, &format!("und.block{l}"), d, cfg.heads, cfg.mlp_hidden))
            .collect();
        UnderstandingExpert {
            patch,
            row_pos,
            col_pos,
            token_emb,
            instr_pos,
            state_x,
            state_y,
            state_grip,
            blocks,
        }
    }

    /// Token sequence `[visual; instruction; state]`.
    pub fn embed(&self, t: &mut Tape, store: &ParamStore, cfg: &ModelConfig, input: &ModelInput) -> Result<Var> {
        let nv = cfg.visual_tokens();
        if input.visual.shape() != [nv, cfg.features] {
            return Err(Error::Dimension {
                op: "embed_inputs",
                left: input.visual.shape().to_vec(),
                right: vec![nv, cfg.features],
            });
        }
        if input.tokens.len() != cfg.instruction_len {
            return Err(Error::Dimension {
                op: "embed_inputs",
                left: vec![input.tokens.len()],
                right: vec![cfg.instruction_len],
            });
        }
        let x = t.constant(input.visual.clone());
        let visual = self.patch.forward(t, store, x)?;
        let row_idx: Vec<usize> = (0..nv).map(|i| i / cfg.grid).collect();
        let col_idx: Vec<usize> = (0..nv).map(|i| i % cfg.grid).collect();
        let rp = bind(t, store, self.row_pos);
        let rp = t.gather_rows(rp, &row_idx)?;
        let cp = bind(t, store, self.col_pos);
        let cp = t.gather_rows(cp, &col_idx)?;
        let visual = t.add(visual, rp)?;
        let visual = t.add(visual, cp)?;

        let table = bind(t, store, self.token_emb);
        let instr = t.gather_rows(table, &input.tokens)?;
        let ip = bind(t, store, self.instr_pos);
        let instr = t.add(instr, ip)?;

        let [bx, by, grip] = state_bins(input.state, cfg.state_bins);
        let sx = bind(t, store, self.state_x);
        let sx = t.gather_rows(sx, &[bx])?;
        let sy = bind(t, store, self.state_y);
        let sy = t.gather_rows(sy, &[by])?;
        let sg = bind(t, store, self.state_grip);
        let sg = t.gather_rows(sg, &[grip])?;
        let state = t.add(sx, sy)?;
        let state = t.add(state, sg)?;

        t.concat_rows(&[visual, instr, state])
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, cfg: &ModelConfig, input: &ModelInput) -> Result<Context> {
        let mut x = self.embed(t, store, cfg, input)?;
        let mut captured = None;
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(t, store, x)?;
            if l + 1 == cfg.align_layer {
                captured = Some(t.slice_rows(x, 0, cfg.visual_tokens())?);
            }
        }
        let tokens = t.layer_norm(x)?;
        Ok(Context {
            tokens,
            visual_at_align_layer: captured.expect("alignment layer within depth"),
        })
    }
}

/// Uniform 16-bin style quantization of `(x, y)` plus the gripper flag.
pub fn state_bins(state: [f64; 3], bins: usize) -> [usize; 3] {
    let q = |v: f64| ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
    [q(state[0]), q(state[1]), usize::from(state[2] >= 0.5)]
}
