//! Action expert: predicts the flow vector field for a noisy action chunk,
//! attending bidirectionally among action tokens and across to the context.

use rand::Rng;

use super::layers::{bind, sinusoid, Attention, FeedForward, Linear};
use super::params::{normal_tensor, ParamStore};
use super::ModelConfig;
use crate::error::Result;
use crate::numerics::{ParamId, Tape, Tensor, Var};

/// Flow time is scaled before the sinusoidal embedding so that `[0, 1]`
/// spans many periods of the fastest frequency.
const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug)]
struct ActionBlock {
    self_attn: Attention,
    cross_attn: Attention,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub(crate) struct ActionExpert {
    input: Linear,
    time: Linear,
    positions: ParamId,
    blocks: Vec<ActionBlock>,
    head: Linear,
}

/// Cross-attention keys and values of one context, one pair per block.
#[derive(Clone, Debug)]
pub struct ContextCache {
    kv: Vec<(Var, Var)>,
}

impl ActionExpert {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.action_width;
        let input = Linear::new(store, rng, "act.input", 2, d, true, 1.0);
        let time = Linear::new(store, rng, "act.time", d, d, true, 1.0);
        let positions = store.add("act.positions", normal_tensor(rng, &[cfg.horizon, d], 0.5));
        let blocks = (0..cfg.action_layers)
            .map(|l| {
                let name = format!("act.block{l}");
                ActionBlock {
                    self_attn: Attention::new(store, rng, &format!("{name}.self"), d, d, d, cfg.action_heads),
                    cross_attn: Attention::new(store, rng, &format!("{name}.cross"), d, cfg.width, d, cfg.action_heads),
                    ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, cfg.action_mlp_hidden),
                }
            })
            .collect();
        let head = Linear::new(store, rng, "act.head", d, 2, true, 0.5);
        ActionExpert {
            input,
            time,
            positions,
            blocks,
            head,
        }
    }

    pub fn cache(&self, t: &mut Tape, store: &ParamStore, context: Var) -> Result<ContextCache> {
        let kv = self
            .blocks
            .iter()
            .map(|b| b.cross_attn.keys_values(t, store, context))
            .collect::<Result<_>>()?;
        Ok(ContextCache { kv })
    }

    /// Field prediction for `noisy` (`H × 2`) at flow time `tau`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, noisy: Var, tau: f64, cache: &ContextCache) -> Result<Var> {
        let d = store.get(self.positions).cols();
        let x = self.input.forward(t, store, noisy)?;
        let pos = bind(t, store, self.positions);
        let x = t.add(x, pos)?;
        let emb = t.constant(Tensor::new(vec![1, d], sinusoid(tau * TIME_SCALE, d, 10000.0))?);
        let temb = self.time.forward(t, store, emb)?;
        let mut x = t.add_row(x, temb)?;
        for (block, kv) in self.blocks.iter().zip(&cache.kv) {
            let n = t.layer_norm(x)?;
            let a = block.self_attn.self_attend(t, store, n)?;
            x = t.add(x, a)?;
            let n = t.layer_norm(x)?;
            let c = block.cross_attn.attend(t, store, n, *kv)?;
            x = t.add(x, c)?;
            let n = t.layer_norm(x)?;
            let f = block.ffn.forward(t, store, n)?;
            x = t.add(x, f)?;
        }
        let n = t.layer_norm(x)?;
        self.head.forward(t, store, n)
    }
}
