//! Linear maps, multi-head attention and feed-forward blocks on the tape.

use rand::Rng;

use super::params::{normal_tensor, ParamStore};
use crate::error::Result;
use crate::numerics::{ParamId, Tape, Tensor, Var};

pub(crate) fn bind(t: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
    t.param(id, store.get(id))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Weights drawn with std `gain/√d_in`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            normal_tensor(rng, &[d_in, d_out], gain / (d_in as f64).sqrt()),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![d_out])));
        Linear { w, b }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = bind(t, store, self.w);
        let y = t.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = bind(t, store, b);
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Query/key/value/output projections. Keys carry no bias: a key bias only
/// shifts every score of a query row equally and cancels in the softmax.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_query: usize,
        d_source: usize,
        width: usize,
        heads: usize,
    ) -> Self {
        Attention {
            q: Linear::new(store, rng, &format!("{name}.q"), d_query, width, true, 1.0),
            k: Linear::new(store, rng, &format!("{name}.k"), d_source, width, false, 1.0),
            v: Linear::new(store, rng, &format!("{name}.v"), d_source, width, true, 1.0),
            o: Linear::new(store, rng, &format!("{name}.o"), width, d_query, true, 0.5),
            heads,
        }
    }

    /// Keys and values for a fixed source sequence, reusable across queries.
    pub fn keys_values(&self, t: &mut Tape, store: &ParamStore, source: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(t, store, source)?, self.v.forward(t, store, source)?))
    }

    pub fn attend(&self, t: &mut Tape, store: &ParamStore, x: Var, kv: (Var, Var)) -> Result<Var> {
        let q = self.q.forward(t, store, x)?;
        let mixed = t.attention(q, kv.0, kv.1, self.heads)?;
        self.o.forward(t, store, mixed)
    }

    pub fn self_attend(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let kv = self.keys_values(t, store, x)?;
        self.attend(t, store, x, kv)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), width, hidden, true, 1.0),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, width, true, 0.5),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(t, store, x)?;
        let h = t.gelu(h)?;
        self.down.forward(t, store, h)
    }
}

/// Pre-norm residual block: `x + attn(norm x)`, then `x + ffn(norm x)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderBlock {
    pub attn: Attention,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, heads: usize, hidden: usize) -> Self {
        EncoderBlock {
            attn: Attention::new(store, rng, &format!("{name}.attn"), width, width, width, heads),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), width, hidden),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = t.layer_norm(x)?;
        let a = self.attn.self_attend(t, store, n)?;
        let x = t.add(x, a)?;
        let n = t.layer_norm(x)?;
        let f = self.ffn.forward(t, store, n)?;
        t.add(x, f)
    }
}

/// Sinusoids at geometric frequencies `base^(−2k/dim)`, interleaved as
/// `(sin, cos)` pairs.
pub fn sinusoid(position: f64, dim: usize, base: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = base.powf(-2.0 * k as f64 / dim as f64);
        let (s, c) = (position * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}
