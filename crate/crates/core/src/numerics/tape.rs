//! Reverse-mode differentiation over whole tensors.
//!
//! Every operation appends a node holding its output and enough of its inputs
//! to replay the adjoint. [`Tape::backward`] walks the record in reverse,
//! hands out gradients for every leaf that asked for one, and clears the
//! record so the next forward pass starts fresh.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{add_into, axpy, gemm, gemm_view, normal_cdf, normal_pdf, softmax_in_place, View};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon added to the variance under the square root in [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Rows whose L2 norm falls below this are rejected by [`Tape::cosine_rows`].
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a trainable tensor in a parameter table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { x: usize, row: usize },
    Scale { x: usize, factor: f64 },
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Softmax { x: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<f64> },
    Gelu { x: usize },
    Cosine { a: usize, b: usize, na: Vec<f64>, nb: Vec<f64> },
    Resize { x: usize, hs: usize, ws: usize, ht: usize, wt: usize },
    Gather { table: usize, idx: Vec<usize> },
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    Reshape { x: usize },
    Sum { x: usize },
    Mean { x: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    leaves: HashMap<usize, Tensor>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of a leaf created with `requires_grad`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.leaves.get(&var.idx)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }
}

/// Record of the primitive operations of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn two_d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Source coordinate and blend weight for align-corners resampling.
fn resample_coord(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = if dst > 1 {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    } else {
        (src - 1) as f64 / 2.0
    };
    let lo = (pos.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::usage("variable is not part of the current record"));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v).expect("stale variable")].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Input whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Binds a trainable parameter; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(value.clone(), Op::Leaf { param: Some(id) }, true);
        self.params.insert(id, v);
        v
    }

    /// Binds a parameter as a constant; no gradient is recorded for it.
    pub fn frozen(&mut self, value: &Tensor) -> Var {
        self.constant(value.clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k) = two_d("matmul", ta).map_err(|_| shape_err("matmul", ta, tb))?;
        let (r, c) = two_d("matmul", tb).map_err(|_| shape_err("matmul", ta, tb))?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, 0.0, &mut out);
        let rg = self.rg(ia) || self.rg(ib);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            t,
            Op::MatMul {
                a: ia,
                b: ib,
                trans_b,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, usize, usize)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Sub(ia, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Mul(ia, ib), rg))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir) = (self.check(x)?, self.check(row)?);
        let (tx, tr) = (&self.nodes[ix].value, &self.nodes[ir].value);
        let cols = tx.cols();
        if tr.numel() != cols {
            return Err(shape_err("add_row", tx, tr));
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            add_into(chunk, tr.data());
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(ix) || self.rg(ir);
        Ok(self.push(t, Op::AddRow { x: ix, row: ir }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let data = tx.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Scale { x: ix, factor }, rg))
    }

    /// Per-row standardization over the last axis, no affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let d = tx.cols();
        if d < 2 || tx.shape().is_empty() {
            return Err(Error::Degenerate {
                op: "layer_norm",
                detail: format!("feature width {d} < 2"),
            });
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = tx.row(r);
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(xr) {
                *o = (v - mean) * s;
            }
            inv_std.push(s);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::LayerNorm { x: ix, inv_std }, rg))
    }

    /// Row-wise softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        if !tx.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let d = tx.cols();
        let mut out = tx.data().to_vec();
        out.chunks_mut(d).for_each(softmax_in_place);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Softmax { x: ix }, rg))
    }

    /// Unmasked multi-head scaled dot-product attention.
    ///
    /// `q` is `Nq×W`, `k` and `v` are `Nk×W`; head `h` uses columns
    /// `[h·W/heads, (h+1)·W/heads)` and every query attends to every key.
    /// Equivalent to slicing heads, `softmax(q·kᵀ/√dh)·v` per head and
    /// concatenating, without materializing the intermediates on the record.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (tq, tk, tv) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
        let (nq, w) = two_d("attention", tq)?;
        let (nk, wk) = two_d("attention", tk)?;
        if wk != w || tv.shape() != tk.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        if heads == 0 || w % heads != 0 || nk == 0 {
            return Err(Error::Degenerate {
                op: "attention",
                detail: format!("width {w} with {heads} heads over {nk} keys"),
            });
        }
        if !tq.is_finite() || !tk.is_finite() {
            return Err(Error::NonFinite { op: "attention" });
        }
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * w];
        let full = View::cols_of(nq, nk, 0, nk);
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            let qh = View::cols_of(nq, w, h * dh, dh);
            let kh = View::cols_of(nk, w, h * dh, dh);
            gemm_view(scale, tq.data(), qh, tk.data(), kh.t(), 0.0, p, full);
            p.chunks_mut(nk).for_each(softmax_in_place);
            let vh = View::cols_of(nk, w, h * dh, dh);
            gemm_view(1.0, p, full, tv.data(), vh, 0.0, &mut out, View::cols_of(nq, w, h * dh, dh));
        }
        let t = Tensor::new(vec![nq, w], out)?;
        let rg = self.rg(iq) || self.rg(ik) || self.rg(iv);
        Ok(self.push(
            t,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let data = tx.data().iter().map(|&v| v * normal_cdf(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Gelu { x: ix }, rg))
    }

    /// Per-row cosine similarity of two `N×D` tensors, giving shape `[N]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() || ta.shape().len() != 2 {
            return Err(shape_err("cosine_rows", ta, tb));
        }
        let n = ta.rows();
        let mut out = Vec::with_capacity(n);
        let mut na = Vec::with_capacity(n);
        let mut nb = Vec::with_capacity(n);
        for r in 0..n {
            let (xa, xb) = (ta.row(r), tb.row(r));
            let a2 = xa.iter().map(|v| v * v).sum::<f64>().sqrt();
            let b2 = xb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if a2 < COSINE_NORM_FLOOR || b2 < COSINE_NORM_FLOOR {
                return Err(Error::DegenerateNorm {
                    op: "cosine_rows",
                    row: r,
                });
            }
            let dot: f64 = xa.iter().zip(xb).map(|(p, q)| p * q).sum();
            out.push(dot / (a2 * b2));
            na.push(a2);
            nb.push(b2);
        }
        let t = Tensor::new(vec![n], out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Cosine { a: ia, b: ib, na, nb }, rg))
    }

    /// Align-corners bilinear resampling of an `Hs×Ws×D` grid to `Ht×Wt×D`.
    pub fn bilinear_resize(&mut self, x: Var, ht: usize, wt: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        if tx.shape().len() != 3 || ht == 0 || wt == 0 || tx.shape()[0] == 0 || tx.shape()[1] == 0
        {
            return Err(Error::Dimension {
                op: "bilinear_resize",
                left: tx.shape().to_vec(),
                right: vec![ht, wt],
            });
        }
        let (hs, ws, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let src = tx.data();
        let mut out = vec![0.0; ht * wt * d];
        for ti in 0..ht {
            let (y0, y1, fy) = resample_coord(ti, hs, ht);
            for tj in 0..wt {
                let (x0, x1, fx) = resample_coord(tj, ws, wt);
                let at = |y: usize, x: usize| &src[(y * ws + x) * d..(y * ws + x + 1) * d];
                let (a, b, c, e) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                let dst = &mut out[(ti * wt + tj) * d..(ti * wt + tj + 1) * d];
                // nested lerps keep constant fields and grid-aligned samples exact
                for ch in 0..d {
                    let top = a[ch] + fx * (b[ch] - a[ch]);
                    let bottom = c[ch] + fx * (e[ch] - c[ch]);
                    dst[ch] = top + fy * (bottom - top);
                }
            }
        }
        let t = Tensor::new(vec![ht, wt, d], out)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Resize { x: ix, hs, ws, ht, wt }, rg))
    }

    /// Selects rows of a `V×D` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let tt = &self.nodes[it].value;
        let (v, d) = two_d("gather_rows", tt)?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::Vocabulary { token: i, vocab: v });
            }
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        let rg = self.rg(it);
        Ok(self.push(
            t,
            Op::Gather {
                table: it,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|p| self.check(*p)).collect::<Result<_>>()?;
        let first = &self.nodes[idx[0]].value;
        let (_, d) = two_d("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let t = &self.nodes[i].value;
            let (r, c) = two_d("concat_rows", t)?;
            if c != d {
                return Err(shape_err("concat_rows", first, t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        let t = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(t, Op::ConcatRows(idx), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let (r, d) = two_d("slice_rows", tx)?;
        if start + len > r {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: tx.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let t = Tensor::new(vec![len, d], tx.data()[start * d..(start + len) * d].to_vec())?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::SliceRows { x: ix, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|p| self.check(*p)).collect::<Result<_>>()?;
        let first = &self.nodes[idx[0]].value;
        let (rows, _) = two_d("concat_cols", first)?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let t = &self.nodes[i].value;
            let (r, c) = two_d("concat_cols", t)?;
            if r != rows {
                return Err(shape_err("concat_cols", first, t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&i, &w) in idx.iter().zip(&widths) {
            let src = self.nodes[i].value.data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols(idx), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let (rows, c) = two_d("slice_cols", tx)?;
        if start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: tx.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.data()[r * c + start..r * c + start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::SliceCols { x: ix, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.nodes[ix].value.clone();
        let mut t = t.reshape(shape.to_vec())?;
        t.clear_grad();
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Reshape { x: ix }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().sum();
        let rg = self.rg(ix);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: ix }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(ix);
        Ok(self.push(Tensor::scalar(s), Op::Mean { x: ix }, rg))
    }

    /// Drops the record without computing gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.id = fresh_id();
    }

    /// Replays adjoints from a scalar `loss` and clears the record.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        if !self.nodes[il].value.is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        let nodes = std::mem::take(&mut self.nodes);
        let tape = self.id;
        self.clear();

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(il + 1);
        grads.resize_with(il + 1, || None);
        grads[il] = Some(vec![1.0]);

        let mut leaves = HashMap::new();
        let mut params = Vec::new();

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            propagate(&nodes, i, &g, &mut grads)?;
            if let Op::Leaf { param } = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match param {
                    Some(p) => params.push((p, t)),
                    None => {
                        leaves.insert(i, t);
                    }
                }
            }
        }
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients {
            tape,
            leaves,
            params,
        })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let n = nodes[i].value.numel();
    Some(grads[i].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf { .. } => {}
        &Op::MatMul { a, b, trans_b } => {
            let (ta, tb) = (&nodes[a].value, &nodes[b].value);
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = node.value.shape()[1];
            if let Some(ga) = slot(grads, nodes, a) {
                // trans_b: c = a·bᵀ with b stored n×k, so ga = g·b
                gemm(m, n, k, g, false, tb.data(), !trans_b, 1.0, ga);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                if trans_b {
                    gemm(n, m, k, g, true, ta.data(), false, 1.0, gb);
                } else {
                    gemm(k, m, n, ta.data(), true, g, false, 1.0, gb);
                }
            }
        }
        &Op::Add(a, b) => {
            if let Some(ga) = slot(grads, nodes, a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                add_into(gb, g);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(ga) = slot(grads, nodes, a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                axpy(gb, -1.0, g);
            }
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
            if let Some(ga) = slot(grads, nodes, a) {
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(vb) {
                    *o += gi * y;
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for ((o, gi), x) in gb.iter_mut().zip(g).zip(va) {
                    *o += gi * x;
                }
            }
        }
        &Op::AddRow { x, row } => {
            if let Some(gx) = slot(grads, nodes, x) {
                add_into(gx, g);
            }
            let cols = nodes[row].value.numel();
            if let Some(gr) = slot(grads, nodes, row) {
                for chunk in g.chunks(cols) {
                    add_into(gr, chunk);
                }
            }
        }
        &Op::Scale { x, factor } => {
            if let Some(gx) = slot(grads, nodes, x) {
                axpy(gx, factor, g);
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let y = node.value.data();
            let d = node.value.cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                for (r, s) in inv_std.iter().enumerate() {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((o, gi), yi) in gx[r * d..(r + 1) * d].iter_mut().zip(gr).zip(yr) {
                        *o += s * (gi - mg - yi * mgy);
                    }
                }
            }
        }
        &Op::Softmax { x } => {
            let y = node.value.data();
            let d = node.value.cols();
            if let Some(gx) = slot(grads, nodes, x) {
                for ((o, gr), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((oi, gi), yi) in o.iter_mut().zip(gr).zip(yr) {
                        *oi += yi * (gi - dot);
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (q, k, v, heads) = (*q, *k, *v, *heads);
            let (tq, tk, tv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
            let (nq, w) = (tq.shape()[0], tq.shape()[1]);
            let nk = tk.shape()[0];
            let dh = w / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let full = View::cols_of(nq, nk, 0, nk);
            let mut dp = vec![0.0; nq * nk];
            for h in 0..heads {
                let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                let gh = View::cols_of(nq, w, h * dh, dh);
                let kv_h = View::cols_of(nk, w, h * dh, dh);
                if let Some(gv) = slot(grads, nodes, v) {
                    gemm_view(1.0, p, full.t(), g, gh, 1.0, gv, kv_h);
                }
                if !nodes[q].requires_grad && !nodes[k].requires_grad {
                    continue;
                }
                gemm_view(1.0, g, gh, tv.data(), kv_h.t(), 0.0, &mut dp, full);
                for (drow, prow) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (d, pi) in drow.iter_mut().zip(prow) {
                        *d = pi * (*d - dot);
                    }
                }
                if let Some(gq) = slot(grads, nodes, q) {
                    gemm_view(scale, &dp, full, tk.data(), kv_h, 1.0, gq, gh);
                }
                if let Some(gk) = slot(grads, nodes, k) {
                    gemm_view(scale, &dp, full.t(), tq.data(), gh, 1.0, gk, kv_h);
                }
            }
        }
        &Op::Gelu { x } => {
            let xs = nodes[x].value.data();
            if let Some(gx) = slot(grads, nodes, x) {
                for ((o, gi), v) in gx.iter_mut().zip(g).zip(xs) {
                    *o += gi * (normal_cdf(*v) + v * normal_pdf(*v));
                }
            }
        }
        Op::Cosine { a, b, na, nb } => {
            let (a, b) = (*a, *b);
            let (ta, tb) = (&nodes[a].value, &nodes[b].value);
            let d = ta.cols();
            let cos = node.value.data();
            for (which, other, own_n, other_n, own) in
                [(a, tb, na, nb, ta), (b, ta, nb, na, tb)]
            {
                if let Some(gs) = slot(grads, nodes, which) {
                    for r in 0..cos.len() {
                        let inv = 1.0 / (own_n[r] * other_n[r]);
                        let self_coef = cos[r] / (own_n[r] * own_n[r]);
                        let (xo, xs) = (other.row(r), own.row(r));
                        for ((o, p), q) in gs[r * d..(r + 1) * d].iter_mut().zip(xo).zip(xs) {
                            *o += g[r] * (p * inv - self_coef * q);
                        }
                    }
                }
            }
        }
        &Op::Resize { x, hs, ws, ht, wt } => {
            let d = node.value.cols();
            if let Some(gx) = slot(grads, nodes, x) {
                for ti in 0..ht {
                    let (y0, y1, fy) = resample_coord(ti, hs, ht);
                    for tj in 0..wt {
                        let (x0, x1, fx) = resample_coord(tj, ws, wt);
                        let w = [
                            ((y0, x0), (1.0 - fy) * (1.0 - fx)),
                            ((y0, x1), (1.0 - fy) * fx),
                            ((y1, x0), fy * (1.0 - fx)),
                            ((y1, x1), fy * fx),
                        ];
                        let src = &g[(ti * wt + tj) * d..(ti * wt + tj + 1) * d];
                        for ((sy, sx), wgt) in w {
                            if wgt != 0.0 {
                                axpy(&mut gx[(sy * ws + sx) * d..(sy * ws + sx + 1) * d], wgt, src);
                            }
                        }
                    }
                }
            }
        }
        Op::Gather { table, idx } => {
            let d = node.value.cols();
            if let Some(gt) = slot(grads, nodes, *table) {
                for (r, &row) in idx.iter().enumerate() {
                    add_into(&mut gt[row * d..(row + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                if let Some(gp) = slot(grads, nodes, p) {
                    add_into(gp, &g[off..off + n]);
                }
                off += n;
            }
        }
        &Op::SliceRows { x, start } => {
            let d = node.value.cols();
            if let Some(gx) = slot(grads, nodes, x) {
                add_into(&mut gx[start * d..start * d + g.len()], g);
            }
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.shape()[0];
            let total = node.value.shape()[1];
            let mut off = 0;
            for &p in parts {
                let w = nodes[p].value.shape()[1];
                if let Some(gp) = slot(grads, nodes, p) {
                    for r in 0..rows {
                        add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                    }
                }
                off += w;
            }
        }
        &Op::SliceCols { x, start } => {
            let (rows, len) = (node.value.shape()[0], node.value.shape()[1]);
            let c = nodes[x].value.shape()[1];
            if let Some(gx) = slot(grads, nodes, x) {
                for r in 0..rows {
                    add_into(&mut gx[r * c + start..r * c + start + len], &g[r * len..(r + 1) * len]);
                }
            }
        }
        &Op::Reshape { x } => {
            if let Some(gx) = slot(grads, nodes, x) {
                add_into(gx, g);
            }
        }
        &Op::Sum { x } => {
            if let Some(gx) = slot(grads, nodes, x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        &Op::Mean { x } => {
            let n = nodes[x].value.numel() as f64;
            if let Some(gx) = slot(grads, nodes, x) {
                gx.iter_mut().for_each(|v| *v += g[0] / n);
            }
        }
    }
    Ok(())
}
