//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass in execution order,
//! so the node list is topologically sorted by construction. [`Tape::backward`]
//! walks it in exact reverse, accumulating gradients into the parameters of a
//! [`ParamStore`] (and into requires-grad leaves held by the tape itself).
//!
//! Broadcasting is deliberately narrow: a binary op accepts operands of equal
//! shape, a one-element right operand (scalar broadcast) or a `[n]`/`[1, n]`
//! right operand against a `[m, n]` left operand (row broadcast). Anything
//! else is a shape error.

mod attention;
mod kernels;
mod params;

use std::collections::HashMap;
use std::sync::Arc;

pub use attention::AttnBlock;
pub use params::{Param, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{gemm, Layout};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    Floor(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor,
        count: usize,
    },
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    SumRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Arc<Vec<AttnBlock>>,
        probs: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Tensor>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which nothing requires gradients (inference).
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf created with [`Tape::leaf`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        let value = value.check_finite(name)?;
        Ok(self.push(value, op, needs_grad))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    // ── leaves ────────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push_checked("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Bring a stored parameter onto the tape. Repeated calls return the
    /// same node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let needs = store.requires_grad(id);
        self.nodes.push(Node {
            value: store.shared_value(id),
            op: Op::Param(id),
            needs_grad: needs && self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.val(x);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    // ── linear algebra ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must be rank 2, got {:?} and {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k) = av.dims2();
        let (k2, n) = bv.dims2();
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            Layout::rows(k),
            bv.data(),
            Layout::rows(n),
            0.0,
            &mut out,
        );
        let needs = self.ng(a) || self.ng(b);
        self.push_checked(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            needs,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a);
        if av.shape().len() != 2 {
            return Err(Error::shape("transpose", "operand must be rank 2"));
        }
        let (m, n) = av.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let needs = self.ng(a);
        self.push_checked("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(a), needs)
    }

    // ── elementwise ───────────────────────────────────────────────────

    fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
        if a.shape() == b.shape() {
            return Ok(Broadcast::Same);
        }
        if b.len() == 1 {
            return Ok(Broadcast::Scalar);
        }
        let b_is_row = matches!(b.shape(), [_] | [1, _]);
        if b_is_row && a.shape().len() == 2 && a.cols() == b.len() {
            return Ok(Broadcast::Row);
        }
        Err(Error::shape(
            op,
            format!("cannot broadcast {:?} against {:?}", b.shape(), a.shape()),
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        let kind = Self::broadcast_kind(name, &av, &bv)?;
        let bd = bv.data();
        let n = av.cols().max(1);
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Broadcast::Same => bd[i],
                    Broadcast::Scalar => bd[0],
                    Broadcast::Row => bd[i % n],
                };
                f(x, y)
            })
            .collect();
        let needs = self.ng(a) || self.ng(b);
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push_checked(name, value, make(a, b, kind), needs)
    }

    /// `a + b` with scalar or row broadcast of `b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    /// `a ⊙ b` with scalar or row broadcast of `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = self.val(a).map(f);
        let needs = self.ng(a);
        self.push_checked(name, value, op, needs)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.val(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, kernels::gelu, Op::Gelu(a))
    }

    /// Clamp into `[lo, hi]`; gradient flows only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// `max(a, floor)` elementwise; gradient flows where `a > floor`.
    pub fn floor_at(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("floor_at", a, |x| x.max(floor), Op::Floor(a, floor))
    }

    // ── normalisation & losses ────────────────────────────────────────

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a);
        let (_, n) = av.dims2();
        let mut out = av.data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                kernels::masked_softmax(row, None);
            }
        }
        let needs = self.ng(a);
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push_checked("softmax_rows", value, Op::SoftmaxRows(a), needs)
    }

    pub const LAYERNORM_EPS: f64 = 1e-5;

    /// Normalise the last axis to zero mean and unit variance, then apply
    /// `gain ⊙ x̂ + bias` (both `[d]`).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.val(x);
        let (m, d) = xv.dims2();
        if d < 2 {
            return Err(Error::shape("layernorm", "last axis must have at least 2 entries"));
        }
        let (gv, bv) = (self.val(gain), self.val(bias));
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape(
                "layernorm",
                format!("gain/bias must have {d} entries"),
            ));
        }
        let mut xhat = vec![0.0; m * d];
        let mut out = vec![0.0; m * d];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + Self::LAYERNORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let needs = self.ng(x) || self.ng(gain) || self.ng(bias);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let xhat = Tensor::new(vec![m, d], xhat)?;
        self.push_checked(
            "layernorm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits: [t, vocab]`, over positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.val(logits);
        let (t, vocab) = lv.dims2();
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("{t} logit rows but {} targets / {} mask", targets.len(), mask.len()),
            ));
        }
        if let Some(&bad) = targets.iter().zip(mask).find(|(&y, &m)| m && y >= vocab).map(|(y, _)| y) {
            return Err(Error::Invalid(format!("target {bad} outside vocab {vocab}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: mask selects no positions".into()));
        }
        let mut probs = lv.data().to_vec();
        let mut nll = 0.0;
        for i in 0..t {
            let row = &mut probs[i * vocab..(i + 1) * vocab];
            kernels::masked_softmax(row, None);
            if mask[i] {
                // log-sum-exp form avoids log(0) for confident wrong rows
                let logits_row = &lv.data()[i * vocab..(i + 1) * vocab];
                let max = logits_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits_row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                nll += lse - logits_row[targets[i]];
            }
        }
        let needs = self.ng(logits);
        let probs = Tensor::new(vec![t, vocab], probs)?;
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(nll / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            needs,
        )
    }

    // ── indexing & layout ─────────────────────────────────────────────

    /// Rows `ids` of `table: [n, d]`, stacked into `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.val(table);
        let (n, d) = tv.dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Invalid(format!("row index {id} outside table of {n} rows")));
            }
            out.extend_from_slice(tv.row_slice(id));
        }
        let needs = self.ng(table);
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push_checked("gather_rows", value, Op::GatherRows(table, ids.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.val(x);
        let (m, n) = xv.dims2();
        if start + len > m {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of {m}", start + len),
            ));
        }
        let value = Tensor::new(vec![len, n], xv.data()[start * n..(start + len) * n].to_vec())?;
        let needs = self.ng(x);
        self.push_checked("slice_rows", value, Op::SliceRows(x, start), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != n {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            m += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        let value = Tensor::new(vec![m, n], data)?;
        self.push_checked("concat_rows", value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.val(x);
        let (m, n) = xv.dims2();
        if start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} out of {n}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv.data()[i * n + start..i * n + start + len]);
        }
        let needs = self.ng(x);
        self.push_checked("slice_cols", Tensor::new(vec![m, len], out)?, Op::SliceCols(x, start), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map_or(0, |&p| self.value(p).rows());
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        let value = Tensor::new(vec![m, total], out)?;
        self.push_checked("concat_cols", value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(x).reshape(shape)?;
        let needs = self.ng(x);
        self.push_checked("reshape", value, Op::Reshape(x), needs)
    }

    // ── reductions ────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).data().iter().sum();
        let needs = self.ng(x);
        self.push_checked("sum", Tensor::scalar(s), Op::SumAll(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Invalid("mean of empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums: `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let (_, n) = xv.dims2();
        let mut out = vec![0.0; n];
        if n > 0 {
            for row in xv.data().chunks(n) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let needs = self.ng(x);
        self.push_checked("sum_rows", Tensor::new(vec![1, n], out)?, Op::SumRows(x), needs)
    }

    // ── attention ─────────────────────────────────────────────────────

    /// Masked multi-head scaled dot-product attention.
    ///
    /// `q: [tq, d]`, `k, v: [tk, d]`, `d = heads · d_head`. Each block
    /// attends a contiguous run of query rows over an explicit list of key
    /// rows (repeats allowed); query rows outside every block produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Arc<Vec<AttnBlock>>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let (out, probs) = attention::forward(&qv, &kv, &vv, heads, &blocks)?;
        let needs = self.ng(q) || self.ng(k) || self.ng(v);
        self.push_checked(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            },
            needs,
        )
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Accumulate d(loss)/d(x) into every reachable parameter that requires
    /// gradients and every requires-grad leaf of this tape. Repeated calls
    /// add to the existing buffers.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        if !root.needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                },
                Op::Param(id) => store.accumulate_grad(*id, &g),
                op => {
                    let contributions = self.local_grads(op, &node.value, &g)?;
                    for (var, contribution) in contributions {
                        if !self.nodes[var.0].needs_grad {
                            continue;
                        }
                        match &mut grads[var.0] {
                            Some(acc) => acc.add_assign(&contribution),
                            slot => *slot = Some(contribution),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of one op: `(input, dL/d input)` pairs.
    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let like = |v: Var, data: Vec<f64>| -> Result<Tensor> {
            Tensor::new(self.value(v).shape().to_vec(), data)
        };
        let elementwise = |a: Var, f: &dyn Fn(usize) -> f64| -> Result<Vec<(Var, Tensor)>> {
            let data = (0..g.len()).map(|i| g.data()[i] * f(i)).collect();
            Ok(vec![(a, like(a, data)?)])
        };
        match op {
            Op::Leaf | Op::Param(_) => Ok(vec![]),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2();
                let n = bv.cols();
                let mut res = Vec::with_capacity(2);
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), Layout::rows(n), bv.data(), Layout::transposed(n), 0.0, &mut ga);
                    res.push((*a, Tensor::new(vec![m, k], ga)?));
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), Layout::transposed(k), g.data(), Layout::rows(n), 0.0, &mut gb);
                    res.push((*b, Tensor::new(vec![k, n], gb)?));
                }
                Ok(res)
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g.data()[j * m + i];
                    }
                }
                Ok(vec![(*a, like(*a, ga)?)])
            }
            Op::Add(a, b, kind) => {
                let gb = reduce_broadcast(g, self.value(*b), *kind)?;
                Ok(vec![(*a, like(*a, g.data().to_vec())?), (*b, gb)])
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.cols().max(1);
                let bval = |i: usize| match kind {
                    Broadcast::Same => bv.data()[i],
                    Broadcast::Scalar => bv.data()[0],
                    Broadcast::Row => bv.data()[i % n],
                };
                let ga: Vec<f64> = (0..g.len()).map(|i| g.data()[i] * bval(i)).collect();
                let gab = Tensor::new(
                    av.shape().to_vec(),
                    g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                )?;
                let gb = reduce_broadcast(&gab, bv, *kind)?;
                Ok(vec![(*a, like(*a, ga)?), (*b, gb)])
            }
            Op::Neg(a) => elementwise(*a, &|_| -1.0),
            Op::Scale(a, c) => elementwise(*a, &|_| *c),
            Op::AddScalar(a) => elementwise(*a, &|_| 1.0),
            Op::Tanh(a) => elementwise(*a, &|i| 1.0 - out.data()[i] * out.data()[i]),
            Op::Exp(a) => elementwise(*a, &|i| out.data()[i]),
            Op::Log(a) => {
                let x = self.value(*a);
                elementwise(*a, &|i| 1.0 / x.data()[i])
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                elementwise(*a, &|i| kernels::gelu_grad(x.data()[i]))
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                elementwise(*a, &|i| {
                    let v = x.data()[i];
                    if v >= *lo && v <= *hi {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::Floor(a, floor) => {
                let x = self.value(*a);
                elementwise(*a, &|i| if x.data()[i] > *floor { 1.0 } else { 0.0 })
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = out.dims2();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let y = &out.data()[i * n..(i + 1) * n];
                    let gy = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[i * n + j] = y[j] * (gy[j] - dot);
                    }
                }
                Ok(vec![(*a, like(*a, ga)?)])
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, d) = xhat.dims2();
                let gv = self.value(*gain);
                let mut gx = vec![0.0; m * d];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for i in 0..m {
                    let gy = &g.data()[i * d..(i + 1) * d];
                    let xh = &xhat.data()[i * d..(i + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gy[j] * gv.data()[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                        ggain[j] += gy[j] * xh[j];
                        gbias[j] += gy[j];
                    }
                    let scale = inv_std[i] / d as f64;
                    for j in 0..d {
                        let dxh = gy[j] * gv.data()[j];
                        gx[i * d + j] = scale * (d as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                Ok(vec![
                    (*x, like(*x, gx)?),
                    (*gain, like(*gain, ggain)?),
                    (*bias, like(*bias, gbias)?),
                ])
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let (t, vocab) = probs.dims2();
                let scale = g.item() / *count as f64;
                let mut gl = vec![0.0; t * vocab];
                for i in 0..t {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..vocab {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        gl[i * vocab + j] = scale * (probs.data()[i * vocab + j] - onehot);
                    }
                }
                Ok(vec![(*logits, like(*logits, gl)?)])
            }
            Op::GatherRows(table, ids) => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut gt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g.data()[r * d + j];
                    }
                }
                Ok(vec![(*table, like(*table, gt)?)])
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                gx[start * n..start * n + g.len()].copy_from_slice(g.data());
                Ok(vec![(*x, like(*x, gx)?)])
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.value(p).len();
                    res.push((p, like(p, g.data()[offset..offset + len].to_vec())?));
                    offset += len;
                }
                Ok(res)
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (m, n) = xv.dims2();
                let len = g.cols();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                Ok(vec![(*x, like(*x, gx)?)])
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2();
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    res.push((p, like(p, gp)?));
                    offset += w;
                }
                Ok(res)
            }
            Op::Reshape(x) => Ok(vec![(*x, like(*x, g.data().to_vec())?)]),
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                Ok(vec![(*x, like(*x, vec![g.item(); n])?)])
            }
            Op::SumRows(x) => {
                let (m, n) = self.value(*x).dims2();
                let mut gx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    gx.extend_from_slice(g.data());
                }
                Ok(vec![(*x, like(*x, gx)?)])
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => {
                let (gq, gk, gv) = attention::backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    blocks,
                    probs,
                    g,
                )?;
                Ok(vec![(*q, gq), (*k, gk), (*v, gv)])
            }
        }
    }
}

/// Sum `g` back down to the shape of a broadcast right operand.
fn reduce_broadcast(g: &Tensor, b: &Tensor, kind: Broadcast) -> Result<Tensor> {
    match kind {
        Broadcast::Same => Ok(g.clone()),
        Broadcast::Scalar => Tensor::new(b.shape().to_vec(), vec![g.data().iter().sum()]),
        Broadcast::Row => {
            let n = b.len();
            let mut out = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::new(b.shape().to_vec(), out)
        }
    }
}

#[cfg(test)]
mod tests;
