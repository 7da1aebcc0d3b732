//! Reverse-mode autodiff over a flat, append-only tape.
//!
//! Ops append nodes that only reference earlier nodes, so creation order is
//! a topological order and [`Tape::backward`] is a single reverse sweep.
//! Every op validates shapes and checks its output for non-finite values.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

/// Additive surrogate for minus infinity in masked softmax logits: large
/// enough that `exp` underflows to exactly 0, small enough to stay finite.
pub const MASK_NEG: f64 = -1e30;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    /// Broadcasts a 1 x n bias over every row of an m x n matrix.
    AddBias(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    ConcatCols(TensorId, TensorId),
    SliceCols(TensorId, usize),
    GatherRows(TensorId, Vec<usize>),
    Tanh(TensorId),
    Exp(TensorId),
    SoftmaxRows(TensorId),
    MaskedSoftmax(TensorId),
    MaskedLogSoftmax(TensorId, Vec<bool>),
    /// `out[dst] += src[s]` for every `(dst, s)` pair.
    SegmentSum {
        src: TensorId,
        pairs: Vec<(usize, usize)>,
    },
    MeanPoolRows(TensorId),
    SumAll(TensorId),
    Pick(TensorId, usize, usize),
    MinElem(TensorId, TensorId),
    ClampConst(TensorId, f64, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::MaskedLogSoftmax(..) => "masked_log_softmax",
            Op::SegmentSum { .. } => "segment_sum",
            Op::MeanPoolRows(..) => "mean_pool_rows",
            Op::SumAll(..) => "sum_all",
            Op::Pick(..) => "pick",
            Op::MinElem(..) => "min_elem",
            Op::ClampConst(..) => "clamp",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The recording tape. `n_params` parameter slots are declared up front;
/// gradients come back as one tensor per slot (zero for slots that never
/// touched the tape).
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
    param_shapes: Vec<Option<(usize, usize)>>,
}

impl Tape {
    pub fn new(n_params: usize) -> Self {
        Tape {
            nodes: Vec::new(),
            n_params,
            param_shapes: vec![None; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded tensor.
    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output of {} with shape {}x{}",
                op.name(),
                value.rows(),
                value.cols()
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<TensorId> {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<TensorId> {
        self.constant(Tensor::scalar(v))
    }

    /// Records parameter `slot`, cloning its current value.
    pub fn param(&mut self, slot: usize, value: &Tensor) -> Result<TensorId> {
        if slot >= self.n_params {
            return Err(Error::InvalidArgument(format!(
                "parameter slot {} out of range 0..{}",
                slot, self.n_params
            )));
        }
        self.param_shapes[slot] = Some(value.shape());
        self.push(value.clone(), Op::Param(slot))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Numeric(format!(
                "matmul shape mismatch: {}x{} . {}x{}",
                ar, ac, br, bc
            )));
        }
        let mut out = Tensor::zeros(ar, bc);
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..ar {
                for l in 0..ac {
                    let x = av.get(i, l);
                    if x == 0.0 {
                        continue;
                    }
                    for j in 0..bc {
                        out.data_mut()[i * bc + j] += x * bv.get(l, j);
                    }
                }
            }
        }
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                let v = self.value(a).get(i, j);
                out.set(j, i, v);
            }
        }
        self.push(out, Op::Transpose(a))
    }

    fn elementwise_check(&self, name: &str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            let (ar, ac) = self.shape(a);
            let (br, bc) = self.shape(b);
            return Err(Error::Numeric(format!(
                "{} shape mismatch: {}x{} vs {}x{}",
                name, ar, ac, br, bc
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_check("add", a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += v;
        }
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_check("sub", a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= v;
        }
        self.push(out, Op::Sub(a, b))
    }

    /// `a + bias` where `bias` is 1 x n and broadcasts over rows of a.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != ac {
            return Err(Error::Numeric(format!(
                "add_bias shape mismatch: {}x{} + {}x{}",
                ar, ac, br, bc
            )));
        }
        let mut out = self.value(a).clone();
        for i in 0..ar {
            for j in 0..ac {
                let v = out.get(i, j) + self.value(bias).get(0, j);
                out.set(i, j, v);
            }
        }
        self.push(out, Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_check("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= v;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(Error::Numeric(format!(
                "concat_cols row mismatch: {}x{} || {}x{}",
                ar, ac, br, bc
            )));
        }
        let mut out = Tensor::zeros(ar, ac + bc);
        for i in 0..ar {
            for j in 0..ac {
                let v = self.value(a).get(i, j);
                out.set(i, j, v);
            }
            for j in 0..bc {
                let v = self.value(b).get(i, j);
                out.set(i, ac + j, v);
            }
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Columns `c0..c1` of `a`.
    pub fn slice_cols(&mut self, a: TensorId, c0: usize, c1: usize) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        if c0 >= c1 || c1 > ac {
            return Err(Error::Numeric(format!(
                "slice_cols {}..{} out of range for {}x{}",
                c0, c1, ar, ac
            )));
        }
        let mut out = Tensor::zeros(ar, c1 - c0);
        for i in 0..ar {
            for j in c0..c1 {
                let v = self.value(a).get(i, j);
                out.set(i, j - c0, v);
            }
        }
        self.push(out, Op::SliceCols(a, c0))
    }

    /// Selects rows of `a` by index, in order (duplicates allowed).
    pub fn gather_rows(&mut self, a: TensorId, rows: Vec<usize>) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        if rows.iter().any(|&r| r >= ar) {
            return Err(Error::Numeric(format!(
                "gather_rows index out of range for {}x{}",
                ar, ac
            )));
        }
        let mut out = Tensor::zeros(rows.len(), ac);
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..ac {
                let v = self.value(a).get(r, j);
                out.set(i, j, v);
            }
        }
        self.push(out, Op::GatherRows(a, rows))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = libm::tanh(*v));
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = libm::exp(*v));
        self.push(out, Op::Exp(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(Error::Numeric("softmax over zero columns".into()));
        }
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row: Vec<f64> = (0..c).map(|j| self.value(a).get(i, j)).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| libm::exp(v - m)).collect();
            let s: f64 = exps.iter().sum();
            for j in 0..c {
                out.set(i, j, exps[j] / s);
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    fn mask_check(&self, name: &str, a: TensorId, mask: &[bool]) -> Result<()> {
        let (r, c) = self.shape(a);
        if mask.len() != r * c {
            return Err(Error::Numeric(format!(
                "{} mask length {} does not match {}x{}",
                name,
                mask.len(),
                r,
                c
            )));
        }
        for i in 0..r {
            if !mask[i * c..(i + 1) * c].iter().any(|&m| m) {
                return Err(Error::InvalidState(format!(
                    "{}: row {} has no unmasked entry",
                    name, i
                )));
            }
        }
        Ok(())
    }

    /// Row-wise softmax after adding [`MASK_NEG`] to masked-out logits.
    /// Masked positions come out exactly zero.
    pub fn masked_softmax(&mut self, a: TensorId, mask: Vec<bool>) -> Result<TensorId> {
        self.mask_check("masked_softmax", a, &mask)?;
        let (r, c) = self.shape(a);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row: Vec<f64> = (0..c)
                .map(|j| {
                    let v = self.value(a).get(i, j);
                    if mask[i * c + j] {
                        v
                    } else {
                        v + MASK_NEG
                    }
                })
                .collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| libm::exp(v - m)).collect();
            let s: f64 = exps.iter().sum();
            for j in 0..c {
                out.set(i, j, exps[j] / s);
            }
        }
        self.push(out, Op::MaskedSoftmax(a))
    }

    /// Row-wise log-softmax with the same additive masking; masked outputs
    /// sit near [`MASK_NEG`] and their probabilities underflow to zero.
    pub fn masked_log_softmax(&mut self, a: TensorId, mask: Vec<bool>) -> Result<TensorId> {
        self.mask_check("masked_log_softmax", a, &mask)?;
        let (r, c) = self.shape(a);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row: Vec<f64> = (0..c)
                .map(|j| {
                    let v = self.value(a).get(i, j);
                    if mask[i * c + j] {
                        v
                    } else {
                        v + MASK_NEG
                    }
                })
                .collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>());
            for j in 0..c {
                out.set(i, j, row[j] - lse);
            }
        }
        self.push(out, Op::MaskedLogSoftmax(a, mask))
    }

    /// Sums source rows into destination rows: `out[dst] += src[s]` per
    /// `(dst, s)` pair, with `out_rows` rows. The pair list order fixes the
    /// reduction order.
    pub fn segment_sum(
        &mut self,
        src: TensorId,
        pairs: Vec<(usize, usize)>,
        out_rows: usize,
    ) -> Result<TensorId> {
        let (sr, sc) = self.shape(src);
        if pairs.iter().any(|&(d, s)| d >= out_rows || s >= sr) {
            return Err(Error::Numeric(format!(
                "segment_sum index out of range for src {}x{}, out_rows {}",
                sr, sc, out_rows
            )));
        }
        let mut out = Tensor::zeros(out_rows, sc);
        for &(d, s) in &pairs {
            for j in 0..sc {
                let v = out.get(d, j) + self.value(src).get(s, j);
                out.set(d, j, v);
            }
        }
        self.push(out, Op::SegmentSum { src, pairs })
    }

    /// Column means over rows: m x n -> 1 x n.
    pub fn mean_pool_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::Numeric("mean_pool_rows over zero rows".into()));
        }
        let mut out = Tensor::zeros(1, c);
        for j in 0..c {
            let mut s = 0.0;
            for i in 0..r {
                s += self.value(a).get(i, j);
            }
            out.set(0, j, s / r as f64);
        }
        self.push(out, Op::MeanPoolRows(a))
    }

    /// Sum of all entries -> 1x1.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Selects entry `(r, c)` -> 1x1.
    pub fn pick(&mut self, a: TensorId, r: usize, c: usize) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        if r >= ar || c >= ac {
            return Err(Error::Numeric(format!(
                "pick ({}, {}) out of range for {}x{}",
                r, c, ar, ac
            )));
        }
        let v = self.value(a).get(r, c);
        self.push(Tensor::scalar(v), Op::Pick(a, r, c))
    }

    /// Elementwise minimum; gradient follows the smaller side (ties go to
    /// the first argument).
    pub fn min_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_check("min_elem", a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            if *v < *o {
                *o = *v;
            }
        }
        self.push(out, Op::MinElem(a, b))
    }

    /// Clamp into `[lo, hi]`; gradient passes inside the closed interval.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(lo, hi));
        self.push(out, Op::ClampConst(a, lo, hi))
    }

    /// Reverse sweep from a scalar loss; returns one gradient tensor per
    /// parameter slot (zeros for slots absent from the tape).
    pub fn backward(&mut self, loss: TensorId) -> Result<Vec<Tensor>> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got {}x{}",
                r, c
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|nd| Tensor::zeros(nd.value.rows(), nd.value.cols()))
            .collect();
        grads[loss.0].set(0, 0, 1.0);

        for idx in (0..n).rev() {
            // Take the node's gradient out to appease the borrow checker;
            // nothing downstream reads it again.
            let g = core::mem::replace(&mut grads[idx], Tensor::zeros(0, 0));
            match &self.nodes[idx].op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = g;
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ar, ac) = self.shape(*a);
                    let (_, bc) = self.shape(*b);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // dA = G . B^T
                    let mut ga = Tensor::zeros(ar, ac);
                    for i in 0..ar {
                        for l in 0..ac {
                            let mut s = 0.0;
                            for j in 0..bc {
                                s += g.get(i, j) * bv.get(l, j);
                            }
                            ga.data_mut()[i * ac + l] = s;
                        }
                    }
                    // dB = A^T . G
                    let mut gb = Tensor::zeros(ac, bc);
                    for l in 0..ac {
                        for j in 0..bc {
                            let mut s = 0.0;
                            for i in 0..ar {
                                s += av.get(i, l) * g.get(i, j);
                            }
                            gb.data_mut()[l * bc + j] = s;
                        }
                    }
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Transpose(a) => {
                    let (r, c) = g.shape();
                    let mut ga = Tensor::zeros(c, r);
                    for i in 0..r {
                        for j in 0..c {
                            ga.set(j, i, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate_neg(&mut grads[b.0], &g);
                }
                Op::AddBias(a, bias) => {
                    accumulate(&mut grads[a.0], &g);
                    let (r, c) = g.shape();
                    let gb = &mut grads[bias.0];
                    for j in 0..c {
                        let mut s = gb.get(0, j);
                        for i in 0..r {
                            s += g.get(i, j);
                        }
                        gb.set(0, j, s);
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let ga = &mut grads[a.0];
                    for (i, gv) in g.data().iter().enumerate() {
                        ga.data_mut()[i] += gv * bv.data()[i];
                    }
                    let gb = &mut grads[b.0];
                    for (i, gv) in g.data().iter().enumerate() {
                        gb.data_mut()[i] += gv * av.data()[i];
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    let ga = &mut grads[a.0];
                    for (i, gv) in g.data().iter().enumerate() {
                        ga.data_mut()[i] += gv * c;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (_, ac) = self.shape(*a);
                    let (r, total) = g.shape();
                    {
                        let ga = &mut grads[a.0];
                        for i in 0..r {
                            for j in 0..ac {
                                let v = ga.get(i, j) + g.get(i, j);
                                ga.set(i, j, v);
                            }
                        }
                    }
                    let gb = &mut grads[b.0];
                    for i in 0..r {
                        for j in ac..total {
                            let v = gb.get(i, j - ac) + g.get(i, j);
                            gb.set(i, j - ac, v);
                        }
                    }
                }
                Op::SliceCols(a, c0) => {
                    let c0 = *c0;
                    let (r, c) = g.shape();
                    let ga = &mut grads[a.0];
                    for i in 0..r {
                        for j in 0..c {
                            let v = ga.get(i, c0 + j) + g.get(i, j);
                            ga.set(i, c0 + j, v);
                        }
                    }
                }
                Op::GatherRows(a, rows) => {
                    let rows = rows.clone();
                    let (_, c) = g.shape();
                    let ga = &mut grads[a.0];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            let v = ga.get(r, j) + g.get(i, j);
                            ga.set(r, j, v);
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = self.nodes[idx].value.clone();
                    let ga = &mut grads[a.0];
                    for (i, gv) in g.data().iter().enumerate() {
                        let t = y.data()[i];
                        ga.data_mut()[i] += gv * (1.0 - t * t);
                    }
                }
                Op::Exp(a) => {
                    let y = self.nodes[idx].value.clone();
                    let ga = &mut grads[a.0];
                    for (i, gv) in g.data().iter().enumerate() {
                        ga.data_mut()[i] += gv * y.data()[i];
                    }
                }
                Op::SoftmaxRows(a) | Op::MaskedSoftmax(a) => {
                    // dX = P o (G - rowsum(G o P)); masked entries have
                    // P = 0 so their logits receive exactly zero.
                    let p = self.nodes[idx].value.clone();
                    let (r, c) = p.shape();
                    let ga = &mut grads[a.0];
                    for i in 0..r {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += g.get(i, j) * p.get(i, j);
                        }
                        for j in 0..c {
                            let v = ga.get(i, j) + p.get(i, j) * (g.get(i, j) - dot);
                            ga.set(i, j, v);
                        }
                    }
                }
                Op::MaskedLogSoftmax(a, mask) => {
                    // dX = G - P o rowsum(G), with P the masked softmax.
                    let y = self.nodes[idx].value.clone();
                    let mask = mask.clone();
                    let (r, c) = y.shape();
                    let ga = &mut grads[a.0];
                    for i in 0..r {
                        let mut gsum = 0.0;
                        for j in 0..c {
                            gsum += g.get(i, j);
                        }
                        for j in 0..c {
                            if !mask[i * c + j] {
                                // p underflows to zero and the logit is
                                // disconnected through the mask constant.
                                continue;
                            }
                            let p = libm::exp(y.get(i, j));
                            let v = ga.get(i, j) + g.get(i, j) - p * gsum;
                            ga.set(i, j, v);
                        }
                    }
                }
                Op::SegmentSum { src, pairs } => {
                    let pairs = pairs.clone();
                    let (_, c) = g.shape();
                    let gs = &mut grads[src.0];
                    for &(d, s) in &pairs {
                        for j in 0..c {
                            let v = gs.get(s, j) + g.get(d, j);
                            gs.set(s, j, v);
                        }
                    }
                }
                Op::MeanPoolRows(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = &mut grads[a.0];
                    for i in 0..r {
                        for j in 0..c {
                            let v = ga.get(i, j) + g.get(0, j) / r as f64;
                            ga.set(i, j, v);
                        }
                    }
                }
                Op::SumAll(a) => {
                    let gv = g.get(0, 0);
                    let ga = &mut grads[a.0];
                    ga.data_mut().iter_mut().for_each(|x| *x += gv);
                }
                Op::Pick(a, r, c) => {
                    let (r, c) = (*r, *c);
                    let gv = g.get(0, 0);
                    let ga = &mut grads[a.0];
                    let v = ga.get(r, c) + gv;
                    ga.set(r, c, v);
                }
                Op::MinElem(a, b) => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    {
                        let ga = &mut grads[a.0];
                        for (i, gv) in g.data().iter().enumerate() {
                            if av.data()[i] <= bv.data()[i] {
                                ga.data_mut()[i] += gv;
                            }
                        }
                    }
                    let gb = &mut grads[b.0];
                    for (i, gv) in g.data().iter().enumerate() {
                        if bv.data()[i] < av.data()[i] {
                            gb.data_mut()[i] += gv;
                        }
                    }
                }
                Op::ClampConst(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let av = self.nodes[a.0].value.clone();
                    let ga = &mut grads[a.0];
                    for (i, gv) in g.data().iter().enumerate() {
                        let x = av.data()[i];
                        if x >= lo && x <= hi {
                            ga.data_mut()[i] += gv;
                        }
                    }
                }
            }
            grads[idx] = g;
        }

        // Collect per-slot parameter gradients.
        let mut out: Vec<Tensor> = self
            .param_shapes
            .iter()
            .map(|s| match s {
                Some((r, c)) => Tensor::zeros(*r, *c),
                None => Tensor::zeros(0, 0),
            })
            .collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(slot) = node.op {
                accumulate(&mut out[slot], &grads[idx]);
            }
        }
        Ok(out)
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn accumulate_neg(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d -= s;
    }
}
