//! Tape-recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep.
//!
//! Broadcasting for `add`/`mul`/`broadcast_to` follows NumPy rules: shapes
//! are aligned from the right and a dimension of 1 (or a missing dimension)
//! stretches to match the other operand.
//!
//! Adjoints of leaves accumulate across repeated `backward` calls; interior
//! adjoints are recomputed on every call.

use std::borrow::Cow;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::params::{ParamId, ParamStore};
use super::rng::Rng;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Bcast {
    Same,
    /// `b` repeats over the leading axes of `a`.
    RepeatB,
    /// `a` repeats over the leading axes of `b`.
    RepeatA,
    General { ia: Vec<usize>, ib: Vec<usize> },
}

impl Bcast {
    fn for_each(&self, na: usize, nb: usize, nout: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Bcast::Same => (0..nout).for_each(|i| f(i, i, i)),
            Bcast::RepeatB => (0..nout).for_each(|i| f(i, i, i % nb)),
            Bcast::RepeatA => (0..nout).for_each(|i| f(i, i % na, i)),
            Bcast::General { ia, ib } => (0..nout).for_each(|i| f(i, ia[i], ib[i])),
        }
    }
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Flat input index for every flat output index.
fn broadcast_map(input: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let off = n - input.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..n).rev() {
        if i >= off {
            let d = input[i - off];
            strides[i] = if d == 1 { 0 } else { s };
            s *= d;
        }
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn plan_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    if a == b {
        return Ok((a.to_vec(), Bcast::Same));
    }
    let out = broadcast_shape(op, a, b)?;
    let (sa, sb) = (strip_leading_ones(a), strip_leading_ones(b));
    if out == a && out.ends_with(sb) {
        return Ok((out, Bcast::RepeatB));
    }
    if out == b && out.ends_with(sa) {
        return Ok((out, Bcast::RepeatA));
    }
    let ia = broadcast_map(a, &out);
    let ib = broadcast_map(b, &out);
    Ok((out, Bcast::General { ia, ib }))
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Rc<Bcast>),
    Mul(Var, Var, Rc<Bcast>),
    BroadcastTo(Var, Rc<Bcast>),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
    MatMul {
        a: Var,
        w: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Concat(Var, Var),
    Interleave(Var, Var),
    PairSwap(Var),
    Softmax(Var),
    Sigmoid(Var),
    Ln(Var),
    Sin(Var),
    Cos(Var),
    LeakyRelu(Var, f64),
    Silu(Var),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    MaskFill(Var, Rc<Vec<bool>>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Pow(..) => "pow",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Concat(..) => "concat",
            Op::Interleave(..) => "interleave",
            Op::PairSwap(..) => "pair_swap",
            Op::Softmax(..) => "softmax",
            Op::Sigmoid(..) => "sigmoid",
            Op::Ln(..) => "ln",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Silu(..) => "silu",
            Op::Clamp(..) => "clamp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout(..) => "dropout",
            Op::Gather(..) => "gather",
            Op::MaskFill(..) => "mask_fill",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b, _) | Op::Mul(a, b, _) | Op::Concat(a, b) | Op::Interleave(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul { a, w, .. } => vec![*a, *w],
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BroadcastTo(x, _)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Pow(x, _)
            | Op::PairSwap(x)
            | Op::Softmax(x)
            | Op::Sigmoid(x)
            | Op::Ln(x)
            | Op::Sin(x)
            | Op::Cos(x)
            | Op::LeakyRelu(x, _)
            | Op::Silu(x)
            | Op::Clamp(x, _, _)
            | Op::Dropout(x, _)
            | Op::Gather(x, _)
            | Op::MaskFill(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumLast(x) => vec![*x],
        }
    }
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    adjoint: Option<Vec<f64>>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

/// One forward pass worth of recorded operations.
///
/// Parameter leaves borrow their values from a [`ParamStore`]; gradients are
/// read back with [`Graph::param_grads`] after [`Graph::backward`].
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
    strict: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            strict: false,
        }
    }

    /// In strict mode any op producing a NaN fails with [`Error::NonFinite`].
    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'p, [f64]>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            adjoint: None,
            requires_grad,
            param,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.strict && value.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant subgraphs keep no op record.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            adjoint: None,
            requires_grad,
            param: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable parameter leaf; repeated calls for one id return the same node.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let t = store.value(id);
        let v = self.push_leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), true, Some(id));
        self.param_vars.insert(id, v);
        v
    }

    /// `param` when `trainable`, otherwise `frozen_param`.
    pub fn bind(&mut self, store: &'p ParamStore, id: ParamId, trainable: bool) -> Var {
        if trainable {
            self.param(store, id)
        } else {
            self.frozen_param(store, id)
        }
    }

    /// Parameter leaf that takes no gradient (evaluation mode).
    pub fn frozen_param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let t = store.value(id);
        let v = self.push_leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), false, None);
        self.param_vars.insert(id, v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(t.into_data()), false, None)
    }

    /// Free-standing leaf, e.g. an input whose gradient a test wants to read.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(t.into_data()), requires_grad, None)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn adjoint(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].adjoint.as_deref()
    }

    /// Gradients of every parameter leaf that received one.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.adjoint.as_deref()?)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---- elementwise -------------------------------------------------------

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let n = &self.nodes[x.0];
        let value = n.value.iter().map(|&v| f(v)).collect();
        let shape = n.shape.clone();
        self.push(shape, value, op)
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let name = if mul { "mul" } else { "add" };
        let (shape, plan) = plan_broadcast(name, &self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; numel(&shape)];
        plan.for_each(av.len(), bv.len(), out.len(), |i, ia, ib| {
            out[i] = if mul { av[ia] * bv[ib] } else { av[ia] + bv[ib] };
        });
        let plan = Rc::new(plan);
        let op = if mul { Op::Mul(a, b, plan) } else { Op::Add(a, b, plan) };
        self.push(shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let (out_shape, plan) = plan_broadcast("broadcast_to", &xs, shape)?;
        if out_shape != shape {
            return Err(Error::Shape {
                op: "broadcast_to",
                lhs: xs,
                rhs: shape.to_vec(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; numel(shape)];
        plan.for_each(xv.len(), out.len(), out.len(), |i, ia, _| out[i] = xv[ia]);
        self.push(out_shape, out, Op::BroadcastTo(x, Rc::new(plan)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.map_unary(x, |v| v.powf(p), Op::Pow(x, p))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, f64::ln, Op::Ln(x))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, f64::cos, Op::Cos(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.map_unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map_unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[..., k] · w[k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ash, wsh) = (&self.nodes[a.0].shape, &self.nodes[w.0].shape);
        if wsh.len() != 2 || ash.is_empty() || *ash.last().unwrap() != wsh[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ash.clone(),
                rhs: wsh.clone(),
            });
        }
        let (k, n) = (wsh[0], wsh[1]);
        let m = numel(ash) / k.max(1);
        let mut shape = ash.clone();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.nodes[a.0].value, &self.nodes[w.0].value, &mut out, m, k, n);
        self.push(shape, out, Op::MatMul { a, w, m, k, n })
    }

    /// Batched product over identical leading axes:
    /// `a[.., m, k] · b[.., k, n]`, or `a · bᵀ` with `b[.., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let bad = || Error::Shape {
            op: "bmm",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.len() < 2 || ash.len() != bsh.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(bad());
        }
        let r = ash.len();
        let (m, k) = (ash[r - 2], ash[r - 1]);
        let (kb, n) = if trans_b {
            (bsh[r - 1], bsh[r - 2])
        } else {
            (bsh[r - 2], bsh[r - 1])
        };
        if kb != k {
            return Err(bad());
        }
        let batch = numel(&ash[..r - 2]);
        let mut shape = ash.clone();
        shape[r - 1] = n;
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        for t in 0..batch {
            let at = &av[t * m * k..(t + 1) * m * k];
            let bt = &bv[t * k * n..(t + 1) * k * n];
            let ct = &mut out[t * m * n..(t + 1) * m * n];
            if trans_b {
                gemm_nt(at, bt, ct, m, k, n);
            } else {
                gemm_nn(at, bt, ct, m, k, n);
            }
        }
        self.push(
            shape,
            out,
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
        )
    }

    // ---- structural --------------------------------------------------------

    fn split_last(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        let w = s.last().copied().unwrap_or(1);
        (numel(s) / w.max(1), w)
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ash.is_empty() || ash.len() != bsh.len() || ash[..ash.len() - 1] != bsh[..bsh.len() - 1] {
            return Err(Error::Shape {
                op: "concat",
                lhs: ash.clone(),
                rhs: bsh.clone(),
            });
        }
        let (rows, p) = self.split_last(a);
        let (_, q) = self.split_last(b);
        let mut shape = ash.clone();
        *shape.last_mut().unwrap() = p + q;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        self.push(shape, out, Op::Concat(a, b))
    }

    /// `[.., n]`, `[.., n]` -> `[.., 2n]` with `out[2i] = a[i]`, `out[2i+1] = b[i]`.
    pub fn interleave(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ash != bsh || ash.is_empty() {
            return Err(Error::Shape {
                op: "interleave",
                lhs: ash.clone(),
                rhs: bsh.clone(),
            });
        }
        let mut shape = ash.clone();
        *shape.last_mut().unwrap() *= 2;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Vec::with_capacity(av.len() * 2);
        for (x, y) in av.iter().zip(bv.iter()) {
            out.push(*x);
            out.push(*y);
        }
        self.push(shape, out, Op::Interleave(a, b))
    }

    /// Maps each pair `(x0, x1)` of the last axis to `(-x1, x0)`.
    pub fn pair_swap(&mut self, x: Var) -> Result<Var> {
        let (_, w) = self.split_last(x);
        if w % 2 != 0 {
            let s = self.nodes[x.0].shape.clone();
            return Err(Error::Shape {
                op: "pair_swap",
                lhs: s,
                rhs: vec![2],
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for (o, i) in out.chunks_exact_mut(2).zip(xv.chunks_exact(2)) {
            o[0] = -i[1];
            o[1] = i[0];
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::PairSwap(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = &self.nodes[x.0].shape;
        if numel(xs) != numel(shape) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: xs.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[x.0].value.to_vec();
        self.push(shape.to_vec(), value, Op::Reshape(x))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: xs,
                rhs: axes.to_vec(),
            });
        }
        let r = xs.len();
        let mut in_strides = vec![1usize; r];
        for i in (0..r.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * xs[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = numel(&xs);
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; r];
        let mut flat = 0usize;
        for _ in 0..total {
            src.push(flat);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                flat += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                flat -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        let xv = &self.nodes[x.0].value;
        let out = src.iter().map(|&s| xv[s]).collect();
        self.push(out_shape, out, Op::Permute(x, src))
    }

    /// Row lookup: `table[N, w]`, `ids` -> `[ids.len(), w]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.nodes[table.0].shape.clone();
        if ts.len() != 2 {
            return Err(Error::Shape {
                op: "gather",
                lhs: ts,
                rhs: vec![ids.len()],
            });
        }
        let (rows, w) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "gather",
                lhs: ts,
                rhs: vec![bad],
            });
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            out.extend_from_slice(&tv[i * w..(i + 1) * w]);
        }
        self.push(vec![ids.len(), w], out, Op::Gather(table, ids.to_vec()))
    }

    // ---- reductions and normalization -------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![], vec![s], Op::Mean(x))
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let (rows, w) = self.split_last(x);
        let xv = &self.nodes[x.0].value;
        let out = (0..rows).map(|r| xv[r * w..(r + 1) * w].iter().sum()).collect();
        let mut shape = self.nodes[x.0].shape.clone();
        shape.pop();
        self.push(shape, out, Op::SumLast(x))
    }

    /// Softmax over the last axis. Rows that are entirely `-inf` give zeros.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, w) = self.split_last(x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * w..(r + 1) * w];
            let o = &mut out[r * w..(r + 1) * w];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - mx).exp();
                z += *oi;
            }
            o.iter_mut().for_each(|oi| *oi /= z);
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Softmax(x))
    }

    /// Set entries where `mask` is true to `-inf`; `mask` has the shape of `x`.
    pub fn mask_fill(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if mask.len() != xv.len() {
            return Err(Error::Shape {
                op: "mask_fill",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let out = xv
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { f64::NEG_INFINITY } else { v })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::MaskFill(x, mask))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, w) = self.split_last(x);
        for p in [gamma, beta] {
            if self.nodes[p.0].shape != [w] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * w..(r + 1) * w];
            let mu = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let h = (row[j] - mu) * rs;
                xhat[r * w + j] = h;
                out[r * w + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`. Without an rng
    /// (evaluation) or with `p == 0` this is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
        let Some(rng) = rng else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::config(format!("dropout rate {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let xv = &self.nodes[x.0].value;
        let out = xv.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Dropout(x, mask))
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Populate adjoints of everything `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = &self.nodes[loss.0].shape;
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.adjoint = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        {
            let n = &mut self.nodes[loss.0];
            n.adjoint.get_or_insert_with(|| vec![0.0])[0] += 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].adjoint.take() else { continue };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            backprop(&node.op, &node.value, &grad, before);
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn take_adj(nodes: &mut [Node], v: Var) -> Option<Vec<f64>> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.len();
    Some(n.adjoint.take().unwrap_or_else(|| vec![0.0; len]))
}

fn put_adj(nodes: &mut [Node], v: Var, adj: Vec<f64>) {
    nodes[v.0].adjoint = Some(adj);
}

/// Apply `f(adjoint, nodes)` to the adjoint of `v` if it takes gradients.
fn with_adj(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
    if let Some(mut adj) = take_adj(nodes, v) {
        f(&mut adj, nodes);
        put_adj(nodes, v, adj);
    }
}

fn backprop(op: &Op, out: &[f64], g: &[f64], nodes: &mut [Node]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b, plan) => {
            let (na, nb) = (nodes[a.0].value.len(), nodes[b.0].value.len());
            with_adj(nodes, *a, |da, _| plan.for_each(na, nb, g.len(), |i, ia, _| da[ia] += g[i]));
            with_adj(nodes, *b, |db, _| plan.for_each(na, nb, g.len(), |i, _, ib| db[ib] += g[i]));
        }
        Op::Mul(a, b, plan) => {
            let (na, nb) = (nodes[a.0].value.len(), nodes[b.0].value.len());
            with_adj(nodes, *a, |da, ns| {
                let bv = &ns[b.0].value;
                plan.for_each(na, nb, g.len(), |i, ia, ib| da[ia] += g[i] * bv[ib]);
            });
            with_adj(nodes, *b, |db, ns| {
                let av = &ns[a.0].value;
                plan.for_each(na, nb, g.len(), |i, ia, ib| db[ib] += g[i] * av[ia]);
            });
        }
        Op::BroadcastTo(x, plan) => {
            let nx = nodes[x.0].value.len();
            with_adj(nodes, *x, |dx, _| plan.for_each(nx, g.len(), g.len(), |i, ia, _| dx[ia] += g[i]));
        }
        Op::Scale(x, c) => with_adj(nodes, *x, |dx, _| {
            dx.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi)
        }),
        Op::AddScalar(x) | Op::Reshape(x) => with_adj(nodes, *x, |dx, _| {
            dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)
        }),
        Op::Pow(x, p) => with_adj(nodes, *x, |dx, ns| {
            for ((d, gi), xi) in dx.iter_mut().zip(g).zip(ns[x.0].value.iter()) {
                *d += gi * p * xi.powf(p - 1.0);
            }
        }),
        Op::MatMul { a, w, m, k, n } => {
            with_adj(nodes, *a, |da, ns| gemm_nt(g, &ns[w.0].value, da, *m, *n, *k));
            with_adj(nodes, *w, |dw, ns| gemm_tn(&ns[a.0].value, g, dw, *m, *k, *n));
        }
        Op::Bmm {
            a,
            b,
            trans_b,
            batch,
            m,
            k,
            n,
        } => {
            let (m, k, n) = (*m, *k, *n);
            with_adj(nodes, *a, |da, ns| {
                let bv = &ns[b.0].value;
                for t in 0..*batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let bt = &bv[t * k * n..(t + 1) * k * n];
                    let dt = &mut da[t * m * k..(t + 1) * m * k];
                    if *trans_b {
                        gemm_nn(gt, bt, dt, m, n, k);
                    } else {
                        gemm_nt(gt, bt, dt, m, n, k);
                    }
                }
            });
            with_adj(nodes, *b, |db, ns| {
                let av = &ns[a.0].value;
                for t in 0..*batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let at = &av[t * m * k..(t + 1) * m * k];
                    let dt = &mut db[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        gemm_tn(gt, at, dt, m, n, k);
                    } else {
                        gemm_tn(at, gt, dt, m, k, n);
                    }
                }
            });
        }
        Op::Concat(a, b) => {
            let p = *nodes[a.0].shape.last().unwrap();
            let q = *nodes[b.0].shape.last().unwrap();
            let rows = g.len() / (p + q);
            with_adj(nodes, *a, |da, _| {
                for r in 0..rows {
                    for j in 0..p {
                        da[r * p + j] += g[r * (p + q) + j];
                    }
                }
            });
            with_adj(nodes, *b, |db, _| {
                for r in 0..rows {
                    for j in 0..q {
                        db[r * q + j] += g[r * (p + q) + p + j];
                    }
                }
            });
        }
        Op::Interleave(a, b) => {
            with_adj(nodes, *a, |da, _| {
                da.iter_mut().zip(g.chunks_exact(2)).for_each(|(d, gi)| *d += gi[0])
            });
            with_adj(nodes, *b, |db, _| {
                db.iter_mut().zip(g.chunks_exact(2)).for_each(|(d, gi)| *d += gi[1])
            });
        }
        Op::PairSwap(x) => with_adj(nodes, *x, |dx, _| {
            for (d, gi) in dx.chunks_exact_mut(2).zip(g.chunks_exact(2)) {
                d[0] += gi[1];
                d[1] -= gi[0];
            }
        }),
        Op::Softmax(x) => with_adj(nodes, *x, |dx, ns| {
            let w = *ns[x.0].shape.last().unwrap();
            for r in 0..g.len() / w {
                let (y, gr) = (&out[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                let s: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..w {
                    dx[r * w + j] += y[j] * (gr[j] - s);
                }
            }
        }),
        Op::Sigmoid(x) => with_adj(nodes, *x, |dx, _| {
            for ((d, gi), y) in dx.iter_mut().zip(g).zip(out) {
                *d += gi * y * (1.0 - y);
            }
        }),
        Op::Ln(x) => with_adj(nodes, *x, |dx, ns| {
            for ((d, gi), xi) in dx.iter_mut().zip(g).zip(ns[x.0].value.iter()) {
                *d += gi / xi;
            }
        }),
        Op::Sin(x) => with_adj(nodes, *x, |dx, ns| {
            for ((d, gi), xi) in dx.iter_mut().zip(g).zip(ns[x.0].value.iter()) {
                *d += gi * xi.cos();
            }
        }),
        Op::Cos(x) => with_adj(nodes, *x, |dx, ns| {
            for ((d, gi), xi) in dx.iter_mut().zip(g).zip(ns[x.0].value.iter()) {
                *d -= gi * xi.sin();
            }
        }),
        Op::LeakyRelu(x, slope) => with_adj(nodes, *x, |dx, ns| {
            for ((d, gi), xi) in dx.iter_mut().zip(g).zip(ns[x.0].value.iter()) {
                *d += if *xi > 0.0 { *gi } else { slope * gi };
            }
        }),
        Op::Silu(x) => with_adj(nodes, *x, |dx, ns| {
            for ((d, gi), xi) in dx.iter_mut().zip(g).zip(ns[x.0].value.iter()) {
                let s = sigmoid(*xi);
                *d += gi * (s + xi * s * (1.0 - s));
            }
        }),
        Op::Clamp(x, lo, hi) => with_adj(nodes, *x, |dx, ns| {
            for ((d, gi), xi) in dx.iter_mut().zip(g).zip(ns[x.0].value.iter()) {
                if *xi >= *lo && *xi <= *hi {
                    *d += gi;
                }
            }
        }),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let w = nodes[gamma.0].value.len();
            let rows = g.len() / w;
            with_adj(nodes, *x, |dx, ns| {
                let gv = &ns[gamma.0].value;
                let mut dh = vec![0.0; w];
                for r in 0..rows {
                    let gr = &g[r * w..(r + 1) * w];
                    let hr = &xhat[r * w..(r + 1) * w];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..w {
                        dh[j] = gr[j] * gv[j];
                        m1 += dh[j];
                        m2 += dh[j] * hr[j];
                    }
                    m1 /= w as f64;
                    m2 /= w as f64;
                    for j in 0..w {
                        dx[r * w + j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                    }
                }
            });
            with_adj(nodes, *gamma, |dgam, _| {
                for r in 0..rows {
                    for j in 0..w {
                        dgam[j] += g[r * w + j] * xhat[r * w + j];
                    }
                }
            });
            with_adj(nodes, *beta, |dbeta, _| {
                for r in 0..rows {
                    for j in 0..w {
                        dbeta[j] += g[r * w + j];
                    }
                }
            });
        }
        Op::Dropout(x, mask) => with_adj(nodes, *x, |dx, _| {
            for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                *d += gi * m;
            }
        }),
        Op::Gather(table, ids) => with_adj(nodes, *table, |dt, ns| {
            let w = ns[table.0].shape[1];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..w {
                    dt[id * w + j] += g[r * w + j];
                }
            }
        }),
        Op::MaskFill(x, mask) => with_adj(nodes, *x, |dx, _| {
            for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask.iter()) {
                if !m {
                    *d += gi;
                }
            }
        }),
        Op::Permute(x, src) => with_adj(nodes, *x, |dx, _| {
            for (gi, &s) in g.iter().zip(src) {
                dx[s] += gi;
            }
        }),
        Op::Sum(x) => with_adj(nodes, *x, |dx, _| dx.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(x) => with_adj(nodes, *x, |dx, _| {
            let c = g[0] / dx.len().max(1) as f64;
            dx.iter_mut().for_each(|d| *d += c)
        }),
        Op::SumLast(x) => with_adj(nodes, *x, |dx, ns| {
            let w = *ns[x.0].shape.last().unwrap();
            for (r, gi) in g.iter().enumerate() {
                dx[r * w..(r + 1) * w].iter_mut().for_each(|d| *d += gi);
            }
        }),
    }
}
