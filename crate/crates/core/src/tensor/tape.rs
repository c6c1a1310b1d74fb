//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every primitive application appends a node holding its output value and
//! enough saved state to run the chain rule. Nodes only ever reference
//! earlier nodes, so creation order is a topological order and
//! [`Tape::backward`] is a single reverse sweep visiting each node once.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Node id on a tape.
pub type Id = usize;

/// Handle to a tape node. Cheap to copy; all arithmetic goes through the
/// owning [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    AddScalar(Id),
    MulScalar(Id, f64),
    /// `a [..., k] x b [k, n]`; leading dims of `a` are flattened.
    Matmul(Id, Id),
    /// Batched `a [B, m, k] x b [B, k, n]`.
    Bmm(Id, Id),
    /// Batched `a [B, m, k] x b [B, n, k]^T`.
    BmmNT(Id, Id),
    /// `a [..., c] + bias [c]` broadcast over rows.
    AddRows(Id, Id),
    /// Per-row scaling by a constant vector (one factor per last-dim row).
    ScaleRows(Id, Rc<Vec<f64>>),
    /// Add a constant buffer of identical element count.
    AddConst(Id),
    /// Elementwise multiply by a constant buffer of identical count.
    MulConst(Id, Rc<Vec<f64>>),
    Gelu(Id),
    Tanh(Id),
    Sigmoid(Id),
    Exp(Id),
    Ln(Id),
    Sin(Id),
    Cos(Id),
    Powi(Id, i32),
    Clamp(Id, f64, f64),
    Relu(Id),
    Min2(Id, Id),
    Max2(Id, Id),
    /// Elementwise smooth-L1 with the given transition point.
    Huber(Id, f64),
    Sum(Id),
    /// Softmax over the last dim with an element mask; masked outputs are 0
    /// and all-masked rows yield all-zero rows.
    MaskedSoftmax(Id, Rc<Vec<bool>>),
    /// Log-softmax over the last dim.
    LogSoftmax(Id),
    /// Post-norm layer norm over the last dim: `(x - mean) * rstd * gain + bias`.
    /// Saved per-row `mean` and `rstd` from the forward pass.
    LayerNorm { a: Id, gain: Id, bias: Id, mean: Vec<f64>, rstd: Vec<f64> },
    /// Row gather: `out[r] = a[idx[r]]`, `idx[r] < 0` gives a zero row.
    GatherRows { a: Id, idx: Rc<Vec<i64>>, row_len: usize },
    /// Flat element gather; `idx < 0` gives 0.
    GatherElems { a: Id, idx: Rc<Vec<i64>> },
    /// Per-channel k x k sliding max over a `[rows, cols, ch]` grid;
    /// out-of-bounds and holes read `fill`. Saved argmax source per output
    /// element (-1 when the fill value won).
    MaxPool2d { a: Id, argsrc: Vec<i64> },
    /// Per-channel max over row segments of `a [n, c]`; saved argmax row
    /// per output element.
    SegmentMax { a: Id, argrow: Vec<u32> },
    /// Column concat of `a [n, ca]` and `b [n, cb]`.
    ConcatCols(Id, Id),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of primitive applications in topological order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients for every node that required them, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `var`, if it required one and was reached.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zero-filled when the loss did not reach it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; var.tape.shape_of(var.id).iter().product()],
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a constant (no gradient).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Record a differentiable leaf (a parameter or checked input).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let inputs = self.op_inputs(&op);
        let mut nodes = self.nodes.borrow_mut();
        let rg = requires_grad || inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node { value, op, requires_grad: rg });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn op_inputs(&self, op: &Op) -> Vec<Id> {
        use Op::*;
        match op {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) | Bmm(a, b)
            | BmmNT(a, b) | AddRows(a, b) | Min2(a, b) | Max2(a, b) | ConcatCols(a, b) => {
                vec![*a, *b]
            }
            AddScalar(a) | MulScalar(a, _) | ScaleRows(a, _) | AddConst(a) | MulConst(a, _)
            | Gelu(a)
            | Tanh(a) | Sigmoid(a) | Exp(a) | Ln(a) | Sin(a) | Cos(a) | Powi(a, _)
            | Clamp(a, _, _) | Relu(a) | Huber(a, _) | Sum(a) | MaskedSoftmax(a, _)
            | LogSoftmax(a) | GatherRows { a, .. } | GatherElems { a, .. }
            | MaxPool2d { a, .. } | SegmentMax { a, .. } => vec![*a],
            LayerNorm { a, gain, bias, .. } => vec![*a, *gain, *bias],
        }
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape_of(&self, id: Id) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn with_values<R>(&self, ids: &[Id], f: impl FnOnce(&[&Tensor]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let ts: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
        f(&ts)
    }

    /// Reverse sweep from a scalar loss. Errors if `loss` is not a scalar.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.accumulate(&nodes, &mut grads, node, &g);
            // Leaves keep their gradient; interior nodes may keep it too
            // (useful for attention inspection), but memory matters more.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(
        &self,
        nodes: &[Node],
        grads: &mut [Option<Vec<f64>>],
        node: &Node,
        g: &[f64],
    ) {
        use Op::*;

        let add_into = |grads: &mut [Option<Vec<f64>>], target: Id, contrib: &dyn Fn(&mut Vec<f64>)| {
            if !nodes[target].requires_grad {
                return;
            }
            let buf = grads[target]
                .get_or_insert_with(|| vec![0.0; nodes[target].value.numel()]);
            contrib(buf);
        };

        match &node.op {
            Leaf => {}
            Add(a, b) => {
                add_into(grads, *a, &|buf| for (o, gi) in buf.iter_mut().zip(g) { *o += gi });
                add_into(grads, *b, &|buf| for (o, gi) in buf.iter_mut().zip(g) { *o += gi });
            }
            Sub(a, b) => {
                add_into(grads, *a, &|buf| for (o, gi) in buf.iter_mut().zip(g) { *o += gi });
                add_into(grads, *b, &|buf| for (o, gi) in buf.iter_mut().zip(g) { *o -= gi });
            }
            Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.values(), nodes[*b].value.values());
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() { buf[i] += g[i] * bv[i] }
                });
                add_into(grads, *b, &|buf| {
                    for i in 0..buf.len() { buf[i] += g[i] * av[i] }
                });
            }
            Div(a, b) => {
                let (av, bv) = (nodes[*a].value.values(), nodes[*b].value.values());
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() { buf[i] += g[i] / bv[i] }
                });
                add_into(grads, *b, &|buf| {
                    for i in 0..buf.len() { buf[i] -= g[i] * av[i] / (bv[i] * bv[i]) }
                });
            }
            AddScalar(a) => {
                add_into(grads, *a, &|buf| for (o, gi) in buf.iter_mut().zip(g) { *o += gi });
            }
            MulScalar(a, s) => {
                add_into(grads, *a, &|buf| for (o, gi) in buf.iter_mut().zip(g) { *o += gi * s });
            }
            Matmul(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let m = av.numel() / k;
                add_into(grads, *a, &|buf| {
                    // ga = g [m,n] x b^T [n,k]
                    for i in 0..m {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for t in 0..n {
                                acc += g[i * n + t] * bv.values()[j * n + t];
                            }
                            buf[i * k + j] += acc;
                        }
                    }
                });
                add_into(grads, *b, &|buf| {
                    // gb = a^T [k,m] x g [m,n]
                    for i in 0..k {
                        for t in 0..m {
                            let aval = av.values()[t * k + i];
                            if aval == 0.0 { continue; }
                            for j in 0..n {
                                buf[i * n + j] += aval * g[t * n + j];
                            }
                        }
                    }
                });
            }
            Bmm(a, b) => {
                let (batch, m, k, n) = bmm_dims(&nodes[*a].value, &nodes[*b].value, false);
                let av = nodes[*a].value.values();
                let bv = nodes[*b].value.values();
                add_into(grads, *a, &|buf| {
                    for bi in 0..batch {
                        let (go, ao, bo) = (bi * m * n, bi * m * k, bi * k * n);
                        for i in 0..m {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for t in 0..n {
                                    acc += g[go + i * n + t] * bv[bo + j * n + t];
                                }
                                buf[ao + i * k + j] += acc;
                            }
                        }
                    }
                });
                add_into(grads, *b, &|buf| {
                    for bi in 0..batch {
                        let (go, ao, bo) = (bi * m * n, bi * m * k, bi * k * n);
                        for i in 0..k {
                            for t in 0..m {
                                let aval = av[ao + t * k + i];
                                if aval == 0.0 { continue; }
                                for j in 0..n {
                                    buf[bo + i * n + j] += aval * g[go + t * n + j];
                                }
                            }
                        }
                    }
                });
            }
            BmmNT(a, b) => {
                let (batch, m, k, n) = bmm_dims(&nodes[*a].value, &nodes[*b].value, true);
                let av = nodes[*a].value.values();
                let bv = nodes[*b].value.values();
                // out[bi] = A[bi] (m,k) x B[bi]^T (k,n); B is [n,k]
                add_into(grads, *a, &|buf| {
                    for bi in 0..batch {
                        let (go, ao, bo) = (bi * m * n, bi * m * k, bi * n * k);
                        for i in 0..m {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for t in 0..n {
                                    acc += g[go + i * n + t] * bv[bo + t * k + j];
                                }
                                buf[ao + i * k + j] += acc;
                            }
                        }
                    }
                });
                add_into(grads, *b, &|buf| {
                    for bi in 0..batch {
                        let (go, ao, bo) = (bi * m * n, bi * m * k, bi * n * k);
                        for t in 0..n {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += g[go + i * n + t] * av[ao + i * k + j];
                                }
                                buf[bo + t * k + j] += acc;
                            }
                        }
                    }
                });
            }
            AddRows(a, b) => {
                let c = nodes[*b].value.numel();
                add_into(grads, *a, &|buf| for (o, gi) in buf.iter_mut().zip(g) { *o += gi });
                add_into(grads, *b, &|buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % c] += gi;
                    }
                });
            }
            ScaleRows(a, scale) => {
                let c = nodes[*a].value.last_dim();
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * scale[i / c];
                    }
                });
            }
            AddConst(a) => {
                add_into(grads, *a, &|buf| for (o, gi) in buf.iter_mut().zip(g) { *o += gi });
            }
            MulConst(a, k) => {
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() { buf[i] += g[i] * k[i] }
                });
            }
            Gelu(a) => {
                let av = nodes[*a].value.values();
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * gelu_prime(av[i]);
                    }
                });
            }
            Tanh(a) => {
                let yv = node.value.values();
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() { buf[i] += g[i] * (1.0 - yv[i] * yv[i]) }
                });
            }
            Sigmoid(a) => {
                let yv = node.value.values();
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() { buf[i] += g[i] * yv[i] * (1.0 - yv[i]) }
                });
            }
            Exp(a) => {
                let yv = node.value.values();
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() { buf[i] += g[i] * yv[i] }
                });
            }
            Ln(a) => {
                let av = nodes[*a].value.values();
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() { buf[i] += g[i] / av[i] }
                });
            }
            Sin(a) => {
                let av = nodes[*a].value.values();
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() { buf[i] += g[i] * av[i].cos() }
                });
            }
            Cos(a) => {
                let av = nodes[*a].value.values();
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() { buf[i] -= g[i] * av[i].sin() }
                });
            }
            Powi(a, n) => {
                let av = nodes[*a].value.values();
                let n = *n;
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * f64::from(n) * av[i].powi(n - 1);
                    }
                });
            }
            Clamp(a, lo, hi) => {
                let av = nodes[*a].value.values();
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() {
                        if av[i] > *lo && av[i] < *hi {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Relu(a) => {
                let av = nodes[*a].value.values();
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() {
                        if av[i] > 0.0 { buf[i] += g[i] }
                    }
                });
            }
            Min2(a, b) => {
                let (av, bv) = (nodes[*a].value.values(), nodes[*b].value.values());
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() { if av[i] <= bv[i] { buf[i] += g[i] } }
                });
                add_into(grads, *b, &|buf| {
                    for i in 0..buf.len() { if av[i] > bv[i] { buf[i] += g[i] } }
                });
            }
            Max2(a, b) => {
                let (av, bv) = (nodes[*a].value.values(), nodes[*b].value.values());
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() { if av[i] >= bv[i] { buf[i] += g[i] } }
                });
                add_into(grads, *b, &|buf| {
                    for i in 0..buf.len() { if av[i] < bv[i] { buf[i] += g[i] } }
                });
            }
            Huber(a, delta) => {
                let av = nodes[*a].value.values();
                let d = *delta;
                add_into(grads, *a, &|buf| {
                    for i in 0..buf.len() {
                        let x = av[i];
                        buf[i] += g[i] * if x.abs() < d { x / d } else { x.signum() };
                    }
                });
            }
            Sum(a) => {
                add_into(grads, *a, &|buf| {
                    for o in buf.iter_mut() { *o += g[0] }
                });
            }
            MaskedSoftmax(a, mask) => {
                let p = node.value.values();
                let c = node.value.last_dim();
                add_into(grads, *a, &|buf| {
                    for r in 0..p.len() / c {
                        let o = r * c;
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += g[o + j] * p[o + j];
                        }
                        for j in 0..c {
                            if mask[o + j] {
                                buf[o + j] += p[o + j] * (g[o + j] - dot);
                            }
                        }
                    }
                });
            }
            LogSoftmax(a) => {
                let y = node.value.values();
                let c = node.value.last_dim();
                add_into(grads, *a, &|buf| {
                    for r in 0..y.len() / c {
                        let o = r * c;
                        let gsum: f64 = g[o..o + c].iter().sum();
                        for j in 0..c {
                            buf[o + j] += g[o + j] - y[o + j].exp() * gsum;
                        }
                    }
                });
            }
            LayerNorm { a, gain, bias, mean, rstd } => {
                let av = nodes[*a].value.values();
                let gv = nodes[*gain].value.values();
                let c = nodes[*gain].value.numel();
                add_into(grads, *bias, &|buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % c] += gi;
                    }
                });
                add_into(grads, *gain, &|buf| {
                    for (i, gi) in g.iter().enumerate() {
                        let r = i / c;
                        let xhat = (av[i] - mean[r]) * rstd[r];
                        buf[i % c] += gi * xhat;
                    }
                });
                add_into(grads, *a, &|buf| {
                    let rows = av.len() / c;
                    for r in 0..rows {
                        let o = r * c;
                        let mut m1 = 0.0; // mean of g*gain
                        let mut m2 = 0.0; // mean of g*gain*xhat
                        for j in 0..c {
                            let gg = g[o + j] * gv[j];
                            let xhat = (av[o + j] - mean[r]) * rstd[r];
                            m1 += gg;
                            m2 += gg * xhat;
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let gg = g[o + j] * gv[j];
                            let xhat = (av[o + j] - mean[r]) * rstd[r];
                            buf[o + j] += rstd[r] * (gg - m1 - xhat * m2);
                        }
                    }
                });
            }
            GatherRows { a, idx, row_len } => {
                add_into(grads, *a, &|buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        if src >= 0 {
                            let s = src as usize * row_len;
                            let d = r * row_len;
                            for j in 0..*row_len {
                                buf[s + j] += g[d + j];
                            }
                        }
                    }
                });
            }
            GatherElems { a, idx } => {
                add_into(grads, *a, &|buf| {
                    for (i, &src) in idx.iter().enumerate() {
                        if src >= 0 {
                            buf[src as usize] += g[i];
                        }
                    }
                });
            }
            MaxPool2d { a, argsrc } => {
                add_into(grads, *a, &|buf| {
                    for (i, &src) in argsrc.iter().enumerate() {
                        if src >= 0 {
                            buf[src as usize] += g[i];
                        }
                    }
                });
            }
            SegmentMax { a, argrow } => {
                let c = nodes[*a].value.last_dim();
                add_into(grads, *a, &|buf| {
                    for (i, &row) in argrow.iter().enumerate() {
                        buf[row as usize * c + i % c] += g[i];
                    }
                });
            }
            ConcatCols(a, b) => {
                let ca = nodes[*a].value.last_dim();
                let cb = nodes[*b].value.last_dim();
                add_into(grads, *a, &|buf| {
                    for r in 0..buf.len() / ca {
                        for j in 0..ca {
                            buf[r * ca + j] += g[r * (ca + cb) + j];
                        }
                    }
                });
                add_into(grads, *b, &|buf| {
                    for r in 0..buf.len() / cb {
                        for j in 0..cb {
                            buf[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                    }
                });
            }
        }
    }
}

fn bmm_dims(a: &Tensor, b: &Tensor, transposed: bool) -> (usize, usize, usize, usize) {
    let (sa, sb) = (a.shape(), b.shape());
    let batch = sa[0];
    let m = sa[1];
    let k = sa[2];
    let n = if transposed { sb[1] } else { sb[2] };
    (batch, m, k, n)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> Id {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unop(self, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Var<'t> {
        let value = self.tape.with_values(&[self.id], |ts| f(ts[0]));
        self.tape.push(value, op, false)
    }

    fn binop(self, other: Var<'t>, f: impl Fn(&Tensor, &Tensor) -> Tensor, op: Op) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let value = self.tape.with_values(&[self.id, other.id], |ts| f(ts[0], ts[1]));
        self.tape.push(value, op, false)
    }

    fn map_elems(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        self.unop(
            |t| Tensor::new(t.shape().to_vec(), t.values().iter().map(|&x| f(x)).collect()).unwrap(),
            op,
        )
    }

    fn zip_elems(self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        self.binop(other, |a, b| {
            debug_assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
            Tensor::new(
                a.shape().to_vec(),
                a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect(),
            )
            .unwrap()
        }, op)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.zip_elems(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.zip_elems(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.zip_elems(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.zip_elems(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.map_elems(|x| x + s, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        self.map_elems(|x| x * s, Op::MulScalar(self.id, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    /// `self [..., k] x w [k, n]`, leading dims flattened into rows.
    pub fn matmul(self, w: Var<'t>) -> Var<'t> {
        self.binop(w, |a, b| {
            let k = b.shape()[0];
            let n = b.shape()[1];
            assert_eq!(
                a.last_dim(),
                k,
                "matmul inner dims disagree: {:?} x {:?}",
                a.shape(),
                b.shape()
            );
            let m = a.numel() / k;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for t in 0..k {
                    let aval = a.values()[i * k + t];
                    if aval == 0.0 { continue; }
                    let brow = &b.values()[t * n..(t + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aval * brow[j];
                    }
                }
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, out).unwrap()
        }, Op::Matmul(self.id, w.id))
    }

    /// Batched matmul `[B, m, k] x [B, k, n]`.
    pub fn bmm(self, other: Var<'t>) -> Var<'t> {
        self.binop(other, |a, b| {
            let (batch, m, k, n) = bmm_dims(a, b, false);
            assert_eq!(b.shape()[0], batch);
            assert_eq!(b.shape()[1], k, "bmm inner dims disagree");
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let (ao, bo, oo) = (bi * m * k, bi * k * n, bi * m * n);
                for i in 0..m {
                    for t in 0..k {
                        let aval = a.values()[ao + i * k + t];
                        if aval == 0.0 { continue; }
                        for j in 0..n {
                            out[oo + i * n + j] += aval * b.values()[bo + t * n + j];
                        }
                    }
                }
            }
            Tensor::new(vec![batch, m, n], out).unwrap()
        }, Op::Bmm(self.id, other.id))
    }

    /// Batched matmul against a transposed right operand:
    /// `[B, m, k] x [B, n, k]^T -> [B, m, n]`.
    pub fn bmm_nt(self, other: Var<'t>) -> Var<'t> {
        self.binop(other, |a, b| {
            let (batch, m, k, n) = bmm_dims(a, b, true);
            assert_eq!(b.shape()[0], batch);
            assert_eq!(b.shape()[2], k, "bmm_nt inner dims disagree");
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let (ao, bo, oo) = (bi * m * k, bi * n * k, bi * m * n);
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for t in 0..k {
                            acc += a.values()[ao + i * k + t] * b.values()[bo + j * k + t];
                        }
                        out[oo + i * n + j] = acc;
                    }
                }
            }
            Tensor::new(vec![batch, m, n], out).unwrap()
        }, Op::BmmNT(self.id, other.id))
    }

    /// Broadcast-add a `[c]` bias over the rows of `[..., c]`.
    pub fn add_rows(self, bias: Var<'t>) -> Var<'t> {
        self.binop(bias, |a, b| {
            let c = b.numel();
            assert_eq!(a.last_dim(), c, "bias length mismatch");
            let mut out = a.values().to_vec();
            for (i, o) in out.iter_mut().enumerate() {
                *o += b.values()[i % c];
            }
            Tensor::new(a.shape().to_vec(), out).unwrap()
        }, Op::AddRows(self.id, bias.id))
    }

    /// Multiply each last-dim row by a constant factor (e.g. a validity mask).
    pub fn scale_rows(self, scale: Rc<Vec<f64>>) -> Var<'t> {
        let sc = scale.clone();
        self.unop(
            |t| {
                let c = t.last_dim();
                assert_eq!(t.numel() / c.max(1), sc.len(), "row scale length mismatch");
                let mut out = t.values().to_vec();
                for (i, o) in out.iter_mut().enumerate() {
                    *o *= sc[i / c];
                }
                Tensor::new(t.shape().to_vec(), out).unwrap()
            },
            Op::ScaleRows(self.id, scale),
        )
    }

    /// Add a same-size constant buffer (positional encodings and the like).
    pub fn add_const(self, c: Rc<Vec<f64>>) -> Var<'t> {
        let cv = c.clone();
        self.unop(
            |t| {
                assert_eq!(t.numel(), cv.len(), "const buffer length mismatch");
                let out = t.values().iter().zip(cv.iter()).map(|(a, b)| a + b).collect();
                Tensor::new(t.shape().to_vec(), out).unwrap()
            },
            Op::AddConst(self.id),
        )
    }

    /// Elementwise multiply by a same-size constant buffer (masks, fixed
    /// weights).
    pub fn mul_const(self, k: Rc<Vec<f64>>) -> Var<'t> {
        let kv = k.clone();
        self.unop(
            |t| {
                assert_eq!(t.numel(), kv.len(), "const buffer length mismatch");
                let out = t.values().iter().zip(kv.iter()).map(|(a, b)| a * b).collect();
                Tensor::new(t.shape().to_vec(), out).unwrap()
            },
            Op::MulConst(self.id, k),
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.map_elems(gelu, Op::Gelu(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.map_elems(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map_elems(|x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.map_elems(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.map_elems(f64::ln, Op::Ln(self.id))
    }

    pub fn sin(self) -> Var<'t> {
        self.map_elems(f64::sin, Op::Sin(self.id))
    }

    pub fn cos(self) -> Var<'t> {
        self.map_elems(f64::cos, Op::Cos(self.id))
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        self.map_elems(|x| x.powi(n), Op::Powi(self.id, n))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.map_elems(|x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn relu(self) -> Var<'t> {
        self.map_elems(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn min2(self, other: Var<'t>) -> Var<'t> {
        self.zip_elems(other, f64::min, Op::Min2(self.id, other.id))
    }

    pub fn max2(self, other: Var<'t>) -> Var<'t> {
        self.zip_elems(other, f64::max, Op::Max2(self.id, other.id))
    }

    /// Elementwise smooth-L1: `0.5 x^2 / d` inside `|x| < d`, `|x| - 0.5 d` outside.
    pub fn huber(self, delta: f64) -> Var<'t> {
        self.map_elems(
            move |x| {
                if x.abs() < delta {
                    0.5 * x * x / delta
                } else {
                    x.abs() - 0.5 * delta
                }
            },
            Op::Huber(self.id, delta),
        )
    }

    pub fn sum(self) -> Var<'t> {
        self.unop(|t| Tensor::scalar(t.values().iter().sum()), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel();
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// Softmax over the last dim with masked positions receiving exactly 0.
    /// A fully masked row yields an all-zero row.
    pub fn masked_softmax(self, mask: Rc<Vec<bool>>) -> Var<'t> {
        let mk = mask.clone();
        self.unop(
            |t| {
                assert_eq!(t.numel(), mk.len(), "softmax mask length mismatch");
                let c = t.last_dim();
                let mut out = vec![0.0; t.numel()];
                for r in 0..t.numel() / c.max(1) {
                    let o = r * c;
                    let row = &t.values()[o..o + c];
                    let m = &mk[o..o + c];
                    let mut hi = f64::NEG_INFINITY;
                    for j in 0..c {
                        if m[j] && row[j] > hi {
                            hi = row[j];
                        }
                    }
                    if hi == f64::NEG_INFINITY {
                        continue; // all masked: leave zeros
                    }
                    let mut z = 0.0;
                    for j in 0..c {
                        if m[j] {
                            let e = (row[j] - hi).exp();
                            out[o + j] = e;
                            z += e;
                        }
                    }
                    for j in 0..c {
                        out[o + j] /= z;
                    }
                }
                Tensor::new(t.shape().to_vec(), out).unwrap()
            },
            Op::MaskedSoftmax(self.id, mask),
        )
    }

    /// Numerically stable log-softmax over the last dim.
    pub fn log_softmax(self) -> Var<'t> {
        self.unop(
            |t| {
                let c = t.last_dim();
                let mut out = vec![0.0; t.numel()];
                for r in 0..t.numel() / c.max(1) {
                    let o = r * c;
                    let row = &t.values()[o..o + c];
                    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = hi + row.iter().map(|&x| (x - hi).exp()).sum::<f64>().ln();
                    for j in 0..c {
                        out[o + j] = row[j] - lse;
                    }
                }
                Tensor::new(t.shape().to_vec(), out).unwrap()
            },
            Op::LogSoftmax(self.id),
        )
    }

    /// Layer norm over the last dim with epsilon added to the variance,
    /// then per-channel affine.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
        let (value, mean, rstd) = self.tape.with_values(&[self.id, gain.id, bias.id], |ts| {
            let (x, g, b) = (ts[0], ts[1], ts[2]);
            let c = g.numel();
            assert_eq!(x.last_dim(), c, "layer_norm channel mismatch");
            assert_eq!(b.numel(), c);
            let rows = x.numel() / c.max(1);
            let mut out = vec![0.0; x.numel()];
            let mut means = vec![0.0; rows];
            let mut rstds = vec![0.0; rows];
            for r in 0..rows {
                let o = r * c;
                let row = &x.values()[o..o + c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                means[r] = mean;
                rstds[r] = rstd;
                for j in 0..c {
                    out[o + j] = (row[j] - mean) * rstd * g.values()[j] + b.values()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), out).unwrap(), means, rstds)
        });
        self.tape.push(
            value,
            Op::LayerNorm { a: self.id, gain: gain.id, bias: bias.id, mean, rstd },
            false,
        )
    }

    /// Row gather: output row `r` is input row `idx[r]`; negative indices
    /// produce zero rows. Output shape is `out_rows x row_len` reshaped to
    /// keep the input's last dim.
    pub fn gather_rows(self, idx: Rc<Vec<i64>>, out_shape: Vec<usize>) -> Var<'t> {
        let ix = idx.clone();
        let row_len = *out_shape.last().unwrap_or(&1);
        self.unop(
            |t| {
                let c = t.last_dim();
                assert_eq!(c, row_len, "gather_rows keeps the last dim");
                let rows: usize = out_shape.iter().product::<usize>() / c.max(1);
                assert_eq!(rows, ix.len(), "gather_rows index count mismatch");
                let mut out = vec![0.0; rows * c];
                for (r, &src) in ix.iter().enumerate() {
                    if src >= 0 {
                        let s = src as usize * c;
                        out[r * c..(r + 1) * c].copy_from_slice(&t.values()[s..s + c]);
                    }
                }
                Tensor::new(out_shape.clone(), out).unwrap()
            },
            Op::GatherRows { a: self.id, idx, row_len },
        )
    }

    /// Flat element gather; negative indices produce zeros.
    pub fn gather_elems(self, idx: Rc<Vec<i64>>, out_shape: Vec<usize>) -> Var<'t> {
        let ix = idx.clone();
        self.unop(
            |t| {
                let n: usize = out_shape.iter().product();
                assert_eq!(n, ix.len(), "gather_elems index count mismatch");
                let mut out = vec![0.0; n];
                for (i, &src) in ix.iter().enumerate() {
                    if src >= 0 {
                        out[i] = t.values()[src as usize];
                    }
                }
                Tensor::new(out_shape.clone(), out).unwrap()
            },
            Op::GatherElems { a: self.id, idx },
        )
    }

    /// Per-channel k x k sliding max over `[rows, cols, ch]` with same-size
    /// output; positions outside the grid contribute `fill`.
    pub fn max_pool2d(self, rows: usize, cols: usize, ch: usize, k: usize, fill: f64) -> Var<'t> {
        assert!(k % 2 == 1, "pool window must be odd");
        let (value, argsrc) = self.tape.with_values(&[self.id], |ts| {
            let t = ts[0];
            assert_eq!(t.numel(), rows * cols * ch, "max_pool2d shape mismatch");
            let half = (k / 2) as i64;
            let v = t.values();
            let mut out = vec![0.0; v.len()];
            let mut argsrc = vec![-1i64; v.len()];
            for r in 0..rows as i64 {
                for c in 0..cols as i64 {
                    let clipped = r - half < 0
                        || r + half >= rows as i64
                        || c - half < 0
                        || c + half >= cols as i64;
                    for ci in 0..ch {
                        let mut best = f64::NEG_INFINITY;
                        let mut src = -1i64;
                        for dr in -half..=half {
                            for dc in -half..=half {
                                let (nr, nc) = (r + dr, c + dc);
                                if nr < 0 || nr >= rows as i64 || nc < 0 || nc >= cols as i64 {
                                    continue;
                                }
                                let flat = (nr as usize * cols + nc as usize) * ch + ci;
                                if v[flat] > best {
                                    best = v[flat];
                                    src = flat as i64;
                                }
                            }
                        }
                        // border windows treat out-of-bounds cells as fill
                        if clipped && fill > best {
                            best = fill;
                            src = -1;
                        }
                        let o = (r as usize * cols + c as usize) * ch + ci;
                        out[o] = best;
                        argsrc[o] = src;
                    }
                }
            }
            (Tensor::new(t.shape().to_vec(), out).unwrap(), argsrc)
        });
        self.tape.push(value, Op::MaxPool2d { a: self.id, argsrc }, false)
    }

    /// Per-channel max over row segments `[start, end)` of `[n, c]`.
    /// Panics on empty segments.
    pub fn segment_max(self, segs: &[(usize, usize)]) -> Var<'t> {
        let (value, argrow) = self.tape.with_values(&[self.id], |ts| {
            let t = ts[0];
            let c = t.last_dim();
            let mut out = vec![0.0; segs.len() * c];
            let mut argrow = vec![0u32; segs.len() * c];
            for (s, &(start, end)) in segs.iter().enumerate() {
                assert!(end > start, "empty segment in segment_max");
                for j in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut row = start;
                    for r in start..end {
                        let v = t.values()[r * c + j];
                        if v > best {
                            best = v;
                            row = r;
                        }
                    }
                    out[s * c + j] = best;
                    argrow[s * c + j] = row as u32;
                }
            }
            (Tensor::new(vec![segs.len(), c], out).unwrap(), argrow)
        });
        self.tape.push(value, Op::SegmentMax { a: self.id, argrow }, false)
    }

    /// Concat along the last dim: `[n, ca] ++ [n, cb] -> [n, ca+cb]`.
    pub fn concat_cols(self, other: Var<'t>) -> Var<'t> {
        self.binop(other, |a, b| {
            let ca = a.last_dim();
            let cb = b.last_dim();
            let n = a.numel() / ca.max(1);
            assert_eq!(n, b.numel() / cb.max(1), "concat_cols row count mismatch");
            let mut out = vec![0.0; n * (ca + cb)];
            for r in 0..n {
                out[r * (ca + cb)..r * (ca + cb) + ca]
                    .copy_from_slice(&a.values()[r * ca..(r + 1) * ca]);
                out[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                    .copy_from_slice(&b.values()[r * cb..(r + 1) * cb]);
            }
            Tensor::new(vec![n, ca + cb], out).unwrap()
        }, Op::ConcatCols(self.id, other.id))
    }

    /// Reinterpret the node's shape (no data movement; adds a gather-free
    /// alias node is avoided by just reshaping the stored value).
    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        let idx: Rc<Vec<i64>> = Rc::new((0..self.numel() as i64).collect());
        self.gather_elems(idx, shape)
    }
}

impl std::ops::Add for Var<'_> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Var::add(self, rhs)
    }
}

impl std::ops::Sub for Var<'_> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Var::sub(self, rhs)
    }
}

impl std::ops::Mul for Var<'_> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Var::mul(self, rhs)
    }
}

impl std::ops::Div for Var<'_> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        Var::div(self, rhs)
    }
}

/// Order scalar vars by their forward values (used by the generic polygon
/// clipping code). Only meaningful for 1-element nodes.
impl PartialEq for Var<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.item() == other.item()
    }
}

impl PartialOrd for Var<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.item().partial_cmp(&other.item())
    }
}
