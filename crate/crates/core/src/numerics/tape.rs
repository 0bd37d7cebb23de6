//! Reverse-mode differentiation over a fixed operation vocabulary.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during one
//! forward pass. [`Tape::backward`] walks the record in reverse and returns
//! [`Gradients`] for every node that depends on a parameter or on an input
//! marked `requires_grad`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::param::{ParamId, ParamStore};
use super::sampling;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) type NodeId = usize;

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRows(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Pow(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    Gather(NodeId, Rc<Vec<usize>>),
    IndexAddRows(NodeId, Rc<Vec<usize>>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Bilinear { map: NodeId, pts: NodeId },
    Trilinear { vol: NodeId, pts: NodeId },
    Perspective { pts: NodeId, fx: f64, fy: f64 },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass. Single-writer: build, differentiate, discard.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, NodeId>>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Records an input. Gradients flow to it iff `t.requires_grad()`.
    pub fn input(&self, t: Tensor) -> Var<'_> {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    /// Records a constant that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let params = self.param_nodes.borrow().clone();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, NodeId>,
}

impl Gradients {
    fn node(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::new(&self.shapes[id], g.clone()).expect("gradient shape"))
    }

    /// Gradient of the loss with respect to `v`, if `v` was on a path to it.
    pub fn wrt(&self, v: Var<'_>) -> Option<Tensor> {
        self.node(v.id)
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.params.get(&id).and_then(|&n| self.node(n))
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, delta: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.last_dim())
}

fn backprop(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: NodeId| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if nodes[*a].needs_grad {
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                let bd = bv.data();
                let mut bt = vec![0.0; n * k];
                for p in 0..k {
                    for j in 0..n {
                        bt[j * k + p] = bd[p * n + j];
                    }
                }
                for i in 0..m {
                    let dst = &mut da[i * k..(i + 1) * k];
                    for (j, &gij) in g[i * n..(i + 1) * n].iter().enumerate() {
                        if gij == 0.0 {
                            continue;
                        }
                        for (d, x) in dst.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                            *d += gij * x;
                        }
                    }
                }
                accum(grads, nodes, *a, da);
            }
            if nodes[*b].needs_grad {
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * n];
                let ad = av.data();
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let dst = &mut db[p * n..(p + 1) * n];
                        for (d, x) in dst.iter_mut().zip(gi) {
                            *d += aip * x;
                        }
                    }
                }
                accum(grads, nodes, *b, db);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = g[i * c + j];
                }
            }
            accum(grads, nodes, *a, d);
        }
        Op::Add(a, b) => {
            accum(grads, nodes, *a, g.to_vec());
            accum(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accum(grads, nodes, *a, g.to_vec());
            accum(grads, nodes, *b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accum(grads, nodes, *a, g.iter().zip(bv.data()).map(|(x, y)| x * y).collect());
            accum(grads, nodes, *b, g.iter().zip(av.data()).map(|(x, y)| x * y).collect());
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accum(grads, nodes, *a, g.iter().zip(bv.data()).map(|(x, y)| x / y).collect());
            let db = g
                .iter()
                .zip(av.data())
                .zip(bv.data())
                .map(|((x, p), q)| -x * p / (q * q))
                .collect();
            accum(grads, nodes, *b, db);
        }
        Op::AddRow(a, b) => {
            accum(grads, nodes, *a, g.to_vec());
            if nodes[*b].needs_grad {
                let n = val(*b).numel();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                accum(grads, nodes, *b, db);
            }
        }
        Op::MulRows(a, w) => {
            let (av, wv) = (val(*a), val(*w));
            let (r, c) = rows_cols(av);
            if nodes[*a].needs_grad {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let s = wv.data()[i];
                    for j in 0..c {
                        da[i * c + j] = g[i * c + j] * s;
                    }
                }
                accum(grads, nodes, *a, da);
            }
            if nodes[*w].needs_grad {
                let ad = av.data();
                let dw = (0..r)
                    .map(|i| (0..c).map(|j| g[i * c + j] * ad[i * c + j]).sum())
                    .collect();
                accum(grads, nodes, *w, dw);
            }
        }
        Op::MulScalar(a, s) => {
            let (av, sv) = (val(*a), val(*s));
            let sc = sv.data()[0];
            accum(grads, nodes, *a, g.iter().map(|x| x * sc).collect());
            let ds: f64 = g.iter().zip(av.data()).map(|(x, y)| x * y).sum();
            accum(grads, nodes, *s, vec![ds]);
        }
        Op::Scale(a, c) => accum(grads, nodes, *a, g.iter().map(|x| x * c).collect()),
        Op::Shift(a) | Op::Reshape(a) => accum(grads, nodes, *a, g.to_vec()),
        Op::Relu(a) => {
            let av = val(*a);
            let d = g
                .iter()
                .zip(av.data())
                .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                .collect();
            accum(grads, nodes, *a, d);
        }
        Op::Softplus(a) => {
            let av = val(*a);
            let d = g
                .iter()
                .zip(av.data())
                .map(|(x, v)| x * sigmoid(*v))
                .collect();
            accum(grads, nodes, *a, d);
        }
        Op::Exp(a) => {
            let d = g.iter().zip(out.data()).map(|(x, y)| x * y).collect();
            accum(grads, nodes, *a, d);
        }
        Op::Log(a) => {
            let av = val(*a);
            let d = g.iter().zip(av.data()).map(|(x, v)| x / v).collect();
            accum(grads, nodes, *a, d);
        }
        Op::Pow(a, e) => {
            let av = val(*a);
            let e = *e;
            let d = g
                .iter()
                .zip(av.data())
                .map(|(x, v)| {
                    if e == 0.0 || (*v == 0.0 && e >= 1.0) {
                        if e == 1.0 {
                            *x
                        } else {
                            0.0
                        }
                    } else if *v == 0.0 {
                        // derivative is unbounded for 0 < e < 1; treat as flat
                        0.0
                    } else {
                        x * e * v.powf(e - 1.0)
                    }
                })
                .collect();
            accum(grads, nodes, *a, d);
        }
        Op::Softmax(a) => {
            let (r, c) = rows_cols(out);
            let y = out.data();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let yr = &y[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for j in 0..c {
                    d[i * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            accum(grads, nodes, *a, d);
        }
        Op::LogSoftmax(a) => {
            let (r, c) = rows_cols(out);
            let y = out.data();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let gr = &g[i * c..(i + 1) * c];
                let total: f64 = gr.iter().sum();
                for j in 0..c {
                    d[i * c + j] = gr[j] - y[i * c + j].exp() * total;
                }
            }
            accum(grads, nodes, *a, d);
        }
        Op::Sum(a) => {
            let n = val(*a).numel();
            accum(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::Gather(a, idx) => {
            if nodes[*a].needs_grad {
                let mut d = vec![0.0; val(*a).numel()];
                for (o, &i) in idx.iter().enumerate() {
                    d[i] += g[o];
                }
                accum(grads, nodes, *a, d);
            }
        }
        Op::IndexAddRows(a, idx) => {
            let c = out.last_dim();
            let mut d = vec![0.0; idx.len() * c];
            for (r, &t) in idx.iter().enumerate() {
                d[r * c..(r + 1) * c].copy_from_slice(&g[t * c..(t + 1) * c]);
            }
            accum(grads, nodes, *a, d);
        }
        Op::ConcatCols(parts) => {
            let (r, total) = rows_cols(out);
            let mut offset = 0;
            for &p in parts {
                let c = val(p).last_dim();
                if nodes[p].needs_grad {
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c..(i + 1) * c]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + c]);
                    }
                    accum(grads, nodes, p, d);
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                accum(grads, nodes, p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::Bilinear { map, pts } => {
            let (mv, pv) = (val(*map), val(*pts));
            let s = mv.shape();
            let (dmap, dpts) = sampling::bilinear_backward(mv.data(), s[0], s[1], s[2], pv.data(), g);
            accum(grads, nodes, *map, dmap);
            accum(grads, nodes, *pts, dpts);
        }
        Op::Trilinear { vol, pts } => {
            let (vv, pv) = (val(*vol), val(*pts));
            let s = vv.shape();
            let (dvol, dpts) =
                sampling::trilinear_backward(vv.data(), [s[0], s[1], s[2]], s[3], pv.data(), g);
            accum(grads, nodes, *vol, dvol);
            accum(grads, nodes, *pts, dpts);
        }
        Op::Perspective { pts, fx, fy } => {
            let pv = val(*pts);
            let n = pv.rows();
            let p = pv.data();
            let mut d = vec![0.0; n * 3];
            for i in 0..n {
                let (x, y, z) = (p[3 * i], p[3 * i + 1], p[3 * i + 2]);
                if z < super::ops::MIN_DEPTH {
                    continue;
                }
                let (gu, gv) = (g[2 * i], g[2 * i + 1]);
                d[3 * i] = gu * fx / z;
                d[3 * i + 1] = gv * fy / z;
                d[3 * i + 2] = -(gu * fx * x + gv * fy * y) / (z * z);
            }
            accum(grads, nodes, *pts, d);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
