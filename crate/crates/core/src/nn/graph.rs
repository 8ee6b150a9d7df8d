//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every node that depends on a `requires_grad` leaf.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{gemm, Real, Tensor, Trans};
use crate::error::{contract_err, Result};

/// Grouped multi-head attention layout: `groups` independent sequences, each
/// with `q_len` queries attending over `k_len` keys.
#[derive(Debug, Clone)]
pub struct AttnLayout {
    pub groups: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `groups * k_len` flags; `false` keys receive zero attention.
    pub key_mask: Option<Rc<[bool]>>,
}

impl AttnLayout {
    pub fn single(q_len: usize, k_len: usize) -> Self {
        AttnLayout {
            groups: 1,
            q_len,
            k_len,
            heads: 1,
            key_mask: None,
        }
    }

    fn key_valid(&self, g: usize, j: usize) -> bool {
        self.key_mask
            .as_ref()
            .is_none_or(|m| m[g * self.k_len + j])
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Gelu(usize),
    Relu(usize),
    Sqrt(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        /// per-row (mean, 1/std)
        stats: Vec<(T, T)>,
    },
    LogSoftmax(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        layout: AttnLayout,
        probs: Rc<Vec<T>>,
    },
    SelectRows(usize, Rc<[usize]>),
    ConcatRows(Vec<usize>),
    ReplaceRows {
        base: usize,
        src: usize,
        rows: Vec<usize>,
    },
    GroupMean(usize, usize),
    Sum(usize),
    Mean(usize),
    Gather(usize, Vec<usize>),
    L2Normalize(usize, Vec<T>),
    PairwiseDist(usize),
    Reshape(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Linear { .. } => "linear",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Sqrt(_) => "sqrt",
            Op::LayerNorm { .. } => "layer_norm",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Attention { .. } => "attention",
            Op::SelectRows(..) => "select_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::GroupMean(..) => "group_mean",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gather(..) => "gather",
            Op::L2Normalize(..) => "l2_normalize",
            Op::PairwiseDist(_) => "pairwise_dist",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
    label: Option<String>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + th) + T::c(0.5) * x * (T::one() - th * th) * du
}

pub(crate) fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    layout: &AttnLayout,
) -> (Vec<T>, Vec<T>) {
    let AttnLayout {
        groups,
        q_len,
        k_len,
        heads,
        ..
    } = *layout;
    let dh = d / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut out = vec![T::zero(); groups * q_len * d];
    let mut probs = vec![T::zero(); groups * heads * q_len * k_len];
    let mut scores = vec![T::zero(); k_len];
    for g in 0..groups {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..q_len {
                let qi = &q[(g * q_len + i) * d + off..][..dh];
                let mut max = T::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    if !layout.key_valid(g, j) {
                        continue;
                    }
                    let kj = &k[(g * k_len + j) * d + off..][..dh];
                    let dot: T = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum();
                    *s = dot * scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let p = &mut probs[((g * heads + h) * q_len + i) * k_len..][..k_len];
                let mut total = T::zero();
                for j in 0..k_len {
                    if layout.key_valid(g, j) {
                        let e = (scores[j] - max).exp();
                        p[j] = e;
                        total += e;
                    }
                }
                let o = &mut out[(g * q_len + i) * d + off..][..dh];
                for j in 0..k_len {
                    if p[j] == T::zero() {
                        continue;
                    }
                    p[j] = p[j] / total;
                    let vj = &v[(g * k_len + j) * d + off..][..dh];
                    for (o, vv) in o.iter_mut().zip(vj) {
                        *o += p[j] * *vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
            label: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn val(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// A leaf holding `value`; gradients are tracked when `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// First node (in tape order) holding a NaN or infinity, as `"#id op (label)"`.
    pub fn first_non_finite(&self) -> Option<String> {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.all_finite()).then(|| match &n.label {
                Some(l) => format!("#{i} {} ({l})", n.op.name()),
                None => format!("#{i} {}", n.op.name()),
            })
        })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            backprop_node(&nodes, node, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| matches!(n.op, Op::Leaf))
                    .map(|g| Tensor::new(n.value.shape(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()]))
}

/// Zeroed scratch gradient for `id`, when it needs one. Separate from the
/// accumulated buffer so that aliased inputs add up correctly.
fn fresh<T: Real>(nodes: &[Node<T>], id: usize) -> Option<Vec<T>> {
    nodes[id]
        .needs_grad
        .then(|| vec![T::zero(); nodes[id].value.numel()])
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, src: impl Iterator<Item = T>) {
    if let Some(g) = acc(grads, nodes, id) {
        for (g, s) in g.iter_mut().zip(src) {
            *g += s;
        }
    }
}

fn backprop_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(grads, nodes, *a, dy.iter().copied());
            add_into(grads, nodes, *b, dy.iter().copied());
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, *a, dy.iter().copied());
            add_into(grads, nodes, *b, dy.iter().map(|&x| -x));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            add_into(grads, nodes, *a, dy.iter().zip(vb.data()).map(|(g, y)| *g * *y));
            add_into(grads, nodes, *b, dy.iter().zip(va.data()).map(|(g, x)| *g * *x));
        }
        Op::AddRow(x, v) => {
            add_into(grads, nodes, *x, dy.iter().copied());
            let d = val(*v).numel();
            if let Some(gv) = acc(grads, nodes, *v) {
                for row in dy.chunks(d) {
                    for (g, r) in gv.iter_mut().zip(row) {
                        *g += *r;
                    }
                }
            }
        }
        Op::Scale(a, c) => add_into(grads, nodes, *a, dy.iter().map(|&g| g * *c)),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (n, k, m) = (va.rows(), va.cols(), vb.cols());
            if let Some(ga) = acc(grads, nodes, *a) {
                gemm(Trans::N, Trans::T, n, m, k, dy, vb.data(), ga, true);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gemm(Trans::T, Trans::N, k, n, m, va.data(), dy, gb, true);
            }
        }
        Op::MatMulNT(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (n, k, m) = (va.rows(), va.cols(), vb.rows());
            if let Some(ga) = acc(grads, nodes, *a) {
                gemm(Trans::N, Trans::N, n, m, k, dy, vb.data(), ga, true);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gemm(Trans::T, Trans::N, m, n, k, dy, va.data(), gb, true);
            }
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (val(*x), val(*w));
            let (n, din, dout) = (vx.rows(), vx.cols(), vw.rows());
            if let Some(gx) = acc(grads, nodes, *x) {
                gemm(Trans::N, Trans::N, n, dout, din, dy, vw.data(), gx, true);
            }
            if let Some(gw) = acc(grads, nodes, *w) {
                gemm(Trans::T, Trans::N, dout, n, din, dy, vx.data(), gw, true);
            }
            if let Some(b) = b {
                if let Some(gb) = acc(grads, nodes, *b) {
                    for row in dy.chunks(dout) {
                        for (g, r) in gb.iter_mut().zip(row) {
                            *g += *r;
                        }
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let va = val(*a);
            add_into(grads, nodes, *a, dy.iter().zip(va.data()).map(|(g, x)| *g * gelu_grad(*x)));
        }
        Op::Relu(a) => {
            let va = val(*a);
            add_into(
                grads,
                nodes,
                *a,
                dy.iter()
                    .zip(va.data())
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() }),
            );
        }
        Op::Sqrt(a) => {
            let y = &node.value;
            add_into(
                grads,
                nodes,
                *a,
                dy.iter().zip(y.data()).map(|(g, y)| *g / (T::c(2.0) * *y)),
            );
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        } => {
            let vx = val(*x);
            let vg = val(*gain);
            let d = vx.cols();
            let dn = T::c(d as f64);
            let mut xhat = vec![T::zero(); d];
            let mut dxhat = vec![T::zero(); d];
            let mut gx = fresh(nodes, *x);
            let mut gg = fresh(nodes, *gain);
            let mut gb = fresh(nodes, *bias);
            for (r, &(mean, rstd)) in stats.iter().enumerate() {
                let xr = &vx.data()[r * d..][..d];
                let dyr = &dy[r * d..][..d];
                for j in 0..d {
                    xhat[j] = (xr[j] - mean) * rstd;
                    dxhat[j] = dyr[j] * vg.data()[j];
                }
                if let Some(gg) = gg.as_mut() {
                    for j in 0..d {
                        gg[j] += dyr[j] * xhat[j];
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    for j in 0..d {
                        gb[j] += dyr[j];
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let m1: T = dxhat.iter().copied().sum::<T>() / dn;
                    let m2: T = dxhat.iter().zip(&xhat).map(|(a, b)| *a * *b).sum::<T>() / dn;
                    for j in 0..d {
                        gx[r * d + j] += rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
            }
            for (id, g) in [(*x, gx), (*gain, gg), (*bias, gb)] {
                if let Some(g) = g {
                    add_into(grads, nodes, id, g.into_iter());
                }
            }
        }
        Op::LogSoftmax(a) => {
            let y = &node.value;
            let d = y.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for r in 0..y.rows() {
                    let yr = &y.data()[r * d..][..d];
                    let dyr = &dy[r * d..][..d];
                    let total: T = dyr.iter().copied().sum();
                    for j in 0..d {
                        ga[r * d + j] += dyr[j] - yr[j].exp() * total;
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
        } => attention_backward(nodes, grads, dy, *q, *k, *v, layout, probs),
        Op::SelectRows(x, idx) => {
            let d = node.value.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (i, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx[src * d + j] += dy[i * d + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).numel();
                add_into(grads, nodes, p, dy[off..off + n].iter().copied());
                off += n;
            }
        }
        Op::ReplaceRows { base, src, rows } => {
            let d = node.value.cols();
            if let Some(gb) = acc(grads, nodes, *base) {
                for (g, s) in gb.iter_mut().zip(dy) {
                    *g += *s;
                }
                for &r in rows {
                    for j in 0..d {
                        gb[r * d + j] -= dy[r * d + j];
                    }
                }
            }
            if let Some(gs) = acc(grads, nodes, *src) {
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gs[i * d + j] += dy[r * d + j];
                    }
                }
            }
        }
        Op::GroupMean(x, n) => {
            let d = node.value.cols();
            let inv = T::one() / T::c(*n as f64);
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, g) in gx.chunks_mut(d).enumerate() {
                    let src = &dy[(r / n) * d..][..d];
                    for (g, s) in g.iter_mut().zip(src) {
                        *g += *s * inv;
                    }
                }
            }
        }
        Op::Sum(a) => {
            let g = dy[0];
            add_into(grads, nodes, *a, std::iter::repeat(g));
        }
        Op::Mean(a) => {
            let g = dy[0] / T::c(val(*a).numel() as f64);
            add_into(grads, nodes, *a, std::iter::repeat(g));
        }
        Op::Gather(a, idx) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, &src) in idx.iter().enumerate() {
                    ga[src] += dy[i];
                }
            }
        }
        Op::L2Normalize(x, norms) => {
            let y = &node.value;
            let d = y.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y.data()[r * d..][..d];
                    let dyr = &dy[r * d..][..d];
                    let dot: T = yr.iter().zip(dyr).map(|(a, b)| *a * *b).sum();
                    for j in 0..d {
                        gx[r * d + j] += (dyr[j] - yr[j] * dot) / norm;
                    }
                }
            }
        }
        Op::PairwiseDist(x) => {
            let vx = val(*x);
            let y = &node.value;
            let (n, d) = (vx.rows(), vx.cols());
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..n {
                    for j in 0..n {
                        let c = dy[i * n + j] / y.data()[i * n + j];
                        if c == T::zero() {
                            continue;
                        }
                        for t in 0..d {
                            let diff = vx.data()[i * d + t] - vx.data()[j * d + t];
                            gx[i * d + t] += c * diff;
                            gx[j * d + t] -= c * diff;
                        }
                    }
                }
            }
        }
        Op::Reshape(a) => add_into(grads, nodes, *a, dy.iter().copied()),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    dy: &[T],
    q: usize,
    k: usize,
    v: usize,
    layout: &AttnLayout,
    probs: &[T],
) {
    let (vq, vk, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let d = vq.cols();
    let AttnLayout {
        groups,
        q_len,
        k_len,
        heads,
        ..
    } = *layout;
    let dh = d / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut gq = fresh(nodes, q);
    let mut gk = fresh(nodes, k);
    let mut gv = fresh(nodes, v);
    let mut dp = vec![T::zero(); k_len];
    for g in 0..groups {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..q_len {
                let p = &probs[((g * heads + h) * q_len + i) * k_len..][..k_len];
                let doi = &dy[(g * q_len + i) * d + off..][..dh];
                let mut weighted = T::zero();
                for j in 0..k_len {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &vv.data()[(g * k_len + j) * d + off..][..dh];
                    dp[j] = doi.iter().zip(vj).map(|(a, b)| *a * *b).sum();
                    weighted += p[j] * dp[j];
                    if let Some(gv) = gv.as_mut() {
                        let gvj = &mut gv[(g * k_len + j) * d + off..][..dh];
                        for (a, b) in gvj.iter_mut().zip(doi) {
                            *a += p[j] * *b;
                        }
                    }
                }
                let qi_off = (g * q_len + i) * d + off;
                for j in 0..k_len {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let kj_off = (g * k_len + j) * d + off;
                    if let Some(gq) = gq.as_mut() {
                        for t in 0..dh {
                            gq[qi_off + t] += ds * vk.data()[kj_off + t];
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        for t in 0..dh {
                            gk[kj_off + t] += ds * vq.data()[qi_off + t];
                        }
                    }
                }
            }
        }
    }
    for (id, g) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(g) = g {
            add_into(grads, nodes, id, g.into_iter());
        }
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }

    /// Attach a diagnostic label (reported by [`Graph::first_non_finite`]).
    pub fn label(self, label: &str) -> Self {
        self.graph.nodes.borrow_mut()[self.id].label = Some(label.to_string());
        self
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Self {
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(value, op, needs)
    }

    fn binary(self, other: Var<'g, T>, value: Tensor<T>, op: Op<T>) -> Self {
        let needs = self.graph.needs(&[self.id, other.id]);
        self.graph.push(value, op, needs)
    }

    fn zip_with(self, other: Var<'g, T>, what: &str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
        Tensor::new(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        )
        .expect("same shape")
    }

    pub fn add(self, other: Var<'g, T>) -> Self {
        let v = self.zip_with(other, "add", |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Self {
        let v = self.zip_with(other, "sub", |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Self {
        let v = self.zip_with(other, "mul", |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    /// Adds a `[d]` vector to every row of `self`.
    pub fn add_row(self, row: Var<'g, T>) -> Self {
        let (x, r) = (self.value(), row.value());
        let d = x.cols();
        assert_eq!(r.numel(), d, "add_row: width mismatch");
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + r.data()[i % d])
            .collect();
        let v = Tensor::new(x.shape(), data).expect("shape");
        self.binary(row, v, Op::AddRow(self.id, row.id))
    }

    pub fn scale(self, c: T) -> Self {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    /// `[n×k]·[k×m]`
    pub fn matmul(self, other: Var<'g, T>) -> Self {
        let (a, b) = (self.value(), other.value());
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        assert_eq!(b.rows(), k, "matmul: inner dimension mismatch");
        let mut out = vec![T::zero(); n * m];
        gemm(Trans::N, Trans::N, n, k, m, a.data(), b.data(), &mut out, false);
        let v = Tensor::new(&[n, m], out).expect("shape");
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    /// `[n×k]·[m×k]ᵀ`
    pub fn matmul_nt(self, other: Var<'g, T>) -> Self {
        let (a, b) = (self.value(), other.value());
        let (n, k, m) = (a.rows(), a.cols(), b.rows());
        assert_eq!(b.cols(), k, "matmul_nt: inner dimension mismatch");
        let mut out = vec![T::zero(); n * m];
        gemm(Trans::N, Trans::T, n, k, m, a.data(), b.data(), &mut out, false);
        let v = Tensor::new(&[n, m], out).expect("shape");
        self.binary(other, v, Op::MatMulNT(self.id, other.id))
    }

    /// `x·wᵀ + b` with `w: [out×in]`, `b: [out]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Self {
        let (x, w) = (self.value(), weight.value());
        let (n, din, dout) = (x.rows(), x.cols(), w.rows());
        assert_eq!(w.cols(), din, "linear: input width {din} vs weight {:?}", w.shape());
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = bias {
            let b = b.value();
            assert_eq!(b.numel(), dout, "linear: bias width");
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(Trans::N, Trans::T, n, din, dout, x.data(), w.data(), &mut out, bias.is_some());
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = dout;
        let v = Tensor::new(&shape, out).expect("shape");
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let needs = self.graph.needs(&ids);
        self.graph.push(
            v,
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
            },
            needs,
        )
    }

    pub fn gelu(self) -> Self {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn relu(self) -> Self {
        let v = self.value().map(|x| x.max(T::zero()));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sqrt(self) -> Self {
        let v = self.value().map(|x| x.sqrt());
        self.unary(v, Op::Sqrt(self.id))
    }

    /// Normalizes each row, then applies `gain` and `bias` (both `[d]`).
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: f64) -> Self {
        let x = self.value();
        let d = x.cols();
        let dn = T::c(d as f64);
        let (g, b) = (gain.value(), bias.value());
        assert_eq!(g.numel(), d, "layer_norm: gain width");
        assert_eq!(b.numel(), d, "layer_norm: bias width");
        let mut out = Vec::with_capacity(x.numel());
        let mut stats = Vec::with_capacity(x.rows());
        for row in x.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + T::c(eps)).sqrt();
            out.extend(
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (*v - mean) * rstd * g.data()[j] + b.data()[j]),
            );
            stats.push((mean, rstd));
        }
        let v = Tensor::new(x.shape(), out).expect("shape");
        let needs = self.graph.needs(&[self.id, gain.id, bias.id]);
        self.graph.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                stats,
            },
            needs,
        )
    }

    pub fn log_softmax(self) -> Self {
        let x = self.value();
        let d = x.cols();
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|v| *v - lse));
        }
        let v = Tensor::new(x.shape(), out).expect("shape");
        self.unary(v, Op::LogSoftmax(self.id))
    }

    /// Grouped scaled dot-product attention; `self` holds the queries.
    /// Returns the output and the attention weights
    /// (`[groups × heads × q_len × k_len]`).
    pub fn attention(self, k: Var<'g, T>, v: Var<'g, T>, layout: AttnLayout) -> (Self, Rc<Vec<T>>) {
        let (vq, vk, vv) = (self.value(), k.value(), v.value());
        let d = vq.cols();
        assert_eq!(vk.cols(), d, "attention: key width");
        assert_eq!(vv.cols(), d, "attention: value width");
        assert_eq!(d % layout.heads, 0, "attention: heads must divide width");
        assert_eq!(vq.rows(), layout.groups * layout.q_len, "attention: query rows");
        assert_eq!(vk.rows(), layout.groups * layout.k_len, "attention: key rows");
        assert_eq!(vv.rows(), layout.groups * layout.k_len, "attention: value rows");
        let (out, probs) = attention_forward(vq.data(), vk.data(), vv.data(), d, &layout);
        let probs = Rc::new(probs);
        let value = Tensor::new(&[vq.rows(), d], out).expect("shape");
        let needs = self.graph.needs(&[self.id, k.id, v.id]);
        let var = self.graph.push(
            value,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                layout,
                probs: probs.clone(),
            },
            needs,
        );
        (var, probs)
    }

    /// Row gather: output row `i` is input row `idx[i]`.
    pub fn select_rows(self, idx: impl Into<Rc<[usize]>>) -> Self {
        let idx: Rc<[usize]> = idx.into();
        let x = self.value();
        let d = x.cols();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            assert!(i < x.rows(), "select_rows: row {i} out of range");
            out.extend_from_slice(x.row(i));
        }
        let v = Tensor::new(&[idx.len(), d], out).expect("shape");
        self.unary(v, Op::SelectRows(self.id, idx))
    }

    pub fn row(self, i: usize) -> Self {
        self.select_rows(vec![i])
    }

    pub fn concat_rows(parts: &[Var<'g, T>]) -> Self {
        let first = parts.first().expect("concat_rows: empty input");
        let d = first.cols();
        let mut out = Vec::new();
        for p in parts {
            let v = p.value();
            assert_eq!(v.cols(), d, "concat_rows: width mismatch");
            out.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = first.graph.needs(&ids);
        let v = Tensor::new(&[out.len() / d, d], out).expect("shape");
        first.graph.push(v, Op::ConcatRows(ids), needs)
    }

    /// Overwrites row `rows[j]` of `self` with row `j` of `src`.
    pub fn replace_rows(self, src: Var<'g, T>, rows: Vec<usize>) -> Self {
        let (b, s) = (self.value(), src.value());
        let d = b.cols();
        assert_eq!(s.cols(), d, "replace_rows: width mismatch");
        assert_eq!(s.rows(), rows.len(), "replace_rows: row count");
        let mut out = b.data().to_vec();
        for (j, &r) in rows.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(s.row(j));
        }
        let v = Tensor::new(b.shape(), out).expect("shape");
        self.binary(
            src,
            v,
            Op::ReplaceRows {
                base: self.id,
                src: src.id,
                rows,
            },
        )
    }

    /// Averages consecutive blocks of `n` rows.
    pub fn group_mean(self, n: usize) -> Self {
        let x = self.value();
        let d = x.cols();
        assert_eq!(x.rows() % n, 0, "group_mean: rows not divisible by {n}");
        let inv = T::one() / T::c(n as f64);
        let mut out = vec![T::zero(); x.rows() / n * d];
        for (r, row) in x.data().chunks(d).enumerate() {
            for (o, v) in out[(r / n) * d..][..d].iter_mut().zip(row) {
                *o += *v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let v = Tensor::new(&[x.rows() / n, d], out).expect("shape");
        self.unary(v, Op::GroupMean(self.id, n))
    }

    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().data().iter().copied().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let x = self.value();
        let v = Tensor::scalar(x.data().iter().copied().sum::<T>() / T::c(x.numel() as f64));
        self.unary(v, Op::Mean(self.id))
    }

    /// Picks flat elements into a `[idx.len()]` vector.
    pub fn gather(self, idx: Vec<usize>) -> Self {
        let x = self.value();
        let data = idx.iter().map(|&i| x.data()[i]).collect();
        let v = Tensor::new(&[idx.len()], data).expect("shape");
        self.unary(v, Op::Gather(self.id, idx))
    }

    pub fn l2_normalize(self) -> Self {
        let x = self.value();
        let d = x.cols();
        let mut out = Vec::with_capacity(x.numel());
        let mut norms = Vec::with_capacity(x.rows());
        for row in x.data().chunks(d) {
            let norm = row
                .iter()
                .map(|v| *v * *v)
                .sum::<T>()
                .sqrt()
                .max(T::c(1e-12));
            out.extend(row.iter().map(|v| *v / norm));
            norms.push(norm);
        }
        let v = Tensor::new(x.shape(), out).expect("shape");
        self.unary(v, Op::L2Normalize(self.id, norms))
    }

    /// Euclidean distance matrix between rows, `sqrt(|xi - xj|² + 1e-12)`.
    pub fn pairwise_dist(self) -> Self {
        let x = self.value();
        let n = x.rows();
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let s: T = x
                    .row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(a, b)| (*a - *b) * (*a - *b))
                    .sum();
                out[i * n + j] = (s + T::c(1e-12)).sqrt();
            }
        }
        let v = Tensor::new(&[n, n], out).expect("shape");
        self.unary(v, Op::PairwiseDist(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let v = self.value().reshaped(shape).expect("reshape: element count");
        self.unary(v, Op::Reshape(self.id))
    }

    /// Copy of the value with no path back to `self`.
    pub fn detach(self) -> Self {
        self.graph.constant((*self.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let loss = x.mul(x).sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(g.backward(x.scale(2.0)).is_err());
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.leaf(t(&[2], &[3.0, 4.0]), true);
        let loss = x.mul(y.detach()).sum().add(y.detach().sum());
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn non_finite_node_is_reported() {
        let g = Graph::new();
        let x = g.leaf(t(&[2], &[-1.0, 4.0]), false);
        let _ = x.sqrt().label("root");
        assert_eq!(g.first_non_finite().unwrap(), "#1 sqrt (root)");
    }
}
