//! Wengert tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the tape in reverse recording order; intermediate gradients live only
//! for the duration of that walk, leaf gradients persist and accumulate across
//! calls until [`Graph::zero_grad`].

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Cost bucket for the runtime FLOP counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Encoder,
    SlotInput,
    Pass1,
    Pathway,
    Pass2,
    Decoder,
    Loss,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Encoder,
        Component::SlotInput,
        Component::Pass1,
        Component::Pathway,
        Component::Pass2,
        Component::Decoder,
        Component::Loss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::SlotInput => "slot_input",
            Component::Pass1 => "pass1",
            Component::Pathway => "pathway",
            Component::Pass2 => "pass2",
            Component::Decoder => "decoder",
            Component::Loss => "loss",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Mse(Var, Var),
    Outer(Var, Var),
    ModulatedAggregate { attn: Var, maps: Vec<Var>, values: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    StraightThrough(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recording of one forward computation.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    scope: Component,
    flops: [u64; 7],
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        None => *dst = Some(src),
        Some(d) => {
            for (x, y) in d.iter_mut().zip(&src) {
                *x += y;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            scope: Component::Encoder,
            flops: [0; 7],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the cost bucket for subsequently recorded ops; returns the previous one.
    pub fn set_scope(&mut self, c: Component) -> Component {
        std::mem::replace(&mut self.scope, c)
    }

    pub fn flops(&self, c: Component) -> u64 {
        self.flops[c.slot()]
    }

    /// Charges work done off the tape (e.g. nearest-code search) to the current scope.
    pub fn record_flops(&mut self, n: u64) {
        self.flops[self.scope.slot()] += n;
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.iter().sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.leaf_grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Leaves bound to parameter ids, with their accumulated gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, Option<&[f64]>)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| {
            n.param.map(|p| {
                (
                    p,
                    self.leaf_grads.get(i).and_then(|g| g.as_deref()),
                )
            })
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, cost: u64) -> Var {
        self.flops[self.scope.slot()] += cost;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, 0)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true, 0)
    }

    pub(crate) fn param_leaf(&mut self, t: Tensor, id: usize) -> Var {
        let v = self.push(t, Op::Leaf, true, 0);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            rg,
            (2 * m * k * n) as u64,
        ))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNT(a, b),
            rg,
            (2 * m * k * n) as u64,
        ))
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != 1 || tb.rows() != 1 || ta.shape().is_empty() || tb.shape().is_empty() {
            return Err(shape_err("outer_product", ta, tb));
        }
        let (n, d) = (ta.numel(), tb.numel());
        let mut out = Vec::with_capacity(n * d);
        for &x in ta.data() {
            out.extend(tb.data().iter().map(|&y| x * y));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::Outer(a, b),
            rg,
            (n * d) as u64,
        ))
    }

    /// `u_k = attn_k (maps_k ⊙ values)` for every row `k` of `attn`.
    ///
    /// Sums run in the same order as [`Graph::matmul`], so with all-ones maps
    /// the result and every gradient are bit-identical to `attn · values`.
    pub fn modulated_aggregate(&mut self, attn: Var, maps: &[Var], values: Var) -> Result<Var> {
        let (ta, tv) = (self.value(attn), self.value(values));
        if !is_matrix(ta) || !is_matrix(tv) || ta.shape()[1] != tv.shape()[0] || maps.len() != ta.shape()[0] {
            return Err(shape_err("modulated_aggregate", ta, tv));
        }
        let (k, n, d) = (ta.shape()[0], tv.shape()[0], tv.shape()[1]);
        for &m in maps {
            if self.value(m).shape() != tv.shape() {
                return Err(shape_err("modulated_aggregate", self.value(m), tv));
            }
        }
        let mut out = vec![0.0; k * d];
        for (slot, &m) in maps.iter().enumerate() {
            let (a, mv, v) = (ta.row_slice(slot), self.value(m).data(), tv.data());
            let orow = &mut out[slot * d..(slot + 1) * d];
            for p in 0..n {
                let ap = a[p];
                for c in 0..d {
                    orow[c] += ap * (mv[p * d + c] * v[p * d + c]);
                }
            }
        }
        let rg = self.rg(attn) || self.rg(values) || maps.iter().any(|&m| self.rg(m));
        Ok(self.push(
            Tensor::from_parts(vec![k, d], out),
            Op::ModulatedAggregate {
                attn,
                maps: maps.to_vec(),
                values,
            },
            rg,
            (3 * k * n * d) as u64,
        ))
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
        if a.shape() == b.shape() {
            return Ok(Bcast::Same);
        }
        if b.numel() == 1 {
            return Ok(Bcast::Scalar);
        }
        if is_matrix(a) && is_matrix(b) {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            if b.shape() == [1, n] {
                return Ok(Bcast::Row);
            }
            if b.shape() == [m, 1] {
                return Ok(Bcast::Col);
            }
        }
        Err(shape_err(op, a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = Self::bcast_kind(name, ta, tb)?;
        let n = ta.cols();
        let (ad, bd) = (ta.data(), tb.data());
        let out: Vec<f64> = match kind {
            Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
            Bcast::Row => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % n]))
                .collect(),
            Bcast::Col => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i / n]))
                .collect(),
        };
        let shape = ta.shape().to_vec();
        let cost = out.len() as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), mk(a, b, kind), rg, cost))
    }

    /// `a + b`; `b` may broadcast as a row (1×n), column (m×1) or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Hadamard product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul_elementwise", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let cost = t.numel() as u64;
        let rg = self.rg(x);
        self.push(t, op, rg, cost)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    // ── normalisation ────────────────────────────────────────────────

    /// Softmax of a matrix along `axis` (0 normalises each column, 1 each row).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    /// Row softmax where row `i` only sees columns `0..=i`; masked entries are 0.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, 1, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, causal: bool) -> Result<Var> {
        let t = self.value(x);
        if !is_matrix(t) {
            return Err(Error::invalid(
                "softmax_over_axis",
                format!("expected a matrix, got shape {:?}", t.shape()),
            ));
        }
        if axis > 1 {
            return Err(Error::invalid("softmax_over_axis", format!("axis {axis} out of range")));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; m * n];
        let d = t.data();
        let (outer, inner) = if axis == 1 { (m, n) } else { (n, m) };
        let at = |o: usize, i: usize| if axis == 1 { o * n + i } else { i * n + o };
        for o in 0..outer {
            let len = if causal { (o + 1).min(inner) } else { inner };
            let mut mx = f64::NEG_INFINITY;
            for i in 0..len {
                mx = mx.max(d[at(o, i)]);
            }
            let mut s = 0.0;
            for i in 0..len {
                let e = (d[at(o, i)] - mx).exp();
                out[at(o, i)] = e;
                s += e;
            }
            for i in 0..len {
                out[at(o, i)] /= s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Softmax { x, axis },
            rg,
            (3 * m * n) as u64,
        ))
    }

    /// Per-row layer normalisation with optional affine (`gain`, `bias` are 1×n).
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).numel() != n {
                return Err(shape_err("layer_norm", t, self.value(p)));
            }
        }
        let d = t.data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &d[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                xhat[r * n + c] = (row[c] - mean) * inv;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let gd = self.value(g).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o *= gd[i % n];
            }
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o += bd[i % n];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let affine = gain.is_some() as usize + bias.is_some() as usize;
        let cost = ((5 + affine) * m * n) as u64;
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g)) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
            cost,
        ))
    }

    // ── reductions ───────────────────────────────────────────────────

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let t = self.value(x);
        if !is_matrix(t) || axis > 1 {
            return Err(Error::invalid(op, format!("axis {axis} invalid for shape {:?}", t.shape())));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        Ok(if axis == 0 {
            let mut out = vec![0.0; n];
            for r in 0..m {
                for c in 0..n {
                    out[c] += d[r * n + c];
                }
            }
            (vec![1, n], out)
        } else {
            let out = (0..m).map(|r| d[r * n..(r + 1) * n].iter().sum()).collect();
            (vec![m, 1], out)
        })
    }

    /// Sum along `axis`, keeping it as a unit dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis("sum_over_axis", x, axis)?;
        let cost = self.value(x).numel() as u64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, axis }, rg, cost))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, mut out) = self.reduce_axis("mean_over_axis", x, axis)?;
        let count = self.value(x).shape()[axis] as f64;
        out.iter_mut().for_each(|v| *v /= count);
        let cost = self.value(x).numel() as u64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x, axis }, rg, cost))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum();
        let cost = t.numel() as u64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg, cost)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        let cost = t.numel() as u64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg, cost)
    }

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse", ta, tb));
        }
        let n = ta.numel();
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg, (3 * n) as u64))
    }

    // ── indexing ─────────────────────────────────────────────────────

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for shape {:?}", t.shape()),
            ));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(t.row_slice(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), n], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
            0,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if !is_matrix(t) || len == 0 || start + len > t.shape()[1] {
            return Err(Error::invalid(
                "slice_cols",
                format!("columns {start}..{} out of range for {:?}", start + len, t.shape()),
            ));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&d[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { x, start },
            rg,
            0,
        ))
    }

    /// Concatenates matrices along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::invalid("concat", "no inputs"));
        };
        let t0 = self.value(first);
        if !is_matrix(t0) || axis > 1 {
            return Err(Error::invalid("concat", format!("axis {axis} invalid for {:?}", t0.shape())));
        }
        let keep = t0.shape()[1 - axis];
        for &v in &xs[1..] {
            let t = self.value(v);
            if !is_matrix(t) || t.shape()[1 - axis] != keep {
                return Err(shape_err("concat", t0, t));
            }
        }
        let (shape, out) = if axis == 0 {
            let rows: usize = xs.iter().map(|&v| self.value(v).shape()[0]).sum();
            let mut out = Vec::with_capacity(rows * keep);
            for &v in xs {
                out.extend_from_slice(self.value(v).data());
            }
            (vec![rows, keep], out)
        } else {
            let cols: usize = xs.iter().map(|&v| self.value(v).shape()[1]).sum();
            let mut out = Vec::with_capacity(keep * cols);
            for r in 0..keep {
                for &v in xs {
                    out.extend_from_slice(self.value(v).row_slice(r));
                }
            }
            (vec![keep, cols], out)
        };
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
            0,
        ))
    }

    /// Straight-through estimator.
    ///
    /// Forward value is `code + (input - anchor)`, which equals `code` exactly
    /// when `anchor` holds the current value of `input`. The backward pass
    /// copies the incoming gradient onto `input` unchanged; `code` receives
    /// nothing. Holding `anchor` fixed while `input` moves gives the
    /// differentiable surrogate used for finite-difference checks.
    pub fn straight_through(&mut self, input: Var, code: &Tensor, anchor: &Tensor) -> Result<Var> {
        let t = self.value(input);
        if t.shape() != code.shape() {
            return Err(shape_err("straight_through", t, code));
        }
        if t.shape() != anchor.shape() {
            return Err(shape_err("straight_through", t, anchor));
        }
        let out: Vec<f64> = code
            .data()
            .iter()
            .zip(t.data().iter().zip(anchor.data()))
            .map(|(&c, (&s, &a))| c + (s - a))
            .collect();
        let shape = t.shape().to_vec();
        let cost = 2 * out.len() as u64;
        let rg = self.rg(input);
        Ok(self.push(Tensor::from_parts(shape, out), Op::StraightThrough(input), rg, cost))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Like [`Graph::backward`] with the seed gradient set to `seed`.
    pub fn backward_scaled(&mut self, loss: Var, seed: f64) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lt = self.value(loss);
        if !lt.shape().is_empty() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![seed]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                add_into(&mut self.leaf_grads[i], g);
                continue;
            }
            self.node_backward(i, &g, &mut grads);
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if self.nodes[v.0].requires_grad {
            add_into(&mut grads[v.0], g);
        }
    }

    fn reduce_bcast(&self, g: Vec<f64>, a: &Tensor, kind: Bcast) -> Vec<f64> {
        let n = a.cols();
        match kind {
            Bcast::Same => g,
            Bcast::Scalar => vec![g.iter().sum()],
            Bcast::Row => {
                let mut out = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    out[i % n] += v;
                }
                out
            }
            Bcast::Col => g.chunks(n).map(|r| r.iter().sum()).collect(),
        }
    }

    fn bval(b: &[f64], kind: Bcast, i: usize, n: usize) -> f64 {
        match kind {
            Bcast::Same => b[i],
            Bcast::Scalar => b[0],
            Bcast::Row => b[i % n],
            Bcast::Col => b[i / n],
        }
    }

    fn node_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, tb.data(), &mut ga, m, n, k);
                    self.send(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(ta.data(), g, &mut gb, m, k, n);
                    self.send(grads, *b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nn(g, tb.data(), &mut ga, m, n, k);
                    self.send(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; n * k];
                    gemm_tn(g, ta.data(), &mut gb, m, n, k);
                    self.send(grads, *b, gb);
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let neg = matches!(self.nodes[i].op, Op::Sub(..));
                if self.rg(*a) {
                    self.send(grads, *a, g.to_vec());
                }
                if self.rg(*b) {
                    let gb: Vec<f64> = if neg { g.iter().map(|v| -v).collect() } else { g.to_vec() };
                    let gb = self.reduce_bcast(gb, self.value(*a), *kind);
                    self.send(grads, *b, gb);
                }
            }
            Op::Mul(a, b, kind) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.cols();
                if self.rg(*a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * Self::bval(tb.data(), *kind, j, n))
                        .collect();
                    self.send(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.iter().zip(ta.data()).map(|(gv, av)| gv * av).collect();
                    let gb = self.reduce_bcast(gb, ta, *kind);
                    self.send(grads, *b, gb);
                }
            }
            Op::Div(a, b, kind) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.cols();
                if self.rg(*a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv / Self::bval(tb.data(), *kind, j, n))
                        .collect();
                    self.send(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| -gv * out.data()[j] / Self::bval(tb.data(), *kind, j, n))
                        .collect();
                    let gb = self.reduce_bcast(gb, ta, *kind);
                    self.send(grads, *b, gb);
                }
            }
            Op::Scale(x, s) => {
                let gx = g.iter().map(|v| v * s).collect();
                self.send(grads, *x, gx);
            }
            Op::AddScalar(x) | Op::StraightThrough(x) => {
                self.send(grads, *x, g.to_vec());
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
                self.send(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                self.send(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                self.send(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.send(grads, *x, gx);
            }
            Op::Softmax { x, axis } => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                let mut gx = vec![0.0; m * n];
                let (outer, inner) = if *axis == 1 { (m, n) } else { (n, m) };
                let at = |o: usize, i: usize| if *axis == 1 { o * n + i } else { i * n + o };
                for o in 0..outer {
                    let dot: f64 = (0..inner).map(|i| g[at(o, i)] * y[at(o, i)]).sum();
                    for i in 0..inner {
                        let j = at(o, i);
                        gx[j] = y[j] * (g[j] - dot);
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let m = out.rows();
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; n];
                        for (j, v) in g.iter().enumerate() {
                            gb[j % n] += v;
                        }
                        self.send(grads, *b, gb);
                    }
                }
                if let Some(gn) = gain {
                    if self.rg(*gn) {
                        let mut gg = vec![0.0; n];
                        for (j, v) in g.iter().enumerate() {
                            gg[j % n] += v * xhat[j];
                        }
                        self.send(grads, *gn, gg);
                    }
                }
                if self.rg(*x) {
                    let gd = gain.map(|gn| self.value(gn).data());
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        let mut dxh = vec![0.0; n];
                        for c in 0..n {
                            dxh[c] = g[r * n + c] * gd.map_or(1.0, |d| d[c]);
                        }
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = (0..n).map(|c| dxh[c] * xhat[r * n + c]).sum();
                        let nf = n as f64;
                        for c in 0..n {
                            gx[r * n + c] =
                                inv_std[r] / nf * (nf * dxh[c] - s1 - xhat[r * n + c] * s2);
                        }
                    }
                    self.send(grads, *x, gx);
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let t = self.value(*x);
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let scale = if matches!(self.nodes[i].op, Op::MeanAxis { .. }) {
                    1.0 / t.shape()[*axis] as f64
                } else {
                    1.0
                };
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        gx[r * n + c] = scale * if *axis == 0 { g[c] } else { g[r] };
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let numel = self.value(*x).numel();
                let s = if matches!(self.nodes[i].op, Op::MeanAll(_)) {
                    g[0] / numel as f64
                } else {
                    g[0]
                };
                self.send(grads, *x, vec![s; numel]);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g[0] / ta.numel() as f64;
                let diff: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| k * (x - y)).collect();
                if self.rg(*b) {
                    self.send(grads, *b, diff.iter().map(|v| -v).collect());
                }
                if self.rg(*a) {
                    self.send(grads, *a, diff);
                }
            }
            Op::Outer(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, d) = (ta.numel(), tb.numel());
                if self.rg(*a) {
                    let ga = (0..n)
                        .map(|r| (0..d).map(|c| g[r * d + c] * tb.data()[c]).sum())
                        .collect();
                    self.send(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; d];
                    for r in 0..n {
                        let av = ta.data()[r];
                        for c in 0..d {
                            gb[c] += g[r * d + c] * av;
                        }
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::ModulatedAggregate { attn, maps, values } => {
                let (ta, tv) = (self.value(*attn), self.value(*values));
                let (k, n, d) = (ta.shape()[0], tv.shape()[0], tv.shape()[1]);
                let v = tv.data();
                if self.rg(*attn) {
                    let mut ga = vec![0.0; k * n];
                    for (slot, &m) in maps.iter().enumerate() {
                        let mv = self.value(m).data();
                        let grow = &g[slot * d..(slot + 1) * d];
                        for p in 0..n {
                            let mut acc = 0.0;
                            for c in 0..d {
                                acc += grow[c] * (mv[p * d + c] * v[p * d + c]);
                            }
                            ga[slot * n + p] += acc;
                        }
                    }
                    self.send(grads, *attn, ga);
                }
                if self.rg(*values) {
                    let mut gv = vec![0.0; n * d];
                    for (slot, &m) in maps.iter().enumerate() {
                        let mv = self.value(m).data();
                        let grow = &g[slot * d..(slot + 1) * d];
                        for p in 0..n {
                            let ap = ta.get(slot, p);
                            for c in 0..d {
                                gv[p * d + c] += (ap * grow[c]) * mv[p * d + c];
                            }
                        }
                    }
                    self.send(grads, *values, gv);
                }
                for (slot, &m) in maps.iter().enumerate() {
                    if !self.rg(m) {
                        continue;
                    }
                    let grow = &g[slot * d..(slot + 1) * d];
                    let mut gm = vec![0.0; n * d];
                    for p in 0..n {
                        let ap = ta.get(slot, p);
                        for c in 0..d {
                            gm[p * d + c] = ap * grow[c] * v[p * d + c];
                        }
                    }
                    self.send(grads, m, gm);
                }
            }
            Op::GatherRows { x, idx } => {
                let t = self.value(*x);
                let n = t.cols();
                let mut gx = vec![0.0; t.numel()];
                for (k, &r) in idx.iter().enumerate() {
                    for c in 0..n {
                        gx[r * n + c] += g[k * n + c];
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let t = self.value(*x);
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let len = out.shape()[1];
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.send(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &v in xs {
                        let len = self.value(v).numel();
                        if self.rg(v) {
                            self.send(grads, v, g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                } else {
                    let total = out.shape()[1];
                    let mut off = 0;
                    for &v in xs {
                        let (m, w) = (self.value(v).shape()[0], self.value(v).shape()[1]);
                        if self.rg(v) {
                            let mut gv = Vec::with_capacity(m * w);
                            for r in 0..m {
                                gv.extend_from_slice(&g[r * total + off..r * total + off + w]);
                            }
                            self.send(grads, v, gv);
                        }
                        off += w;
                    }
                }
            }
        }
    }
}
