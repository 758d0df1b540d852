//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a define-by-run tape: each builder method validates shapes,
//! evaluates the primitive eagerly, and records it. [`Graph::backward`]
//! replays the tape once in reverse, accumulating gradients for every
//! parameter of the borrowed [`ParamSet`]. [`grad_check`] is the independent
//! central-finite-difference oracle used by the test suites.
//!
//! The primitive set is fixed: add, mul (both with row/column/scalar
//! broadcasting), matmul (with transpose flags), concat, slice, embedding
//! lookup, tanh, sigmoid, relu, log, exp, softmax over the last axis, layer
//! normalization, reduce sum/mean, and log-sum-exp. Everything else in the
//! model is composed from these.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Large finite stand-in for -inf; keeps every tensor value finite while
/// guaranteeing exp underflows to exactly 0.
pub const NEG_HUGE: f64 = -1e30;

/// Dense row-major tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("unsupported shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) view; rank-1 tensors are treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Plain f64 matmul with transpose flags; the compute kernel shared by
/// forward and backward. `a` is (am x ak) before transposition.
fn matmul_raw(
    a: &[f64],
    (am, ak): (usize, usize),
    ta: bool,
    b: &[f64],
    (bm, bk): (usize, usize),
    tb: bool,
) -> (Vec<f64>, usize, usize) {
    let (m, k1) = if ta { (ak, am) } else { (am, ak) };
    let (k2, n) = if tb { (bk, bm) } else { (bm, bk) };
    debug_assert_eq!(k1, k2);
    let k = k1;
    // Materialize effective operands so the inner loop is cache-friendly.
    let a_eff: Vec<f64>;
    let a_ref: &[f64] = if ta {
        a_eff = transpose(a, am, ak);
        &a_eff
    } else {
        a
    };
    let b_eff: Vec<f64>;
    let b_ref: &[f64] = if tb {
        b_eff = transpose(b, bm, bk);
        &b_eff
    } else {
        b
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a_ref[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b_ref[kk * n..(kk + 1) * n];
            for j in 0..n {
                o_row[j] += av * b_row[j];
            }
        }
    }
    (out, m, n)
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// How the second operand of add/mul lines up against the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Col,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    if (ar, ac) == (br, bc) {
        Ok(Broadcast::Same)
    } else if b.numel() == 1 {
        Ok(Broadcast::Scalar)
    } else if br == 1 && bc == ac {
        Ok(Broadcast::Row)
    } else if bc == 1 && br == ar {
        Ok(Broadcast::Col)
    } else {
        Err(Error::shape(
            op,
            format!("cannot broadcast {:?} against {:?}", b.shape(), a.shape()),
        ))
    }
}

/// Index of `b`'s element lined up with position (r, c) of `a`.
fn bcast_index(kind: Broadcast, r: usize, c: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => r * cols + c,
        Broadcast::Scalar => 0,
        Broadcast::Row => c,
        Broadcast::Col => r,
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Param(usize),
    Constant,
    Add(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize, end: usize },
    Lookup { table: NodeId, ids: Vec<usize> },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId),
    SumLast(NodeId),
    MeanLast(NodeId),
    SumAll(NodeId),
    LogSumExpLast(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// Owned output value; `None` for parameter leaves, whose values live in
    /// the borrowed `ParamSet`.
    value: Option<Tensor>,
}

/// Named parameter tensors, ordered by insertion. The order is the canonical
/// serialization order, so it must be deterministic per model configuration.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn total_coords(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

/// Per-parameter gradients, dense and aligned with the `ParamSet` order.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            grads: params.values.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.grads[idx]
    }

    pub fn by_name<'a>(&'a self, params: &ParamSet, name: &str) -> Option<&'a Tensor> {
        params.index_of(name).map(|i| &self.grads[i])
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.grads.iter_mut()
    }

    /// Accumulate `other`, entry by entry, in parameter order.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (g, o) in self.grads.iter_mut().zip(other.grads.iter()) {
            for (gv, ov) in g.data.iter_mut().zip(o.data.iter()) {
                *gv += ov;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Define-by-run tape over a borrowed parameter set.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph { params, nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id].op {
            Op::Param(i) => self.params.value(*i),
            _ => self.nodes[id].value.as_ref().expect("non-param node has a value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value: Some(value) });
        self.nodes.len() - 1
    }

    /// Leaf for a named parameter; memoized so each parameter appears once.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::shape("param", format!("unknown parameter `{name}`")))?;
        if let Some(id) = self.param_nodes[idx] {
            return Ok(id);
        }
        self.nodes.push(Node { op: Op::Param(idx), value: None });
        let id = self.nodes.len() - 1;
        self.param_nodes[idx] = Some(id);
        Ok(id)
    }

    /// Leaf that receives no gradient (inputs, masks, one-hots, constants).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let kind = broadcast_kind("add", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let (rows, cols) = av.dims2();
        let mut data = Vec::with_capacity(av.numel());
        for r in 0..rows {
            for c in 0..cols {
                data.push(av.data[r * cols + c] + bv.data[bcast_index(kind, r, c, cols)]);
            }
        }
        let shape = av.shape.clone();
        Ok(self.push(Op::Add(a, b, kind), Tensor { shape, data }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let kind = broadcast_kind("mul", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let (rows, cols) = av.dims2();
        let mut data = Vec::with_capacity(av.numel());
        for r in 0..rows {
            for c in 0..cols {
                data.push(av.data[r * cols + c] * bv.data[bcast_index(kind, r, c, cols)]);
            }
        }
        let shape = av.shape.clone();
        Ok(self.push(Op::Mul(a, b, kind), Tensor { shape, data }))
    }

    /// a - b, composed from the primitives.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// Multiply by a compile-time constant (mul against a scalar leaf).
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let c = self.scalar(s);
        self.mul(a, c)
    }

    /// max(x, floor), composed as relu(x - floor) + floor.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        let c = self.scalar(-floor);
        let shifted = self.add(a, c)?;
        let r = self.relu(shifted)?;
        let c2 = self.scalar(floor);
        self.add(r, c2)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (am, ak) = av.dims2();
        let (bm, bk) = bv.dims2();
        let inner_a = if ta { am } else { ak };
        let inner_b = if tb { bk } else { bm };
        if inner_a != inner_b {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dims differ: {:?}{} x {:?}{}",
                    av.shape(),
                    if ta { "ᵀ" } else { "" },
                    bv.shape(),
                    if tb { "ᵀ" } else { "" }
                ),
            ));
        }
        let (out, m, n) = matmul_raw(&av.data, (am, ak), ta, &bv.data, (bm, bk), tb);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, Tensor { shape: vec![m, n], data: out }))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts".to_string()));
        }
        if axis > 1 {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims2()).collect();
        let (r0, c0) = dims[0];
        for (i, &(r, c)) in dims.iter().enumerate() {
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("part {i} has dims {r}x{c}, incompatible with {r0}x{c0} on axis {axis}"),
                ));
            }
        }
        let value = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(&self.value(p).data);
            }
            Tensor { shape: vec![rows, c0], data }
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(dims.iter()) {
                    let v = self.value(p);
                    data.extend_from_slice(&v.data[r * c..(r + 1) * c]);
                }
            }
            Tensor { shape: vec![r0, cols], data }
        };
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, value))
    }

    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(input);
        let (rows, cols) = v.dims2();
        let extent = if axis == 0 { rows } else { cols };
        if axis > 1 || start >= end || end > extent {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} on axis {axis} of {rows}x{cols}"),
            ));
        }
        let value = if axis == 0 {
            Tensor {
                shape: vec![end - start, cols],
                data: v.data[start * cols..end * cols].to_vec(),
            }
        } else {
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&v.data[r * cols + start..r * cols + end]);
            }
            Tensor { shape: vec![rows, end - start], data }
        };
        Ok(self.push(Op::Slice { input, axis, start, end }, value))
    }

    /// Row gather: out[i] = table[ids[i]], the embedding-lookup primitive.
    pub fn lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, cols) = t.dims2();
        if ids.is_empty() {
            return Err(Error::shape("lookup", "empty id list".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("lookup", format!("id {bad} out of range 0..{rows}")));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&t.data[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            Op::Lookup { table, ids: ids.to_vec() },
            Tensor { shape: vec![ids.len(), cols], data },
        ))
    }

    fn unary(&mut self, input: NodeId, op: fn(NodeId) -> Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(input);
        let value = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| f(x)).collect() };
        self.push(op(input), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(a, Op::Tanh, f64::tanh))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(a, Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp())))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(a, Op::Relu, |x| if x > 0.0 { x } else { 0.0 }))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(a, Op::Log, f64::ln))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.unary(a, Op::Exp, f64::exp))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (rows, cols) = v.dims2();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &v.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let shape = v.shape.clone();
        Ok(self.push(Op::Softmax(a), Tensor { shape, data }))
    }

    /// Normalize each row to zero mean and unit variance (eps 1e-5).
    /// Learned gain/shift are composed outside with mul/add.
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let v = self.value(a);
        let (rows, cols) = v.dims2();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &v.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * inv;
            }
        }
        let shape = v.shape.clone();
        Ok(self.push(Op::LayerNorm(a), Tensor { shape, data }))
    }

    /// Row sums; (rows, cols) -> (rows, 1).
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (rows, cols) = v.dims2();
        let data: Vec<f64> =
            (0..rows).map(|r| v.data[r * cols..(r + 1) * cols].iter().sum()).collect();
        Ok(self.push(Op::SumLast(a), Tensor { shape: vec![rows, 1], data }))
    }

    /// Row means; (rows, cols) -> (rows, 1).
    pub fn mean_last(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (rows, cols) = v.dims2();
        let data: Vec<f64> = (0..rows)
            .map(|r| v.data[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64)
            .collect();
        Ok(self.push(Op::MeanLast(a), Tensor { shape: vec![rows, 1], data }))
    }

    /// Sum of every element; result is a scalar.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s: f64 = v.data.iter().sum();
        Ok(self.push(Op::SumAll(a), Tensor::scalar(s)))
    }

    /// Stable log(sum(exp(row))); (rows, cols) -> (rows, 1).
    pub fn logsumexp_last(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (rows, cols) = v.dims2();
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            data.push(max + s.ln());
        }
        Ok(self.push(Op::LogSumExpLast(a), Tensor { shape: vec![rows, 1], data }))
    }

    /// Smallest |input| feeding any relu in the graph, or +inf when there is
    /// none. Central finite differences are only a valid oracle while no
    /// perturbation crosses a relu kink, so FD-based tests check this gap
    /// before trusting their comparison.
    pub fn relu_kink_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for &x in self.value(a).data() {
                    gap = gap.min(x.abs());
                }
            }
        }
        gap
    }

    /// Reverse pass from a scalar loss node. Visits every node exactly once
    /// in reverse insertion order (reverse topological order by construction)
    /// and returns dense per-parameter gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(Error::shape("backward", format!("node {loss} not in graph")));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            // Clone op metadata cheaply; tensor payloads stay in place.
            let op = self.nodes[id].op.clone();
            match op {
                Op::Param(_) | Op::Constant => {
                    grads[id] = Some(g); // restore for final extraction
                }
                Op::Add(a, b, kind) => {
                    let (rows, cols) = self.value(a).dims2();
                    accumulate(&mut grads, a, &g);
                    let gb = reduce_broadcast(&g, kind, rows, cols, self.value(b).numel());
                    accumulate(&mut grads, b, &gb);
                }
                Op::Mul(a, b, kind) => {
                    let (rows, cols) = self.value(a).dims2();
                    let av = self.value(a).data.clone();
                    let bv = self.value(b).data.clone();
                    let mut ga = vec![0.0; av.len()];
                    let mut gb_full = vec![0.0; av.len()];
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            let bi = bcast_index(kind, r, c, cols);
                            ga[i] = g[i] * bv[bi];
                            gb_full[i] = g[i] * av[i];
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                    let gb = reduce_broadcast(&gb_full, kind, rows, cols, bv.len());
                    accumulate(&mut grads, b, &gb);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (am, ak) = self.value(a).dims2();
                    let (bm, bk) = self.value(b).dims2();
                    let m = if ta { ak } else { am };
                    let n = if tb { bm } else { bk };
                    let av = &self.value(a).data;
                    let bv = &self.value(b).data;
                    // dA° = G B°ᵀ, dB° = A°ᵀ G, transposed back as needed.
                    let (d_a, d_b);
                    if ta {
                        // A° = Aᵀ → dA = B° Gᵀ   (shape am x ak)
                        let (v, _, _) = matmul_raw(bv, (bm, bk), tb, &g, (m, n), true);
                        d_a = v;
                    } else {
                        let (v, _, _) = matmul_raw(&g, (m, n), false, bv, (bm, bk), !tb);
                        d_a = v;
                    }
                    if tb {
                        // B° = Bᵀ → dB = Gᵀ A°  (shape bm x bk)
                        let (v, _, _) = matmul_raw(&g, (m, n), true, av, (am, ak), ta);
                        d_b = v;
                    } else {
                        let (v, _, _) = matmul_raw(av, (am, ak), !ta, &g, (m, n), false);
                        d_b = v;
                    }
                    accumulate(&mut grads, a, &d_a);
                    accumulate(&mut grads, b, &d_b);
                }
                Op::Concat { parts, axis } => {
                    let dims: Vec<(usize, usize)> =
                        parts.iter().map(|&p| self.value(p).dims2()).collect();
                    if axis == 0 {
                        let mut off = 0;
                        for (&p, &(r, c)) in parts.iter().zip(dims.iter()) {
                            accumulate(&mut grads, p, &g[off..off + r * c]);
                            off += r * c;
                        }
                    } else {
                        let rows = dims[0].0;
                        let total_cols: usize = dims.iter().map(|d| d.1).sum();
                        let mut off = 0;
                        for (&p, &(_, c)) in parts.iter().zip(dims.iter()) {
                            let mut gp = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                gp.extend_from_slice(&g[r * total_cols + off..r * total_cols + off + c]);
                            }
                            accumulate(&mut grads, p, &gp);
                            off += c;
                        }
                    }
                }
                Op::Slice { input, axis, start, end } => {
                    let (rows, cols) = self.value(input).dims2();
                    let mut gi = vec![0.0; rows * cols];
                    if axis == 0 {
                        gi[start * cols..end * cols].copy_from_slice(&g);
                    } else {
                        let w = end - start;
                        for r in 0..rows {
                            gi[r * cols + start..r * cols + end]
                                .copy_from_slice(&g[r * w..(r + 1) * w]);
                        }
                    }
                    accumulate(&mut grads, input, &gi);
                }
                Op::Lookup { table, ids } => {
                    let (rows, cols) = self.value(table).dims2();
                    let mut gt = vec![0.0; rows * cols];
                    for (pos, &i) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[i * cols + c] += g[pos * cols + c];
                        }
                    }
                    accumulate(&mut grads, table, &gt);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value.as_ref().unwrap().data;
                    let ga: Vec<f64> = g.iter().zip(y.iter()).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, a, &ga);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value.as_ref().unwrap().data;
                    let ga: Vec<f64> =
                        g.iter().zip(y.iter()).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, a, &ga);
                }
                Op::Relu(a) => {
                    let x = self.value(a).data.clone();
                    let ga: Vec<f64> =
                        g.iter().zip(x.iter()).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                    accumulate(&mut grads, a, &ga);
                }
                Op::Log(a) => {
                    let x = self.value(a).data.clone();
                    let ga: Vec<f64> = g.iter().zip(x.iter()).map(|(&g, &x)| g / x).collect();
                    accumulate(&mut grads, a, &ga);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[id].value.as_ref().unwrap().data;
                    let ga: Vec<f64> = g.iter().zip(y.iter()).map(|(&g, &y)| g * y).collect();
                    accumulate(&mut grads, a, &ga);
                }
                Op::Softmax(a) => {
                    let y = self.nodes[id].value.as_ref().unwrap();
                    let (rows, cols) = y.dims2();
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y.data[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(&y, &g)| y * g).sum();
                        for c in 0..cols {
                            ga[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::LayerNorm(a) => {
                    const EPS: f64 = 1e-5;
                    let x = self.value(a).data.clone();
                    let (rows, cols) = self.value(a).dims2();
                    let y = self.nodes[id].value.as_ref().unwrap().data.clone();
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let xr = &x[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean = xr.iter().sum::<f64>() / cols as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + EPS).sqrt();
                        let g_mean = gr.iter().sum::<f64>() / cols as f64;
                        let gy_mean =
                            gr.iter().zip(yr.iter()).map(|(&g, &y)| g * y).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            ga[r * cols + c] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::SumLast(a) => {
                    let (rows, cols) = self.value(a).dims2();
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] = g[r];
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::MeanLast(a) => {
                    let (rows, cols) = self.value(a).dims2();
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] = g[r] / cols as f64;
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::SumAll(a) => {
                    let n = self.value(a).numel();
                    let ga = vec![g[0]; n];
                    accumulate(&mut grads, a, &ga);
                }
                Op::LogSumExpLast(a) => {
                    let x = self.value(a).data.clone();
                    let (rows, cols) = self.value(a).dims2();
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let xr = &x[r * cols..(r + 1) * cols];
                        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = xr.iter().map(|&v| (v - max).exp()).sum();
                        for c in 0..cols {
                            ga[r * cols + c] = g[r] * (xr[c] - max).exp() / sum;
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                }
            }
        }

        let mut out = Gradients::zeros_like(self.params);
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(p) = node.op {
                if let Some(g) = &grads[id] {
                    out.grads[p].data.copy_from_slice(g);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g.iter()) {
                *e += v;
            }
        }
        None => grads[id] = Some(g.to_vec()),
    }
}

/// Collapse a full-shaped gradient back to the broadcast operand's shape.
fn reduce_broadcast(g: &[f64], kind: Broadcast, rows: usize, cols: usize, b_numel: usize) -> Vec<f64> {
    match kind {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().sum()],
        Broadcast::Row => {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c] += g[r * cols + c];
                }
            }
            debug_assert_eq!(out.len(), b_numel);
            out
        }
        Broadcast::Col => {
            let mut out = vec![0.0; rows];
            for r in 0..rows {
                for c in 0..cols {
                    out[r] += g[r * cols + c];
                }
            }
            debug_assert_eq!(out.len(), b_numel);
            out
        }
    }
}

/// Central finite-difference gradient verification.
///
/// `build` constructs the forward graph and returns the scalar loss node; it
/// is re-run twice per parameter coordinate with that coordinate perturbed by
/// ±eps. Returns the worst relative error over all coordinates, with
/// denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(params: &ParamSet, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    assert!(eps > 0.0);
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new(p);
        let loss = build(&mut g)?;
        Ok(g.value(loss).data()[0])
    };
    let mut perturbed = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        for j in 0..params.value(i).numel() {
            let orig = perturbed.value(i).data()[j];
            perturbed.value_mut(i).data_mut()[j] = orig + eps;
            let up = eval(&perturbed)?;
            perturbed.value_mut(i).data_mut()[j] = orig - eps;
            let down = eval(&perturbed)?;
            perturbed.value_mut(i).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let ana = analytic.get(i).data()[j];
            let denom = ana.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((ana - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn params_from(pairs: &[(&str, Tensor)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, t) in pairs {
            p.insert(n, t.clone());
        }
        p
    }

    fn rand_tensor(rng: &mut StreamRng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.normal() * 0.5).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn add_identity() {
        let p = ParamSet::new();
        let mut g = Graph::new(&p);
        let x = g.constant(Tensor::row(vec![1.0, 2.0]));
        let z = g.constant(Tensor::row(vec![0.0, 0.0]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let p = ParamSet::new();
        let mut g = Graph::new(&p);
        let x = g.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity() {
        let p = ParamSet::new();
        let mut g = Graph::new(&p);
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let p = ParamSet::new();
        let mut g = Graph::new(&p);
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn square_derivative() {
        // y = x·x at x = 3 → dy/dx = 6
        let p = params_from(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&p);
        let x = g.param("x").unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads.by_name(&p, "x").unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_gradient_by_hand() {
        // y = log(softmax(x))[0] at x = [0, 0] → dy/dx = [0.5, -0.5]
        let p = params_from(&[("x", Tensor::row(vec![0.0, 0.0]))]);
        let mut g = Graph::new(&p);
        let x = g.param("x").unwrap();
        let sm = g.softmax(x).unwrap();
        let lg = g.log(sm).unwrap();
        let y = g.slice(lg, 1, 0, 1).unwrap();
        let grads = g.backward(y).unwrap();
        let gx = grads.by_name(&p, "x").unwrap().data();
        assert!((gx[0] - 0.5).abs() < 1e-12 && (gx[1] + 0.5).abs() < 1e-12, "{gx:?}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let p = params_from(&[("x", Tensor::row(vec![1.0, 2.0]))]);
        let mut g = Graph::new(&p);
        let x = g.param("x").unwrap();
        let y = g.exp(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn fanout_accumulates() {
        // loss = x*2 + x*3 → d/dx = 5
        let p = params_from(&[("x", Tensor::scalar(1.0))]);
        let mut g = Graph::new(&p);
        let x = g.param("x").unwrap();
        let a = g.scale(x, 2.0).unwrap();
        let b = g.scale(x, 3.0).unwrap();
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads.by_name(&p, "x").unwrap().data()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn constant_graph_grad_check_is_zero() {
        let p = params_from(&[("w", Tensor::row(vec![1.0, -2.0]))]);
        let err = grad_check(&p, 1e-5, |g| {
            let c = g.constant(Tensor::scalar(4.0));
            let d = g.scalar(1.0);
            g.mul(c, d)
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_every_primitive() {
        // Each primitive wrapped into a scalar loss via sum_all and a random
        // projection so gradients are non-degenerate.
        let mut rng = StreamRng::new(1234).stream("init");
        let w = rand_tensor(&mut rng, 3, 4);
        let u = rand_tensor(&mut rng, 3, 4);
        let m = rand_tensor(&mut rng, 4, 2);
        let table = rand_tensor(&mut rng, 5, 3);
        let p = params_from(&[("w", w), ("u", u), ("m", m), ("table", table)]);

        type Build = fn(&mut Graph) -> Result<NodeId>;
        let cases: Vec<(&str, Build)> = vec![
            ("add_same", |g| {
                let (w, u) = (g.param("w")?, g.param("u")?);
                let y = g.add(w, u)?;
                g.sum_all(y)
            }),
            ("add_row", |g| {
                let w = g.param("w")?;
                let u = g.param("u")?;
                let row = g.slice(u, 0, 0, 1)?;
                let y = g.add(w, row)?;
                g.sum_all(y)
            }),
            ("add_col", |g| {
                let w = g.param("w")?;
                let u = g.param("u")?;
                let col = g.slice(u, 1, 0, 1)?;
                let y = g.add(w, col)?;
                g.sum_all(y)
            }),
            ("mul_same", |g| {
                let (w, u) = (g.param("w")?, g.param("u")?);
                let y = g.mul(w, u)?;
                g.sum_all(y)
            }),
            ("mul_scalar", |g| {
                let w = g.param("w")?;
                let u = g.param("u")?;
                let s = g.slice(u, 1, 0, 1)?;
                let s = g.slice(s, 0, 0, 1)?;
                let y = g.mul(w, s)?;
                g.sum_all(y)
            }),
            ("matmul", |g| {
                let (w, m) = (g.param("w")?, g.param("m")?);
                let y = g.matmul(w, m)?;
                g.sum_all(y)
            }),
            ("matmul_ta", |g| {
                let (w, u) = (g.param("w")?, g.param("u")?);
                let y = g.matmul_t(w, u, true, false)?;
                g.sum_all(y)
            }),
            ("matmul_tb", |g| {
                let (w, u) = (g.param("w")?, g.param("u")?);
                let y = g.matmul_t(w, u, false, true)?;
                g.sum_all(y)
            }),
            ("concat0", |g| {
                let (w, u) = (g.param("w")?, g.param("u")?);
                let y = g.concat(&[w, u], 0)?;
                let e = g.exp(y)?;
                g.sum_all(e)
            }),
            ("concat1", |g| {
                let (w, u) = (g.param("w")?, g.param("u")?);
                let y = g.concat(&[w, u], 1)?;
                let t = g.tanh(y)?;
                g.sum_all(t)
            }),
            ("slice", |g| {
                let w = g.param("w")?;
                let y = g.slice(w, 1, 1, 3)?;
                let t = g.sigmoid(y)?;
                g.sum_all(t)
            }),
            ("lookup", |g| {
                let t = g.param("table")?;
                let y = g.lookup(t, &[0, 2, 2, 4])?;
                let e = g.tanh(y)?;
                g.sum_all(e)
            }),
            ("tanh", |g| {
                let w = g.param("w")?;
                let y = g.tanh(w)?;
                g.sum_all(y)
            }),
            ("sigmoid", |g| {
                let w = g.param("w")?;
                let y = g.sigmoid(w)?;
                g.sum_all(y)
            }),
            ("relu", |g| {
                let w = g.param("w")?;
                let y = g.relu(w)?;
                g.sum_all(y)
            }),
            ("log", |g| {
                let w = g.param("w")?;
                let sq = g.mul(w, w)?;
                let c = g.scalar(0.5);
                let pos = g.add(sq, c)?;
                let y = g.log(pos)?;
                g.sum_all(y)
            }),
            ("exp", |g| {
                let w = g.param("w")?;
                let y = g.exp(w)?;
                g.sum_all(y)
            }),
            ("softmax", |g| {
                let w = g.param("w")?;
                let y = g.softmax(w)?;
                let u = g.param("u")?;
                let z = g.mul(y, u)?;
                g.sum_all(z)
            }),
            ("layer_norm", |g| {
                let w = g.param("w")?;
                let y = g.layer_norm(w)?;
                let u = g.param("u")?;
                let z = g.mul(y, u)?;
                g.sum_all(z)
            }),
            ("sum_last", |g| {
                let w = g.param("w")?;
                let y = g.sum_last(w)?;
                let e = g.tanh(y)?;
                g.sum_all(e)
            }),
            ("mean_last", |g| {
                let w = g.param("w")?;
                let y = g.mean_last(w)?;
                let e = g.exp(y)?;
                g.sum_all(e)
            }),
            ("logsumexp", |g| {
                let w = g.param("w")?;
                let y = g.logsumexp_last(w)?;
                let t = g.tanh(y)?;
                g.sum_all(t)
            }),
        ];
        for (name, build) in cases {
            let err = grad_check(&p, 1e-5, build).unwrap();
            assert!(err < 1e-4, "primitive `{name}` grad check failed: {err:.3e}");
        }
    }

    #[test]
    fn grad_check_two_layer_tanh_mlp() {
        let mut rng = StreamRng::new(77).stream("init");
        let p = params_from(&[
            ("w1", rand_tensor(&mut rng, 4, 5)),
            ("b1", Tensor::row((0..4).map(|_| rng.normal() * 0.1).collect())),
            ("w2", rand_tensor(&mut rng, 1, 4)),
        ]);
        let x = rand_tensor(&mut rng, 1, 5);
        let err = grad_check(&p, 1e-5, move |g| {
            let xin = g.constant(x.clone());
            let w1 = g.param("w1")?;
            let b1 = g.param("b1")?;
            let w2 = g.param("w2")?;
            let h = g.matmul_t(xin, w1, false, true)?;
            let h = g.add(h, b1)?;
            let h = g.tanh(h)?;
            let y = g.matmul_t(h, w2, false, true)?;
            g.sum_all(y)
        })
        .unwrap();
        assert!(err < 1e-4, "mlp grad check: {err:.3e}");
    }

    #[test]
    fn grad_check_linear_softmax_cross_entropy() {
        let mut rng = StreamRng::new(99).stream("init");
        let p = params_from(&[
            ("w", rand_tensor(&mut rng, 3, 4)),
            ("b", Tensor::row((0..3).map(|_| rng.normal() * 0.1).collect())),
        ]);
        let x = rand_tensor(&mut rng, 2, 4);
        let onehot = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let err = grad_check(&p, 1e-5, move |g| {
            let xin = g.constant(x.clone());
            let w = g.param("w")?;
            let b = g.param("b")?;
            let logits = g.matmul_t(xin, w, false, true)?;
            let logits = g.add(logits, b)?;
            let probs = g.softmax(logits)?;
            let oh = g.constant(onehot.clone());
            let picked = g.mul(probs, oh)?;
            let per_row = g.sum_last(picked)?;
            let lp = g.log(per_row)?;
            let total = g.sum_all(lp)?;
            g.scale(total, -1.0)
        })
        .unwrap();
        assert!(err < 1e-4, "cross-entropy grad check: {err:.3e}");
    }

    #[test]
    fn grad_check_lstm_cell_single_step() {
        let hidden = 3;
        let input = 4;
        let mut rng = StreamRng::new(5).stream("init");
        let p = params_from(&[
            ("w_ih", rand_tensor(&mut rng, 4 * hidden, input)),
            ("w_hh", rand_tensor(&mut rng, 4 * hidden, hidden)),
            ("b", Tensor::row((0..4 * hidden).map(|_| rng.normal() * 0.1).collect())),
        ]);
        let x = rand_tensor(&mut rng, 1, input);
        let h0 = rand_tensor(&mut rng, 1, hidden);
        let c0 = rand_tensor(&mut rng, 1, hidden);
        let err = grad_check(&p, 1e-5, move |g| {
            let x = g.constant(x.clone());
            let h_prev = g.constant(h0.clone());
            let c_prev = g.constant(c0.clone());
            let w_ih = g.param("w_ih")?;
            let w_hh = g.param("w_hh")?;
            let b = g.param("b")?;
            let gi = g.matmul_t(x, w_ih, false, true)?;
            let gh = g.matmul_t(h_prev, w_hh, false, true)?;
            let gates = g.add(gi, gh)?;
            let gates = g.add(gates, b)?;
            let i_g = g.slice(gates, 1, 0, hidden)?;
            let f_g = g.slice(gates, 1, hidden, 2 * hidden)?;
            let g_g = g.slice(gates, 1, 2 * hidden, 3 * hidden)?;
            let o_g = g.slice(gates, 1, 3 * hidden, 4 * hidden)?;
            let i_s = g.sigmoid(i_g)?;
            let f_s = g.sigmoid(f_g)?;
            let g_t = g.tanh(g_g)?;
            let o_s = g.sigmoid(o_g)?;
            let fc = g.mul(f_s, c_prev)?;
            let ig = g.mul(i_s, g_t)?;
            let c = g.add(fc, ig)?;
            let ct = g.tanh(c)?;
            let h = g.mul(o_s, ct)?;
            g.sum_all(h)
        })
        .unwrap();
        assert!(err < 1e-4, "lstm grad check: {err:.3e}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = StreamRng::new(31).stream("init");
        let p = ParamSet::new();
        for _ in 0..20 {
            let mut g = Graph::new(&p);
            let x = g.constant(rand_tensor(&mut rng, 4, 7));
            let y = g.softmax(x).unwrap();
            let v = g.value(y);
            for r in 0..4 {
                let s: f64 = v.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(v.row_slice(r).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = StreamRng::new(8).stream("init");
        let w = rand_tensor(&mut rng, 6, 6);
        let p = params_from(&[("w", w)]);
        let x = rand_tensor(&mut rng, 2, 6);
        let run = |p: &ParamSet| -> Vec<f64> {
            let mut g = Graph::new(p);
            let xin = g.constant(x.clone());
            let w = g.param("w").unwrap();
            let y = g.matmul_t(xin, w, false, true).unwrap();
            let y = g.softmax(y).unwrap();
            g.value(y).data().to_vec()
        };
        let a = run(&p);
        let b = run(&p);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn clamp_min_matches_max() {
        let p = ParamSet::new();
        let mut g = Graph::new(&p);
        let x = g.constant(Tensor::row(vec![-1.0, 0.0, 0.5, 2.0]));
        let y = g.clamp_min(x, 0.5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 2.0]);
    }
}
