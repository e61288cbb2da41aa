//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients additively, so fan-out is
//! handled by summation. Graphs are built fresh for every forward pass.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{self, dims2, dims3, Tensor};

/// Named trainable tensors. Iteration order is the lexical order of names,
/// which keeps optimizer updates and serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    /// Replaces an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return shape_err("ParamStore::set", format!("`{name}`: {:?} vs {:?}", slot.shape(), value.shape()));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    fn shared(&self, name: &str) -> Option<Arc<Tensor>> {
        self.tensors.get(name).cloned()
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    /// Gradient for `name`, or zeros of `shape` when the parameter did not
    /// influence the loss.
    pub fn get_or_zeros(&self, name: &str, shape: &[usize]) -> Tensor {
        self.by_name.get(name).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Bmm { a: NodeId, b: NodeId, transpose_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Gelu(NodeId),
    Powf(NodeId, f64),
    MaxScalar(NodeId, f64),
    Maximum(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    Sum(NodeId),
    Gather { x: NodeId, index: Arc<Vec<usize>> },
    Concat(Vec<NodeId>),
    Reshape(NodeId),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    param: Option<String>,
}

/// Operation tape. Single-threaded; independent graphs may run concurrently.
pub struct Graph {
    params: ParamStore,
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<String, NodeId>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Graph {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            params: params.clone(),
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Leaf for a named parameter. Repeated calls return the same node.
    pub fn param(&self, name: &str) -> Result<Var<'_>> {
        if let Some(&id) = self.param_nodes.borrow().get(name) {
            return Ok(Var { graph: self, id });
        }
        let value = self
            .params
            .shared(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let id = self.push_node(value, Op::Leaf, Some(name.to_string()));
        self.param_nodes.borrow_mut().insert(name.to_string(), id);
        Ok(Var { graph: self, id })
    }

    /// Untracked input; receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push_node(Arc::new(value), Op::Leaf, None);
        Var { graph: self, id }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push_node(&self, value: Arc<Tensor>, op: Op, param: Option<String>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, param });
        nodes.len() - 1
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let id = self.push_node(Arc::new(value), op, None);
        Var { graph: self, id }
    }

    fn value(&self, id: NodeId) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse-mode gradients of a single-element `loss` with respect to every
    /// parameter leaf recorded on this graph.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: NodeId| nodes[i].value.as_ref();
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.param {
                        let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                        out.by_name.insert(name.clone(), t);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let [m, k] = dims2("matmul", av)?;
                    let n = bv.shape()[1];
                    // dA = dY * B^T, dB = A^T * dY
                    let mut ga = vec![0.0; m * k];
                    tensor::gemm(&g, bv.data(), &mut ga, m, n, k, true);
                    accumulate(&mut grads, *a, &ga);
                    let at = av.transpose2d()?;
                    let mut gb = vec![0.0; k * n];
                    tensor::gemm(at.data(), &g, &mut gb, k, m, n, false);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Bmm { a, b, transpose_b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let [batch, m, k] = dims3("bmm", av)?;
                    let n = if *transpose_b { bv.shape()[1] } else { bv.shape()[2] };
                    let mut ga = vec![0.0; batch * m * k];
                    let mut gb = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let a_s = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let b_s = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        let ga_s = &mut ga[bi * m * k..(bi + 1) * m * k];
                        let gb_s = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *transpose_b {
                            // Y = A B^T with B: [n, k]. dA = dY B, dB = dY^T A.
                            tensor::gemm(gs, b_s, ga_s, m, n, k, false);
                            let gt = transpose_slice(gs, m, n);
                            tensor::gemm(&gt, a_s, gb_s, n, m, k, false);
                        } else {
                            tensor::gemm(gs, b_s, ga_s, m, n, k, true);
                            let at = transpose_slice(a_s, m, k);
                            tensor::gemm(&at, gs, gb_s, k, m, n, false);
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g / b).collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::AddRow(a, bias) => {
                    let n = val(*bias).len();
                    accumulate(&mut grads, *a, &g);
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *bias, &gb);
                }
                Op::MulRow(a, w) => {
                    let (av, wv) = (val(*a).data(), val(*w).data());
                    let n = wv.len();
                    let mut ga = vec![0.0; g.len()];
                    let mut gw = vec![0.0; n];
                    for (r, (grow, arow)) in g.chunks(n).zip(av.chunks(n)).enumerate() {
                        for j in 0..n {
                            ga[r * n + j] = grow[j] * wv[j];
                            gw[j] += grow[j] * arow[j];
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *w, &gw);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads, *a, &g),
                Op::Exp(a) => {
                    let y = node.value.data();
                    let ga: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Log(a) => {
                    let x = val(*a).data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(g, x)| g / x).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Softplus(a) => {
                    let x = val(*a).data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Gelu(a) => {
                    let x = val(*a).data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Powf(a, e) => {
                    let x = val(*a).data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(g, x)| g * e * x.powf(e - 1.0)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::MaxScalar(a, c) => {
                    let x = val(*a).data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(g, x)| if x > c { *g } else { 0.0 }).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Maximum(a, b) | Op::Minimum(a, b) => {
                    let pick_a = matches!(node.op, Op::Maximum(..));
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let mut ga = vec![0.0; g.len()];
                    let mut gb = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        // Ties route the gradient to `a`.
                        let a_wins = if pick_a { av[i] >= bv[i] } else { av[i] <= bv[i] };
                        if a_wins {
                            ga[i] = g[i];
                        } else {
                            gb[i] = g[i];
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let mut ga = vec![0.0; g.len()];
                    for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for j in 0..n {
                            orow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((grow, yrow), orow)) in
                        g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)).enumerate()
                    {
                        let mean_g: f64 = grow.iter().sum::<f64>() / n as f64;
                        let mean_gy: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                        for j in 0..n {
                            orow[j] = inv_std[r] * (grow[j] - mean_g - yrow[j] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; val(*a).len()];
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Gather { x, index } => {
                    let mut gx = vec![0.0; val(*x).len()];
                    for (gv, &src) in g.iter().zip(index.iter()) {
                        gx[src] += gv;
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        accumulate(&mut grads, p, &g[offset..offset + n]);
                        offset += n;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn transpose_slice(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Untracked copy of this value.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value().as_ref().clone())
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars belong to different graphs");
    }

    fn binary(
        self,
        other: Var<'g>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<Var<'g>> {
        self.same_graph(&other);
        let v = self.value().zip_map(&other.value(), op, f)?;
        Ok(self.graph.push(v, make(self.id, other.id)))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'g> {
        let v = self.value().map(f);
        self.graph.push(v, op)
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let v = tensor::matmul(&self.value(), &other.value())?;
        Ok(self.graph.push(v, Op::MatMul(self.id, other.id)))
    }

    pub fn bmm(self, other: Var<'g>, transpose_b: bool) -> Result<Var<'g>> {
        self.same_graph(&other);
        let v = tensor::bmm(&self.value(), &other.value(), transpose_b)?;
        Ok(self.graph.push(v, Op::Bmm { a: self.id, b: other.id, transpose_b }))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn maximum(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "maximum", |a, b| if a >= b { a } else { b }, Op::Maximum)
    }

    pub fn minimum(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "minimum", |a, b| if a <= b { a } else { b }, Op::Minimum)
    }

    fn row_broadcast(
        self,
        row: Var<'g>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<Var<'g>> {
        self.same_graph(&row);
        let x = self.value();
        let r = row.value();
        let n = x.last_dim();
        if r.len() != n {
            return shape_err(op, format!("row of {} values against last dim {n} of {:?}", r.len(), x.shape()));
        }
        let data = x
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r.data()).map(|(&a, &b)| f(a, b)).collect::<Vec<_>>())
            .collect();
        Ok(self.graph.push(Tensor::from_parts(x.shape().to_vec(), data), make(self.id, row.id)))
    }

    /// Adds `bias` (length = last dim) to every row.
    pub fn add_row(self, bias: Var<'g>) -> Result<Var<'g>> {
        self.row_broadcast(bias, "add_row", |a, b| a + b, Op::AddRow)
    }

    /// Multiplies every row element-wise by `w` (length = last dim).
    pub fn mul_row(self, w: Var<'g>) -> Result<Var<'g>> {
        self.row_broadcast(w, "mul_row", |a, b| a * b, Op::MulRow)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(|v| v * c, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(|v| v + c, Op::AddScalar(self.id))
    }

    /// `c - self`
    pub fn rsub_scalar(self, c: f64) -> Var<'g> {
        self.neg().add_scalar(c)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(self) -> Var<'g> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'g> {
        self.unary(softplus, Op::Softplus(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'g> {
        self.unary(gelu, Op::Gelu(self.id))
    }

    pub fn powf(self, e: f64) -> Var<'g> {
        self.unary(|v| v.powf(e), Op::Powf(self.id, e))
    }

    pub fn max_scalar(self, c: f64) -> Var<'g> {
        self.unary(|v| v.max(c), Op::MaxScalar(self.id, c))
    }

    pub fn softmax_lastdim(self) -> Var<'g> {
        let v = tensor::softmax_lastdim(&self.value());
        self.graph.push(v, Op::Softmax(self.id))
    }

    /// Normalizes each last-dimension slice to zero mean, unit variance.
    pub fn layer_norm(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let n = x.last_dim();
        let mut out = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.graph.push(v, Op::LayerNorm { x: self.id, inv_std })
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`. Indices may
    /// repeat; their gradients accumulate.
    pub fn gather(self, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != index.len() || shape.iter().any(|&d| d == 0) {
            return shape_err("gather", format!("{} indices for output shape {shape:?}", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return shape_err("gather", format!("index {bad} out of range for {} values", x.len()));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        Ok(self.graph.push(Tensor::from_parts(shape.to_vec(), data), Op::Gather { x: self.id, index }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.graph.push(v, Op::Reshape(self.id)))
    }

    /// Concatenates along the leading axis. Trailing dimensions must agree.
    pub fn concat(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let Some(first) = parts.first() else {
            return invalid("parts", "concat of zero tensors");
        };
        let tail = first.value().shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            first.same_graph(p);
            let v = p.value();
            if v.shape()[1..] != tail[..] {
                return shape_err("concat", format!("{:?} vs trailing {tail:?}", v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.graph.push(Tensor::from_parts(shape, data), Op::Concat(ids)))
    }

    /// Rows `[start, start + len)` of a rank-2 value.
    pub fn rows(self, start: usize, len: usize) -> Result<Var<'g>> {
        let [m, n] = dims2("rows", &self.value())?;
        if len == 0 || start + len > m {
            return shape_err("rows", format!("rows {start}..{} of {m}", start + len));
        }
        let index: Vec<usize> = (start * n..(start + len) * n).collect();
        self.gather(Arc::new(index), &[len, n])
    }

    /// Selected rows of a rank-2 value, in the given order.
    pub fn take_rows(self, rows: &[usize]) -> Result<Var<'g>> {
        let [m, n] = dims2("take_rows", &self.value())?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return shape_err("take_rows", format!("row {bad} of {m}"));
        }
        let index: Vec<usize> = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.gather(Arc::new(index), &[rows.len(), n])
    }

    /// Columns `[start, start + len)` of a rank-2 value.
    pub fn cols(self, start: usize, len: usize) -> Result<Var<'g>> {
        let [m, n] = dims2("cols", &self.value())?;
        if len == 0 || start + len > n {
            return shape_err("cols", format!("cols {start}..{} of {n}", start + len));
        }
        let index: Vec<usize> = (0..m).flat_map(|i| (start..start + len).map(move |j| i * n + j)).collect();
        self.gather(Arc::new(index), &[m, len])
    }

    pub fn transpose2d(self) -> Result<Var<'g>> {
        let [m, n] = dims2("transpose2d", &self.value())?;
        let index: Vec<usize> = (0..n).flat_map(|j| (0..m).map(move |i| i * n + j)).collect();
        self.gather(Arc::new(index), &[n, m])
    }

    /// `[L, heads * dh]` -> `[heads, L, dh]`.
    pub fn split_heads(self, heads: usize) -> Result<Var<'g>> {
        let [l, d] = dims2("split_heads", &self.value())?;
        if heads == 0 || d % heads != 0 {
            return invalid("heads", format!("{d} channels do not split into {heads} heads"));
        }
        let dh = d / heads;
        let index: Vec<usize> = (0..heads)
            .flat_map(|h| (0..l).flat_map(move |i| (0..dh).map(move |c| i * d + h * dh + c)))
            .collect();
        self.gather(Arc::new(index), &[heads, l, dh])
    }

    /// `[heads, L, dh]` -> `[L, heads * dh]`.
    pub fn merge_heads(self) -> Result<Var<'g>> {
        let [heads, l, dh] = dims3("merge_heads", &self.value())?;
        let index: Vec<usize> = (0..l)
            .flat_map(|i| (0..heads).flat_map(move |h| (0..dh).map(move |c| (h * l + i) * dh + c)))
            .collect();
        self.gather(Arc::new(index), &[l, heads * dh])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t);
        s
    }

    #[test]
    fn sum_gives_ones() {
        let store = store_with("p", Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let g = Graph::new(&store);
        let loss = g.param("p").unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_gradient() {
        let store = store_with("p", Tensor::scalar(3.0));
        let g = Graph::new(&store);
        let p = g.param("p").unwrap();
        let loss = p.mul(p).unwrap().sum();
        assert_eq!(g.backward(loss).unwrap().get("p").unwrap().data(), &[6.0]);
    }

    #[test]
    fn unreachable_parameter_is_zero() {
        let mut store = store_with("p", Tensor::scalar(3.0));
        store.insert("q", Tensor::ones(&[2]));
        let g = Graph::new(&store);
        let _ = g.param("q").unwrap().scale(2.0);
        let loss = g.param("p").unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("q").is_none());
        assert_eq!(grads.get_or_zeros("q", &[2]), Tensor::zeros(&[2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = store_with("p", Tensor::ones(&[2]));
        let g = Graph::new(&store);
        let p = g.param("p").unwrap();
        assert_eq!(g.backward(p).unwrap_err(), Error::NonScalarLoss(vec![2]));
    }

    #[test]
    fn param_leaf_is_shared() {
        let store = store_with("p", Tensor::scalar(2.0));
        let g = Graph::new(&store);
        let a = g.param("p").unwrap();
        let b = g.param("p").unwrap();
        let loss = a.add(b).unwrap().sum();
        assert_eq!(g.backward(loss).unwrap().get("p").unwrap().data(), &[2.0]);
        assert_eq!(g.len(), 3);
    }

    // Composite of every tracked op; checked against central differences.
    fn composite(store: &ParamStore) -> Result<(Graph, f64, Gradients)> {
        let g = Graph::new(store);
        let a = g.param("a")?; // [3, 4]
        let b = g.param("b")?; // [4, 4]
        let w = g.param("w")?; // [4]
        let h = a.matmul(b)?.add_row(w)?.gelu().layer_norm(1e-5).mul_row(w)?;
        let s = h.softmax_lastdim();
        let heads = h.split_heads(2)?;
        let att = heads.bmm(heads, true)?.softmax_lastdim().bmm(heads, false)?.merge_heads()?;
        let pos = a.softplus().add(a.sigmoid())?.add_scalar(0.5).powf(1.5).log();
        let mixed = att
            .mul(s)?
            .add(pos)?
            .sub(a.exp().scale(0.1))?
            .div(a.mul(a)?.add_scalar(1.0))?
            .maximum(a.scale(0.3))?
            .minimum(b.rows(0, 3)?)?
            .max_scalar(-0.7);
        let cat = Var::concat(&[mixed, h.transpose2d()?.cols(0, 3)?.transpose2d()?])?;
        let loss = cat.take_rows(&[0, 2, 2, 5])?.reshape(&[16])?.mean();
        let value = loss.value().item();
        let grads = g.backward(loss)?;
        Ok((g, value, grads))
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert("a", Tensor::randn(&[3, 4], 1.0, &mut rng));
        store.insert("b", Tensor::randn(&[4, 4], 1.0, &mut rng));
        store.insert("w", Tensor::randn(&[4], 1.0, &mut rng));
        let (_, _, grads) = composite(&store).unwrap();
        for name in ["a", "b", "w"] {
            let x = store.get(name).unwrap().clone();
            let numeric = finite_diff_grad(
                |t| {
                    let mut s = store.clone();
                    s.set(name, t.clone()).unwrap();
                    composite(&s).unwrap().1
                },
                &x,
                1e-4,
            )
            .unwrap();
            let analytic = grads.get_or_zeros(name, x.shape());
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}: analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn head_split_merge_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let g = Graph::new(&ParamStore::new());
        let x = g.constant(t.clone());
        let split = x.split_heads(3).unwrap();
        assert_eq!(split.shape(), vec![3, 5, 2]);
        assert_eq!(split.value().at(&[1, 4, 0]), t.at(&[4, 2]));
        assert_eq!(*split.merge_heads().unwrap().value(), t);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = Tensor::rand_uniform(&[3, 7], -50.0, 50.0, &mut rng);
            let s = tensor::softmax_lastdim(&t);
            for row in s.data().chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
