use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    gelu_grad_scalar, gelu_scalar, matmul, normalize_rows, softmax_rows, Result, Tensor,
    TensorError, LAYER_NORM_EPS,
};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a + row` with `row` broadcast over the rows of `a`.
    AddRow(NodeId, NodeId),
    /// `a * row` with `row` broadcast over the rows of `a`.
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    NormalizeRows(NodeId),
    Gelu(NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    /// Rows `start..start + len` of the operand.
    SliceRows(NodeId, usize),
    Mean(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    param: Option<String>,
}

/// A reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            value,
            param: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A constant leaf; receives no named gradient.
    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, t, "input")
    }

    /// A named parameter leaf.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<NodeId> {
        let id = self.push(Op::Leaf, t.clone(), "param")?;
        self.nodes[id.0].param = Some(name.to_string());
        Ok(id)
    }

    /// Registers `store[name]` as a parameter leaf.
    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let t = store.get(name)?;
        self.param(name, t)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    fn row_broadcast(
        &self,
        a: NodeId,
        row: NodeId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.len() != c {
            return Err(mismatch(op, av, rv));
        }
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, rv.data()[i % c]))
            .collect();
        Ok(Tensor::from_vec(av.rows(), c, data))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        self.push(Op::AddRow(a, row), v, "add_row")
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        self.push(Op::MulRow(a, row), v, "mul_row")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, "scale")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, "transpose")
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows(a), v, "softmax")
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = normalize_rows(self.value(a));
        self.push(Op::NormalizeRows(a), v, "normalize_rows")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(gelu_scalar);
        self.push(Op::Gelu(a), v, "gelu")
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.value(a).reshape(rows, cols)?;
        self.push(Op::Reshape(a), v, "reshape")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(parts[0]);
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(mismatch("concat_rows", first, v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::from_vec(rows, cols, data),
            "concat_rows",
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start + len > v.rows() || len == 0 {
            return Err(TensorError::InvalidShape(vec![start, len, v.rows()]));
        }
        let c = v.cols();
        let t = Tensor::from_vec(len, c, v.data()[start * c..(start + len) * c].to_vec());
        self.push(Op::SliceRows(a, start), t, "slice_rows")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let m = v.sum() / v.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m), "mean")
    }

    /// `x @ w + b` for a `1 x out` bias.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = self.normalize_rows(x)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    pub fn attention_weights(&mut self, q: NodeId, k: NodeId) -> Result<NodeId> {
        let d = self.value(q).cols();
        if d != self.value(k).cols() {
            return Err(mismatch("attention", self.value(q), self.value(k)));
        }
        let kt = self.transpose(k)?;
        let s = self.matmul(q, kt)?;
        let s = self.scale(s, 1.0 / (d as f64).sqrt())?;
        self.softmax_rows(s)
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let w = self.attention_weights(q, k)?;
        self.matmul(w, v)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let t = self.input(target.clone())?;
        let d = self.sub(pred, t)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::from_vec(lv.rows(), lv.cols(), vec![1.0]));

        fn acc(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut adj[id.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut adj, *a, matmul(&g, &bv.transpose())?);
                    acc(&mut adj, *b, matmul(&av.transpose(), &g)?);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let rv = self.value(*row);
                    acc(&mut adj, *row, column_sums(&g, rv));
                    acc(&mut adj, *a, g);
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (self.value(*a), self.value(*row));
                    let c = av.cols();
                    let ga: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &x)| x * rv.data()[k % c])
                        .collect();
                    let prod = g.zip_map(av, "mul_row", |x, y| x * y)?;
                    acc(&mut adj, *row, column_sums(&prod, rv));
                    acc(&mut adj, *a, Tensor::from_vec(av.rows(), c, ga));
                }
                Op::Scale(a, c) => acc(&mut adj, *a, g.map(|x| x * c)),
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut out = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            out[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut adj, *a, Tensor::from_vec(y.rows(), c, out));
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let c = y.cols();
                    let n = c as f64;
                    let mut out = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let xr = x.row(r);
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let (yr, gr) = (y.row(r), g.row(r));
                        let gmean = gr.iter().sum::<f64>() / n;
                        let gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for j in 0..c {
                            out[r * c + j] = inv * (gr[j] - gmean - yr[j] * gy);
                        }
                    }
                    acc(&mut adj, *a, Tensor::from_vec(y.rows(), c, out));
                }
                Op::Gelu(a) => {
                    let gx = g.zip_map(self.value(*a), "gelu", |d, x| d * gelu_grad_scalar(x))?;
                    acc(&mut adj, *a, gx);
                }
                Op::Reshape(a) => {
                    let av = self.value(*a);
                    acc(&mut adj, *a, Tensor::new(av.shape().to_vec(), g.into_data())?);
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        let slice = g.data()[off * c..(off + r) * c].to_vec();
                        acc(&mut adj, *p, Tensor::from_vec(r, c, slice));
                        off += r;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut full = Tensor::zeros(av.rows(), c);
                    full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut adj, *a, full);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let s = g.data()[0] / av.len() as f64;
                    acc(&mut adj, *a, Tensor::full(av.rows(), av.cols(), s));
                }
            }
        }

        let mut grads = Gradients::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            let Some(name) = &node.param else { continue };
            let g = adj[i]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
            match grads.get_mut(name) {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    grads.insert(name.clone(), g);
                }
            }
        }
        // parameters registered after the loss node cannot influence it
        for node in &self.nodes[loss.0 + 1..] {
            if let Some(name) = &node.param {
                grads
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(grads)
    }
}

fn column_sums(g: &Tensor, like: &Tensor) -> Tensor {
    let c = g.cols();
    let mut s = vec![0.0; c];
    for (k, &x) in g.data().iter().enumerate() {
        s[k % c] += x;
    }
    Tensor::new(like.shape().to_vec(), s).expect("row-broadcast shape")
}

/// Gradient of the scalar `loss` with respect to every parameter leaf.
pub fn grad_of(graph: &Graph, loss: NodeId) -> Result<Gradients> {
    graph.backward(loss)
}
