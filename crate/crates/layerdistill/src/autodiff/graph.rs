//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once through [`GraphBuilder`], then evaluated any
//! number of times against named input tensors. Evaluation caches every
//! node's value; [`Evaluation::backward_scalar`] replays the graph in
//! reverse to produce exact partial derivatives for every bound input with
//! `requires_grad` set. [`Evaluation::backward_seeded`] accepts explicit
//! output cotangents, so a pipeline split across two graphs can chain
//! vector-Jacobian products through the boundary.
//!
//! The primitive set is exactly what the encoder and the distillation
//! losses need. Shapes are inferred and checked at build time; binding a
//! tensor of the wrong shape is a configuration error at forward time.

use std::collections::BTreeMap;

use super::kernels;
use super::tensor::{sc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Input(String),
    Constant(Tensor<T>),
    Add,
    /// x[n x m] + v[m], v broadcast across rows.
    AddRow,
    Mul,
    Scale(T),
    MatMul,
    Transpose,
    Reshape,
    SliceCols {
        start: usize,
        len: usize,
    },
    ConcatCols,
    /// Row gather: out[i] = x[indices[i]]. Also the embedding-lookup primitive.
    GatherRows(Vec<usize>),
    /// Replace the listed rows of x with the (broadcast) embedding row e.
    MaskRows(Vec<usize>),
    Softmax,
    LogSoftmax,
    LayerNorm {
        eps: T,
    },
    /// x[t x d] cross-correlated per channel with w[k x d], zero same-padding.
    DepthwiseConv1d,
    /// x[n x 2d] -> x[:, :d] * sigmoid(x[:, d:]).
    Glu,
    Swish,
    /// Per-row cosine similarity with an epsilon guard on each norm.
    RowCosine {
        eps: T,
    },
    /// Full reduction to a single element.
    Sum,
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols => "concat_cols",
            Op::GatherRows(_) => "gather_rows",
            Op::MaskRows(_) => "mask_rows",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::DepthwiseConv1d => "depthwise_conv1d",
            Op::Glu => "glu",
            Op::Swish => "swish",
            Op::RowCosine { .. } => "row_cosine",
            Op::Sum => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    label: Option<String>,
}

/// Immutable operation graph: nodes in topological order plus named outputs.
#[derive(Debug, Clone)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    inputs: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
}

impl<T: Scalar> Graph<T> {
    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().map(|(n, _)| n.as_str())
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.iter().map(|(n, _)| n.as_str())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }

    fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.label {
            Some(l) => format!("node #{} ({} '{}')", id.0, node.op.name(), l),
            None => format!("node #{} ({})", id.0, node.op.name()),
        }
    }

    /// Run the forward pass against named input tensors.
    pub fn forward(&self, inputs: &Bindings<T>) -> Result<Evaluation<'_, T>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut needs_grad = vec![false; self.nodes.len()];

        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input(name) => {
                    let t = inputs.get(name).ok_or_else(|| {
                        Error::config(format!("input '{name}' not bound"))
                    })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::config(format!(
                            "input '{name}' expects shape {:?}, got {:?}",
                            node.shape,
                            t.shape()
                        )));
                    }
                    needs_grad[idx] = t.requires_grad();
                    t.clone()
                }
                Op::Constant(t) => t.clone(),
                op => {
                    needs_grad[idx] = node.inputs.iter().any(|i| needs_grad[i.0]);
                    let args: Vec<&Tensor<T>> =
                        node.inputs.iter().map(|i| &values[i.0]).collect();
                    eval_op(op, &args, &node.shape)
                }
            };
            if let Some(pos) = value.finite_violation() {
                return Err(Error::numeric(format!(
                    "non-finite value at element {pos} of {}",
                    self.describe(NodeId(idx))
                )));
            }
            values.push(value);
        }

        Ok(Evaluation {
            graph: self,
            values,
            needs_grad,
        })
    }
}

/// Named tensors bound to a graph's inputs for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Bindings<T> {
    pub fn new() -> Self {
        Bindings {
            map: BTreeMap::new(),
        }
    }

    pub fn set(mut self, name: impl Into<String>, tensor: Tensor<T>) -> Self {
        self.map.insert(name.into(), tensor);
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }
}

/// Gradients keyed by input name. Inputs with `requires_grad` that receive
/// no flow report zeros of the input's shape.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

/// Cached forward values for one evaluation of a graph.
pub struct Evaluation<'g, T: Scalar> {
    graph: &'g Graph<T>,
    values: Vec<Tensor<T>>,
    needs_grad: Vec<bool>,
}

impl<'g, T: Scalar> Evaluation<'g, T> {
    pub fn output(&self, name: &str) -> Result<&Tensor<T>> {
        let id = self
            .graph
            .output_id(name)
            .ok_or_else(|| Error::usage(format!("no output named '{name}'")))?;
        Ok(&self.values[id.0])
    }

    pub fn outputs(&self) -> BTreeMap<String, Tensor<T>> {
        self.graph
            .outputs
            .iter()
            .map(|(n, id)| (n.clone(), self.values[id.0].clone()))
            .collect()
    }

    /// Reverse pass seeded with d(output)/d(output) = 1 for a scalar output.
    pub fn backward_scalar(&self, output: &str) -> Result<Gradients<T>> {
        let id = self
            .graph
            .output_id(output)
            .ok_or_else(|| Error::usage(format!("no output named '{output}'")))?;
        if self.values[id.0].numel() != 1 {
            return Err(Error::usage(format!(
                "gradient target '{output}' has shape {:?}, expected a scalar",
                self.values[id.0].shape()
            )));
        }
        let seed = Tensor::from_parts(self.values[id.0].shape().to_vec(), vec![T::one()], false);
        self.run_backward(&[(id, seed)])
    }

    /// Reverse pass seeded with explicit cotangents for named outputs.
    pub fn backward_seeded(&self, seeds: &[(&str, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut pairs = Vec::with_capacity(seeds.len());
        for (name, cot) in seeds {
            let id = self
                .graph
                .output_id(name)
                .ok_or_else(|| Error::usage(format!("no output named '{name}'")))?;
            if cot.shape() != self.values[id.0].shape() {
                return Err(Error::usage(format!(
                    "cotangent for '{name}' has shape {:?}, output has {:?}",
                    cot.shape(),
                    self.values[id.0].shape()
                )));
            }
            pairs.push((id, cot.clone()));
        }
        self.run_backward(&pairs)
    }

    fn run_backward(&self, seeds: &[(NodeId, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut adjoints: Vec<Option<Vec<T>>> = vec![None; self.graph.nodes.len()];
        for (id, cot) in seeds {
            let slot = adjoints[id.0].get_or_insert_with(|| vec![T::zero(); cot.numel()]);
            for (a, &c) in slot.iter_mut().zip(cot.data()) {
                *a += c;
            }
        }

        for idx in (0..self.graph.nodes.len()).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let gy = match adjoints[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.graph.nodes[idx];
            if matches!(node.op, Op::Input(_) | Op::Constant(_)) {
                adjoints[idx] = Some(gy);
                continue;
            }
            let arg_ids: Vec<usize> = node.inputs.iter().map(|i| i.0).collect();
            let args: Vec<&Tensor<T>> = arg_ids.iter().map(|&i| &self.values[i]).collect();
            let grads = backward_op(&node.op, &args, &self.values[idx], &gy);
            for (slot, grad) in arg_ids.iter().zip(grads) {
                if !self.needs_grad[*slot] {
                    continue;
                }
                if let Some(g) = grad {
                    let acc = adjoints[*slot]
                        .get_or_insert_with(|| vec![T::zero(); self.values[*slot].numel()]);
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
        }

        let mut out = Gradients::new();
        for (name, id) in &self.graph.inputs {
            let value = &self.values[id.0];
            if !value.requires_grad() {
                continue;
            }
            let grad = match adjoints[id.0].take() {
                Some(g) => Tensor::from_parts(value.shape().to_vec(), g, false),
                None => Tensor::zeros(value.shape().to_vec()),
            };
            if let Some(pos) = grad.finite_violation() {
                return Err(Error::numeric(format!(
                    "non-finite gradient at element {pos} for input '{name}'"
                )));
            }
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }
}

/// Incremental graph construction with build-time shape inference.
#[derive(Debug, Default)]
pub struct GraphBuilder<T: Scalar> {
    nodes: Vec<Node<T>>,
    inputs: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new() -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            label: None,
        });
        id
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn rows_cols(&self, id: NodeId) -> Result<(usize, usize)> {
        match self.shape(id) {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::config(format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    /// Attach a diagnostic label used in numeric error messages.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = Some(label.into());
    }

    pub fn input(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<NodeId> {
        let name = name.into();
        if self.inputs.iter().any(|(n, _)| n == &name) {
            return Err(Error::config(format!("duplicate input name '{name}'")));
        }
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::config(format!(
                "input '{name}' has invalid shape {shape:?}"
            )));
        }
        let id = self.push(Op::Input(name.clone()), vec![], shape);
        self.inputs.push((name, id));
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Constant(t), vec![], shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add, vec![a, b], shape))
    }

    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (_, cols) = self.rows_cols(x)?;
        let (vr, vc) = self.rows_cols(v)?;
        if vr != 1 || vc != cols {
            return Err(Error::config(format!(
                "add_row expects a row of width {cols}, got {:?}",
                self.shape(v)
            )));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::AddRow, vec![x, v], shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul, vec![a, b], shape))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(c), vec![x], shape)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match (sa, sb) {
            ([n, k1], [k2, m]) if k1 == k2 => {
                let shape = vec![*n, *m];
                Ok(self.push(Op::MatMul, vec![a, b], shape))
            }
            _ => Err(Error::config(format!(
                "matmul shape mismatch: {sa:?} x {sb:?}"
            ))),
        }
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        match self.shape(x) {
            [r, c] => {
                let shape = vec![*c, *r];
                Ok(self.push(Op::Transpose, vec![x], shape))
            }
            s => Err(Error::config(format!("transpose expects rank 2, got {s:?}"))),
        }
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || numel != self.shape(x).iter().product::<usize>() {
            return Err(Error::config(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        Ok(self.push(Op::Reshape, vec![x], shape))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x)?;
        if len == 0 || start + len > cols {
            return Err(Error::config(format!(
                "slice_cols [{start}, {start}+{len}) out of width {cols}"
            )));
        }
        Ok(self.push(Op::SliceCols { start, len }, vec![x], vec![rows, len]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::config("concat_cols of zero parts".to_string()));
        }
        let (rows, _) = self.rows_cols(parts[0])?;
        let mut width = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p)?;
            if r != rows {
                return Err(Error::config(format!(
                    "concat_cols row mismatch: {rows} vs {r}"
                )));
            }
            width += c;
        }
        Ok(self.push(Op::ConcatCols, parts.to_vec(), vec![rows, width]))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x)?;
        if indices.is_empty() {
            return Err(Error::config("gather_rows with no indices".to_string()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::config(format!(
                "gather_rows index {bad} out of {rows} rows"
            )));
        }
        let shape = vec![indices.len(), cols];
        Ok(self.push(Op::GatherRows(indices), vec![x], shape))
    }

    pub fn mask_rows(&mut self, x: NodeId, embedding: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x)?;
        let (er, ec) = self.rows_cols(embedding)?;
        if er != 1 || ec != cols {
            return Err(Error::config(format!(
                "mask_rows embedding must be a row of width {cols}, got {:?}",
                self.shape(embedding)
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "mask_rows indices must be strictly increasing".to_string(),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::config(format!(
                "mask_rows index {bad} out of {rows} rows"
            )));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::MaskRows(indices), vec![x, embedding], shape))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.rows_cols(x)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Softmax, vec![x], shape))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.rows_cols(x)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::LogSoftmax, vec![x], shape))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (_, cols) = self.rows_cols(x)?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let (r, c) = self.rows_cols(id)?;
            if r != 1 || c != cols {
                return Err(Error::config(format!(
                    "layer_norm {name} must be a row of width {cols}, got {:?}",
                    self.shape(id)
                )));
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::LayerNorm { eps: sc(eps) }, vec![x, gamma, beta], shape))
    }

    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (_, channels) = self.rows_cols(x)?;
        match self.shape(w) {
            [k, c] if *c == channels && k % 2 == 1 => {
                let shape = self.shape(x).to_vec();
                Ok(self.push(Op::DepthwiseConv1d, vec![x, w], shape))
            }
            s => Err(Error::config(format!(
                "depthwise_conv1d weights must be [odd k, {channels}], got {s:?}"
            ))),
        }
    }

    pub fn glu(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x)?;
        if cols % 2 != 0 {
            return Err(Error::config(format!(
                "glu expects an even width, got {cols}"
            )));
        }
        Ok(self.push(Op::Glu, vec![x], vec![rows, cols / 2]))
    }

    pub fn swish(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Swish, vec![x], shape))
    }

    pub fn row_cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.rows_cols(a)?;
        let (rb, cb) = self.rows_cols(b)?;
        if ra != rb || ca != cb {
            return Err(Error::config(format!(
                "row_cosine shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.push(Op::RowCosine { eps: sc(COSINE_EPS) }, vec![a, b], vec![ra]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x], vec![1])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.shape(x).iter().product::<usize>();
        let s = self.sum(x);
        self.scale(s, T::one() / sc(n as f64))
    }

    pub fn output(&mut self, name: impl Into<String>, id: NodeId) -> Result<()> {
        let name = name.into();
        if self.outputs.iter().any(|(n, _)| n == &name) {
            return Err(Error::config(format!("duplicate output name '{name}'")));
        }
        self.outputs.push((name, id));
        Ok(())
    }

    pub fn finish(self) -> Graph<T> {
        Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }
}

/// Epsilon added to each norm in cosine denominators.
pub const COSINE_EPS: f64 = 1e-8;

fn eval_op<T: Scalar>(op: &Op<T>, args: &[&Tensor<T>], out_shape: &[usize]) -> Tensor<T> {
    let data = match op {
        Op::Input(_) | Op::Constant(_) => unreachable!("handled by forward"),
        Op::Add => {
            let (a, b) = (args[0].data(), args[1].data());
            a.iter().zip(b).map(|(&x, &y)| x + y).collect()
        }
        Op::AddRow => {
            let x = args[0];
            let v = args[1].data();
            let (_, cols) = x.rows_cols().unwrap();
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks_exact(cols) {
                for (xv, vv) in row.iter().zip(v) {
                    out.push(*xv + *vv);
                }
            }
            out
        }
        Op::Mul => {
            let (a, b) = (args[0].data(), args[1].data());
            a.iter().zip(b).map(|(&x, &y)| x * y).collect()
        }
        Op::Scale(c) => args[0].data().iter().map(|&x| x * *c).collect(),
        Op::MatMul => {
            let (n, k) = (args[0].shape()[0], args[0].shape()[1]);
            let m = args[1].shape()[1];
            let mut out = vec![T::zero(); n * m];
            kernels::matmul_acc(args[0].data(), args[1].data(), &mut out, n, k, m);
            out
        }
        Op::Transpose => {
            let (r, c) = (args[0].shape()[0], args[0].shape()[1]);
            let x = args[0].data();
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x[i * c + j];
                }
            }
            out
        }
        Op::Reshape => args[0].data().to_vec(),
        Op::SliceCols { start, len } => {
            let (_, cols) = args[0].rows_cols().unwrap();
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for row in args[0].data().chunks_exact(cols) {
                out.extend_from_slice(&row[*start..*start + *len]);
            }
            out
        }
        Op::ConcatCols => {
            let rows = out_shape[0];
            let mut out = Vec::with_capacity(out_shape.iter().product());
            let views: Vec<(&[T], usize)> = args
                .iter()
                .map(|a| {
                    let (_, c) = a.rows_cols().unwrap();
                    (a.data(), c)
                })
                .collect();
            for i in 0..rows {
                for (data, c) in &views {
                    out.extend_from_slice(&data[i * c..(i + 1) * c]);
                }
            }
            out
        }
        Op::GatherRows(indices) => {
            let (_, cols) = args[0].rows_cols().unwrap();
            let x = args[0].data();
            let mut out = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
            }
            out
        }
        Op::MaskRows(indices) => {
            let (_, cols) = args[0].rows_cols().unwrap();
            let mut out = args[0].data().to_vec();
            let e = args[1].data();
            for &i in indices {
                out[i * cols..(i + 1) * cols].copy_from_slice(e);
            }
            out
        }
        Op::Softmax => {
            let (_, cols) = args[0].rows_cols().unwrap();
            let mut out = vec![T::zero(); args[0].numel()];
            for (row, orow) in args[0]
                .data()
                .chunks_exact(cols)
                .zip(out.chunks_exact_mut(cols))
            {
                kernels::softmax_row(row, orow);
            }
            out
        }
        Op::LogSoftmax => {
            let (_, cols) = args[0].rows_cols().unwrap();
            let mut out = vec![T::zero(); args[0].numel()];
            for (row, orow) in args[0]
                .data()
                .chunks_exact(cols)
                .zip(out.chunks_exact_mut(cols))
            {
                kernels::log_softmax_row(row, orow);
            }
            out
        }
        Op::LayerNorm { eps } => {
            let (_, cols) = args[0].rows_cols().unwrap();
            let gamma = args[1].data();
            let beta = args[2].data();
            let inv_n = T::one() / sc(cols as f64);
            let mut out = Vec::with_capacity(args[0].numel());
            for row in args[0].data().chunks_exact(cols) {
                let mean = row.iter().cloned().sum::<T>() * inv_n;
                let var = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>()
                    * inv_n;
                let inv_std = T::one() / (var + *eps).sqrt();
                for ((&v, &g), &b) in row.iter().zip(gamma).zip(beta) {
                    out.push((v - mean) * inv_std * g + b);
                }
            }
            out
        }
        Op::DepthwiseConv1d => {
            let (t_len, channels) = args[0].rows_cols().unwrap();
            let k = args[1].shape()[0];
            let pad = (k - 1) / 2;
            let x = args[0].data();
            let w = args[1].data();
            let mut out = vec![T::zero(); t_len * channels];
            for t in 0..t_len {
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let src = src as usize;
                    let orow = &mut out[t * channels..(t + 1) * channels];
                    let xrow = &x[src * channels..(src + 1) * channels];
                    let wrow = &w[j * channels..(j + 1) * channels];
                    for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
            out
        }
        Op::Glu => {
            let (_, cols) = args[0].rows_cols().unwrap();
            let half = cols / 2;
            let mut out = Vec::with_capacity(args[0].numel() / 2);
            for row in args[0].data().chunks_exact(cols) {
                for i in 0..half {
                    out.push(row[i] * kernels::sigmoid(row[half + i]));
                }
            }
            out
        }
        Op::Swish => args[0]
            .data()
            .iter()
            .map(|&x| x * kernels::sigmoid(x))
            .collect(),
        Op::RowCosine { eps } => {
            let (rows, cols) = args[0].rows_cols().unwrap();
            let (a, b) = (args[0].data(), args[1].data());
            let mut out = Vec::with_capacity(rows);
            for i in 0..rows {
                let ra = &a[i * cols..(i + 1) * cols];
                let rb = &b[i * cols..(i + 1) * cols];
                let dot = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum::<T>();
                let na = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
                let nb = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
                out.push(dot / ((na + *eps) * (nb + *eps)));
            }
            out
        }
        Op::Sum => vec![args[0].data().iter().cloned().sum::<T>()],
    };
    Tensor::from_parts(out_shape.to_vec(), data, false)
}

/// Per-op vector-Jacobian products. Returns one optional gradient buffer per
/// input, in input order.
fn backward_op<T: Scalar>(
    op: &Op<T>,
    args: &[&Tensor<T>],
    out: &Tensor<T>,
    gy: &[T],
) -> Vec<Option<Vec<T>>> {
    match op {
        Op::Input(_) | Op::Constant(_) => unreachable!("leaves have no backward"),
        Op::Add => vec![Some(gy.to_vec()), Some(gy.to_vec())],
        Op::AddRow => {
            let (_, cols) = args[0].rows_cols().unwrap();
            let mut gv = vec![T::zero(); cols];
            for row in gy.chunks_exact(cols) {
                for (g, &r) in gv.iter_mut().zip(row) {
                    *g += r;
                }
            }
            vec![Some(gy.to_vec()), Some(gv)]
        }
        Op::Mul => {
            let (a, b) = (args[0].data(), args[1].data());
            let ga = gy.iter().zip(b).map(|(&g, &y)| g * y).collect();
            let gb = gy.iter().zip(a).map(|(&g, &x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        }
        Op::Scale(c) => vec![Some(gy.iter().map(|&g| g * *c).collect())],
        Op::MatMul => {
            let (n, k) = (args[0].shape()[0], args[0].shape()[1]);
            let m = args[1].shape()[1];
            let mut ga = vec![T::zero(); n * k];
            kernels::matmul_nt_acc(gy, args[1].data(), &mut ga, n, m, k);
            let mut gb = vec![T::zero(); k * m];
            kernels::matmul_tn_acc(args[0].data(), gy, &mut gb, n, k, m);
            vec![Some(ga), Some(gb)]
        }
        Op::Transpose => {
            let (r, c) = (args[0].shape()[0], args[0].shape()[1]);
            let mut gx = vec![T::zero(); r * c];
            for j in 0..c {
                for i in 0..r {
                    gx[i * c + j] = gy[j * r + i];
                }
            }
            vec![Some(gx)]
        }
        Op::Reshape => vec![Some(gy.to_vec())],
        Op::SliceCols { start, len } => {
            let (rows, cols) = args[0].rows_cols().unwrap();
            let mut gx = vec![T::zero(); rows * cols];
            for (i, grow) in gy.chunks_exact(*len).enumerate() {
                gx[i * cols + start..i * cols + start + len].copy_from_slice(grow);
            }
            vec![Some(gx)]
        }
        Op::ConcatCols => {
            let widths: Vec<usize> = args.iter().map(|a| a.rows_cols().unwrap().1).collect();
            let total: usize = widths.iter().sum();
            let rows = args[0].rows_cols().unwrap().0;
            let mut grads: Vec<Option<Vec<T>>> = widths
                .iter()
                .map(|&w| Some(vec![T::zero(); rows * w]))
                .collect();
            for i in 0..rows {
                let mut offset = 0;
                for (g, &w) in grads.iter_mut().zip(&widths) {
                    let dst = g.as_mut().unwrap();
                    dst[i * w..(i + 1) * w]
                        .copy_from_slice(&gy[i * total + offset..i * total + offset + w]);
                    offset += w;
                }
            }
            grads
        }
        Op::GatherRows(indices) => {
            let (rows, cols) = args[0].rows_cols().unwrap();
            let mut gx = vec![T::zero(); rows * cols];
            for (&src, grow) in indices.iter().zip(gy.chunks_exact(cols)) {
                let dst = &mut gx[src * cols..(src + 1) * cols];
                for (d, &g) in dst.iter_mut().zip(grow) {
                    *d += g;
                }
            }
            vec![Some(gx)]
        }
        Op::MaskRows(indices) => {
            let (_, cols) = args[0].rows_cols().unwrap();
            let mut gx = gy.to_vec();
            let mut ge = vec![T::zero(); cols];
            for &i in indices {
                let row = &mut gx[i * cols..(i + 1) * cols];
                for (g, r) in ge.iter_mut().zip(row.iter()) {
                    *g += *r;
                }
                row.fill(T::zero());
            }
            vec![Some(gx), Some(ge)]
        }
        Op::Softmax => {
            let (_, cols) = out.rows_cols().unwrap();
            let mut gx = vec![T::zero(); out.numel()];
            for ((srow, grow), xrow) in out
                .data()
                .chunks_exact(cols)
                .zip(gy.chunks_exact(cols))
                .zip(gx.chunks_exact_mut(cols))
            {
                let dot = srow.iter().zip(grow).map(|(&s, &g)| s * g).sum::<T>();
                for ((x, &s), &g) in xrow.iter_mut().zip(srow).zip(grow) {
                    *x = s * (g - dot);
                }
            }
            vec![Some(gx)]
        }
        Op::LogSoftmax => {
            let (_, cols) = out.rows_cols().unwrap();
            let mut gx = vec![T::zero(); out.numel()];
            for ((yrow, grow), xrow) in out
                .data()
                .chunks_exact(cols)
                .zip(gy.chunks_exact(cols))
                .zip(gx.chunks_exact_mut(cols))
            {
                let gsum = grow.iter().cloned().sum::<T>();
                for ((x, &y), &g) in xrow.iter_mut().zip(yrow).zip(grow) {
                    *x = g - y.exp() * gsum;
                }
            }
            vec![Some(gx)]
        }
        Op::LayerNorm { eps } => {
            let (_, cols) = args[0].rows_cols().unwrap();
            let gamma = args[1].data();
            let inv_n = T::one() / sc(cols as f64);
            let mut gx = vec![T::zero(); args[0].numel()];
            let mut ggamma = vec![T::zero(); cols];
            let mut gbeta = vec![T::zero(); cols];
            for ((xrow, grow), gxrow) in args[0]
                .data()
                .chunks_exact(cols)
                .zip(gy.chunks_exact(cols))
                .zip(gx.chunks_exact_mut(cols))
            {
                let mean = xrow.iter().cloned().sum::<T>() * inv_n;
                let var = xrow
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>()
                    * inv_n;
                let inv_std = T::one() / (var + *eps).sqrt();
                // xhat_i = (x_i - mean) * inv_std; g_i = gy_i * gamma_i
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for ((&x, &g), &gm) in xrow.iter().zip(grow).zip(gamma) {
                    let xhat = (x - mean) * inv_std;
                    let gg = g * gm;
                    m1 += gg;
                    m2 += gg * xhat;
                }
                m1 = m1 * inv_n;
                m2 = m2 * inv_n;
                for (((gx_i, &x), &g), &gm) in
                    gxrow.iter_mut().zip(xrow).zip(grow).zip(gamma)
                {
                    let xhat = (x - mean) * inv_std;
                    *gx_i = (g * gm - m1 - xhat * m2) * inv_std;
                }
                for (((gg, gb), &x), &g) in ggamma
                    .iter_mut()
                    .zip(gbeta.iter_mut())
                    .zip(xrow)
                    .zip(grow)
                {
                    let xhat = (x - mean) * inv_std;
                    *gg += g * xhat;
                    *gb += g;
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        }
        Op::DepthwiseConv1d => {
            let (t_len, channels) = args[0].rows_cols().unwrap();
            let k = args[1].shape()[0];
            let pad = (k - 1) / 2;
            let x = args[0].data();
            let w = args[1].data();
            let mut gx = vec![T::zero(); t_len * channels];
            let mut gw = vec![T::zero(); k * channels];
            for t in 0..t_len {
                let grow = &gy[t * channels..(t + 1) * channels];
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let src = src as usize;
                    let xrow = &x[src * channels..(src + 1) * channels];
                    let wrow = &w[j * channels..(j + 1) * channels];
                    let gxrow = &mut gx[src * channels..(src + 1) * channels];
                    for ((g, &wv), &gyv) in gxrow.iter_mut().zip(wrow).zip(grow) {
                        *g += wv * gyv;
                    }
                    let gwrow = &mut gw[j * channels..(j + 1) * channels];
                    for ((g, &xv), &gyv) in gwrow.iter_mut().zip(xrow).zip(grow) {
                        *g += xv * gyv;
                    }
                }
            }
            vec![Some(gx), Some(gw)]
        }
        Op::Glu => {
            let (_, cols) = args[0].rows_cols().unwrap();
            let half = cols / 2;
            let x = args[0].data();
            let mut gx = vec![T::zero(); args[0].numel()];
            for (i, grow) in gy.chunks_exact(half).enumerate() {
                let xrow = &x[i * cols..(i + 1) * cols];
                let gxrow = &mut gx[i * cols..(i + 1) * cols];
                for j in 0..half {
                    let s = kernels::sigmoid(xrow[half + j]);
                    gxrow[j] = grow[j] * s;
                    gxrow[half + j] = grow[j] * xrow[j] * s * (T::one() - s);
                }
            }
            vec![Some(gx)]
        }
        Op::Swish => {
            let gx = args[0]
                .data()
                .iter()
                .zip(gy)
                .map(|(&x, &g)| {
                    let s = kernels::sigmoid(x);
                    g * (s + x * s * (T::one() - s))
                })
                .collect();
            vec![Some(gx)]
        }
        Op::RowCosine { eps } => {
            let (rows, cols) = args[0].rows_cols().unwrap();
            let (a, b) = (args[0].data(), args[1].data());
            let mut ga = vec![T::zero(); rows * cols];
            let mut gb = vec![T::zero(); rows * cols];
            let tiny = sc::<T>(1e-30);
            for i in 0..rows {
                let ra = &a[i * cols..(i + 1) * cols];
                let rb = &b[i * cols..(i + 1) * cols];
                let na = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
                let nb = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
                let da = na + *eps;
                let db = nb + *eps;
                let denom = da * db;
                let y = out.data()[i];
                let g = gy[i];
                let gra = &mut ga[i * cols..(i + 1) * cols];
                let grb = &mut gb[i * cols..(i + 1) * cols];
                for j in 0..cols {
                    let mut d_a = rb[j] / denom;
                    if na > tiny {
                        d_a = d_a - y * ra[j] / (na * da);
                    }
                    let mut d_b = ra[j] / denom;
                    if nb > tiny {
                        d_b = d_b - y * rb[j] / (nb * db);
                    }
                    gra[j] = g * d_a;
                    grb[j] = g * d_b;
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Sum => vec![Some(vec![gy[0]; args[0].numel()])],
    }
}
