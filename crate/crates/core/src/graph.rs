//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes; shapes are inferred and
//! checked at construction, so a graph that builds cleanly cannot fail a
//! shape check later. Values for input and parameter nodes are supplied per
//! [`Graph::forward`] call through a name-keyed binding map, which keeps the
//! graph itself immutable and reusable across training steps.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to one node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op<S> {
    /// Data bound at forward time.
    Input { name: String },
    /// Trainable tensor bound at forward time; gradients are collected for it.
    Param { id: ParamId },
    /// `[m,k] x [k,n] -> [m,n]`.
    MatMul { a: NodeId, b: NodeId },
    /// Same-shape elementwise add, or `[m,n] + [n]` with the vector added to
    /// every row.
    Add { a: NodeId, b: NodeId },
    Activation { kind: Activation, x: NodeId },
    /// Mean over rows of the stabilized cross-entropy between `logits` rows
    /// and integer class labels.
    SoftmaxCrossEntropy { logits: NodeId, labels: NodeId },
    ScalarAdd { a: NodeId, b: NodeId },
    ScalarScale { x: NodeId, factor: S },
    /// `sum_i x_i^2`.
    SumSquares { x: NodeId },
    /// `sum_i w_i (x_i - c_i)^2` with constant weights and center.
    WeightedSquaredDiff {
        x: NodeId,
        weights: Tensor<S>,
        center: Tensor<S>,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    op: Op<S>,
    shape: Vec<usize>,
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("node {node} ({what}): shape mismatch, {detail}")]
    Shape {
        node: usize,
        what: &'static str,
        detail: String,
    },
    #[error("no binding provided for node `{0}`")]
    Unbound(String),
    #[error("binding for `{name}` has shape {actual:?}, node expects {expected:?}")]
    BindingShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("node {node} produced a non-finite value")]
    NonFinite { node: usize },
    #[error("node {0} is not scalar-shaped")]
    NotScalar(usize),
    #[error("label {value} at row {row} is not a class index below {classes}")]
    BadLabel {
        row: usize,
        value: f64,
        classes: usize,
    },
    #[error("invalid node id {0}")]
    BadNodeId(usize),
}

/// Gradients of a scalar node with respect to every reachable parameter.
pub type GradientMap<S> = BTreeMap<ParamId, Tensor<S>>;

/// Values of every node after a forward pass.
#[derive(Debug, Clone)]
pub struct NodeValues<S> {
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> NodeValues<S> {
    pub fn get(&self, node: NodeId) -> &Tensor<S> {
        &self.values[node.0]
    }

    pub fn scalar(&self, node: NodeId) -> S {
        self.values[node.0].item()
    }
}

/// Static computation graph.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    /// Parameter nodes in construction order.
    pub fn params(&self) -> Vec<(ParamId, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param { id } => Some((id.clone(), NodeId(i))),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape });
        id
    }

    fn node_shape(&self, node: NodeId) -> Result<&[usize], GraphError> {
        self.nodes
            .get(node.0)
            .map(|n| n.shape.as_slice())
            .ok_or(GraphError::BadNodeId(node.0))
    }

    pub fn input(&mut self, name: impl Into<String>, shape: Vec<usize>) -> NodeId {
        self.push(Op::Input { name: name.into() }, shape)
    }

    pub fn param(&mut self, id: impl Into<ParamId>, shape: Vec<usize>) -> NodeId {
        self.push(Op::Param { id: id.into() }, shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.node_shape(a)?.to_vec();
        let sb = self.node_shape(b)?.to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::Shape {
                node: self.nodes.len(),
                what: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        Ok(self.push(Op::MatMul { a, b }, vec![sa[0], sb[1]]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.node_shape(a)?.to_vec();
        let sb = self.node_shape(b)?.to_vec();
        let broadcast_ok = sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1];
        if sa != sb && !broadcast_ok {
            return Err(GraphError::Shape {
                node: self.nodes.len(),
                what: "add",
                detail: format!("{sa:?} + {sb:?}"),
            });
        }
        Ok(self.push(Op::Add { a, b }, sa))
    }

    pub fn activation(&mut self, kind: Activation, x: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.node_shape(x)?.to_vec();
        Ok(self.push(Op::Activation { kind, x }, shape))
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: NodeId,
    ) -> Result<NodeId, GraphError> {
        let sl = self.node_shape(logits)?.to_vec();
        let sy = self.node_shape(labels)?.to_vec();
        if sl.len() != 2 || sy.len() != 1 || sy[0] != sl[0] {
            return Err(GraphError::Shape {
                node: self.nodes.len(),
                what: "softmax_cross_entropy",
                detail: format!("logits {sl:?}, labels {sy:?}"),
            });
        }
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, labels }, vec![1]))
    }

    pub fn scalar_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        for n in [a, b] {
            if self.node_shape(n)? != [1] {
                return Err(GraphError::NotScalar(n.0));
            }
        }
        Ok(self.push(Op::ScalarAdd { a, b }, vec![1]))
    }

    pub fn scalar_scale(&mut self, x: NodeId, factor: S) -> Result<NodeId, GraphError> {
        if self.node_shape(x)? != [1] {
            return Err(GraphError::NotScalar(x.0));
        }
        Ok(self.push(Op::ScalarScale { x, factor }, vec![1]))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.node_shape(x)?;
        Ok(self.push(Op::SumSquares { x }, vec![1]))
    }

    pub fn weighted_squared_diff(
        &mut self,
        x: NodeId,
        weights: Tensor<S>,
        center: Tensor<S>,
    ) -> Result<NodeId, GraphError> {
        let sx = self.node_shape(x)?.to_vec();
        if weights.shape() != sx.as_slice() || center.shape() != sx.as_slice() {
            return Err(GraphError::Shape {
                node: self.nodes.len(),
                what: "weighted_squared_diff",
                detail: format!(
                    "x {sx:?}, weights {:?}, center {:?}",
                    weights.shape(),
                    center.shape()
                ),
            });
        }
        Ok(self.push(Op::WeightedSquaredDiff { x, weights, center }, vec![1]))
    }

    /// Evaluate every node. Bindings supply values for input and parameter
    /// nodes by name; every produced tensor is checked finite.
    pub fn forward(
        &self,
        bindings: &HashMap<String, Tensor<S>>,
    ) -> Result<NodeValues<S>, GraphError> {
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input { name } => bound(bindings, name, &node.shape)?,
                Op::Param { id } => bound(bindings, id.as_str(), &node.shape)?,
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&values[a.0], &values[b.0]);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let mut out = vec![S::zero(); m * n];
                    mat_mul(ta.data(), tb.data(), m, k, n, &mut out);
                    Tensor::new(vec![m, n], out).expect("matmul shape checked at build")
                }
                Op::Add { a, b } => {
                    let (ta, tb) = (&values[a.0], &values[b.0]);
                    if ta.shape() == tb.shape() {
                        ta.zip_map(tb, |x, y| x + y).expect("same shape")
                    } else {
                        // Row broadcast of a vector bias.
                        let (m, n) = (ta.shape()[0], ta.shape()[1]);
                        let mut out = ta.data().to_vec();
                        for r in 0..m {
                            for c in 0..n {
                                out[r * n + c] = out[r * n + c] + tb.data()[c];
                            }
                        }
                        Tensor::new(vec![m, n], out).expect("shape preserved")
                    }
                }
                Op::Activation { kind, x } => values[x.0].map(|v| apply(*kind, v)),
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let loss = cross_entropy_forward(&values[logits.0], &values[labels.0])?;
                    Tensor::scalar(loss)
                }
                Op::ScalarAdd { a, b } => {
                    Tensor::scalar(values[a.0].item() + values[b.0].item())
                }
                Op::ScalarScale { x, factor } => Tensor::scalar(*factor * values[x.0].item()),
                Op::SumSquares { x } => Tensor::scalar(values[x.0].squared_l2()),
                Op::WeightedSquaredDiff { x, weights, center } => {
                    let xs = values[x.0].data();
                    let total = xs
                        .iter()
                        .zip(weights.data())
                        .zip(center.data())
                        .map(|((&v, &w), &c)| {
                            let d = v - c;
                            w * d * d
                        })
                        .sum();
                    Tensor::scalar(total)
                }
            };
            if !value.is_finite() {
                return Err(GraphError::NonFinite { node: idx });
            }
            values.push(value);
        }
        Ok(NodeValues { values })
    }

    /// Reverse-mode gradients of a scalar node with respect to every
    /// parameter node it depends on.
    pub fn backward(
        &self,
        values: &NodeValues<S>,
        target: NodeId,
    ) -> Result<GradientMap<S>, GraphError> {
        let shape = self.node_shape(target)?;
        if shape != [1] {
            return Err(GraphError::NotScalar(target.0));
        }
        let reachable = self.ancestors(target);
        let mut adjoints: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        adjoints[target.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=target.0).rev() {
            let adj = match adjoints[idx].take() {
                Some(a) => a,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input { .. } | Op::Param { .. } => {
                    adjoints[idx] = Some(adj);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (ta, tb) = (values.get(*a), values.get(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let mut da = vec![S::zero(); m * k];
                    mat_mul_nt(adj.data(), tb.data(), m, n, k, &mut da);
                    accumulate(&mut adjoints[a.0], Tensor::new(vec![m, k], da).unwrap());
                    let mut db = vec![S::zero(); k * n];
                    mat_mul_tn(ta.data(), adj.data(), m, k, n, &mut db);
                    accumulate(&mut adjoints[b.0], Tensor::new(vec![k, n], db).unwrap());
                }
                Op::Add { a, b } => {
                    let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
                    accumulate(&mut adjoints[a.0], adj.clone());
                    if sa == sb {
                        accumulate(&mut adjoints[b.0], adj);
                    } else {
                        // Bias broadcast: fold the row dimension back down.
                        let (m, n) = (sa[0], sa[1]);
                        let mut db = vec![S::zero(); n];
                        for r in 0..m {
                            for c in 0..n {
                                db[c] += adj.data()[r * n + c];
                            }
                        }
                        accumulate(&mut adjoints[b.0], Tensor::vector(db));
                    }
                }
                Op::Activation { kind, x } => {
                    let input = values.get(*x);
                    let output = &values.values[idx];
                    let grad = match kind {
                        Activation::Identity => adj.clone(),
                        Activation::Relu => adj
                            .zip_map(input, |g, v| if v > S::zero() { g } else { S::zero() })
                            .unwrap(),
                        Activation::Tanh => adj
                            .zip_map(output, |g, y| g * (S::one() - y * y))
                            .unwrap(),
                        Activation::Sigmoid => adj
                            .zip_map(output, |g, y| g * y * (S::one() - y))
                            .unwrap(),
                    };
                    accumulate(&mut adjoints[x.0], grad);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let grad =
                        cross_entropy_backward(values.get(*logits), values.get(*labels), adj.item())?;
                    accumulate(&mut adjoints[logits.0], grad);
                }
                Op::ScalarAdd { a, b } => {
                    accumulate(&mut adjoints[a.0], adj.clone());
                    accumulate(&mut adjoints[b.0], adj);
                }
                Op::ScalarScale { x, factor } => {
                    accumulate(&mut adjoints[x.0], Tensor::scalar(*factor * adj.item()));
                }
                Op::SumSquares { x } => {
                    let two_adj = (S::one() + S::one()) * adj.item();
                    let grad = values.get(*x).map(|v| two_adj * v);
                    accumulate(&mut adjoints[x.0], grad);
                }
                Op::WeightedSquaredDiff { x, weights, center } => {
                    // coefficient = adj * 2 keeps the multiplication order
                    // matching the analytic form alpha * w * (x - c) exactly.
                    let coeff = adj.item() * (S::one() + S::one());
                    let xs = values.get(*x);
                    let data: Vec<S> = xs
                        .data()
                        .iter()
                        .zip(weights.data())
                        .zip(center.data())
                        .map(|((&v, &w), &c)| coeff * w * (v - c))
                        .collect();
                    accumulate(
                        &mut adjoints[x.0],
                        Tensor::new(xs.shape().to_vec(), data).unwrap(),
                    );
                }
            }
        }

        let mut grads = GradientMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param { id } = &node.op {
                if reachable[idx] {
                    let grad = adjoints[idx]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(node.shape.clone()));
                    grads.insert(id.clone(), grad);
                }
            }
        }
        Ok(grads)
    }

    /// Nodes the target depends on, including itself.
    fn ancestors(&self, target: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![target.0];
        while let Some(idx) = stack.pop() {
            if seen[idx] {
                continue;
            }
            seen[idx] = true;
            match &self.nodes[idx].op {
                Op::Input { .. } | Op::Param { .. } => {}
                Op::MatMul { a, b } | Op::Add { a, b } | Op::ScalarAdd { a, b } => {
                    stack.push(a.0);
                    stack.push(b.0);
                }
                Op::Activation { x, .. }
                | Op::ScalarScale { x, .. }
                | Op::SumSquares { x }
                | Op::WeightedSquaredDiff { x, .. } => stack.push(x.0),
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    stack.push(logits.0);
                    stack.push(labels.0);
                }
            }
        }
        seen
    }
}

fn bound<S: Scalar>(
    bindings: &HashMap<String, Tensor<S>>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor<S>, GraphError> {
    let tensor = bindings
        .get(name)
        .ok_or_else(|| GraphError::Unbound(name.to_owned()))?;
    if tensor.shape() != shape {
        return Err(GraphError::BindingShape {
            name: name.to_owned(),
            expected: shape.to_vec(),
            actual: tensor.shape().to_vec(),
        });
    }
    Ok(tensor.clone())
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, grad: Tensor<S>) {
    match slot {
        Some(existing) => {
            for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                *e += *g;
            }
        }
        None => *slot = Some(grad),
    }
}

fn apply<S: Scalar>(kind: Activation, v: S) -> S {
    match kind {
        Activation::Identity => v,
        Activation::Relu => {
            if v > S::zero() {
                v
            } else {
                S::zero()
            }
        }
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => S::one() / (S::one() + (-v).exp()),
    }
}

/// `out[m,n] = a[m,k] * b[k,n]`.
fn mat_mul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = p * n;
            for j in 0..n {
                out[i * n + j] += av * b[row + j];
            }
        }
    }
}

/// `out[m,k] = a[m,n] * b[k,n]^T`.
fn mat_mul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    for i in 0..m {
        for j in 0..k {
            let mut acc = S::zero();
            for p in 0..n {
                acc += a[i * n + p] * b[j * n + p];
            }
            out[i * k + j] += acc;
        }
    }
}

/// `out[k,n] = a[m,k]^T * b[m,n]`.
fn mat_mul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for p in 0..m {
        for i in 0..k {
            let av = a[p * k + i];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
}

fn class_index<S: Scalar>(label: S, row: usize, classes: usize) -> Result<usize, GraphError> {
    let as_usize = label.to_usize();
    match as_usize {
        Some(c) if c < classes && S::from(c).map(|v| v == label).unwrap_or(false) => Ok(c),
        _ => Err(GraphError::BadLabel {
            row,
            value: label.to_f64().unwrap_or(f64::NAN),
            classes,
        }),
    }
}

/// Mean over rows of `logsumexp(z) - z[label]`, stabilized by the row max.
fn cross_entropy_forward<S: Scalar>(
    logits: &Tensor<S>,
    labels: &Tensor<S>,
) -> Result<S, GraphError> {
    let (m, k) = (logits.shape()[0], logits.shape()[1]);
    let mut total = S::zero();
    for r in 0..m {
        let row = &logits.data()[r * k..(r + 1) * k];
        let target = class_index(labels.data()[r], r, k)?;
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let sum: S = row.iter().map(|&z| (z - max).exp()).sum();
        total += max + sum.ln() - row[target];
    }
    Ok(total / S::from(m).expect("row count fits in scalar"))
}

/// Rows of `(softmax(z) - onehot(label)) * adj / m`.
fn cross_entropy_backward<S: Scalar>(
    logits: &Tensor<S>,
    labels: &Tensor<S>,
    adj: S,
) -> Result<Tensor<S>, GraphError> {
    let (m, k) = (logits.shape()[0], logits.shape()[1]);
    let scale = adj / S::from(m).expect("row count fits in scalar");
    let mut out = vec![S::zero(); m * k];
    for r in 0..m {
        let row = &logits.data()[r * k..(r + 1) * k];
        let target = class_index(labels.data()[r], r, k)?;
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let sum: S = row.iter().map(|&z| (z - max).exp()).sum();
        for c in 0..k {
            let softmax = (row[c] - max).exp() / sum;
            let indicator = if c == target { S::one() } else { S::zero() };
            out[r * k + c] = (softmax - indicator) * scale;
        }
    }
    Ok(Tensor::new(vec![m, k], out).expect("shape consistent"))
}

/// Central-difference gradient estimate of a scalar-valued function of the
/// parameters: `(eval(p + eps e_i) - eval(p - eps e_i)) / 2 eps` per
/// coordinate. The evaluation must be deterministic.
pub fn finite_diff_gradient<S: Scalar>(
    mut eval: impl FnMut(&BTreeMap<ParamId, Tensor<S>>) -> S,
    params: &BTreeMap<ParamId, Tensor<S>>,
    epsilon: S,
) -> Result<GradientMap<S>, GraphError> {
    assert!(epsilon > S::zero(), "epsilon must be positive");
    let two_eps = epsilon + epsilon;
    let mut grads = GradientMap::new();
    let mut work = params.clone();
    for (id, tensor) in params {
        let mut grad = vec![S::zero(); tensor.len()];
        for i in 0..tensor.len() {
            let original = tensor.data()[i];
            set_entry(&mut work, id, i, original + epsilon);
            let plus = eval(&work);
            set_entry(&mut work, id, i, original - epsilon);
            let minus = eval(&work);
            set_entry(&mut work, id, i, original);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GraphError::NonFinite { node: usize::MAX });
            }
            grad[i] = (plus - minus) / two_eps;
        }
        grads.insert(
            id.clone(),
            Tensor::new(tensor.shape().to_vec(), grad).expect("same shape"),
        );
    }
    Ok(grads)
}

fn set_entry<S: Scalar>(params: &mut BTreeMap<ParamId, Tensor<S>>, id: &ParamId, i: usize, v: S) {
    params.get_mut(id).expect("key exists").data_mut()[i] = v;
}
