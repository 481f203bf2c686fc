//! Recorded computation graphs and their reverse-mode gradients.
//!
//! A [`Graph`] is built once as a list of primitive applications in
//! topological order. Leaf values are supplied through [`Bindings`], so the
//! same graph can be evaluated repeatedly with perturbed inputs, which is how
//! the finite-difference checks drive it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, Tensor};
use super::AutodiffError;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train or inference behaviour for batch normalization and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Where batch normalization takes its statistics from.
#[derive(Debug, Clone, Copy)]
pub enum NormStats {
    /// Statistics of the current batch (train mode).
    Batch { eps: f64 },
    /// Running statistics supplied as graph nodes (inference mode).
    Running { mean: NodeId, var: NodeId, eps: f64 },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Concat(NodeId, NodeId),
    MaxPool {
        input: NodeId,
        groups: usize,
    },
    Mean(NodeId),
    Sum(NodeId),
    BatchNorm {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        stats: NormStats,
    },
    Dropout {
        input: NodeId,
        rate: f64,
        seed: u64,
    },
    SquaredError(NodeId, NodeId),
    BinaryCrossEntropy {
        pred: NodeId,
        target: NodeId,
        clamp: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Concat(..) => "concat",
            Op::MaxPool { .. } => "max_pool",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::SquaredError(..) => "squared_error",
            Op::BinaryCrossEntropy { .. } => "binary_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf | Op::Constant(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Concat(a, b)
            | Op::SquaredError(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Exp(a) | Op::Relu(a) | Op::Sigmoid(a) | Op::Mean(a) | Op::Sum(a) => {
                vec![a]
            }
            Op::MaxPool { input, .. } | Op::Dropout { input, .. } => vec![input],
            Op::BatchNorm {
                input,
                scale,
                shift,
                stats,
            } => match stats {
                NormStats::Batch { .. } => vec![input, scale, shift],
                NormStats::Running { mean, var, .. } => vec![input, scale, shift, mean, var],
            },
            Op::BinaryCrossEntropy { pred, target, .. } => vec![pred, target],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// Topologically ordered record of primitive applications.
///
/// Nodes can only reference earlier nodes, so the graph is acyclic by
/// construction.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn label(&self, node: NodeId) -> Option<&str> {
        self.nodes[node.0].label.as_deref()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for input in op.inputs() {
            assert!(input.0 < self.nodes.len(), "node {} referenced before definition", input.0);
        }
        self.nodes.push(Node { op, label: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Attach a human-readable label used in error messages.
    pub fn set_label(&mut self, node: NodeId, label: impl Into<String>) {
        self.nodes[node.0].label = Some(label.into());
    }

    /// A leaf whose value is supplied through [`Bindings`].
    pub fn leaf(&mut self, name: impl Into<String>) -> NodeId {
        let id = self.push(Op::Leaf);
        self.set_label(id, name);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Elementwise sum. `b` may have fewer rows than `a` as long as its row
    /// count divides `a`'s: row `r` of `b` is then added to the `r`-th
    /// contiguous block of `a`'s rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    /// Elementwise difference with the same broadcasting rule as [`Graph::add`].
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    /// Concatenation along the last axis of two matrices with equal row counts.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat(a, b))
    }

    /// Column-wise maximum over each of `groups` contiguous row blocks.
    /// A `(groups·n) × c` input yields a `groups × c` output.
    pub fn max_pool(&mut self, input: NodeId, groups: usize) -> NodeId {
        self.push(Op::MaxPool { input, groups })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    /// Per-column batch normalization over the rows of `input`.
    pub fn batch_norm(&mut self, input: NodeId, scale: NodeId, shift: NodeId, stats: NormStats) -> NodeId {
        self.push(Op::BatchNorm {
            input,
            scale,
            shift,
            stats,
        })
    }

    /// Inverted dropout. In inference mode, or with `rate == 0`, this is the
    /// identity and no node is recorded.
    pub fn dropout(&mut self, input: NodeId, rate: f64, mode: Mode, seed: u64) -> Result<NodeId, AutodiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidRate(rate));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(input);
        }
        Ok(self.push(Op::Dropout { input, rate, seed }))
    }

    /// Mean of squared differences, a scalar.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::SquaredError(a, b))
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`,
    /// with `pred` clamped to `[clamp, 1 - clamp]`.
    pub fn binary_cross_entropy(&mut self, pred: NodeId, target: NodeId, clamp: f64) -> NodeId {
        self.push(Op::BinaryCrossEntropy { pred, target, clamp })
    }

    fn shape_error(&self, node: usize, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node,
            op: self.nodes[node].op.name(),
            label: self.nodes[node].label.clone(),
            detail,
        }
    }

    /// Forward pass over every node.
    pub fn evaluate<'b>(&self, bindings: &'b Bindings<'b>) -> Result<Evaluation<'b>, AutodiffError> {
        self.evaluate_upto(bindings, self.nodes.len(), None)
    }

    /// Forward pass in which every non-differentiable selection (ReLU
    /// activation pattern, max-pool winners, clamp regions) is copied from
    /// `reference` instead of being recomputed. The result is the smooth
    /// piece of the function that contains the reference point, which is
    /// what finite-difference gradient checks must probe.
    pub fn evaluate_frozen<'b>(
        &self,
        bindings: &'b Bindings<'b>,
        reference: &Evaluation<'_>,
    ) -> Result<Evaluation<'b>, AutodiffError> {
        self.evaluate_upto(bindings, self.nodes.len(), Some(reference))
    }

    fn evaluate_upto<'b>(
        &self,
        bindings: &'b Bindings<'b>,
        upto: usize,
        frozen: Option<&Evaluation<'_>>,
    ) -> Result<Evaluation<'b>, AutodiffError> {
        if bindings.values.len() != self.nodes.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "bindings built for a graph of {} nodes, graph has {}",
                bindings.values.len(),
                self.nodes.len()
            )));
        }
        let mut eval = Evaluation {
            bindings,
            values: Vec::with_capacity(upto),
            aux: Vec::with_capacity(upto),
        };
        for idx in 0..upto {
            let frozen_aux = frozen.map(|f| &f.aux[idx]);
            let (value, aux) = self.forward_node(idx, &eval, frozen_aux)?;
            eval.values.push(value);
            eval.aux.push(aux);
        }
        Ok(eval)
    }

    fn forward_node(
        &self,
        idx: usize,
        eval: &Evaluation<'_>,
        frozen: Option<&Aux>,
    ) -> Result<(Option<Tensor>, Aux), AutodiffError> {
        let node = &self.nodes[idx];
        let v = |id: NodeId| eval.value(id);
        let out = match &node.op {
            Op::Leaf => {
                if eval.bindings.values[idx].is_none() {
                    return Err(AutodiffError::UnboundLeaf {
                        node: idx,
                        name: node.label.clone().unwrap_or_default(),
                    });
                }
                return Ok((None, Aux::None));
            }
            Op::Constant(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                    return Err(self.shape_error(
                        idx,
                        format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
                Tensor::matrix(m, n, c)?
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let block = broadcast_block(ta, tb).ok_or_else(|| {
                    self.shape_error(
                        idx,
                        format!("cannot broadcast {:?} onto {:?}", tb.shape(), ta.shape()),
                    )
                })?;
                let f: fn(f64, f64) -> f64 = match node.op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let mut out = ta.clone();
                let cols = ta.cols();
                for (r, row) in out.data_mut().chunks_mut(cols.max(1)).enumerate() {
                    let brow = &tb.data()[(r / block) * cols..(r / block + 1) * cols];
                    for (x, y) in row.iter_mut().zip(brow) {
                        *x = f(*x, *y);
                    }
                }
                out
            }
            Op::Scale(a, s) => map(v(*a), |x| x * s),
            Op::Exp(a) => map(v(*a), f64::exp),
            Op::Relu(a) => {
                let a = v(*a);
                let mask: Vec<bool> = match frozen {
                    Some(Aux::Mask(m)) => m.clone(),
                    _ => a.data().iter().map(|&x| x > 0.0).collect(),
                };
                let data = a
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(&x, &on)| if on { x } else { 0.0 })
                    .collect();
                return Ok((Some(Tensor::new(a.shape().to_vec(), data)?), Aux::Mask(mask)));
            }
            Op::Sigmoid(a) => map(v(*a), sigmoid),
            Op::Concat(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() {
                    return Err(self.shape_error(
                        idx,
                        format!("cannot concatenate {:?} with {:?}", a.shape(), b.shape()),
                    ));
                }
                let (r, ca, cb) = (a.rows(), a.cols(), b.cols());
                let mut data = Vec::with_capacity(r * (ca + cb));
                for i in 0..r {
                    data.extend_from_slice(a.row_slice(i));
                    data.extend_from_slice(b.row_slice(i));
                }
                Tensor::matrix(r, ca + cb, data)?
            }
            Op::MaxPool { input, groups } => {
                let x = v(*input);
                let groups = *groups;
                if x.rank() != 2 || groups == 0 || x.rows() % groups != 0 || x.rows() == 0 {
                    return Err(self.shape_error(
                        idx,
                        format!("cannot pool {:?} into {groups} groups", x.shape()),
                    ));
                }
                let (rows, cols) = (x.rows(), x.cols());
                let per = rows / groups;
                let winners: Vec<usize> = match frozen {
                    Some(Aux::Winners(w)) => w.clone(),
                    _ => {
                        let mut w = vec![0usize; groups * cols];
                        for g in 0..groups {
                            for c in 0..cols {
                                let mut best = g * per;
                                for r in g * per + 1..(g + 1) * per {
                                    if x.data()[r * cols + c] > x.data()[best * cols + c] {
                                        best = r;
                                    }
                                }
                                w[g * cols + c] = best;
                            }
                        }
                        w
                    }
                };
                let data = winners
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| x.data()[r * cols + i % cols])
                    .collect();
                return Ok((Some(Tensor::matrix(groups, cols, data)?), Aux::Winners(winners)));
            }
            Op::Mean(a) => {
                let a = v(*a);
                if a.is_empty() {
                    return Err(self.shape_error(idx, "mean of an empty tensor".into()));
                }
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Op::Sum(a) => Tensor::scalar(v(*a).data().iter().sum()),
            Op::BatchNorm {
                input,
                scale,
                shift,
                stats,
            } => {
                let (x, gamma, beta) = (v(*input), v(*scale), v(*shift));
                let (rows, cols) = (x.rows(), x.cols());
                if x.rank() != 2 || rows == 0 || gamma.len() != cols || beta.len() != cols {
                    return Err(self.shape_error(
                        idx,
                        format!(
                            "input {:?} with scale {:?} and shift {:?}",
                            x.shape(),
                            gamma.shape(),
                            beta.shape()
                        ),
                    ));
                }
                let (mean, var, eps) = match *stats {
                    NormStats::Batch { eps } => {
                        let (m, var) = column_moments(x);
                        (m, var, eps)
                    }
                    NormStats::Running { mean, var, eps } => {
                        let (m, var) = (v(mean), v(var));
                        if m.len() != cols || var.len() != cols {
                            return Err(self.shape_error(
                                idx,
                                format!("running stats {:?}/{:?} for {cols} features", m.shape(), var.shape()),
                            ));
                        }
                        (m.data().to_vec(), var.data().to_vec(), eps)
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
                let mut normalized = vec![0.0; rows * cols];
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        let xh = (x.data()[i] - mean[c]) * inv_std[c];
                        normalized[i] = xh;
                        out[i] = gamma.data()[c] * xh + beta.data()[c];
                    }
                }
                return Ok((
                    Some(Tensor::matrix(rows, cols, out)?),
                    Aux::Norm {
                        mean,
                        var,
                        inv_std,
                        normalized,
                    },
                ));
            }
            Op::Dropout { input, rate, seed } => {
                let x = v(*input);
                let keep = 1.0 / (1.0 - rate);
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let factors: Vec<f64> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep })
                    .collect();
                let data = x.data().iter().zip(&factors).map(|(a, f)| a * f).collect();
                return Ok((Some(Tensor::new(x.shape().to_vec(), data)?), Aux::Factors(factors)));
            }
            Op::SquaredError(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if a.shape() != b.shape() || a.is_empty() {
                    return Err(self.shape_error(
                        idx,
                        format!("operands {:?} and {:?}", a.shape(), b.shape()),
                    ));
                }
                let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                Tensor::scalar(s / a.len() as f64)
            }
            Op::BinaryCrossEntropy { pred, target, clamp } => {
                let (p, y) = (v(*pred), v(*target));
                if p.shape() != y.shape() || p.is_empty() {
                    return Err(self.shape_error(
                        idx,
                        format!("prediction {:?} vs target {:?}", p.shape(), y.shape()),
                    ));
                }
                let inside: Vec<bool> = match frozen {
                    Some(Aux::Mask(m)) => m.clone(),
                    _ => p.data().iter().map(|&q| q > *clamp && q < 1.0 - clamp).collect(),
                };
                let mut s = 0.0;
                for ((&q, &t), &ins) in p.data().iter().zip(y.data()).zip(&inside) {
                    let q = if ins { q } else { q.clamp(*clamp, 1.0 - clamp) };
                    s += t * q.ln() + (1.0 - t) * (1.0 - q).ln();
                }
                return Ok((Some(Tensor::scalar(-s / p.len() as f64)), Aux::Mask(inside)));
            }
        };
        Ok((Some(out), Aux::None))
    }

    /// Reverse pass: gradients of the scalar `loss` with respect to each node
    /// in `wrt`, in the same order.
    pub fn backward(
        &self,
        eval: &Evaluation<'_>,
        loss: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<Tensor>, AutodiffError> {
        let loss_value = eval.value(loss);
        if loss_value.len() != 1 {
            return Err(AutodiffError::NotScalar {
                node: loss.0,
                shape: loss_value.shape().to_vec(),
            });
        }
        let upto = loss.0 + 1;
        let mut needs = vec![false; upto];
        for w in wrt {
            if w.0 < upto {
                needs[w.0] = true;
            }
        }
        for idx in 0..upto {
            if !needs[idx] {
                needs[idx] = self.nodes[idx].op.inputs().iter().any(|i| needs[i.0]);
            }
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; upto];
        adj[loss.0] = Some(Tensor::new(loss_value.shape().to_vec(), vec![1.0])?);

        for idx in (0..upto).rev() {
            if !needs[idx] {
                continue;
            }
            let Some(grad) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Constant(_)) {
                adj[idx] = Some(grad);
                continue;
            }
            for (input, g) in self.backward_node(idx, eval, &grad, &needs) {
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| {
                if w.0 < upto {
                    adj[w.0].clone()
                } else {
                    None
                }
                .unwrap_or_else(|| eval.value(*w).same_shape_zeros())
            })
            .collect())
    }

    /// Forward then reverse pass. Returns the loss value and the gradients.
    pub fn grad(
        &self,
        bindings: &Bindings<'_>,
        loss: NodeId,
        wrt: &[NodeId],
    ) -> Result<(f64, Vec<Tensor>), AutodiffError> {
        let eval = self.evaluate(bindings)?;
        let grads = self.backward(&eval, loss, wrt)?;
        Ok((eval.value(loss).item(), grads))
    }

    fn backward_node(
        &self,
        idx: usize,
        eval: &Evaluation<'_>,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<(NodeId, Tensor)> {
        let v = |id: NodeId| eval.value(id);
        let want = |id: NodeId| needs[id.0];
        let out = eval.value(NodeId(idx));
        let mut res = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, grad.data(), false, tb.data(), true, 0.0, &mut da);
                    res.push((*a, Tensor::matrix(m, k, da).expect("shape")));
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, grad.data(), false, 0.0, &mut db);
                    res.push((*b, Tensor::matrix(k, n, db).expect("shape")));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let cols = ta.cols();
                let block = broadcast_block(ta, tb).expect("checked in forward");
                let op = &self.nodes[idx].op;
                if want(*a) {
                    let da = match op {
                        Op::Mul(..) => {
                            let mut d = grad.clone();
                            for (r, row) in d.data_mut().chunks_mut(cols.max(1)).enumerate() {
                                let brow = &tb.data()[(r / block) * cols..(r / block + 1) * cols];
                                for (x, y) in row.iter_mut().zip(brow) {
                                    *x *= *y;
                                }
                            }
                            d
                        }
                        _ => grad.clone(),
                    };
                    res.push((*a, da));
                }
                if want(*b) {
                    let mut db = tb.same_shape_zeros();
                    let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    for (r, grow) in grad.data().chunks(cols.max(1)).enumerate() {
                        let dst = &mut db.data_mut()[(r / block) * cols..(r / block + 1) * cols];
                        match op {
                            Op::Mul(..) => {
                                let arow = ta.row_slice(r);
                                for ((d, g), x) in dst.iter_mut().zip(grow).zip(arow) {
                                    *d += g * x;
                                }
                            }
                            _ => {
                                for (d, g) in dst.iter_mut().zip(grow) {
                                    *d += sign * g;
                                }
                            }
                        }
                    }
                    res.push((*b, db));
                }
            }
            Op::Scale(a, s) => res.push((*a, map(grad, |g| g * s))),
            Op::Exp(a) => res.push((*a, zip_map(grad, out, |g, y| g * y))),
            Op::Relu(a) => {
                let Aux::Mask(mask) = &eval.aux[idx] else { unreachable!() };
                let data = grad
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&g, &on)| if on { g } else { 0.0 })
                    .collect();
                res.push((*a, Tensor::new(grad.shape().to_vec(), data).expect("shape")));
            }
            Op::Sigmoid(a) => res.push((*a, zip_map(grad, out, |g, y| g * y * (1.0 - y)))),
            Op::Concat(a, b) => {
                let (ca, cb) = (v(*a).cols(), v(*b).cols());
                let rows = grad.rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = grad.row_slice(r);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                if want(*a) {
                    res.push((*a, Tensor::matrix(rows, ca, da).expect("shape")));
                }
                if want(*b) {
                    res.push((*b, Tensor::matrix(rows, cb, db).expect("shape")));
                }
            }
            Op::MaxPool { input, .. } => {
                let Aux::Winners(w) = &eval.aux[idx] else { unreachable!() };
                let x = v(*input);
                let cols = x.cols();
                let mut dx = x.same_shape_zeros();
                for (i, &r) in w.iter().enumerate() {
                    dx.data_mut()[r * cols + i % cols] += grad.data()[i];
                }
                res.push((*input, dx));
            }
            Op::Mean(a) => {
                let x = v(*a);
                res.push((*a, Tensor::filled(x.shape(), grad.item() / x.len() as f64)));
            }
            Op::Sum(a) => res.push((*a, Tensor::filled(v(*a).shape(), grad.item()))),
            Op::BatchNorm {
                input,
                scale,
                shift,
                stats,
            } => {
                let Aux::Norm {
                    mean,
                    var,
                    inv_std,
                    normalized,
                } = &eval.aux[idx]
                else {
                    unreachable!()
                };
                let x = v(*input);
                let gamma = v(*scale);
                let (rows, cols) = (x.rows(), x.cols());
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let g = grad.data()[r * cols + c];
                        dgamma[c] += g * normalized[r * cols + c];
                        dbeta[c] += g;
                    }
                }
                if want(*input) {
                    let mut dx = vec![0.0; rows * cols];
                    match stats {
                        NormStats::Batch { .. } => {
                            // dx = inv_std / R * (R*dxh - sum(dxh) - xh * sum(dxh*xh)),
                            // with dxh = dy * gamma, so the sums reduce to
                            // gamma*dbeta and gamma*dgamma.
                            let n = rows as f64;
                            for r in 0..rows {
                                for c in 0..cols {
                                    let i = r * cols + c;
                                    let dxh = grad.data()[i] * gamma.data()[c];
                                    dx[i] = inv_std[c] / n
                                        * (n * dxh
                                            - gamma.data()[c] * dbeta[c]
                                            - normalized[i] * gamma.data()[c] * dgamma[c]);
                                }
                            }
                        }
                        NormStats::Running { .. } => {
                            for r in 0..rows {
                                for c in 0..cols {
                                    let i = r * cols + c;
                                    dx[i] = grad.data()[i] * gamma.data()[c] * inv_std[c];
                                }
                            }
                        }
                    }
                    res.push((*input, Tensor::new(x.shape().to_vec(), dx).expect("shape")));
                }
                if want(*scale) {
                    res.push((*scale, Tensor::new(gamma.shape().to_vec(), dgamma.clone()).expect("shape")));
                }
                if want(*shift) {
                    res.push((*shift, Tensor::new(v(*shift).shape().to_vec(), dbeta.clone()).expect("shape")));
                }
                if let NormStats::Running { mean: mn, var: vr, eps } = *stats {
                    if want(mn) {
                        let d: Vec<f64> = (0..cols).map(|c| -gamma.data()[c] * inv_std[c] * dbeta[c]).collect();
                        res.push((mn, Tensor::new(v(mn).shape().to_vec(), d).expect("shape")));
                    }
                    if want(vr) {
                        let d: Vec<f64> = (0..cols)
                            .map(|c| {
                                let mut s = 0.0;
                                for r in 0..rows {
                                    s += grad.data()[r * cols + c] * (x.data()[r * cols + c] - mean[c]);
                                }
                                -0.5 * gamma.data()[c] * s * (var[c] + eps).powf(-1.5)
                            })
                            .collect();
                        res.push((vr, Tensor::new(v(vr).shape().to_vec(), d).expect("shape")));
                    }
                }
            }
            Op::Dropout { input, .. } => {
                let Aux::Factors(f) = &eval.aux[idx] else { unreachable!() };
                let data = grad.data().iter().zip(f).map(|(g, k)| g * k).collect();
                res.push((*input, Tensor::new(grad.shape().to_vec(), data).expect("shape")));
            }
            Op::SquaredError(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let k = 2.0 * grad.item() / ta.len() as f64;
                let diff = zip_map(ta, tb, |x, y| k * (x - y));
                if want(*b) {
                    res.push((*b, map(&diff, |d| -d)));
                }
                if want(*a) {
                    res.push((*a, diff));
                }
            }
            Op::BinaryCrossEntropy { pred, target, clamp } => {
                let Aux::Mask(inside) = &eval.aux[idx] else { unreachable!() };
                let (p, y) = (v(*pred), v(*target));
                let k = grad.item() / p.len() as f64;
                if want(*pred) {
                    let data = p
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(inside)
                        .map(|((&q, &t), &ins)| if ins { k * (-t / q + (1.0 - t) / (1.0 - q)) } else { 0.0 })
                        .collect();
                    res.push((*pred, Tensor::new(p.shape().to_vec(), data).expect("shape")));
                }
                if want(*target) {
                    let data = p
                        .data()
                        .iter()
                        .zip(inside)
                        .map(|(&q, &ins)| {
                            let q = if ins { q } else { q.clamp(*clamp, 1.0 - clamp) };
                            -k * (q.ln() - (1.0 - q).ln())
                        })
                        .collect();
                    res.push((*target, Tensor::new(y.shape().to_vec(), data).expect("shape")));
                }
            }
        }
        res
    }
}

/// Leaf values for one evaluation of a [`Graph`].
#[derive(Debug, Clone)]
pub struct Bindings<'a> {
    values: Vec<Option<&'a Tensor>>,
}

impl<'a> Bindings<'a> {
    pub fn new(graph: &Graph) -> Self {
        Self {
            values: vec![None; graph.len()],
        }
    }

    pub fn bind(&mut self, node: NodeId, value: &'a Tensor) -> &mut Self {
        self.values[node.0] = Some(value);
        self
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Mask(Vec<bool>),
    Winners(Vec<usize>),
    Factors(Vec<f64>),
    Norm {
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
        normalized: Vec<f64>,
    },
}

/// Values of every node after a forward pass.
#[derive(Debug)]
pub struct Evaluation<'b> {
    bindings: &'b Bindings<'b>,
    values: Vec<Option<Tensor>>,
    aux: Vec<Aux>,
}

impl Evaluation<'_> {
    pub fn value(&self, node: NodeId) -> &Tensor {
        match &self.values[node.0] {
            Some(t) => t,
            None => self.bindings.values[node.0].expect("leaf bound"),
        }
    }

    /// Batch mean and (biased) variance computed by a train-mode batch
    /// normalization node.
    pub fn batch_stats(&self, node: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.aux[node.0] {
            Aux::Norm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }
}

fn broadcast_block(a: &Tensor, b: &Tensor) -> Option<usize> {
    if a.shape() == b.shape() {
        return Some(1);
    }
    if a.rank() == 2 && b.rank() == 2 && a.cols() == b.cols() && b.rows() > 0 && a.rows() % b.rows() == 0 {
        return Some(a.rows() / b.rows());
    }
    None
}

fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut mean = vec![0.0; cols];
    for row in x.data().chunks(cols) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; cols];
    for row in x.data().chunks(cols) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut var {
        *s /= rows as f64;
    }
    (mean, var)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}
