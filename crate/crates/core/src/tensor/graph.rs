//! Recorded-graph reverse-mode differentiation.
//!
//! A [`Graph`] appends one node per op application: the op (with any static
//! arguments), the ids of its inputs, the forward value and whatever the
//! backward rule needs. The node list is the [`ComputationRecord`]; it can be
//! replayed from its leaves and traversed in reverse topological order.

use std::collections::HashMap;
use std::sync::Arc;

use super::ops::{self, Activation, BnMode, NormCache, RunningStats};
use super::{ParamId, ParamStore, Precision, Tensor};
use crate::error::{Error, Result};
use crate::ssm::kernel::{self, ScanCache};
use crate::ssm::ScanMode;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Linear,
    Conv3d,
    BatchNormTrain,
    BatchNormEval,
    LayerNorm,
    Relu,
    Silu,
    Softplus,
    Sigmoid,
    Softmax,
    CrossEntropy,
    SelectiveScanSequential,
    SelectiveScanParallel,
    Gather,
    Concat,
    Add,
    Mul,
    Scale,
    Sum,
    MeanAxis,
    NegExp,
    Reshape,
}

impl OpKind {
    /// Every op with a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 22] = [
        OpKind::Linear,
        OpKind::Conv3d,
        OpKind::BatchNormTrain,
        OpKind::BatchNormEval,
        OpKind::LayerNorm,
        OpKind::Relu,
        OpKind::Silu,
        OpKind::Softplus,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::CrossEntropy,
        OpKind::SelectiveScanSequential,
        OpKind::SelectiveScanParallel,
        OpKind::Gather,
        OpKind::Concat,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::MeanAxis,
        OpKind::NegExp,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Linear => "linear",
            OpKind::Conv3d => "conv3d",
            OpKind::BatchNormTrain => "batch_norm_train",
            OpKind::BatchNormEval => "batch_norm_eval",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Relu => "relu",
            OpKind::Silu => "silu",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SelectiveScanSequential => "selective_scan_sequential",
            OpKind::SelectiveScanParallel => "selective_scan_parallel",
            OpKind::Gather => "gather",
            OpKind::Concat => "concat",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::MeanAxis => "mean_axis",
            OpKind::NegExp => "neg_exp",
            OpKind::Reshape => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Linear,
    Conv3d,
    BatchNormTrain {
        eps: f64,
    },
    BatchNormEval {
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    LayerNorm {
        eps: f64,
    },
    Activation(Activation),
    Softmax {
        axis: usize,
    },
    CrossEntropy {
        labels: Vec<usize>,
    },
    SelectiveScan {
        mode: ScanMode,
    },
    Gather {
        index: Arc<[usize]>,
        shape: Vec<usize>,
    },
    Concat,
    Add,
    Mul,
    Scale(f64),
    Sum,
    MeanAxis {
        axis: usize,
    },
    NegExp,
    Reshape {
        shape: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
pub(crate) enum Saved {
    None,
    Norm(NormCache),
    Probs(Vec<f64>),
    Scan(ScanCache),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Linear => OpKind::Linear,
            Op::Conv3d => OpKind::Conv3d,
            Op::BatchNormTrain { .. } => OpKind::BatchNormTrain,
            Op::BatchNormEval { .. } => OpKind::BatchNormEval,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Activation(Activation::Relu) => OpKind::Relu,
            Op::Activation(Activation::Silu) => OpKind::Silu,
            Op::Activation(Activation::Softplus) => OpKind::Softplus,
            Op::Activation(Activation::Sigmoid) => OpKind::Sigmoid,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SelectiveScan {
                mode: ScanMode::Sequential,
            } => OpKind::SelectiveScanSequential,
            Op::SelectiveScan {
                mode: ScanMode::Parallel,
            } => OpKind::SelectiveScanParallel,
            Op::Gather { .. } => OpKind::Gather,
            Op::Concat => OpKind::Concat,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Sum => OpKind::Sum,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::NegExp => OpKind::NegExp,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::Linear | Op::Conv3d | Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => 3,
            Op::LayerNorm { .. } => 3,
            Op::SelectiveScan { .. } => 7,
            Op::Concat | Op::Add | Op::Mul => 2,
            _ => 1,
        }
    }

    fn forward(&self, x: &[&Tensor]) -> Result<(Tensor, Saved)> {
        if x.len() != self.arity() {
            return Err(Error::Graph(format!(
                "{} expects {} inputs, got {}",
                self.kind().name(),
                self.arity(),
                x.len()
            )));
        }
        let plain = |t: Tensor| (t, Saved::None);
        Ok(match self {
            Op::Leaf => return Err(Error::Graph("leaf nodes have no forward rule".into())),
            Op::Linear => plain(ops::linear(x[0], x[1], x[2])?),
            Op::Conv3d => plain(ops::conv3d(x[0], x[1], x[2])?),
            Op::BatchNormTrain { eps } => {
                let (y, cache) = ops::batch_norm_train(x[0], x[1], x[2], *eps)?;
                (y, Saved::Norm(cache))
            }
            Op::BatchNormEval { eps, mean, var } => {
                plain(ops::batch_norm_eval(x[0], x[1], x[2], mean, var, *eps)?)
            }
            Op::LayerNorm { eps } => {
                let (y, cache) = ops::layer_norm_cached(x[0], x[1], x[2], *eps)?;
                (y, Saved::Norm(cache))
            }
            Op::Activation(kind) => plain(ops::activation(*kind, x[0])),
            Op::Softmax { axis } => plain(ops::softmax(x[0], *axis)?),
            Op::CrossEntropy { labels } => {
                let (loss, probs) = ops::cross_entropy(x[0], labels)?;
                (Tensor::scalar(loss), Saved::Probs(probs))
            }
            Op::SelectiveScan { mode } => {
                let (y, cache) = kernel::forward(x[0], x[1], x[2], x[3], x[4], x[5], x[6], *mode)?;
                (y, Saved::Scan(cache))
            }
            Op::Gather { index, shape } => plain(ops::gather(x[0], index, shape)?),
            Op::Concat => plain(ops::concat_last(x[0], x[1])?),
            Op::Add => plain(ops::zip_same("add", x[0], x[1], |a, b| a + b)?),
            Op::Mul => plain(ops::zip_same("mul", x[0], x[1], |a, b| a * b)?),
            Op::Scale(c) => plain(x[0].map(|v| c * v)),
            Op::Sum => plain(Tensor::scalar(x[0].sum())),
            Op::MeanAxis { axis } => plain(ops::mean_axis(x[0], *axis)?),
            Op::NegExp => plain(x[0].map(|v| -v.exp())),
            Op::Reshape { shape } => plain(x[0].reshape(shape.clone())?),
        })
    }

    fn backward(
        &self,
        x: &[&Tensor],
        out: &Tensor,
        saved: &Saved,
        dy: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let norm = || match saved {
            Saved::Norm(c) => Ok(c),
            _ => Err(Error::Graph("missing normalization cache".into())),
        };
        Ok(match self {
            Op::Leaf => Vec::new(),
            Op::Linear => {
                let (dx, dw, db) = ops::linear_backward(x[0], x[1], dy);
                vec![dx, dw, db]
            }
            Op::Conv3d => {
                let (dx, dk, db) = ops::conv3d_backward(x[0], x[1], dy)?;
                vec![dx, dk, db]
            }
            Op::BatchNormTrain { .. } => {
                let (dx, dg, db) = ops::batch_norm_train_backward(x[1], norm()?, dy);
                vec![dx, dg, db]
            }
            Op::BatchNormEval { eps, mean, var } => {
                let (dx, dg, db) = ops::batch_norm_eval_backward(x[0], x[1], mean, var, *eps, dy);
                vec![dx, dg, db]
            }
            Op::LayerNorm { .. } => {
                let (dx, dg, db) = ops::layer_norm_backward(x[1], norm()?, dy);
                vec![dx, dg, db]
            }
            Op::Activation(kind) => vec![ops::activation_backward(*kind, x[0], dy)],
            Op::Softmax { axis } => vec![ops::softmax_backward(out, dy, *axis)],
            Op::CrossEntropy { labels } => {
                let Saved::Probs(p) = saved else {
                    return Err(Error::Graph("missing softmax cache".into()));
                };
                vec![ops::cross_entropy_backward(
                    x[0].shape(),
                    p,
                    labels,
                    dy.data()[0],
                )]
            }
            Op::SelectiveScan { .. } => {
                let Saved::Scan(cache) = saved else {
                    return Err(Error::Graph("missing scan cache".into()));
                };
                kernel::backward(x[0], x[1], x[2], x[4], x[5], x[6], cache, dy)
            }
            Op::Gather { index, .. } => vec![ops::gather_backward(x[0].shape(), index, dy)],
            Op::Concat => {
                let (da, db) = ops::concat_last_backward(x[0], x[1], dy);
                vec![da, db]
            }
            Op::Add => vec![dy.clone(), dy.clone()],
            Op::Mul => vec![
                ops::zip_same("mul", dy, x[1], |g, b| g * b)?,
                ops::zip_same("mul", dy, x[0], |g, a| g * a)?,
            ],
            Op::Scale(c) => vec![dy.map(|g| c * g)],
            Op::Sum => vec![Tensor::full(x[0].shape().to_vec(), dy.data()[0])],
            Op::MeanAxis { axis } => vec![ops::mean_axis_backward(x[0].shape(), *axis, dy)],
            Op::NegExp => vec![ops::zip_same("neg_exp", dy, out, |g, y| g * y)?],
            Op::Reshape { .. } => vec![dy.reshape(x[0].shape().to_vec())?],
        })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Var>,
    pub(crate) value: Tensor,
    pub(crate) saved: Saved,
}

/// The ordered list of op applications recorded by a [`Graph`].
#[derive(Clone, Debug, Default)]
pub struct ComputationRecord {
    pub(crate) nodes: Vec<Node>,
}

impl ComputationRecord {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    /// Topological order of the nodes (Kahn's algorithm, ties broken by
    /// record position). Fails on dangling input ids or cycles.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                if inp.0 >= n {
                    return Err(Error::Graph(format!(
                        "node {i} references missing node {}",
                        inp.0
                    )));
                }
                indegree[i] += 1;
                users[inp.0].push(i);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(Error::Graph(format!("cycle detected through node {stuck}")));
        }
        Ok(order)
    }

    /// Re-executes every non-leaf node from the stored leaf values, with
    /// optional leaf replacements, and returns all node values.
    pub fn replay_with(
        &self,
        overrides: &[(Var, Tensor)],
        precision: Precision,
    ) -> Result<Vec<Tensor>> {
        let order = self.topological_order()?;
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, t) in overrides {
            let node = self
                .nodes
                .get(v.0)
                .ok_or_else(|| Error::Graph("override of missing node".into()))?;
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::Graph(format!("node {} is not a leaf", v.0)));
            }
            if node.value.shape() != t.shape() {
                return Err(Error::shape(
                    "replay override",
                    node.value.shape(),
                    t.shape(),
                ));
            }
            values[v.0] = Some(t.clone());
        }
        for i in order {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if values[i].is_none() {
                    values[i] = Some(node.value.clone());
                }
                continue;
            }
            let inputs: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|v| values[v.0].as_ref().expect("topological order"))
                .collect();
            let (mut out, _) = node.op.forward(&inputs)?;
            precision.round(out.data_mut());
            values[i] = Some(out);
        }
        Ok(values
            .into_iter()
            .map(|v| v.expect("all nodes visited"))
            .collect())
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    record: ComputationRecord,
    precision: Precision,
    params: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn record(&self) -> &ComputationRecord {
        &self.record
    }

    /// Test hook: scales the backward rule of every `kind` node by 1.1 so
    /// gradient checks can be shown to catch a wrong adjoint.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.record.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.record.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        self.precision.round(t.data_mut());
        self.record.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t,
            saved: Saved::None,
        });
        Var(self.record.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Node bound to `id` by [`Graph::param`], if any.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub(crate) fn push(&mut self, op: Op, inputs: Vec<Var>) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs
            .iter()
            .map(|v| &self.record.nodes[v.0].value)
            .collect();
        let (mut value, saved) = op.forward(&vals)?;
        self.precision.round(value.data_mut());
        if !value.is_finite() {
            return Err(Error::NonFinite(op.kind().name().to_string()));
        }
        self.record.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
        });
        Ok(Var(self.record.nodes.len() - 1))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.push(Op::Linear, vec![x, w, b])
    }

    pub fn conv3d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.push(Op::Conv3d, vec![x, kernel, bias])
    }

    /// Batch normalization. Train mode folds the batch statistics into
    /// `stats`; eval mode requires them to exist.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode,
        stats: &mut RunningStats,
    ) -> Result<Var> {
        match mode {
            BnMode::Train => {
                let v = self.push(Op::BatchNormTrain { eps }, vec![x, gamma, beta])?;
                let Saved::Norm(cache) = &self.record.nodes[v.0].saved else {
                    unreachable!("batch norm saves its statistics");
                };
                let population = self.value(x).numel() / self.value(x).last_dim();
                let var = ops::unbiased(&cache.var, population);
                let mean = cache.mean.clone();
                stats.update(&mean, &var);
                Ok(v)
            }
            BnMode::Eval => {
                if !stats.initialized {
                    return Err(Error::MissingRunningStats);
                }
                self.push(
                    Op::BatchNormEval {
                        eps,
                        mean: stats.mean.clone(),
                        var: stats.var.clone(),
                    },
                    vec![x, gamma, beta],
                )
            }
        }
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta])
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        self.push(Op::Activation(kind), vec![x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Silu, x)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax { axis }, vec![x])
    }

    /// Mean cross-entropy of `[B, K]` (or `[K]`) logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits],
        )
    }

    /// Fused selective scan over `x: [(B,) L, E]`. `a` is the diagonal state
    /// matrix `[N]`; projections are `w_delta: [E, E]`, `b_delta: [E]`,
    /// `w_b, w_c: [E, N]`; `d: [E]` is the skip path.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        a: Var,
        w_delta: Var,
        b_delta: Var,
        w_b: Var,
        w_c: Var,
        d: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        self.push(
            Op::SelectiveScan { mode },
            vec![x, a, w_delta, b_delta, w_b, w_c, d],
        )
    }

    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Gather { index, shape }, vec![x])
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Concat, vec![a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(c), vec![x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum, vec![x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::MeanAxis { axis }, vec![x])
    }

    /// Elementwise `-exp(x)`.
    pub fn neg_exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::NegExp, vec![x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Reshape { shape }, vec![x])
    }

    /// Reverse sweep from a scalar `loss`. Nodes that do not reach the loss
    /// get no gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = &self.record.nodes;
        if loss.0 >= nodes.len() {
            return Err(Error::Graph(format!("loss node {} does not exist", loss.0)));
        }
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let order = self.record.topological_order()?;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape().to_vec()));
        for &i in order.iter().rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.inputs.is_empty() {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &nodes[v.0].value).collect();
                let mut dx = node.op.backward(&inputs, &node.value, &node.saved, &dy)?;
                if self.fault == Some(node.op.kind()) {
                    dx.iter_mut()
                        .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= 1.1));
                }
                for (inp, mut g) in node.inputs.iter().zip(dx) {
                    self.precision.round(g.data_mut());
                    match &mut grads[inp.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds each bound parameter's gradient
    /// into the store. Parameters off the loss path are left untouched.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).accumulate(g);
            }
        }
        Ok(grads)
    }

    /// Replays the record from its leaves (optionally replaced) and returns
    /// the value of `output`.
    pub fn replay_value(&self, overrides: &[(Var, Tensor)], output: Var) -> Result<Tensor> {
        let mut all = self.record.replay_with(overrides, self.precision)?;
        Ok(all.swap_remove(output.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_has_derivative_four_at_two() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::scalar(3.0)).unwrap();
        let unused = store.add("unused", Tensor::scalar(5.0)).unwrap();
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let _ = g.param(&store, unused);
        let loss = g.mul(u, u).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(used).grad().data(), &[6.0]);
        assert_eq!(store.get(unused).grad().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones([2]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn cycle_is_detected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones([2]));
        let a = g.scale(x, 2.0).unwrap();
        let b = g.scale(a, 3.0).unwrap();
        let loss = g.sum(b).unwrap();
        // Rewire `a` to depend on `b`: a -> b -> a.
        g.record.nodes[a.0].inputs = vec![b];
        let err = g.backward(loss).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn([4, 3], 1.0, &mut rng));
        let w = g.leaf(Tensor::randn([3, 5], 1.0, &mut rng));
        let b = g.leaf(Tensor::randn([5], 1.0, &mut rng));
        let h = g.linear(x, w, b).unwrap();
        let h = g.silu(h).unwrap();
        let p = g.softmax(h, 1).unwrap();
        let loss = g.cross_entropy(p, &[0, 1, 2, 3]).unwrap();
        let replayed = g.record().replay_with(&[], Precision::Double).unwrap();
        for (i, node) in g.record().nodes.iter().enumerate() {
            assert_eq!(node.value, replayed[i], "node {i}");
        }
        assert_eq!(g.replay_value(&[], loss).unwrap(), *g.value(loss));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0]).unwrap());
        let a = g.scale(x, 3.0).unwrap();
        let s = g.add(a, x).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn single_precision_rounds_values() {
        let mut g = Graph::with_precision(Precision::Single);
        let x = g.leaf(Tensor::scalar(0.1));
        assert_eq!(g.value(x).data()[0], 0.1f32 as f64);
    }
}
