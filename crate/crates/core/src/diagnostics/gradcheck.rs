//! Analytic-versus-finite-difference comparison for every differentiable op
//! and for the composite layers built from them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{
    block_forward, classify, conv_branch, patch_merging, ss3d, ssm_branch, BlockVars,
    ConvBranchVars, DirectionVars, Mode, Model, ModelConfig, SsmBranchVars,
};
use crate::error::Result;
use crate::ssm::ScanMode;
use crate::tensor::ops::DEFAULT_MOMENTUM;
use crate::tensor::{
    finite_diff, relative_error, Activation, BnMode, Graph, OpKind, RunningStats, Tensor, Var,
};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this (in norm) are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central differences of `loss` with respect to each leaf in `wrt`, by
/// replaying the record, compared with the reverse sweep. Returns the
/// norm-wise relative error over all of `wrt` concatenated.
pub fn check_graph(g: &Graph, loss: Var, wrt: &[Var]) -> Result<f64> {
    let grads = g.backward(loss)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &v in wrt {
        let value = g.value(v).clone();
        match grads.get(v) {
            Some(t) => analytic.extend_from_slice(t.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, value.numel())),
        }
        let mut failure = None;
        let fd = finite_diff(
            |probe| match g.replay_value(&[(v, probe.clone())], loss) {
                Ok(t) => t.data()[0],
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            },
            &value,
            FD_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        numeric.extend_from_slice(fd.data());
    }
    let a = Tensor::new(vec![analytic.len()], analytic)?;
    let n = Tensor::new(vec![numeric.len()], numeric)?;
    Ok(relative_error(&a, &n, ERROR_FLOOR))
}

/// Weighted sum `sum(w * out)` with fixed random weights, so every output
/// element contributes a distinct coefficient.
fn weighted_loss(g: &mut Graph, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.leaf(Tensor::uniform(shape, 0.5, 1.5, rng));
    let m = g.mul(out, w)?;
    g.sum(m)
}

fn randn(g: &mut Graph, shape: &[usize], rng: &mut ChaCha8Rng) -> Var {
    g.leaf(Tensor::randn(shape.to_vec(), 1.0, rng))
}

fn uniform(g: &mut Graph, shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Var {
    g.leaf(Tensor::uniform(shape.to_vec(), lo, hi, rng))
}

/// Random scan parameters with `E` channels and `N` states, all as leaves.
fn scan_leaves(g: &mut Graph, e: usize, n: usize, rng: &mut ChaCha8Rng) -> [Var; 6] {
    let s = 1.0 / (e as f64).sqrt();
    let a = uniform(g, &[n], -2.0, -0.5, rng);
    let w_delta = g.leaf(Tensor::randn([e, e], 0.5 * s, rng));
    let b_delta = uniform(g, &[e], -2.0, 0.5, rng);
    let w_b = g.leaf(Tensor::randn([e, n], s, rng));
    let w_c = g.leaf(Tensor::randn([e, n], s, rng));
    let d = randn(g, &[e], rng);
    [a, w_delta, b_delta, w_b, w_c, d]
}

fn direction_leaves(
    g: &mut Graph,
    count: usize,
    e: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<DirectionVars>, Vec<Var>) {
    let mut dirs = Vec::new();
    let mut wrt = Vec::new();
    for _ in 0..count {
        let [a, w_delta, b_delta, w_b, w_c, d] = scan_leaves(g, e, n, rng);
        wrt.extend([a, w_delta, b_delta, w_b, w_c, d]);
        dirs.push(DirectionVars {
            a,
            w_delta,
            b_delta,
            w_b,
            w_c,
            d,
        });
    }
    (dirs, wrt)
}

/// Builds one random instance of `kind`; returns the graph, its scalar loss
/// and the leaves to differentiate.
fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> Result<(Graph, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let (out, wrt) = match kind {
        OpKind::Linear => {
            let x = randn(&mut g, &[2, 3, 4], rng);
            let w = randn(&mut g, &[4, 5], rng);
            let b = randn(&mut g, &[5], rng);
            (g.linear(x, w, b)?, vec![x, w, b])
        }
        OpKind::Conv3d => {
            let x = randn(&mut g, &[2, 3, 2, 2, 2], rng);
            let k = randn(&mut g, &[3, 3, 3, 2, 3], rng);
            let b = randn(&mut g, &[3], rng);
            (g.conv3d(x, k, b)?, vec![x, k, b])
        }
        OpKind::BatchNormTrain | OpKind::BatchNormEval => {
            let x = randn(&mut g, &[3, 2, 4], rng);
            let gamma = uniform(&mut g, &[4], 0.5, 1.5, rng);
            let beta = randn(&mut g, &[4], rng);
            let (mode, mut stats) = if kind == OpKind::BatchNormTrain {
                (BnMode::Train, RunningStats::empty(4, DEFAULT_MOMENTUM))
            } else {
                let stats = RunningStats {
                    mean: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    var: (0..4).map(|_| rng.random_range(0.5..2.0)).collect(),
                    momentum: DEFAULT_MOMENTUM,
                    initialized: true,
                };
                (BnMode::Eval, stats)
            };
            let y = g.batch_norm(x, gamma, beta, 1e-5, mode, &mut stats)?;
            (y, vec![x, gamma, beta])
        }
        OpKind::LayerNorm => {
            let x = randn(&mut g, &[3, 5], rng);
            let gamma = uniform(&mut g, &[5], 0.5, 1.5, rng);
            let beta = randn(&mut g, &[5], rng);
            (g.layer_norm(x, gamma, beta, 1e-5)?, vec![x, gamma, beta])
        }
        OpKind::Relu | OpKind::Silu | OpKind::Softplus | OpKind::Sigmoid => {
            let act = match kind {
                OpKind::Relu => Activation::Relu,
                OpKind::Silu => Activation::Silu,
                OpKind::Softplus => Activation::Softplus,
                _ => Activation::Sigmoid,
            };
            // keep ReLU inputs away from the kink
            let x = g.leaf(Tensor::randn([4, 3], 1.0, rng).map(|v| {
                if v.abs() < 0.05 {
                    v + 0.1f64.copysign(v)
                } else {
                    v
                }
            }));
            (g.activation(act, x)?, vec![x])
        }
        OpKind::Softmax => {
            let x = randn(&mut g, &[3, 4], rng);
            let axis = rng.random_range(0..2);
            (g.softmax(x, axis)?, vec![x])
        }
        OpKind::CrossEntropy => {
            let x = randn(&mut g, &[4, 3], rng);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            (g.cross_entropy(x, &labels)?, vec![x])
        }
        OpKind::SelectiveScanSequential | OpKind::SelectiveScanParallel => {
            let mode = if kind == OpKind::SelectiveScanSequential {
                ScanMode::Sequential
            } else {
                ScanMode::Parallel
            };
            let (e, n) = (3, 2);
            let len = rng.random_range(1..7);
            let x = randn(&mut g, &[2, len, e], rng);
            let [a, wd, bd, wb, wc, d] = scan_leaves(&mut g, e, n, rng);
            let y = g.selective_scan(x, a, wd, bd, wb, wc, d, mode)?;
            (y, vec![x, a, wd, bd, wb, wc, d])
        }
        OpKind::Gather => {
            let x = randn(&mut g, &[3, 4], rng);
            let index: Vec<usize> = (0..10).map(|_| rng.random_range(0..12)).collect();
            (g.gather(x, Arc::from(index), vec![2, 5])?, vec![x])
        }
        OpKind::Concat => {
            let a = randn(&mut g, &[2, 3], rng);
            let b = randn(&mut g, &[2, 2], rng);
            (g.concat(a, b)?, vec![a, b])
        }
        OpKind::Add | OpKind::Mul => {
            let a = randn(&mut g, &[3, 4], rng);
            let b = randn(&mut g, &[3, 4], rng);
            let y = if kind == OpKind::Add {
                g.add(a, b)?
            } else {
                g.mul(a, b)?
            };
            (y, vec![a, b])
        }
        OpKind::Scale => {
            let x = randn(&mut g, &[5], rng);
            let c = rng.random_range(-2.0..2.0);
            (g.scale(x, c)?, vec![x])
        }
        OpKind::Sum => {
            let x = randn(&mut g, &[2, 3], rng);
            (g.sum(x)?, vec![x])
        }
        OpKind::MeanAxis => {
            let x = randn(&mut g, &[2, 3, 4], rng);
            let axis = rng.random_range(0..3);
            (g.mean_axis(x, axis)?, vec![x])
        }
        OpKind::NegExp => {
            let x = randn(&mut g, &[5], rng);
            (g.neg_exp(x)?, vec![x])
        }
        OpKind::Reshape => {
            let x = randn(&mut g, &[2, 6], rng);
            (g.reshape(x, vec![3, 4])?, vec![x])
        }
        OpKind::Leaf => {
            let x = randn(&mut g, &[3], rng);
            (x, vec![x])
        }
    };
    let loss = weighted_loss(&mut g, out, rng)?;
    Ok((g, loss, wrt))
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Runs `trials` random instances of one op. `fault` perturbs that op's
/// backward rule to show the check notices.
pub fn check_op(kind: OpKind, trials: usize, seed: u64, fault: bool) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let (mut g, loss, wrt) = op_case(kind, &mut rng)?;
        if fault {
            g.inject_backward_fault(kind);
        }
        worst = worst.max(check_graph(&g, loss, &wrt)?);
    }
    Ok(CheckResult {
        name: kind.name().to_string(),
        trials,
        max_rel_error: worst,
        tolerance: OP_TOLERANCE,
        passed: worst <= OP_TOLERANCE,
    })
}

/// Every op in [`OpKind::DIFFERENTIABLE`], once each.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    OpKind::DIFFERENTIABLE
        .iter()
        .map(|&k| check_op(k, trials, seed, false))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Composite {
    ConvBranch,
    Ss3d,
    SsmBranch,
    Block,
    PatchMerging,
    Classify,
}

impl Composite {
    pub const ALL: [Composite; 6] = [
        Composite::ConvBranch,
        Composite::Ss3d,
        Composite::SsmBranch,
        Composite::Block,
        Composite::PatchMerging,
        Composite::Classify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Composite::ConvBranch => "conv_branch",
            Composite::Ss3d => "ss3d",
            Composite::SsmBranch => "ssm_branch",
            Composite::Block => "block",
            Composite::PatchMerging => "patch_merging",
            Composite::Classify => "classify",
        }
    }
}

fn composite_case(c: Composite, rng: &mut ChaCha8Rng) -> Result<(Graph, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let grid = [2, 2, 3, 2];
    let conv_vars = |g: &mut Graph, ch: usize, rng: &mut ChaCha8Rng| {
        let vars = ConvBranchVars {
            bn_gamma: uniform(g, &[ch], 0.5, 1.5, rng),
            bn_beta: randn(g, &[ch], rng),
            kernel: g.leaf(Tensor::randn([3, 3, 3, ch, ch], 0.3, rng)),
            bias: randn(g, &[ch], rng),
        };
        let wrt = vec![vars.bn_gamma, vars.bn_beta, vars.kernel, vars.bias];
        (vars, wrt)
    };
    let ssm_vars = |g: &mut Graph, ch: usize, rng: &mut ChaCha8Rng| {
        let ln_gamma = uniform(g, &[ch], 0.5, 1.5, rng);
        let ln_beta = randn(g, &[ch], rng);
        let w_in = randn(g, &[ch, ch], rng);
        let b_in = randn(g, &[ch], rng);
        let (dirs, mut wrt) = direction_leaves(g, 6, ch, 2, rng);
        let w_out = randn(g, &[ch, ch], rng);
        let b_out = randn(g, &[ch], rng);
        wrt.extend([ln_gamma, ln_beta, w_in, b_in, w_out, b_out]);
        let vars = SsmBranchVars {
            ln_gamma,
            ln_beta,
            w_in,
            b_in,
            dirs,
            w_out,
            b_out,
        };
        (vars, wrt)
    };
    let (out, wrt) = match c {
        Composite::ConvBranch => {
            let x = randn(&mut g, &[grid[0], grid[1], grid[2], grid[3], 2], rng);
            let (vars, mut wrt) = conv_vars(&mut g, 2, rng);
            let mut stats = RunningStats::empty(2, DEFAULT_MOMENTUM);
            let y = conv_branch(&mut g, x, &vars, BnMode::Train, &mut stats)?;
            wrt.push(x);
            (y, wrt)
        }
        Composite::Ss3d => {
            let x = randn(&mut g, &[1, 2, 3, 2, 2], rng);
            let (dirs, mut wrt) = direction_leaves(&mut g, 6, 2, 3, rng);
            let y = ss3d(&mut g, x, &dirs, ScanMode::Sequential)?;
            wrt.push(x);
            (y, wrt)
        }
        Composite::SsmBranch => {
            let x = randn(&mut g, &[1, 2, 2, 2, 2], rng);
            let (vars, mut wrt) = ssm_vars(&mut g, 2, rng);
            let y = ssm_branch(&mut g, x, &vars, ScanMode::Parallel)?;
            wrt.push(x);
            (y, wrt)
        }
        Composite::Block => {
            let x = randn(&mut g, &[2, 2, 2, 2, 4], rng);
            let (conv, mut wrt) = conv_vars(&mut g, 2, rng);
            let (ssm, more) = ssm_vars(&mut g, 2, rng);
            wrt.extend(more);
            wrt.push(x);
            let mut stats = RunningStats::empty(2, DEFAULT_MOMENTUM);
            let vars = BlockVars { conv, ssm };
            let y = block_forward(
                &mut g,
                x,
                &vars,
                BnMode::Train,
                ScanMode::Parallel,
                &mut stats,
            )?;
            (y, wrt)
        }
        Composite::PatchMerging => {
            let x = randn(&mut g, &[1, 2, 2, 4, 3], rng);
            let w = randn(&mut g, &[24, 6], rng);
            let b = randn(&mut g, &[6], rng);
            (patch_merging(&mut g, x, w, b)?, vec![x, w, b])
        }
        Composite::Classify => {
            let x = randn(&mut g, &[2, 2, 1, 2, 4], rng);
            let w = randn(&mut g, &[4, 3], rng);
            let b = randn(&mut g, &[3], rng);
            let (_, probs) = classify(&mut g, x, w, b)?;
            (probs, vec![x, w, b])
        }
    };
    let loss = weighted_loss(&mut g, out, rng)?;
    Ok((g, loss, wrt))
}

pub fn check_composite(c: Composite, trials: usize, seed: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let (g, loss, wrt) = composite_case(c, &mut rng)?;
        worst = worst.max(check_graph(&g, loss, &wrt)?);
    }
    Ok(CheckResult {
        name: c.name().to_string(),
        trials,
        max_rel_error: worst,
        tolerance: OP_TOLERANCE,
        passed: worst <= OP_TOLERANCE,
    })
}

/// Configuration used for the end-to-end check.
pub fn tiny_check_config() -> ModelConfig {
    ModelConfig {
        directions: 6,
        seed: 5,
        ..ModelConfig::tiny()
    }
}

/// Cross-entropy of the whole model on two random volumes, differentiated
/// with respect to every trainable parameter.
pub fn check_model(config: ModelConfig, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(config.clone())?;
    let vols: Vec<Tensor> = (0..2)
        .map(|_| Tensor::uniform(config.input_dims.to_vec(), 0.0, 1.0, &mut rng))
        .collect();
    let refs: Vec<&Tensor> = vols.iter().collect();
    let labels: Vec<usize> = (0..2)
        .map(|_| rng.random_range(0..config.num_classes))
        .collect();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &refs, Mode::train())?;
    let loss = g.cross_entropy(out.logits, &labels)?;
    let wrt: Vec<Var> = model
        .store()
        .trainable_ids()
        .into_iter()
        .filter_map(|id| g.param_var(id))
        .collect();
    let err = check_graph(&g, loss, &wrt)?;
    Ok(CheckResult {
        name: "model".into(),
        trials: 1,
        max_rel_error: err,
        tolerance: MODEL_TOLERANCE,
        passed: err <= MODEL_TOLERANCE,
    })
}

/// The full table: every op, every composite layer, then the model.
pub fn full_suite(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_suite(trials, seed)?;
    for c in Composite::ALL {
        out.push(check_composite(c, trials.div_ceil(4).max(1), seed)?);
    }
    out.push(check_model(tiny_check_config(), seed)?);
    Ok(out)
}
