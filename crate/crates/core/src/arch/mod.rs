//! Patch embedding, stacked convolution / selective-scan blocks with patch
//! merging between stages, and a pooled softmax head.

pub mod layers;
pub mod traversal;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{
    block_forward, classify, conv_branch, patch_embed, patch_merging, patchify, ss3d, ssm_branch,
    BlockVars, ConvBranchVars, DirectionVars, SsmBranchVars,
};
pub use traversal::{directions, AxisOrder, Direction};

use crate::error::{Error, Result};
use crate::ssm::{hippo_diag_init, ScanMode, SsmParams};
use crate::tensor::ops::DEFAULT_MOMENTUM;
use crate::tensor::{BnMode, Graph, ParamId, ParamStore, Precision, RunningStats, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Expected volume extents `[D, H, W]`.
    pub input_dims: [usize; 3],
    pub patch_size: usize,
    pub embed_dim: usize,
    pub stage_dims: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub state_dim: usize,
    pub num_classes: usize,
    /// Scan directions per block, 2 or 6.
    pub directions: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dims: [224, 224, 160],
            patch_size: 16,
            embed_dim: 48,
            stage_dims: vec![48, 96],
            stage_depths: vec![2, 2],
            state_dim: 16,
            num_classes: 3,
            directions: 6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small profile for 32x32x16 volumes.
    pub fn tiny() -> Self {
        ModelConfig {
            input_dims: [32, 32, 16],
            patch_size: 4,
            embed_dim: 8,
            stage_dims: vec![8, 16],
            stage_depths: vec![1, 1],
            state_dim: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.stage_dims.is_empty() || self.stage_dims.len() != self.stage_depths.len() {
            return bad(format!(
                "stage_dims ({}) and stage_depths ({}) must be non-empty and equally long",
                self.stage_dims.len(),
                self.stage_depths.len()
            ));
        }
        if self.embed_dim != self.stage_dims[0] {
            return bad(format!(
                "embed_dim {} must equal the first stage width {}",
                self.embed_dim, self.stage_dims[0]
            ));
        }
        for (i, &c) in self.stage_dims.iter().enumerate() {
            if c < 2 || c % 2 != 0 {
                return bad(format!("stage {i}: width {c} must be even and at least 2"));
            }
            if i > 0 && c != 2 * self.stage_dims[i - 1] {
                return bad(format!(
                    "stage {i}: width {c} must double the previous stage ({})",
                    self.stage_dims[i - 1]
                ));
            }
        }
        if self.state_dim == 0 {
            return bad("state_dim must be at least 1".into());
        }
        if self.num_classes != 3 {
            return bad(format!(
                "num_classes must be 3 (AD, MCI, CN), got {}",
                self.num_classes
            ));
        }
        directions(self.directions)?;
        self.grid_dims().map(|_| ())
    }

    /// Token grid of every stage, checking divisibility along the way.
    pub fn grid_dims(&self) -> Result<Vec<[usize; 3]>> {
        let p = self.patch_size;
        if p == 0 {
            return Err(Error::invalid("patch_size must be positive"));
        }
        if self.input_dims.iter().any(|&d| d == 0 || d % p != 0) {
            return Err(Error::invalid(format!(
                "input dims {:?} are not divisible by patch size {p}; resize volumes to a multiple of {p}",
                self.input_dims
            )));
        }
        let mut grid = self.input_dims.map(|d| d / p);
        let mut out = Vec::with_capacity(self.stage_dims.len());
        for i in 0..self.stage_dims.len() {
            out.push(grid);
            if i + 1 < self.stage_dims.len() {
                if grid.iter().any(|&g| g % 2 != 0) {
                    return Err(Error::invalid(format!(
                        "stage {i}: token grid {grid:?} has an odd extent and cannot be merged"
                    )));
                }
                grid = grid.map(|g| g / 2);
            }
        }
        Ok(out)
    }
}

/// Batch-norm and scan behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub bn: BnMode,
    pub scan: ScanMode,
}

impl Mode {
    /// Batch statistics and the prefix-scan evaluation.
    pub fn train() -> Self {
        Mode {
            bn: BnMode::Train,
            scan: ScanMode::Parallel,
        }
    }

    /// Running statistics and the left-to-right recurrence.
    pub fn eval() -> Self {
        Mode {
            bn: BnMode::Eval,
            scan: ScanMode::Sequential,
        }
    }
}

pub struct ModelOutput {
    /// `[B, K]`
    pub logits: Var,
    /// `[B, K]`
    pub probs: Var,
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct ConvIds {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct DirectionIds {
    a_log: ParamId,
    w_delta: ParamId,
    b_delta: ParamId,
    w_b: ParamId,
    w_c: ParamId,
    d: ParamId,
}

#[derive(Clone, Debug)]
struct SsmIds {
    ln_gamma: ParamId,
    ln_beta: ParamId,
    proj_in: LinearIds,
    dirs: Vec<DirectionIds>,
    proj_out: LinearIds,
}

#[derive(Clone, Debug)]
struct BlockIds {
    conv: ConvIds,
    ssm: SsmIds,
}

#[derive(Clone, Debug)]
struct StageIds {
    blocks: Vec<BlockIds>,
    merge: Option<LinearIds>,
}

/// Parameters plus the ids that wire them into a forward pass.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    embed: LinearIds,
    stages: Vec<StageIds>,
    head: LinearIds,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn gaussian(&mut self, name: String, shape: Vec<usize>, std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, v: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, v))
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<LinearIds> {
        Ok(LinearIds {
            w: self.gaussian(
                format!("{name}.weight"),
                vec![din, dout],
                1.0 / (din as f64).sqrt(),
            )?,
            b: self.constant(format!("{name}.bias"), vec![dout], 0.0)?,
        })
    }

    fn conv(&mut self, name: &str, c: usize) -> Result<ConvIds> {
        Ok(ConvIds {
            gamma: self.constant(format!("{name}.bn.gamma"), vec![c], 1.0)?,
            beta: self.constant(format!("{name}.bn.beta"), vec![c], 0.0)?,
            running_mean: self
                .store
                .add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros([c]))?,
            running_var: self
                .store
                .add_buffer(format!("{name}.bn.running_var"), Tensor::ones([c]))?,
            kernel: self.gaussian(
                format!("{name}.conv.kernel"),
                vec![3, 3, 3, c, c],
                1.0 / ((27 * c) as f64).sqrt(),
            )?,
            bias: self.constant(format!("{name}.conv.bias"), vec![c], 0.0)?,
        })
    }

    fn direction(&mut self, name: &str, e: usize, n: usize) -> Result<DirectionIds> {
        let p = SsmParams::init(e, n, &mut self.rng)?;
        let a_log: Vec<f64> = hippo_diag_init(n)?.iter().map(|a| (-a).ln()).collect();
        let mut add = |field: &str, t: Tensor| self.store.add(format!("{name}.{field}"), t);
        Ok(DirectionIds {
            a_log: add("a_log", Tensor::from_vec(a_log)?)?,
            w_delta: add("w_delta", p.w_delta().clone())?,
            b_delta: add("b_delta", p.b_delta().clone())?,
            w_b: add("w_b", p.w_b().clone())?,
            w_c: add("w_c", p.w_c().clone())?,
            d: add("d", p.d().clone())?,
        })
    }
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let p3 = config.patch_size.pow(3);
        let embed = init.linear("embed", p3, config.embed_dim)?;
        let mut stages = Vec::with_capacity(config.stage_dims.len());
        for (s, (&c, &depth)) in config
            .stage_dims
            .iter()
            .zip(&config.stage_depths)
            .enumerate()
        {
            let half = c / 2;
            let mut blocks = Vec::with_capacity(depth);
            for k in 0..depth {
                let name = format!("stage{s}.block{k}");
                let conv = init.conv(&format!("{name}.conv_branch"), half)?;
                let base = format!("{name}.ssm_branch");
                let ln_gamma = init.constant(format!("{base}.ln.gamma"), vec![half], 1.0)?;
                let ln_beta = init.constant(format!("{base}.ln.beta"), vec![half], 0.0)?;
                let proj_in = init.linear(&format!("{base}.in_proj"), half, half)?;
                let dirs = (0..config.directions)
                    .map(|d| init.direction(&format!("{base}.scan{d}"), half, config.state_dim))
                    .collect::<Result<Vec<_>>>()?;
                let proj_out = init.linear(&format!("{base}.out_proj"), half, half)?;
                blocks.push(BlockIds {
                    conv,
                    ssm: SsmIds {
                        ln_gamma,
                        ln_beta,
                        proj_in,
                        dirs,
                        proj_out,
                    },
                });
            }
            let merge = if s + 1 < config.stage_dims.len() {
                Some(init.linear(&format!("stage{s}.merge"), 8 * c, 2 * c)?)
            } else {
                None
            };
            stages.push(StageIds { blocks, merge });
        }
        let last = *config.stage_dims.last().unwrap();
        let head = init.linear("head", last, config.num_classes)?;
        Ok(Model {
            config,
            store,
            embed,
            stages,
            head,
        })
    }

    /// Rebuilds a model for `config` and fills it from `store`, which must
    /// hold exactly the expected parameter names and shapes.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Model::new(config)?;
        if store.len() != model.store.len() {
            return Err(Error::invalid(format!(
                "parameter count {} does not match the configuration ({})",
                store.len(),
                model.store.len()
            )));
        }
        for (_, p) in store.iter() {
            let id = model
                .store
                .id(p.name())
                .ok_or_else(|| Error::invalid(format!("unexpected parameter `{}`", p.name())))?;
            model.store.set_value(id, p.value().clone())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_trainable(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(_, p)| p.value().numel())
            .sum()
    }

    fn check_volumes(&self, volumes: &[&Tensor]) -> Result<()> {
        if volumes.is_empty() {
            return Err(Error::invalid("forward needs at least one volume"));
        }
        for v in volumes {
            if v.shape() != self.config.input_dims {
                return Err(Error::invalid(format!(
                    "volume shape {:?} does not match the configured input {:?}",
                    v.shape(),
                    self.config.input_dims
                )));
            }
        }
        Ok(())
    }

    /// Records a forward pass over a batch of `[D, H, W]` volumes. In train
    /// mode the batch-norm running statistics are updated in place.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        volumes: &[&Tensor],
        mode: Mode,
    ) -> Result<ModelOutput> {
        let (out, updates) = self.forward_impl(g, volumes, mode)?;
        for (ids, stats) in updates {
            self.store
                .set_value(ids.0, Tensor::new([stats.mean.len()], stats.mean)?)?;
            self.store
                .set_value(ids.1, Tensor::new([stats.var.len()], stats.var)?)?;
        }
        Ok(out)
    }

    /// Class probabilities per volume, evaluated in eval mode.
    pub fn predict(&self, volumes: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let (out, _) = self.forward_impl(&mut g, volumes, Mode::eval())?;
        let k = self.config.num_classes;
        Ok(g.value(out.probs)
            .data()
            .chunks(k)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Eval-mode logits `[B, K]`.
    pub fn eval_logits(&self, volumes: &[&Tensor], precision: Precision) -> Result<Tensor> {
        let mut g = Graph::with_precision(precision);
        let (out, _) = self.forward_impl(&mut g, volumes, Mode::eval())?;
        Ok(g.value(out.logits).clone())
    }

    #[allow(clippy::type_complexity)]
    fn forward_impl(
        &self,
        g: &mut Graph,
        volumes: &[&Tensor],
        mode: Mode,
    ) -> Result<(ModelOutput, Vec<((ParamId, ParamId), RunningStats)>)> {
        self.check_volumes(volumes)?;
        let store = &self.store;
        let mut updates = Vec::new();
        let (w, b) = (g.param(store, self.embed.w), g.param(store, self.embed.b));
        let mut x = patch_embed(g, volumes, self.config.patch_size, w, b)?;
        for stage in &self.stages {
            for block in &stage.blocks {
                let vars = self.block_vars(g, block)?;
                let mut stats = RunningStats {
                    mean: store.value(block.conv.running_mean).data().to_vec(),
                    var: store.value(block.conv.running_var).data().to_vec(),
                    momentum: DEFAULT_MOMENTUM,
                    initialized: true,
                };
                x = block_forward(g, x, &vars, mode.bn, mode.scan, &mut stats)?;
                if mode.bn == BnMode::Train {
                    updates.push(((block.conv.running_mean, block.conv.running_var), stats));
                }
            }
            if let Some(m) = stage.merge {
                let (w, b) = (g.param(store, m.w), g.param(store, m.b));
                x = patch_merging(g, x, w, b)?;
            }
        }
        let (w, b) = (g.param(store, self.head.w), g.param(store, self.head.b));
        let (logits, probs) = classify(g, x, w, b)?;
        Ok((ModelOutput { logits, probs }, updates))
    }

    fn block_vars(&self, g: &mut Graph, block: &BlockIds) -> Result<BlockVars> {
        let store = &self.store;
        let mut p = |id| g.param(store, id);
        let conv = ConvBranchVars {
            bn_gamma: p(block.conv.gamma),
            bn_beta: p(block.conv.beta),
            kernel: p(block.conv.kernel),
            bias: p(block.conv.bias),
        };
        let s = &block.ssm;
        let (ln_gamma, ln_beta) = (p(s.ln_gamma), p(s.ln_beta));
        let (w_in, b_in) = (p(s.proj_in.w), p(s.proj_in.b));
        let (w_out, b_out) = (p(s.proj_out.w), p(s.proj_out.b));
        let raw: Vec<_> = s
            .dirs
            .iter()
            .map(|d| {
                (
                    p(d.a_log),
                    p(d.w_delta),
                    p(d.b_delta),
                    p(d.w_b),
                    p(d.w_c),
                    p(d.d),
                )
            })
            .collect();
        let mut dirs = Vec::with_capacity(raw.len());
        for (a_log, w_delta, b_delta, w_b, w_c, d) in raw {
            dirs.push(DirectionVars {
                a: g.neg_exp(a_log)?,
                w_delta,
                b_delta,
                w_b,
                w_c,
                d,
            });
        }
        Ok(BlockVars {
            conv,
            ssm: SsmBranchVars {
                ln_gamma,
                ln_beta,
                w_in,
                b_in,
                dirs,
                w_out,
                b_out,
            },
        })
    }
}
