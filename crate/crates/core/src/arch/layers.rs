//! Graph builders for the pieces of the classifier. Activations are laid out
//! `[B, D, H, W, C]`.

use std::sync::Arc;

use super::traversal::{directions, permutation_indices};
use crate::error::{Error, Result};
use crate::ssm::ScanMode;
use crate::tensor::ops::DEFAULT_EPS;
use crate::tensor::{BnMode, Graph, RunningStats, Tensor, Var};

/// Splits whole volumes `[D, H, W]` into non-overlapping `p³` patches,
/// returning `[B, D/p, H/p, W/p, p³]` with each patch flattened in
/// `(dz, dy, dx)` row-major order.
pub fn patchify(volumes: &[&Tensor], p: usize) -> Result<Tensor> {
    if p == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let first = volumes
        .first()
        .ok_or_else(|| Error::invalid("patchify needs at least one volume"))?;
    let dims = first.shape().to_vec();
    if dims.len() != 3 {
        return Err(Error::shape("patchify", &dims, &[0, 0, 0]));
    }
    if let Some(axis) = dims.iter().position(|&d| d % p != 0) {
        return Err(Error::invalid(format!(
            "volume dims {dims:?} are not divisible by patch size {p} (axis {axis}); \
             resize the volume to a multiple of {p} first"
        )));
    }
    let (d, h, w) = (dims[0], dims[1], dims[2]);
    let (gd, gh, gw) = (d / p, h / p, w / p);
    let p3 = p * p * p;
    let mut out = Vec::with_capacity(volumes.len() * d * h * w);
    for vol in volumes {
        if vol.shape() != dims.as_slice() {
            return Err(Error::shape("patchify batch", vol.shape(), &dims));
        }
        let v = vol.data();
        for pz in 0..gd {
            for py in 0..gh {
                for px in 0..gw {
                    for dz in 0..p {
                        for dy in 0..p {
                            let row = ((pz * p + dz) * h + py * p + dy) * w + px * p;
                            out.extend_from_slice(&v[row..row + p]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![volumes.len(), gd, gh, gw, p3], out)
}

/// Patchify followed by the linear projection `w: [p³, C0]`, `b: [C0]`.
pub fn patch_embed(g: &mut Graph, volumes: &[&Tensor], p: usize, w: Var, b: Var) -> Result<Var> {
    let patches = patchify(volumes, p)?;
    let x = g.leaf(patches);
    g.linear(x, w, b)
}

pub struct ConvBranchVars {
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub kernel: Var,
    pub bias: Var,
}

/// `Conv3D(ReLU(BN(x)))`.
pub fn conv_branch(
    g: &mut Graph,
    x: Var,
    p: &ConvBranchVars,
    mode: BnMode,
    stats: &mut RunningStats,
) -> Result<Var> {
    let n = g.batch_norm(x, p.bn_gamma, p.bn_beta, DEFAULT_EPS, mode, stats)?;
    let r = g.relu(n)?;
    g.conv3d(r, p.kernel, p.bias)
}

/// Parameters of one directional scan; `a` is the (negative) state diagonal.
#[derive(Clone, Copy)]
pub struct DirectionVars {
    pub a: Var,
    pub w_delta: Var,
    pub b_delta: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub d: Var,
}

/// Scans `x: [B, D, H, W, E]` along each direction (one parameter set per
/// direction), maps every result back to grid order and averages them.
pub fn ss3d(g: &mut Graph, x: Var, dirs: &[DirectionVars], mode: ScanMode) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [batch, d, h, w, e] = shape[..] else {
        return Err(Error::shape("ss3d", &shape, &[0, 0, 0, 0, 0]));
    };
    let orders = directions(dirs.len())?;
    let len = d * h * w;
    let mut total: Option<Var> = None;
    for (dir, p) in orders.iter().zip(dirs) {
        let seq = dir.sequence([d, h, w]);
        let (fwd, inv) = permutation_indices(&seq, batch, e);
        let s = g.gather(x, Arc::from(fwd), vec![batch, len, e])?;
        let y = g.selective_scan(s, p.a, p.w_delta, p.b_delta, p.w_b, p.w_c, p.d, mode)?;
        let back = g.gather(y, Arc::from(inv), shape.clone())?;
        total = Some(match total {
            None => back,
            Some(acc) => g.add(acc, back)?,
        });
    }
    let total = total.expect("at least two directions");
    g.scale(total, 1.0 / dirs.len() as f64)
}

pub struct SsmBranchVars {
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub w_in: Var,
    pub b_in: Var,
    pub dirs: Vec<DirectionVars>,
    pub w_out: Var,
    pub b_out: Var,
}

/// `Linear_out(SS3D(SiLU(Linear_in(LN(x)))))`.
pub fn ssm_branch(g: &mut Graph, x: Var, p: &SsmBranchVars, mode: ScanMode) -> Result<Var> {
    let n = g.layer_norm(x, p.ln_gamma, p.ln_beta, DEFAULT_EPS)?;
    let z = g.linear(n, p.w_in, p.b_in)?;
    let z = g.silu(z)?;
    let s = ss3d(g, z, &p.dirs, mode)?;
    g.linear(s, p.w_out, p.b_out)
}

pub struct BlockVars {
    pub conv: ConvBranchVars,
    pub ssm: SsmBranchVars,
}

fn channel_range(rows: usize, full: usize, range: std::ops::Range<usize>) -> Vec<usize> {
    (0..rows)
        .flat_map(|r| range.clone().map(move |k| r * full + k))
        .collect()
}

/// Interleaves the two halves of the channel axis: `out[2i] = in[i]`,
/// `out[2i + 1] = in[C/2 + i]`.
fn shuffle_indices(rows: usize, channels: usize) -> Vec<usize> {
    let half = channels / 2;
    (0..rows)
        .flat_map(|r| (0..channels).map(move |k| r * channels + (k % 2) * half + k / 2))
        .collect()
}

/// Channel split, the two branches, concat, channel shuffle and residual add.
pub fn block_forward(
    g: &mut Graph,
    x: Var,
    p: &BlockVars,
    bn_mode: BnMode,
    scan_mode: ScanMode,
    stats: &mut RunningStats,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = *shape
        .last()
        .ok_or_else(|| Error::invalid("empty block input"))?;
    if c < 2 || c % 2 != 0 {
        return Err(Error::invalid(format!(
            "block needs an even channel count, got {c}"
        )));
    }
    let rows = g.value(x).numel() / c;
    let mut half_shape = shape.clone();
    *half_shape.last_mut().unwrap() = c / 2;
    let left = g.gather(
        x,
        Arc::from(channel_range(rows, c, 0..c / 2)),
        half_shape.clone(),
    )?;
    let right = g.gather(x, Arc::from(channel_range(rows, c, c / 2..c)), half_shape)?;
    let conv = conv_branch(g, left, &p.conv, bn_mode, stats)?;
    let ssm = ssm_branch(g, right, &p.ssm, scan_mode)?;
    let merged = g.concat(conv, ssm)?;
    let mixed = g.gather(merged, Arc::from(shuffle_indices(rows, c)), shape)?;
    g.add(mixed, x)
}

/// Concatenates each 2x2x2 neighbourhood (feature index
/// `((dz * 2 + dy) * 2 + dx) * C + c`) and projects `8C -> 2C`.
pub fn patch_merging(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [batch, d, h, wd, c] = shape[..] else {
        return Err(Error::shape("patch_merging", &shape, &[0, 0, 0, 0, 0]));
    };
    if d % 2 != 0 || h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::invalid(format!(
            "patch merging needs even grid dims, got {:?}",
            [d, h, wd]
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, wd / 2);
    let mut index = Vec::with_capacity(g.value(x).numel());
    for n in 0..batch {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let src =
                                    (((n * d + 2 * z + dz) * h + 2 * y + dy) * wd + 2 * xx + dx)
                                        * c;
                                index.extend(src..src + c);
                            }
                        }
                    }
                }
            }
        }
    }
    let gathered = g.gather(x, Arc::from(index), vec![batch, od, oh, ow, 8 * c])?;
    g.linear(gathered, w, b)
}

/// Global mean over tokens, linear head, softmax. Returns `(logits, probs)`,
/// both `[B, K]`.
pub fn classify(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("classify", &shape, &[0, 0]));
    }
    let batch = shape[0];
    let c = *shape.last().unwrap();
    let tokens = g.value(x).numel() / (batch * c);
    let flat = g.reshape(x, vec![batch, tokens, c])?;
    let pooled = g.mean_axis(flat, 1)?;
    let logits = g.linear(pooled, w, b)?;
    let probs = g.softmax(logits, 1)?;
    Ok((logits, probs))
}
