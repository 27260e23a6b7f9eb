//! Spatio-temporal relational blocks.
//!
//! A block mixes joints with a data-dependent adjacency (attention map
//! generator), then mixes frames with parallel dilated temporal branches,
//! and adds a residual path.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Builder, Forward, ParamKind, Pointwise, TemporalConv};
use crate::ops::Conv2dSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Nonlinearity applied to the pooled joint differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    #[default]
    Tanh,
    /// A learned 1x1 convolution (no bias) instead of an activation.
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMaps {
    /// One `N x N` map per output channel.
    #[default]
    ChannelWise,
    /// A single map shared by all output channels.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamgOptions {
    pub squash: Squash,
    pub maps: AttentionMaps,
    /// Reduced width is `max(cin / reduction, min_reduced)`.
    pub reduction: usize,
    pub min_reduced: usize,
}

impl Default for SamgOptions {
    fn default() -> Self {
        Self {
            squash: Squash::Tanh,
            maps: AttentionMaps::ChannelWise,
            reduction: 8,
            min_reduced: 8,
        }
    }
}

impl SamgOptions {
    pub fn reduced(&self, cin: usize) -> usize {
        (cin / self.reduction.max(1)).max(self.min_reduced).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Branch {
    Conv { kernel: usize, dilation: usize },
    MaxPool { kernel: usize },
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Pad so every branch keeps `ceil(T / stride)` frames.
    #[default]
    Same,
    /// No padding; branches are centre-cropped to the shortest output.
    Valid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrmConfig {
    pub branches: Vec<Branch>,
    pub padding: Padding,
}

impl Default for TrmConfig {
    fn default() -> Self {
        Self {
            branches: alloc::vec![
                Branch::Conv { kernel: 5, dilation: 1 },
                Branch::Conv { kernel: 5, dilation: 2 },
                Branch::MaxPool { kernel: 3 },
                Branch::Pointwise,
            ],
            padding: Padding::Same,
        }
    }
}

impl TrmConfig {
    /// Output width of each branch; the first branches absorb the remainder.
    pub fn branch_channels(&self, cout: usize) -> Result<Vec<usize>> {
        let b = self.branches.len();
        if b == 0 || cout < b {
            return Err(Error::config(format!("{b} temporal branches cannot share {cout} channels")));
        }
        Ok((0..b).map(|i| cout / b + usize::from(i < cout % b)).collect())
    }

    fn spec(&self, branch: Branch, stride: usize) -> (usize, Conv2dSpec) {
        let (kernel, dilation) = match branch {
            Branch::Conv { kernel, dilation } => (kernel, dilation),
            Branch::MaxPool { kernel } => (kernel, 1),
            Branch::Pointwise => (1, 1),
        };
        let pad = match self.padding {
            Padding::Same => dilation * (kernel - 1) / 2,
            Padding::Valid => 0,
        };
        (kernel, Conv2dSpec::new(stride, dilation, pad))
    }

    /// Output frame count for `t` input frames, or a configuration error
    /// when some branch kernel does not fit.
    pub fn out_len(&self, t: usize, stride: usize) -> Result<usize> {
        let mut lens = Vec::with_capacity(self.branches.len());
        for &b in &self.branches {
            let (k, spec) = self.spec(b, stride);
            lens.push(spec.out_len(t, k).map_err(|e| match e {
                Error::Config(msg) => Error::config(format!("temporal branch {b:?}: {msg}")),
                other => other,
            })?);
        }
        Ok(lens.into_iter().min().unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrbConfig {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub samg: SamgOptions,
    pub trm: TrmConfig,
}

impl StrbConfig {
    pub fn new(cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            stride,
            samg: SamgOptions::default(),
            trm: TrmConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cin == 0 || self.cout == 0 {
            return Err(Error::config("block widths must be positive"));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::config(format!("block stride must be 1 or 2, got {}", self.stride)));
        }
        self.trm.branch_channels(self.cout)?;
        for &b in &self.trm.branches {
            let ok = match b {
                Branch::Conv { kernel, dilation } => kernel % 2 == 1 && dilation > 0,
                Branch::MaxPool { kernel } => kernel % 2 == 1,
                Branch::Pointwise => true,
            };
            if !ok {
                return Err(Error::config(format!("branch {b:?} needs an odd kernel and positive dilation")));
            }
        }
        Ok(())
    }

    pub fn needs_projection(&self) -> bool {
        self.cin != self.cout || self.stride != 1
    }
}

/// Attention map generator with the fixed adjacency blended in.
#[derive(Debug, Clone, PartialEq)]
pub struct Samg {
    pub phi: Pointwise,
    pub psi: Pointwise,
    pub squash: Option<Pointwise>,
    pub expand: Pointwise,
    pub theta: Pointwise,
    pub alpha: usize,
    pub options: SamgOptions,
}

impl Samg {
    pub fn build<S: Scalar, R: Rng>(b: &mut Builder<'_, S, R>, cin: usize, cout: usize, options: SamgOptions) -> Result<Self> {
        let cr = options.reduced(cin);
        let maps = match options.maps {
            AttentionMaps::ChannelWise => cout,
            AttentionMaps::Shared => 1,
        };
        Ok(Self {
            phi: Pointwise::build(&mut b.scope("phi"), cin, cr, true)?,
            psi: Pointwise::build(&mut b.scope("psi"), cin, cr, true)?,
            squash: match options.squash {
                Squash::Tanh => None,
                Squash::Pointwise => Some(Pointwise::build(&mut b.scope("sigma"), cr, cr, false)?),
            },
            expand: Pointwise::build(&mut b.scope("expand"), cr, maps, false)?,
            theta: Pointwise::build(&mut b.scope("theta"), cin, cout, true)?,
            alpha: b.add("alpha", Tensor::zeros(&[1]), ParamKind::Param)?,
            options,
        })
    }

    /// Data-dependent maps `[B, maps, N, N]` from `x[B, Cin, T, N]`:
    /// squashed differences of temporally pooled joint embeddings.
    pub fn attention<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let p = self.phi.forward(f, x)?;
        let q = self.psi.forward(f, x)?;
        let p = f.tape.temporal_pool(p)?;
        let q = f.tape.temporal_pool(q)?;
        let d = f.tape.pairwise_sub(p, q)?;
        let d = match &self.squash {
            None => f.tape.tanh(d)?,
            Some(conv) => conv.forward(f, d)?,
        };
        self.expand.forward(f, d)
    }

    /// `out[b, c, t, i] = sum_j (alpha * M[b, c, i, j] + A[i, j]) * theta(x)[b, c, t, j]`.
    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var, adjacency: &Tensor<S>) -> Result<Var> {
        let n = *f.tape.shape(x).last().unwrap();
        if adjacency.shape() != [n, n] {
            return Err(Error::shape("samg adjacency", adjacency.shape(), &[n, n]));
        }
        let m = self.attention(f, x)?;
        let alpha = f.param(self.alpha);
        let scaled = f.tape.scale(m, alpha)?;
        let hybrid = f.tape.add_const(scaled, adjacency)?;
        let embedded = self.theta.forward(f, x)?;
        f.tape.matmul_nt(embedded, hybrid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BranchLayers {
    Conv {
        reduce: TemporalConv,
        reduce_bn: BatchNorm,
        conv: TemporalConv,
        bn: BatchNorm,
    },
    MaxPool {
        reduce: TemporalConv,
        reduce_bn: BatchNorm,
        kernel: usize,
        spec: Conv2dSpec,
        bn: BatchNorm,
    },
    Pointwise {
        conv: TemporalConv,
        bn: BatchNorm,
    },
}

/// Parallel temporal branches whose outputs are concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct Trm {
    pub branches: Vec<BranchLayers>,
    pub config: TrmConfig,
    pub stride: usize,
}

impl Trm {
    pub fn build<S: Scalar, R: Rng>(b: &mut Builder<'_, S, R>, c: usize, stride: usize, config: &TrmConfig) -> Result<Self> {
        let widths = config.branch_channels(c)?;
        let unit = Conv2dSpec::default();
        let mut branches = Vec::with_capacity(widths.len());
        for (i, (&kind, &w)) in config.branches.iter().zip(&widths).enumerate() {
            let mut bb = b.scope(&format!("branch{}", i + 1));
            let (kernel, spec) = config.spec(kind, stride);
            let layers = match kind {
                Branch::Conv { .. } => BranchLayers::Conv {
                    reduce: TemporalConv::build(&mut bb.scope("reduce"), c, w, 1, unit)?,
                    reduce_bn: BatchNorm::build(&mut bb.scope("reduce_bn"), w)?,
                    conv: TemporalConv::build(&mut bb.scope("conv"), w, w, kernel, spec)?,
                    bn: BatchNorm::build(&mut bb.scope("bn"), w)?,
                },
                Branch::MaxPool { .. } => BranchLayers::MaxPool {
                    reduce: TemporalConv::build(&mut bb.scope("reduce"), c, w, 1, unit)?,
                    reduce_bn: BatchNorm::build(&mut bb.scope("reduce_bn"), w)?,
                    kernel,
                    spec,
                    bn: BatchNorm::build(&mut bb.scope("bn"), w)?,
                },
                Branch::Pointwise => BranchLayers::Pointwise {
                    conv: TemporalConv::build(&mut bb.scope("conv"), c, w, 1, spec)?,
                    bn: BatchNorm::build(&mut bb.scope("bn"), w)?,
                },
            };
            branches.push(layers);
        }
        Ok(Self {
            branches,
            config: config.clone(),
            stride,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let t = f.tape.shape(x)[2];
        let target = self.config.out_len(t, self.stride)?;
        let mut outs = Vec::with_capacity(self.branches.len());
        for layers in &self.branches {
            let y = match layers {
                BranchLayers::Conv {
                    reduce,
                    reduce_bn,
                    conv,
                    bn,
                } => {
                    let h = reduce.forward(f, x)?;
                    let h = reduce_bn.forward(f, h)?;
                    let h = f.tape.relu(h)?;
                    let h = conv.forward(f, h)?;
                    bn.forward(f, h)?
                }
                BranchLayers::MaxPool {
                    reduce,
                    reduce_bn,
                    kernel,
                    spec,
                    bn,
                } => {
                    let h = reduce.forward(f, x)?;
                    let h = reduce_bn.forward(f, h)?;
                    let h = f.tape.relu(h)?;
                    let h = f.tape.max_pool_t(h, *kernel, *spec)?;
                    bn.forward(f, h)?
                }
                BranchLayers::Pointwise { conv, bn } => {
                    let h = conv.forward(f, x)?;
                    bn.forward(f, h)?
                }
            };
            outs.push(center_crop_time(f, y, target)?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        f.tape.concat(&outs, 1)
    }
}

fn center_crop_time<S: Scalar>(f: &mut Forward<'_, S>, x: Var, len: usize) -> Result<Var> {
    let t = f.tape.shape(x)[2];
    f.tape.narrow(x, 2, (t - len) / 2, len)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Residual {
    Identity,
    Projection { conv: TemporalConv, bn: BatchNorm },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Strb {
    pub config: StrbConfig,
    pub samg: Samg,
    pub samg_bn: BatchNorm,
    pub trm: Trm,
    pub residual: Residual,
}

impl Strb {
    pub fn build<S: Scalar, R: Rng>(b: &mut Builder<'_, S, R>, config: &StrbConfig) -> Result<Self> {
        config.validate()?;
        let samg = Samg::build(&mut b.scope("samg"), config.cin, config.cout, config.samg)?;
        let samg_bn = BatchNorm::build(&mut b.scope("samg_bn"), config.cout)?;
        let trm = Trm::build(&mut b.scope("trm"), config.cout, config.stride, &config.trm)?;
        let residual = if config.needs_projection() {
            let mut rb = b.scope("residual");
            Residual::Projection {
                conv: TemporalConv::build(
                    &mut rb.scope("conv"),
                    config.cin,
                    config.cout,
                    1,
                    Conv2dSpec::new(config.stride, 1, 0),
                )?,
                bn: BatchNorm::build(&mut rb.scope("bn"), config.cout)?,
            }
        } else {
            Residual::Identity
        };
        Ok(Self {
            config: config.clone(),
            samg,
            samg_bn,
            trm,
            residual,
        })
    }

    /// `relu(TRM(relu(BN(SAMG(x)))) + residual(x))` on `x[B, Cin, T, N]`.
    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var, adjacency: &Tensor<S>) -> Result<Var> {
        let xs = f.tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.config.cin {
            return Err(Error::shape("strb input", &xs, &[0, self.config.cin, 0, 0]));
        }
        let h = self.samg.forward(f, x, adjacency)?;
        let h = self.samg_bn.forward(f, h)?;
        let h = f.tape.relu(h)?;
        let h = self.trm.forward(f, h)?;
        let t_out = f.tape.shape(h)[2];
        let r = match &self.residual {
            Residual::Identity => x,
            Residual::Projection { conv, bn } => {
                let r = conv.forward(f, x)?;
                bn.forward(f, r)?
            }
        };
        let r = center_crop_time(f, r, t_out)?;
        let sum = f.tape.add(h, r)?;
        f.tape.relu(sum)
    }
}

/// A stack of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Strm {
    pub blocks: Vec<Strb>,
}

impl Strm {
    /// Blocks are named `strb1`, `strb2`, ... under the builder's prefix.
    pub fn build<S: Scalar, R: Rng>(b: &mut Builder<'_, S, R>, configs: &[StrbConfig]) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::config("a block stack needs at least one block"));
        }
        for w in configs.windows(2) {
            if w[0].cout != w[1].cin {
                return Err(Error::config(format!(
                    "block widths do not chain: {} then {}",
                    w[0].cout, w[1].cin
                )));
            }
        }
        let blocks = configs
            .iter()
            .enumerate()
            .map(|(i, c)| Strb::build(&mut b.scope(&format!("strb{}", i + 1)), c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var, adjacency: &Tensor<S>) -> Result<Var> {
        self.blocks.iter().try_fold(x, |h, block| block.forward(f, h, adjacency))
    }
}
