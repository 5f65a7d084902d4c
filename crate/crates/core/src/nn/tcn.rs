use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv1dSpec, Graph, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Normalization used inside TCN blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    /// Global layer norm over all channels and frames.
    #[default]
    Global,
    /// No normalization. Keeps the network local in time, which makes the
    /// receptive field observable.
    Identity,
}

/// Temporal convolutional network hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcnConfig {
    /// Bottleneck channels.
    #[serde(rename = "B")]
    pub b: usize,
    /// Hidden channels of each block.
    #[serde(rename = "H")]
    pub h: usize,
    /// Depthwise kernel size (odd).
    #[serde(rename = "P")]
    pub p: usize,
    /// Blocks per repeat; block `i` uses dilation `2^i`.
    #[serde(rename = "X")]
    pub x: usize,
    /// Repeats.
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(default)]
    pub norm: NormKind,
}

impl TcnConfig {
    pub fn new(b: usize, h: usize, p: usize, x: usize, r: usize) -> Self {
        TcnConfig {
            b,
            h,
            p,
            x,
            r,
            norm: NormKind::Global,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b == 0 || self.h == 0 || self.p == 0 || self.x == 0 || self.r == 0 {
            return Err(Error::InvalidConfiguration(format!("TCN sizes must be >= 1, got {self:?}")));
        }
        if self.p % 2 == 0 {
            return Err(Error::InvalidConfiguration(format!(
                "kernel size P={} must be odd for length-preserving padding",
                self.p
            )));
        }
        if self.x > 20 {
            return Err(Error::InvalidConfiguration(format!("X={} gives absurd dilations", self.x)));
        }
        Ok(())
    }

    /// Frames of input that can influence one output frame.
    pub fn receptive_field(&self) -> usize {
        1 + self.r * (0..self.x).map(|i| (self.p - 1) << i).sum::<usize>()
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    in_w: ParamId,
    in_b: ParamId,
    alpha1: ParamId,
    norm1: Option<Norm>,
    dw_w: ParamId,
    dw_b: ParamId,
    alpha2: ParamId,
    norm2: Option<Norm>,
    out_w: ParamId,
    out_b: ParamId,
    dilation: usize,
}

/// Parameter handles of one TCN inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Tcn {
    pub cfg: TcnConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    in_norm: Option<Norm>,
    in_w: ParamId,
    in_b: ParamId,
    blocks: Vec<Block>,
    out_alpha: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

const PRELU_INIT: f64 = 0.25;

fn add_norm(store: &mut ParamStore, name: &str, c: usize, kind: NormKind) -> Option<Norm> {
    match kind {
        NormKind::Global => Some(Norm {
            gamma: store.add_constant(&format!("{name}.gamma"), &[c], 1.0),
            beta: store.add_constant(&format!("{name}.beta"), &[c], 0.0),
        }),
        NormKind::Identity => None,
    }
}

fn apply_norm(g: &mut Graph, store: &ParamStore, x: Tensor, norm: &Option<Norm>) -> Result<Tensor> {
    match norm {
        Some(n) => {
            let gamma = g.param(store, n.gamma);
            let beta = g.param(store, n.beta);
            g.global_layer_norm(x, gamma, beta)
        }
        None => Ok(x),
    }
}

fn pointwise(g: &mut Graph, store: &ParamStore, x: Tensor, w: ParamId, b: ParamId) -> Result<Tensor> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    g.conv1d(x, w, Some(b), Conv1dSpec::default())
}

impl Tcn {
    /// Registers the parameters under `prefix`. The input is normalized,
    /// projected to `B` channels, passed through `R x X` residual blocks and
    /// projected to `out_channels`.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: TcnConfig, in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidConfiguration("TCN channel counts must be >= 1".into()));
        }
        let TcnConfig { b, h, p, x, r, norm } = cfg;
        let in_norm = add_norm(store, &format!("{prefix}.in_norm"), in_channels, norm);
        let in_w = store.add_uniform(&format!("{prefix}.in.w"), &[b, in_channels, 1], in_channels, rng);
        let in_b = store.add_uniform(&format!("{prefix}.in.b"), &[b], in_channels, rng);
        let mut blocks = Vec::with_capacity(r * x);
        for rep in 0..r {
            for i in 0..x {
                let name = format!("{prefix}.block{rep}_{i}");
                blocks.push(Block {
                    in_w: store.add_uniform(&format!("{name}.in.w"), &[h, b, 1], b, rng),
                    in_b: store.add_uniform(&format!("{name}.in.b"), &[h], b, rng),
                    alpha1: store.add_constant(&format!("{name}.prelu1"), &[1], PRELU_INIT),
                    norm1: add_norm(store, &format!("{name}.norm1"), h, norm),
                    dw_w: store.add_uniform(&format!("{name}.dw.w"), &[h, 1, p], p, rng),
                    dw_b: store.add_uniform(&format!("{name}.dw.b"), &[h], p, rng),
                    alpha2: store.add_constant(&format!("{name}.prelu2"), &[1], PRELU_INIT),
                    norm2: add_norm(store, &format!("{name}.norm2"), h, norm),
                    out_w: store.add_uniform(&format!("{name}.out.w"), &[b, h, 1], h, rng),
                    out_b: store.add_uniform(&format!("{name}.out.b"), &[b], h, rng),
                    dilation: 1 << i,
                });
            }
        }
        Ok(Tcn {
            cfg,
            in_channels,
            out_channels,
            in_norm,
            in_w,
            in_b,
            blocks,
            out_alpha: store.add_constant(&format!("{prefix}.out.prelu"), &[1], PRELU_INIT),
            out_w: store.add_uniform(&format!("{prefix}.out.w"), &[out_channels, b, 1], b, rng),
            out_b: store.add_uniform(&format!("{prefix}.out.b"), &[out_channels], b, rng),
        })
    }

    /// Maps `features: [in_channels, T]` to `[out_channels, T]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Tensor) -> Result<Tensor> {
        let shape = g.shape(features);
        if shape.len() != 2 || shape[0] != self.in_channels {
            return Err(Error::invalid(format!(
                "TCN expects {} input channels, got shape {shape:?}",
                self.in_channels
            )));
        }
        let x = apply_norm(g, store, features, &self.in_norm)?;
        let mut x = pointwise(g, store, x, self.in_w, self.in_b)?;
        for blk in &self.blocks {
            let y = pointwise(g, store, x, blk.in_w, blk.in_b)?;
            let a1 = g.param(store, blk.alpha1);
            let y = g.prelu(y, a1)?;
            let y = apply_norm(g, store, y, &blk.norm1)?;
            let dw = g.param(store, blk.dw_w);
            let db = g.param(store, blk.dw_b);
            let spec = Conv1dSpec {
                stride: 1,
                dilation: blk.dilation,
                groups: self.cfg.h,
                padding: (self.cfg.p - 1) * blk.dilation / 2,
            };
            let y = g.conv1d(y, dw, Some(db), spec)?;
            let a2 = g.param(store, blk.alpha2);
            let y = g.prelu(y, a2)?;
            let y = apply_norm(g, store, y, &blk.norm2)?;
            let y = pointwise(g, store, y, blk.out_w, blk.out_b)?;
            x = g.add(x, y)?;
        }
        let a = g.param(store, self.out_alpha);
        let x = g.prelu(x, a)?;
        pointwise(g, store, x, self.out_w, self.out_b)
    }
}
