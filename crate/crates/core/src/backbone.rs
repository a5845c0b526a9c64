//! Shared hierarchical transformer backbone over BEV maps.
//!
//! Four stages, each an overlapping strided patch embedding followed by
//! pre-norm blocks of spatial-reduction attention and a convolutional
//! feed-forward network. Outputs sit at strides 4, 8, 16 and 32.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionError, MultiHeadAttention};
use crate::nn::{Conv2d, DepthwiseConv, LayerNorm, Linear, ParamStore};
use crate::tensor::{FeatureMap, Graph, Var};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BackboneError {
    #[error("input {height}x{width} is not divisible by 32")]
    Indivisible { height: usize, width: usize },
    #[error("backbone needs exactly 4 stages, got {0}")]
    StageCount(usize),
    #[error("stage strides must accumulate to 4, 8, 16, 32, got {0:?}")]
    Strides(Vec<usize>),
    #[error("input has {got} channels, backbone expects {expected}")]
    Channels { got: usize, expected: usize },
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub sr_ratio: usize,
    pub patch_kernel: usize,
    pub patch_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
    /// Layer normalization on/off; off only in tests that need exact zeros.
    pub norm: bool,
}

fn stages(channels: [usize; 4], depths: [usize; 4], heads: [usize; 4], ffn: [usize; 4]) -> Vec<StageConfig> {
    let sr = [8, 4, 2, 1];
    (0..4)
        .map(|i| StageConfig {
            channels: channels[i],
            depth: depths[i],
            heads: heads[i],
            ffn_expansion: ffn[i],
            sr_ratio: sr[i],
            patch_kernel: if i == 0 { 7 } else { 3 },
            patch_stride: if i == 0 { 4 } else { 2 },
        })
        .collect()
}

impl BackboneConfig {
    /// PVTv2-b2 layout.
    pub fn paper() -> Self {
        Self {
            stages: stages([64, 128, 320, 512], [3, 4, 6, 3], [1, 2, 5, 8], [8, 8, 4, 8]),
            norm: true,
        }
    }

    /// Small layout used for CPU training and gradient checks.
    pub fn desk() -> Self {
        Self {
            stages: stages([16, 32, 64, 128], [1, 1, 1, 1], [1, 2, 4, 8], [2, 2, 2, 2]),
            norm: true,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "pvtv2-b2-paper" => Some(Self::paper()),
            "desk-small" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.stages[i].channels)
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.stages.len() != 4 {
            return Err(BackboneError::StageCount(self.stages.len()));
        }
        let cumulative: Vec<usize> = self
            .stages
            .iter()
            .scan(1, |acc, s| {
                *acc *= s.patch_stride;
                Some(*acc)
            })
            .collect();
        if cumulative != [4, 8, 16, 32] {
            return Err(BackboneError::Strides(cumulative));
        }
        for s in &self.stages {
            if s.heads == 0 || s.channels % s.heads != 0 {
                return Err(AttentionError::WidthNotDivisible {
                    width: s.channels,
                    heads: s.heads,
                }
                .into());
            }
        }
        Ok(())
    }
}

/// `C_2 .. C_5` at strides 4, 8, 16, 32.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiScaleFeatures {
    pub levels: [FeatureMap; 4],
}

impl MultiScaleFeatures {
    pub const STRIDES: [usize; 4] = [4, 8, 16, 32];
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConvFfn {
    fc1: Linear,
    dw: DepthwiseConv,
    fc2: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Block {
    norm1: LayerNorm,
    sr: Option<(Conv2d, LayerNorm)>,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: ConvFfn,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Stage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Backbone {
    cfg: BackboneConfig,
    in_channels: usize,
    stages: Vec<Stage>,
}

fn norm(g: &mut Graph, ps: &ParamStore, enabled: bool, ln: &LayerNorm, x: Var) -> Var {
    if enabled {
        ln.forward(g, ps, x)
    } else {
        x
    }
}

impl Backbone {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        cfg: &BackboneConfig,
    ) -> Result<Self, BackboneError> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut c_in = in_channels;
        for (i, s) in cfg.stages.iter().enumerate() {
            let p = format!("{name}.stage{}", i + 1);
            let embed = Conv2d::new(
                ps,
                rng,
                &format!("{p}.embed"),
                c_in,
                s.channels,
                s.patch_kernel,
                s.patch_stride,
                s.patch_kernel / 2,
            );
            let embed_norm = LayerNorm::new(ps, &format!("{p}.embed_norm"), s.channels);
            let mut blocks = Vec::new();
            for b in 0..s.depth {
                let bp = format!("{p}.block{b}");
                let c = s.channels;
                let hidden = c * s.ffn_expansion;
                let sr = (s.sr_ratio > 1).then(|| {
                    (
                        Conv2d::new(ps, rng, &format!("{bp}.sr"), c, c, s.sr_ratio, s.sr_ratio, 0),
                        LayerNorm::new(ps, &format!("{bp}.sr_norm"), c),
                    )
                });
                blocks.push(Block {
                    norm1: LayerNorm::new(ps, &format!("{bp}.norm1"), c),
                    sr,
                    attn: MultiHeadAttention::new(ps, rng, &format!("{bp}.attn"), c, c, c, s.heads)?,
                    norm2: LayerNorm::new(ps, &format!("{bp}.norm2"), c),
                    ffn: ConvFfn {
                        fc1: Linear::new(ps, rng, &format!("{bp}.ffn.fc1"), c, hidden),
                        dw: DepthwiseConv::new(ps, rng, &format!("{bp}.ffn.dw"), hidden, 3),
                        fc2: Linear::new(ps, rng, &format!("{bp}.ffn.fc2"), hidden, c),
                    },
                });
            }
            let out_norm = LayerNorm::new(ps, &format!("{p}.out_norm"), s.channels);
            stages.push(Stage {
                embed,
                embed_norm,
                blocks,
                out_norm,
            });
            c_in = s.channels;
        }
        Ok(Self {
            cfg: cfg.clone(),
            in_channels,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Runs all four stages over a BEV map whose sides are multiples of 32.
    pub fn extract(&self, g: &mut Graph, ps: &ParamStore, bev: FeatureMap) -> Result<MultiScaleFeatures, BackboneError> {
        if bev.height % 32 != 0 || bev.width % 32 != 0 || bev.height == 0 || bev.width == 0 {
            return Err(BackboneError::Indivisible {
                height: bev.height,
                width: bev.width,
            });
        }
        let c = g.shape(bev.var).1;
        if c != self.in_channels {
            return Err(BackboneError::Channels {
                got: c,
                expected: self.in_channels,
            });
        }
        let on = self.cfg.norm;
        let mut x = bev;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.embed.forward(g, ps, x);
            x.var = norm(g, ps, on, &stage.embed_norm, x.var);
            for block in &stage.blocks {
                let h = norm(g, ps, on, &block.norm1, x.var);
                let kv = match &block.sr {
                    Some((conv, ln)) => {
                        let r = conv.forward(g, ps, FeatureMap::new(h, x.height, x.width));
                        norm(g, ps, on, ln, r.var)
                    }
                    None => h,
                };
                let a = block.attn.forward(g, ps, h, kv, kv)?;
                x.var = g.add(x.var, a);
                let h = norm(g, ps, on, &block.norm2, x.var);
                let f = block.ffn.fc1.forward(g, ps, h);
                let f = block.ffn.dw.forward(g, ps, FeatureMap::new(f, x.height, x.width));
                let f = g.gelu(f.var);
                let f = block.ffn.fc2.forward(g, ps, f);
                x.var = g.add(x.var, f);
            }
            x.var = norm(g, ps, on, &stage.out_norm, x.var);
            levels.push(x);
        }
        Ok(MultiScaleFeatures {
            levels: [levels[0], levels[1], levels[2], levels[3]],
        })
    }
}
