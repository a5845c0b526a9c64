//! Multi-scale attention encoder: per-scale template/search similarity,
//! top-down propagation across scales, channel-wise merge at the finest
//! scale and one self-attention refinement.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{positional_encoding, AttentionBlock, AttentionError, GridFrame};
use crate::backbone::MultiScaleFeatures;
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{im2col, upsample_nearest, FeatureMap, Graph, Var, Window};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("channel mismatch: search has {search}, template has {template}")]
    ChannelMismatch { search: usize, template: usize },
    #[error("unknown similarity kind `{0}` (expected attention, cosine, euclidean or xcorr)")]
    UnknownSimilarity(String),
    #[error("unknown fusion strategy `{0}` (expected late, early, c2 or c5)")]
    UnknownFusion(String),
    #[error("encoder width {0} must be a positive multiple of 4")]
    Width(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityKind {
    Attention,
    Cosine,
    Euclidean,
    Xcorr,
}

impl FromStr for SimilarityKind {
    type Err = EncoderError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attention" => Ok(Self::Attention),
            "cosine" => Ok(Self::Cosine),
            "euclidean" => Ok(Self::Euclidean),
            "xcorr" => Ok(Self::Xcorr),
            other => Err(EncoderError::UnknownSimilarity(other.to_string())),
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Attention => "attention",
            Self::Cosine => "cosine",
            Self::Euclidean => "euclidean",
            Self::Xcorr => "xcorr",
        })
    }
}

/// Where template and search are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    /// Similarity at every scale, then propagate and merge.
    Late,
    /// Merge each branch across scales, then one similarity.
    Early,
    /// Finest scale only.
    C2,
    /// Coarsest scale only, upsampled to the finest.
    C5,
}

impl FromStr for FusionKind {
    type Err = EncoderError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "late" => Ok(Self::Late),
            "early" => Ok(Self::Early),
            "c2" => Ok(Self::C2),
            "c5" => Ok(Self::C5),
            other => Err(EncoderError::UnknownFusion(other.to_string())),
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Late => "late",
            Self::Early => "early",
            Self::C2 => "c2",
            Self::C5 => "c5",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub width: usize,
    pub heads: usize,
    /// Attention blocks per cross-attention site.
    pub depth: usize,
    pub ffn_hidden: usize,
    pub pos_enc: bool,
    pub similarity: SimilarityKind,
    pub fusion: FusionKind,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            width: 256,
            heads: 8,
            depth: 1,
            ffn_hidden: 256,
            pos_enc: true,
            similarity: SimilarityKind::Attention,
            fusion: FusionKind::Late,
        }
    }

    pub fn desk() -> Self {
        Self {
            width: 64,
            heads: 8,
            depth: 1,
            ffn_hidden: 64,
            ..Self::paper()
        }
    }

    fn scales(&self) -> Vec<usize> {
        match self.fusion {
            FusionKind::Late | FusionKind::Early => vec![0, 1, 2, 3],
            FusionKind::C2 => vec![0],
            FusionKind::C5 => vec![3],
        }
    }
}

/// One Siamese branch: its backbone features and where its grid sits in meters.
#[derive(Clone, Copy, Debug)]
pub struct BranchFeatures {
    pub feats: MultiScaleFeatures,
    pub frame: GridFrame,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    cfg: EncoderConfig,
    /// 1x1 projection to the encoder width, one per used scale, shared by both branches.
    proj: Vec<Option<Conv2d>>,
    /// Cross-attention blocks, one stack per similarity site.
    cross: Vec<Vec<AttentionBlock>>,
    lateral: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    merge: Option<Conv2d>,
    refine: AttentionBlock,
}

/// Adds a positional encoding when enabled.
fn pos(g: &mut Graph, enabled: bool, fm: FeatureMap, frame: &GridFrame, stride: usize, width: usize) -> Option<Var> {
    enabled.then(|| g.constant(positional_encoding(fm.height, fm.width, &frame.coarsened(stride), width)))
}

/// Rows scaled to unit length.
fn unit_rows(g: &mut Graph, x: Var) -> Var {
    let sq = g.mul(x, x);
    let n = g.sum_cols(sq);
    let n = g.add_scalar(n, 1e-12);
    let inv = g.powf(n, -0.5);
    g.mul(x, inv)
}

/// Per search pixel, the best cosine similarity over template pixels.
pub fn cosine_map(g: &mut Graph, search: Var, template: Var) -> Var {
    let a = unit_rows(g, search);
    let b = unit_rows(g, template);
    let s = g.matmul_t(a, false, b, true);
    g.max_cols(s)
}

/// Per search pixel, the smallest mean squared feature distance to any template pixel.
pub fn euclidean_map(g: &mut Graph, search: Var, template: Var) -> Var {
    let c = g.shape(search).1 as f64;
    let sa = g.mul(search, search);
    let na = g.sum_cols(sa);
    let sb = g.mul(template, template);
    let nb = g.sum_cols(sb);
    let nb = g.transpose(nb);
    let cross = g.matmul_t(search, false, template, true);
    let cross = g.scale(cross, -2.0);
    let d = g.add(cross, na);
    let d = g.add(d, nb);
    let neg = g.scale(d, -1.0 / c);
    let best = g.max_cols(neg);
    g.scale(best, -1.0)
}

/// Template slid over the search map ("same" output size), normalized by
/// the template's element count.
pub fn xcorr_map(g: &mut Graph, search: FeatureMap, template: FeatureMap) -> Var {
    let c = g.shape(template.var).1;
    let win = Window::same(search.height, search.width, template.height, template.width);
    let cols = im2col(g, search, win);
    let n = template.tokens() * c;
    let kernel = g.gather(template.var, n, 1, (0..n as u32).collect());
    let out = g.matmul(cols, kernel);
    g.scale(out, 1.0 / n as f64)
}

/// Non-attention similarity: the per-pixel map multiplied onto the search feature.
pub fn alt_similarity(
    g: &mut Graph,
    search: FeatureMap,
    template: FeatureMap,
    kind: SimilarityKind,
) -> Result<FeatureMap, EncoderError> {
    let (cs, ct) = (g.shape(search.var).1, g.shape(template.var).1);
    if cs != ct {
        return Err(EncoderError::ChannelMismatch { search: cs, template: ct });
    }
    let map = match kind {
        SimilarityKind::Cosine => cosine_map(g, search.var, template.var),
        SimilarityKind::Euclidean => {
            let d = euclidean_map(g, search.var, template.var);
            let nd = g.scale(d, -1.0);
            g.exp(nd)
        }
        SimilarityKind::Xcorr => xcorr_map(g, search, template),
        SimilarityKind::Attention => {
            return Err(EncoderError::UnknownSimilarity("attention is not an alternative kind".into()))
        }
    };
    Ok(FeatureMap::new(g.mul(search.var, map), search.height, search.width))
}

impl Encoder {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: [usize; 4],
        cfg: &EncoderConfig,
    ) -> Result<Self, EncoderError> {
        let d = cfg.width;
        if d == 0 || d % 4 != 0 {
            return Err(EncoderError::Width(d));
        }
        let scales = cfg.scales();
        let proj = (0..4)
            .map(|i| {
                scales
                    .contains(&i)
                    .then(|| Conv2d::new(ps, rng, &format!("{name}.proj{}", i + 2), in_channels[i], d, 1, 1, 0))
            })
            .collect();
        let sites = match cfg.fusion {
            FusionKind::Late => 4,
            _ => 1,
        };
        let mut cross = Vec::new();
        if cfg.similarity == SimilarityKind::Attention {
            for s in 0..sites {
                let stack = (0..cfg.depth.max(1))
                    .map(|l| AttentionBlock::new(ps, rng, &format!("{name}.cross{s}.{l}"), d, cfg.heads, cfg.ffn_hidden))
                    .collect::<Result<Vec<_>, _>>()?;
                cross.push(stack);
            }
        }
        let pyramid = matches!(cfg.fusion, FusionKind::Late | FusionKind::Early);
        let (mut lateral, mut smooth) = (Vec::new(), Vec::new());
        let mut merge = None;
        if pyramid {
            for i in 0..3 {
                lateral.push(Conv2d::new(ps, rng, &format!("{name}.lateral{}", i + 2), d, d, 1, 1, 0));
                smooth.push(Conv2d::new(ps, rng, &format!("{name}.smooth{}", i + 2), d, d, 3, 1, 1));
            }
            merge = Some(Conv2d::new(ps, rng, &format!("{name}.merge"), 4 * d, d, 1, 1, 0));
        }
        let refine = AttentionBlock::new(ps, rng, &format!("{name}.refine"), d, cfg.heads, cfg.ffn_hidden)?;
        Ok(Self {
            cfg: cfg.clone(),
            proj,
            cross,
            lateral,
            smooth,
            merge,
            refine,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Shared 1x1 projection of one scale.
    pub fn project(&self, g: &mut Graph, ps: &ParamStore, scale: usize, x: FeatureMap) -> FeatureMap {
        self.proj[scale]
            .as_ref()
            .expect("scale not used by this fusion strategy")
            .forward(g, ps, x)
    }

    /// Search pixels attend over template pixels (or an alternative similarity).
    #[allow(clippy::too_many_arguments)]
    pub fn similarity(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        site: usize,
        es: FeatureMap,
        et: FeatureMap,
        frames: (&GridFrame, &GridFrame),
        stride: usize,
    ) -> Result<FeatureMap, EncoderError> {
        if self.cfg.similarity != SimilarityKind::Attention {
            return alt_similarity(g, es, et, self.cfg.similarity);
        }
        let (cs, ct) = (g.shape(es.var).1, g.shape(et.var).1);
        if cs != ct {
            return Err(EncoderError::ChannelMismatch { search: cs, template: ct });
        }
        let d = self.cfg.width;
        let qpos = pos(g, self.cfg.pos_enc, es, frames.0, stride, d);
        let kpos = pos(g, self.cfg.pos_enc, et, frames.1, stride, d);
        let mut q = es.var;
        for block in &self.cross[site] {
            q = block.forward(g, ps, q, qpos, et.var, kpos)?;
        }
        Ok(FeatureMap::new(q, es.height, es.width))
    }

    /// Top-down pass: `P'_5 = P_5`, `P'_{i-1} = Conv3x3(Conv1x1(P_{i-1}) + Up2(P'_i))`.
    pub fn fpn_propagate(&self, g: &mut Graph, ps: &ParamStore, p: [FeatureMap; 4]) -> [FeatureMap; 4] {
        let mut out = p;
        for i in (0..3).rev() {
            let lat = self.lateral[i].forward(g, ps, p[i]);
            let up = upsample_nearest(g, out[i + 1], 2);
            let sum = FeatureMap::new(g.add(lat.var, up.var), lat.height, lat.width);
            out[i] = self.smooth[i].forward(g, ps, sum);
        }
        out
    }

    /// Upsample every level to the finest, concatenate, 1x1 to the encoder width.
    pub fn concat_merge(&self, g: &mut Graph, ps: &ParamStore, p: [FeatureMap; 4]) -> FeatureMap {
        let mut parts = vec![p[0].var];
        for (i, level) in p.iter().enumerate().skip(1) {
            parts.push(upsample_nearest(g, *level, 1 << i).var);
        }
        let cat = FeatureMap::new(g.concat_cols(&parts), p[0].height, p[0].width);
        self.merge.as_ref().expect("merge layer").forward(g, ps, cat)
    }

    /// Self-attention over the merged map.
    pub fn refine(&self, g: &mut Graph, ps: &ParamStore, u: FeatureMap, frame: &GridFrame) -> Result<FeatureMap, EncoderError> {
        let p = pos(g, self.cfg.pos_enc, u, frame, 4, self.cfg.width);
        let out = self.refine.forward(g, ps, u.var, p, u.var, p)?;
        Ok(FeatureMap::new(out, u.height, u.width))
    }

    /// Merge then refine: the fused map at the finest scale.
    pub fn multiscale_merge(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        p: [FeatureMap; 4],
        frame: &GridFrame,
    ) -> Result<FeatureMap, EncoderError> {
        let u = self.concat_merge(g, ps, p);
        self.refine(g, ps, u, frame)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        search: &BranchFeatures,
        template: &BranchFeatures,
    ) -> Result<FeatureMap, EncoderError> {
        let strides = MultiScaleFeatures::STRIDES;
        let frames = (&search.frame, &template.frame);
        match self.cfg.fusion {
            FusionKind::Late => {
                let mut p = search.feats.levels;
                for (i, stride) in strides.into_iter().enumerate() {
                    let es = self.project(g, ps, i, search.feats.levels[i]);
                    let et = self.project(g, ps, i, template.feats.levels[i]);
                    p[i] = self.similarity(g, ps, i, es, et, frames, stride)?;
                }
                let p = self.fpn_propagate(g, ps, p);
                self.multiscale_merge(g, ps, p, &search.frame)
            }
            FusionKind::Early => {
                let mut merged = Vec::with_capacity(2);
                for branch in [search, template] {
                    let mut e = branch.feats.levels;
                    for (i, level) in e.iter_mut().enumerate() {
                        *level = self.project(g, ps, i, branch.feats.levels[i]);
                    }
                    let e = self.fpn_propagate(g, ps, e);
                    merged.push(self.concat_merge(g, ps, e));
                }
                let s = self.similarity(g, ps, 0, merged[0], merged[1], frames, 4)?;
                self.refine(g, ps, s, &search.frame)
            }
            FusionKind::C2 => {
                let es = self.project(g, ps, 0, search.feats.levels[0]);
                let et = self.project(g, ps, 0, template.feats.levels[0]);
                let s = self.similarity(g, ps, 0, es, et, frames, 4)?;
                self.refine(g, ps, s, &search.frame)
            }
            FusionKind::C5 => {
                let es = self.project(g, ps, 3, search.feats.levels[3]);
                let et = self.project(g, ps, 3, template.feats.levels[3]);
                let s = self.similarity(g, ps, 0, es, et, frames, 32)?;
                let up = upsample_nearest(g, s, 8);
                self.refine(g, ps, up, &search.frame)
            }
        }
    }
}
