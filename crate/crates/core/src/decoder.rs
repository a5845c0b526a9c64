//! Two-stage set-prediction decoder.
//!
//! Stage one scores and regresses a box at every pixel of the fused map.
//! The `k` best pixels become target queries (their features concatenated
//! with a sinusoidal embedding of the proposal position), which cross-attend
//! over the selected features and emit the final `(box, score)` set.
//!
//! Box vectors are `(x, y, z, sin yaw, cos yaw)` in the search-crop frame.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{sine_embed, sine_frequencies, AttentionBlock, AttentionError, GridFrame};
use crate::geometry::{Box3D, GeometryError};
use crate::nn::{Linear, ParamStore};
use crate::tensor::{FeatureMap, Graph, Mat, Var};

/// Width of a box vector.
pub const BOX_DIMS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum DecoderError {
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("k = {k} exceeds the {locations} available locations")]
    KTooLarge { k: usize, locations: usize },
    #[error("prediction set is empty")]
    Empty,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub k: usize,
    pub two_stage: bool,
    pub heads: usize,
    pub depth: usize,
    pub ffn_hidden: usize,
    /// Sinusoid bands per proposal coordinate.
    pub bands: usize,
}

impl DecoderConfig {
    pub fn paper() -> Self {
        Self {
            k: 64,
            two_stage: true,
            heads: 8,
            depth: 8,
            ffn_hidden: 2048,
            bands: 8,
        }
    }

    pub fn desk() -> Self {
        Self {
            depth: 1,
            ffn_hidden: 128,
            ..Self::paper()
        }
    }

    /// Width of the proposal embedding: `3 coords x bands x (sin, cos)`.
    pub fn proj_dims(&self) -> usize {
        3 * self.bands * 2
    }
}

/// Dense per-pixel proposals.
#[derive(Clone, Copy, Debug)]
pub struct StageOneOutput {
    /// `N x 1` score logits.
    pub scores: Var,
    /// `N x 5` boxes with `(x, y)` already offset from the cell centers.
    pub boxes: Var,
}

/// The `k` selected proposals and their features.
#[derive(Clone, Debug)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// `k x 5` proposal boxes, rows of the stage-one boxes.
    pub boxes: Var,
    /// `k x D` selected features.
    pub features: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TargetQueries {
    pub queries: Var,
}

/// Final `k` pairs in graph form.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub scores: Var,
    pub boxes: Var,
}

/// Plain-valued prediction set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// `k x 5`.
    pub boxes: Mat,
    pub scores: Vec<f64>,
}

impl PredictionSet {
    pub fn from_graph(g: &Graph, p: &PredictionVars) -> Self {
        Self {
            boxes: g.value(p.boxes).clone(),
            scores: g.value(p.scores).data.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Highest-scoring prediction as a full box with the known object size.
/// Ties go to the lower index.
pub fn pick_best(ps: &PredictionSet, known_size: [f64; 3]) -> Result<(Box3D, f64), DecoderError> {
    let best = ps
        .scores
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, &s)| match acc {
            Some((_, b)) if b >= s => acc,
            _ => Some((i, s)),
        })
        .ok_or(DecoderError::Empty)?;
    let b = ps.boxes.row(best.0);
    let yaw = b[3].atan2(b[4]);
    Ok((Box3D::new([b[0], b[1], b[2]], known_size, yaw)?, best.1))
}

/// Indices of the `k` highest scores, best first; ties by smaller index.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>, DecoderError> {
    if k > scores.len() {
        return Err(DecoderError::KTooLarge {
            k,
            locations: scores.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// [`proposal_embedding`] inside the graph: `sin(xyz F + phase)`, where
/// `F` spreads each coordinate over its frequencies and the phase turns
/// every second column into a cosine.
pub fn proposal_embedding_var(g: &mut Graph, boxes: Var, bands: usize) -> Var {
    let freqs = sine_frequencies(bands, 12.8, 0.4);
    let width = 3 * bands * 2;
    let spread = Mat::from_fn(BOX_DIMS, width, |r, c| if r < 3 && c / (2 * bands) == r { freqs[(c / 2) % bands] } else { 0.0 });
    let phase = Mat::from_fn(1, width, |_, c| if c % 2 == 1 { std::f64::consts::FRAC_PI_2 } else { 0.0 });
    let spread = g.constant(spread);
    let phase = g.constant(phase);
    let args = g.matmul(boxes, spread);
    let args = g.add(args, phase);
    g.sin(args)
}

/// Sinusoidal embedding of the `(x, y, z)` of each proposal.
pub fn proposal_embedding(boxes: &Mat, bands: usize) -> Mat {
    let freqs = sine_frequencies(bands, 12.8, 0.4);
    let mut out = Mat::zeros(boxes.rows, 3 * bands * 2);
    for r in 0..boxes.rows {
        let b = boxes.row(r);
        out.row_mut(r).copy_from_slice(&sine_embed(&b[..3], &freqs));
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    cfg: DecoderConfig,
    width: usize,
    pub cls1: Linear,
    pub reg1: Linear,
    query_proj: Linear,
    /// Learned queries for one-stage mode.
    query_embed: Option<crate::nn::ParamId>,
    blocks: Vec<AttentionBlock>,
    pub cls2: Linear,
    pub reg2: Linear,
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub stage_one: Option<StageOneOutput>,
    pub selection: Option<Selection>,
    pub predictions: PredictionVars,
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, cfg: &DecoderConfig) -> Result<Self, DecoderError> {
        let query_embed = (!cfg.two_stage).then(|| {
            ps.add(
                format!("{name}.query_embed"),
                Mat::from_fn(cfg.k, width, |_, _| rng.random_range(-1.0..1.0)),
            )
        });
        let blocks = (0..cfg.depth.max(1))
            .map(|l| AttentionBlock::new(ps, rng, &format!("{name}.block{l}"), width, cfg.heads, cfg.ffn_hidden))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            width,
            cls1: Linear::new(ps, rng, &format!("{name}.cls1"), width, 1),
            reg1: Linear::new(ps, rng, &format!("{name}.reg1"), width, BOX_DIMS),
            query_proj: Linear::new(ps, rng, &format!("{name}.query_proj"), width + cfg.proj_dims(), width),
            query_embed,
            blocks,
            cls2: Linear::new(ps, rng, &format!("{name}.cls2"), width, 1),
            reg2: Linear::new(ps, rng, &format!("{name}.reg2"), width, BOX_DIMS),
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Two affine heads over every pixel. `frame` places the stride-4 grid.
    pub fn stage_one(&self, g: &mut Graph, ps: &ParamStore, u: FeatureMap, frame: &GridFrame) -> StageOneOutput {
        let scores = self.cls1.forward(g, ps, u.var);
        let raw = self.reg1.forward(g, ps, u.var);
        let offsets = Mat::from_fn(u.tokens(), BOX_DIMS, |r, c| {
            let [x, y] = frame.center(r / u.width, r % u.width);
            match c {
                0 => x,
                1 => y,
                _ => 0.0,
            }
        });
        let offsets = g.constant(offsets);
        let boxes = g.add(raw, offsets);
        StageOneOutput { scores, boxes }
    }

    /// Picks the selected rows (or the top-k when `indices` is `None`).
    pub fn select(
        &self,
        g: &mut Graph,
        s1: &StageOneOutput,
        u: FeatureMap,
        indices: Option<&[usize]>,
    ) -> Result<Selection, DecoderError> {
        let indices = match indices {
            Some(i) => i.to_vec(),
            None => select_topk(&g.value(s1.scores).data, self.cfg.k)?,
        };
        let boxes = g.select_rows(s1.boxes, &indices);
        let features = g.select_rows(u.var, &indices);
        Ok(Selection {
            indices,
            boxes,
            features,
        })
    }

    /// `T = Linear(Concat(U_sel, Proj(b_sel)))`.
    pub fn make_queries(&self, g: &mut Graph, ps: &ParamStore, sel: &Selection) -> TargetQueries {
        let emb = proposal_embedding_var(g, sel.boxes, self.cfg.bands);
        let cat = g.concat_cols(&[sel.features, emb]);
        TargetQueries {
            queries: self.query_proj.forward(g, ps, cat),
        }
    }

    /// Cross-attention refinement and the final heads. With a selection the
    /// box head regresses `(x, y, z)` residuals on the proposals.
    pub fn decode(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        queries: Var,
        memory: Var,
        proposals: Option<Var>,
    ) -> Result<PredictionVars, DecoderError> {
        let mut t = queries;
        for block in &self.blocks {
            t = block.forward(g, ps, t, None, memory, None)?;
        }
        let scores = self.cls2.forward(g, ps, t);
        let raw = self.reg2.forward(g, ps, t);
        let boxes = match proposals {
            Some(p) => {
                let keep_xyz = g.constant(Mat::from_fn(1, BOX_DIMS, |_, c| (c < 3) as u8 as f64));
                let base = g.mul(p, keep_xyz);
                g.add(raw, base)
            }
            None => raw,
        };
        Ok(PredictionVars { scores, boxes })
    }

    /// Full decoder. `fixed_selection` pins the top-k indices (used when
    /// differentiating, where the selection is held constant).
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        u: FeatureMap,
        frame: &GridFrame,
        fixed_selection: Option<&[usize]>,
    ) -> Result<DecoderOutput, DecoderError> {
        if !self.cfg.two_stage {
            let q = g.param(ps, self.query_embed.expect("one-stage queries"));
            let predictions = self.decode(g, ps, q, u.var, None)?;
            return Ok(DecoderOutput {
                stage_one: None,
                selection: None,
                predictions,
            });
        }
        let s1 = self.stage_one(g, ps, u, frame);
        let sel = self.select(g, &s1, u, fixed_selection)?;
        let tq = self.make_queries(g, ps, &sel);
        let predictions = self.decode(g, ps, tq.queries, sel.features, Some(sel.boxes))?;
        Ok(DecoderOutput {
            stage_one: Some(s1),
            selection: Some(sel),
            predictions,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
}
