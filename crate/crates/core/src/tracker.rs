//! Frame-by-frame Siamese tracking and one-pass evaluation.
//!
//! Frame 0 is initialized with its ground-truth box. For every later frame
//! the search crop is centered on the previous result and the template is
//! rebuilt from earlier frames according to a [`TemplateStrategy`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::pick_best;
use crate::geometry::{Box3D, GeometryError, TrackScore};
use crate::model::{ModelError, SmatModel};
use crate::pillars::{Area, PointCloud};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("sequence {0} has fewer than two frames")]
    TooShort(String),
    #[error("unknown template strategy {0:?} (expected F, P, FP or AP)")]
    UnknownStrategy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no sequences to evaluate")]
    NoSequences,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub points: PointCloud,
    pub gt: Box3D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub category: String,
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn validate(&self) -> Result<(), TrackError> {
        if self.frames.len() < 2 {
            return Err(TrackError::TooShort(self.id.clone()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateStrategy {
    /// First-frame ground truth.
    First,
    /// Previous prediction.
    Previous,
    /// Union of the two.
    #[default]
    FirstAndPrevious,
    /// Union over every earlier result.
    All,
}

impl FromStr for TemplateStrategy {
    type Err = TrackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "F" => Ok(Self::First),
            "P" => Ok(Self::Previous),
            "FP" | "F&P" => Ok(Self::FirstAndPrevious),
            "AP" => Ok(Self::All),
            _ => Err(TrackError::UnknownStrategy(s.to_string())),
        }
    }
}

impl fmt::Display for TemplateStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::First => "F",
            Self::Previous => "P",
            Self::FirstAndPrevious => "FP",
            Self::All => "AP",
        })
    }
}

/// Points inside `b` enlarged by `margin`, expressed in the box frame.
pub fn crop_box(pc: &PointCloud, b: &Box3D, margin: f64) -> PointCloud {
    let big = b.enlarged(margin);
    let points = pc
        .points
        .iter()
        .filter(|p| big.contains([p[0], p[1], p[2]]))
        .map(|p| {
            let [x, y, z] = b.to_local([p[0], p[1], p[2]]);
            [x, y, z, p[3]]
        })
        .collect();
    PointCloud { points }
}

/// Template for the next frame given the clouds and results so far
/// (`boxes[0]` is the first-frame ground truth). Unions keep duplicates.
pub fn crop_template(clouds: &[&PointCloud], boxes: &[Box3D], strategy: TemplateStrategy, margin: f64) -> PointCloud {
    assert!(!boxes.is_empty() && clouds.len() >= boxes.len(), "template needs at least one result");
    let t = boxes.len();
    let crop = |i: usize| crop_box(clouds[i], &boxes[i], margin);
    if t == 1 {
        return crop(0);
    }
    match strategy {
        TemplateStrategy::First => crop(0),
        TemplateStrategy::Previous => crop(t - 1),
        TemplateStrategy::FirstAndPrevious => PointCloud::concat(&[crop(0), crop(t - 1)]),
        TemplateStrategy::All => PointCloud::concat(&(0..t).map(crop).collect::<Vec<_>>()),
    }
}

/// Translation from world to search-crop coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTransform {
    pub offset: [f64; 3],
}

impl SearchTransform {
    pub fn to_crop(&self, p: [f64; 3]) -> [f64; 3] {
        [p[0] - self.offset[0], p[1] - self.offset[1], p[2] - self.offset[2]]
    }

    pub fn point_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        [p[0] + self.offset[0], p[1] + self.offset[1], p[2] + self.offset[2]]
    }

    pub fn box_to_crop(&self, b: &Box3D) -> Box3D {
        b.with_center(self.to_crop(b.center()))
    }

    pub fn box_to_world(&self, b: &Box3D) -> Box3D {
        b.with_center(self.point_to_world(b.center()))
    }
}

/// Points of `pc` inside `area` once shifted so `center` is the origin.
/// The crop is axis aligned; the previous yaw is not applied.
pub fn crop_search(pc: &PointCloud, center: [f64; 3], area: &Area) -> (PointCloud, SearchTransform) {
    let tf = SearchTransform { offset: center };
    let points = pc
        .points
        .iter()
        .filter_map(|p| {
            let q = tf.to_crop([p[0], p[1], p[2]]);
            area.contains(q).then_some([q[0], q[1], q[2], p[3]])
        })
        .collect();
    (PointCloud { points }, tf)
}

/// What a predictor may know about the frame it is asked about.
#[derive(Clone, Copy, Debug)]
pub struct PredictContext {
    pub frame: usize,
    pub transform: SearchTransform,
    /// Box size taken from the first frame.
    pub size: [f64; 3],
}

/// Anything that turns a (search, template) pair into one box in the
/// search-crop frame, with a confidence.
pub trait Predictor {
    fn predict(&self, ctx: &PredictContext, search: &PointCloud, template: &PointCloud) -> Result<(Box3D, f64), TrackError>;
}

impl Predictor for SmatModel {
    fn predict(&self, ctx: &PredictContext, search: &PointCloud, template: &PointCloud) -> Result<(Box3D, f64), TrackError> {
        let input = self.prepare(search, template, ctx.frame as u64);
        let set = SmatModel::predict(self, &input)?;
        Ok(pick_best(&set, ctx.size).map_err(ModelError::from)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackOptions {
    pub search_area: Area,
    pub template_margin: f64,
    pub strategy: TemplateStrategy,
}

impl TrackOptions {
    pub fn new(search_area: Area) -> Self {
        Self {
            search_area,
            template_margin: 0.25,
            strategy: TemplateStrategy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub boxes: Vec<Box3D>,
    /// Confidence per frame; frame 0 has none.
    pub scores: Vec<Option<f64>>,
    /// Over frames 1..N.
    pub score: TrackScore,
}

pub fn track_sequence(seq: &Sequence, predictor: &dyn Predictor, opts: &TrackOptions) -> Result<TrackResult, TrackError> {
    seq.validate()?;
    let first = seq.frames[0].gt;
    let clouds: Vec<&PointCloud> = seq.frames.iter().map(|f| &f.points).collect();
    let mut boxes = vec![first];
    let mut scores = vec![None];
    for t in 1..seq.frames.len() {
        let template = crop_template(&clouds[..t], &boxes, opts.strategy, opts.template_margin);
        let (search, transform) = crop_search(clouds[t], boxes[t - 1].center(), &opts.search_area);
        let ctx = PredictContext {
            frame: t,
            transform,
            size: first.size(),
        };
        let (b, s) = predictor.predict(&ctx, &search, &template)?;
        boxes.push(transform.box_to_world(&b));
        scores.push(Some(s));
    }
    let truth: Vec<Box3D> = seq.frames[1..].iter().map(|f| f.gt).collect();
    let score = TrackScore::from_boxes(&boxes[1..], &truth)?;
    Ok(TrackResult { boxes, scores, score })
}

/// One line of the per-frame results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub sequence: String,
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 7],
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: String,
    pub frames: usize,
    pub success: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub categories: Vec<CategoryScore>,
    /// Frame-weighted over categories.
    pub mean_success: f64,
    pub mean_precision: f64,
    pub per_sequence: Vec<(String, f64, f64)>,
    #[serde(skip)]
    pub records: Vec<FrameRecord>,
}

impl EvalSummary {
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>7} {:>8} {:>9}\n", "category", "frames", "success", "precision");
        for c in &self.categories {
            s += &format!("{:<12} {:>7} {:>8.2} {:>9.2}\n", c.category, c.frames, c.success, c.precision);
        }
        let n: usize = self.categories.iter().map(|c| c.frames).sum();
        s += &format!("{:<12} {:>7} {:>8.2} {:>9.2}\n", "mean", n, self.mean_success, self.mean_precision);
        s
    }

    pub fn write_records(&self, out: &mut impl Write) -> Result<(), TrackError> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r).map_err(std::io::Error::from)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Tracks every sequence. Within a category all scored frames are pooled;
/// the mean weights categories by their frame counts.
pub fn evaluate(seqs: &[Sequence], predictor: &dyn Predictor, opts: &TrackOptions) -> Result<EvalSummary, TrackError> {
    if seqs.is_empty() {
        return Err(TrackError::NoSequences);
    }
    let mut pooled: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut records = Vec::new();
    let mut per_sequence = Vec::new();
    for seq in seqs {
        let r = track_sequence(seq, predictor, opts)?;
        let e = pooled.entry(&seq.category).or_default();
        e.0.extend(&r.score.ious);
        e.1.extend(&r.score.distances);
        per_sequence.push((seq.id.clone(), r.score.success, r.score.precision));
        for (i, (b, s)) in r.boxes.iter().zip(&r.scores).enumerate() {
            records.push(FrameRecord {
                sequence: seq.id.clone(),
                frame: i,
                bbox: b.to_array(),
                score: *s,
            });
        }
    }
    let mut categories = Vec::new();
    for (cat, (ious, dists)) in pooled {
        categories.push(CategoryScore {
            category: cat.to_string(),
            frames: ious.len(),
            success: crate::geometry::success_auc(&ious)?,
            precision: crate::geometry::precision_auc(&dists)?,
        });
    }
    let weighted: Vec<(f64, f64, usize)> = categories.iter().map(|c| (c.success, c.precision, c.frames)).collect();
    let (mean_success, mean_precision) = crate::geometry::weighted_mean(&weighted).unwrap_or((0.0, 0.0));
    Ok(EvalSummary {
        categories,
        mean_success,
        mean_precision,
        per_sequence,
        records,
    })
}

/// Test double that answers with the ground truth of the frame it is asked about.
pub struct OraclePredictor<'a> {
    pub seq: &'a Sequence,
}

impl Predictor for OraclePredictor<'_> {
    fn predict(&self, ctx: &PredictContext, _: &PointCloud, _: &PointCloud) -> Result<(Box3D, f64), TrackError> {
        Ok((ctx.transform.box_to_crop(&self.seq.frames[ctx.frame].gt), 1.0))
    }
}
