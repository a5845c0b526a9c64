//! Training: label augmentation, bipartite matching, the set loss, AdamW
//! and the seeded training loop.

pub mod labels;
pub mod loss;
pub mod matching;
pub mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Box3D;
use crate::model::{ModelError, PairInput, SmatModel};
use crate::pillars::PointCloud;
use crate::tensor::{Graph, Mat, Var};
use crate::tracker::{crop_search, crop_template, Sequence, TemplateStrategy};

pub use labels::{augment_labels, box_target, LabelSet};
pub use loss::{match_predictions, matching_cost, set_loss, LossTerms, LossValues, LossWeights};
pub use matching::{assignment_cost, hungarian};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: total {total}, cls {cls}, l1 {l1}")]
    NonFinite { step: usize, total: f64, cls: f64, l1: f64 },
    #[error("non-finite gradient at step {step} in {param}")]
    NonFiniteGrad { step: usize, param: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no training sequences with at least two frames")]
    NoData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub loss: LossWeights,
    /// Stage-one targets are the foreground pixels themselves instead of a
    /// Hungarian match over all pixels.
    pub stage_one_dense: bool,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Std (meters) of the offset added to the previous box center when
    /// placing the search crop.
    pub search_jitter: f64,
    pub template_margin: f64,
    pub template_strategy: TemplateStrategy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            optim: AdamWConfig::default(),
            loss: LossWeights::default(),
            stage_one_dense: false,
            clip_norm: 0.0,
            search_jitter: 0.3,
            template_margin: 0.25,
            template_strategy: TemplateStrategy::FirstAndPrevious,
            seed: 0,
        }
    }
}

/// One training pair with its labels, everything in the search-crop frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: PairInput,
    pub labels: LabelSet,
    pub gt: Box3D,
}

/// Pair for frame `t >= 1` of `seq`: the search crop is centered on the
/// previous ground-truth center plus jitter, the template is built from
/// ground-truth boxes of earlier frames.
pub fn build_sample(model: &SmatModel, seq: &Sequence, t: usize, cfg: &TrainConfig, rng: &mut impl Rng) -> Sample {
    assert!(t >= 1 && t < seq.frames.len(), "frame {t} has no predecessor");
    let clouds: Vec<&PointCloud> = seq.frames[..t].iter().map(|f| &f.points).collect();
    let boxes: Vec<Box3D> = seq.frames[..t].iter().map(|f| f.gt).collect();
    let template = crop_template(&clouds, &boxes, cfg.template_strategy, cfg.template_margin);
    let jitter = Normal::new(0.0, cfg.search_jitter).expect("jitter std is nonnegative");
    let [x, y, z] = boxes[t - 1].center();
    let center = [x + jitter.sample(rng), y + jitter.sample(rng), z];
    let (search, tf) = crop_search(&seq.frames[t].points, center, &model.cfg.search.area);
    let gt = tf.box_to_crop(&seq.frames[t].gt);
    let labels = augment_labels(&search, &gt, &model.cfg.search, 4);
    let input = model.prepare(&search, &template, rng.random());
    Sample { input, labels, gt }
}

/// Everything a loss evaluation decided from values: the top-k selection
/// and both assignments. Reusing a plan makes the loss a smooth function
/// of the parameters, which is what finite differences need.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossPlan {
    pub selection: Option<Vec<usize>>,
    pub stage_one: Vec<(usize, usize)>,
    pub stage_two: Vec<(usize, usize)>,
}

/// Foreground pixels as their own stage-one predictions.
fn dense_assignment(labels: &LabelSet, grid_width: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = labels.cells.iter().enumerate().map(|(i, &(r, c))| (r * grid_width + c, i)).collect();
    pairs.sort_unstable();
    pairs
}

fn scores_of(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).data.clone()
}

/// Summed stage-one and stage-two losses of one sample. With `plan` the
/// selection and assignments are taken from it; otherwise they are
/// computed and returned.
pub fn sample_loss(
    g: &mut Graph,
    model: &SmatModel,
    sample: &Sample,
    cfg: &TrainConfig,
    plan: Option<&LossPlan>,
) -> Result<(Var, LossValues, LossPlan), ModelError> {
    let out = model.forward(g, &sample.input, plan.and_then(|p| p.selection.as_deref()))?;
    let w = &cfg.loss;
    let mut used = LossPlan {
        selection: out.selection.as_ref().map(|s| s.indices.clone()),
        ..Default::default()
    };
    let mut parts = Vec::new();
    if let Some(s1) = out.stage_one {
        used.stage_one = match plan {
            Some(p) => p.stage_one.clone(),
            None if cfg.stage_one_dense => dense_assignment(&sample.labels, model.cfg.search.grid().1 / 4),
            None => match_predictions(&scores_of(g, s1.scores), g.value(s1.boxes), &sample.labels, w),
        };
        parts.push(set_loss(g, s1.scores, s1.boxes, &sample.labels, &used.stage_one, w));
    }
    let p = out.predictions;
    used.stage_two = match plan {
        Some(pl) => pl.stage_two.clone(),
        None => match_predictions(&scores_of(g, p.scores), g.value(p.boxes), &sample.labels, w),
    };
    parts.push(set_loss(g, p.scores, p.boxes, &sample.labels, &used.stage_two, w));
    let mut values = LossValues::default();
    for t in &parts {
        let v = LossValues::read(g, t);
        values.total += v.total;
        values.cls += v.cls;
        values.l1 += v.l1;
    }
    let mut total = parts[0].total;
    for t in &parts[1..] {
        total = g.add(total, t.total);
    }
    Ok((total, values, used))
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub cls: f64,
    pub l1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SmatModel,
    pub opt: AdamW,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: SmatModel, cfg: TrainConfig) -> Self {
        let opt = AdamW::new(cfg.optim.clone(), &model.params);
        Self { model, opt, cfg }
    }

    /// Resumes with a saved optimizer state.
    pub fn with_optimizer(model: SmatModel, cfg: TrainConfig, opt: AdamW) -> Self {
        Self { model, opt, cfg }
    }

    /// The batch for a step depends only on the seed and the step number,
    /// so a resumed run draws the same samples as an uninterrupted one.
    pub fn batch(&self, data: &[Sequence], step: usize) -> Result<Vec<Sample>, TrainError> {
        let usable: Vec<&Sequence> = data.iter().filter(|s| s.frames.len() >= 2).collect();
        if usable.is_empty() {
            return Err(TrainError::NoData);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ step as u64);
        Ok((0..self.cfg.batch_size.max(1))
            .map(|_| {
                let seq = usable[rng.random_range(0..usable.len())];
                let t = rng.random_range(1..seq.frames.len());
                build_sample(&self.model, seq, t, &self.cfg, &mut rng)
            })
            .collect())
    }

    /// Mean loss over the batch and its gradient, without updating.
    pub fn loss_and_grads(&self, batch: &[Sample]) -> Result<(LossValues, Vec<(crate::nn::ParamId, Mat)>), TrainError> {
        let n = batch.len() as f64;
        let mut values = LossValues::default();
        let mut grads: Vec<(crate::nn::ParamId, Mat)> = Vec::new();
        for sample in batch {
            let mut g = Graph::new();
            let (total, v, _) = sample_loss(&mut g, &self.model, sample, &self.cfg, None)?;
            g.backward(total);
            values.total += v.total / n;
            values.cls += v.cls / n;
            values.l1 += v.l1 / n;
            let pg = g.param_grads();
            if grads.is_empty() {
                grads = pg;
                for (_, m) in grads.iter_mut() {
                    m.data.iter_mut().for_each(|x| *x /= n);
                }
            } else {
                for ((ia, a), (ib, b)) in grads.iter_mut().zip(pg) {
                    debug_assert_eq!(*ia, ib);
                    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y / n);
                }
            }
        }
        Ok((values, grads))
    }

    pub fn step(&mut self, data: &[Sequence]) -> Result<MetricRecord, TrainError> {
        let step = self.opt.step;
        let batch = self.batch(data, step)?;
        let (v, mut grads) = self.loss_and_grads(&batch)?;
        if !(v.total.is_finite() && v.cls.is_finite() && v.l1.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                total: v.total,
                cls: v.cls,
                l1: v.l1,
            });
        }
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(TrainError::NonFiniteGrad {
                step,
                param: self.model.params.name(*id).to_string(),
            });
        }
        if self.cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, self.cfg.clip_norm);
        }
        let lr = self.opt.lr();
        self.opt.update(&mut self.model.params, &grads);
        Ok(MetricRecord {
            step,
            loss: v.total,
            cls: v.cls,
            l1: v.l1,
            lr,
        })
    }

    /// Runs until the optimizer has taken `until` steps in total.
    pub fn run(&mut self, data: &[Sequence], until: usize, mut on_record: impl FnMut(&MetricRecord)) -> Result<Vec<MetricRecord>, TrainError> {
        let mut out = Vec::new();
        while self.opt.step < until {
            let r = self.step(data)?;
            on_record(&r);
            out.push(r);
        }
        Ok(out)
    }
}
