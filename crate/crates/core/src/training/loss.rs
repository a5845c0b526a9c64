//! Set-prediction loss: weighted two-class cross-entropy over every
//! prediction plus L1 over the matched boxes.

use serde::{Deserialize, Serialize};

use super::labels::LabelSet;
use super::matching::hungarian;
use crate::tensor::{Graph, Mat, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 2.0, l1: 5.0 }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `lambda_cls * (-p_object) + lambda_l1 * |b - b_target|_1` for every
/// (prediction, label) pair; rows are predictions.
pub fn matching_cost(scores: &[f64], boxes: &Mat, labels: &LabelSet, w: &LossWeights) -> Mat {
    let n_fg = labels.n_fg();
    Mat::from_fn(scores.len(), n_fg, |i, _| {
        let l1: f64 = boxes.row(i).iter().zip(&labels.target).map(|(a, b)| (a - b).abs()).sum();
        -w.cls * sigmoid(scores[i]) + w.l1 * l1
    })
}

/// Hungarian assignment of predictions to labels, as `(prediction, label)` pairs.
pub fn match_predictions(scores: &[f64], boxes: &Mat, labels: &LabelSet, w: &LossWeights) -> Vec<(usize, usize)> {
    hungarian(&matching_cost(scores, boxes, labels, w))
}

/// Loss pieces for one stage.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub l1: Var,
}

/// Plain-valued breakdown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
}

impl LossValues {
    pub fn read(g: &Graph, t: &LossTerms) -> Self {
        Self {
            total: g.value(t.total).data[0],
            cls: g.value(t.cls).data[0],
            l1: g.value(t.l1).data[0],
        }
    }
}

/// Mean cross-entropy over all predictions (matched ones are class 1,
/// the rest background) and mean per-match L1 to the label box.
pub fn set_loss(
    g: &mut Graph,
    scores: Var,
    boxes: Var,
    labels: &LabelSet,
    assignment: &[(usize, usize)],
    w: &LossWeights,
) -> LossTerms {
    let n = g.shape(scores).0;
    let mut targets = Mat::zeros(n, 1);
    for &(p, _) in assignment {
        targets.data[p] = 1.0;
    }
    let t = g.constant(targets);
    // -[t log s(c) + (1 - t) log(1 - s(c))] = softplus(c) - t c
    let sp = g.softplus(scores);
    let tc = g.mul(scores, t);
    let ce = g.sub(sp, tc);
    let cls = g.mean(ce);
    let l1 = if assignment.is_empty() {
        g.constant(Mat::scalar(0.0))
    } else {
        let rows: Vec<usize> = assignment.iter().map(|&(p, _)| p).collect();
        let matched = g.select_rows(boxes, &rows);
        let target = g.constant(Mat::from_fn(rows.len(), 5, |_, c| labels.target[c]));
        let diff = g.sub(matched, target);
        let a = g.abs(diff);
        let s = g.sum(a);
        g.scale(s, 1.0 / rows.len() as f64)
    };
    let wc = g.scale(cls, w.cls);
    let wl = g.scale(l1, w.l1);
    let total = g.add(wc, wl);
    LossTerms { total, cls, l1 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> LabelSet {
        LabelSet {
            target: [0.5, -0.5, 0.1, 0.0, 1.0],
            cells: (0..n).map(|i| (0, i)).collect(),
            fallback: false,
        }
    }

    #[test]
    fn uniform_logits_give_log_two() {
        let mut g = Graph::new();
        let s = g.variable(Mat::zeros(6, 1));
        let b = g.variable(Mat::zeros(6, 5));
        let l = set_loss(&mut g, s, b, &labels(2), &[(1, 0), (4, 1)], &LossWeights::default());
        assert!((g.value(l.cls).data[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_boxes_zero_l1() {
        let mut g = Graph::new();
        let s = g.variable(Mat::from_vec(2, 1, vec![20.0, -20.0]));
        let b = g.variable(Mat::from_fn(2, 5, |_, c| labels(1).target[c]));
        let l = set_loss(&mut g, s, b, &labels(1), &[(0, 0)], &LossWeights::default());
        assert_eq!(g.value(l.l1).data[0], 0.0);
        assert!(g.value(l.cls).data[0] < 1e-8);
    }

    #[test]
    fn matching_prefers_close_confident_predictions() {
        let boxes = Mat::from_vec(3, 5, vec![
            5.0, 5.0, 0.0, 0.0, 1.0, //
            0.5, -0.5, 0.1, 0.0, 1.0, //
            0.4, -0.5, 0.1, 0.0, 1.0,
        ]);
        let scores = [3.0, 0.0, 0.0];
        let m = match_predictions(&scores, &boxes, &labels(1), &LossWeights::default());
        assert_eq!(m, vec![(1, 0)]);
    }
}
