//! AdamW with a step-milestone learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps after which the rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            milestones: Vec::new(),
            gamma: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: usize,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| Mat::zeros(params.get(id).rows, params.get(id).cols)).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr_at(self.step)
    }

    /// One update. `grads` holds every parameter's gradient; parameters
    /// without an entry are treated as having a zero gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[(ParamId, Mat)]) {
        let lr = self.lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut gi = grads.iter().peekable();
        for id in params.ids().collect::<Vec<_>>() {
            let grad = match gi.peek() {
                Some((gid, g)) if *gid == id => {
                    gi.next();
                    Some(g)
                }
                _ => None,
            };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            for k in 0..p.data.len() {
                let gk = grad.map_or(0.0, |g| g.data[k]);
                m.data[k] = b1 * m.data[k] + (1.0 - b1) * gk;
                v.data[k] = b2 * v.data[k] + (1.0 - b2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                p.data[k] -= lr * (mh / (vh.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p.data[k]);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [(ParamId, Mat)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Mat::row_vector(&[1.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        opt.update(&mut ps, &[(id, Mat::zeros(1, 2))]);
        let f = 1.0 - 1e-4 * 0.05;
        assert_eq!(ps.get(id).data, vec![f, -2.0 * f]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Mat::row_vector(&[0.0]));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &ps);
        opt.update(&mut ps, &[(id, Mat::scalar(3.0))]);
        assert!((ps.get(id).data[0] + 1e-4).abs() < 1e-10);
    }

    #[test]
    fn milestones() {
        let cfg = AdamWConfig {
            milestones: vec![63, 69],
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert!((cfg.lr_at(63) - 1e-5).abs() < 1e-18);
        assert!((cfg.lr_at(70) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn clipping() {
        let mut g = vec![(ParamId(0), Mat::row_vector(&[3.0, 4.0]))];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data[0] - 0.6).abs() < 1e-15);
    }
}
