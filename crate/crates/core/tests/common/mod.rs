//! Independent oracles shared by the integration suites: naive loops,
//! brute force and Monte Carlo. None of them calls the code it checks.
#![allow(dead_code)]

use rand::Rng;
use smat::geometry::Box3D;
use smat::attention::{FeedForward, MultiHeadAttention};
use smat::nn::{Linear, ParamId, ParamStore};
use smat::tensor::{Graph, Mat, Var};

pub fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-major triple loop.
pub fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// `x W + b` by loops.
pub fn naive_linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = naive_matmul(x, w);
    for i in 0..y.rows {
        for j in 0..y.cols {
            y.set(i, j, y.get(i, j) + b.get(0, j));
        }
    }
    y
}

/// Softmax attention by explicit loops; returns output and weights.
pub fn naive_attention(q: &Mat, k: &Mat, v: &Mat) -> (Mat, Mat) {
    let d = q.cols as f64;
    let mut w = Mat::zeros(q.rows, k.rows);
    for i in 0..q.rows {
        let mut row = Vec::with_capacity(k.rows);
        for j in 0..k.rows {
            let mut s = 0.0;
            for c in 0..q.cols {
                s += q.get(i, c) * k.get(j, c);
            }
            row.push(s / d.sqrt());
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|s| (s - m).exp()).sum();
        for (j, s) in row.iter().enumerate() {
            w.set(i, j, (s - m).exp() / z);
        }
    }
    (naive_matmul(&w, v), w)
}

pub fn columns(m: &Mat, start: usize, len: usize) -> Mat {
    Mat::from_fn(m.rows, len, |r, c| m.get(r, start + c))
}

fn linear(ps: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    naive_linear(x, ps.get(l.weight), ps.get(l.bias))
}

/// Heads over column slices of the projections, concatenated, projected.
pub fn naive_mha(ps: &ParamStore, m: &MultiHeadAttention, q_in: &Mat, k_in: &Mat, v_in: &Mat) -> Mat {
    let (q, k, v) = (linear(ps, &m.q_proj, q_in), linear(ps, &m.k_proj, k_in), linear(ps, &m.v_proj, v_in));
    let d = m.width / m.heads;
    let mut cat = Mat::zeros(q.rows, m.width);
    for h in 0..m.heads {
        let (out, _) = naive_attention(&columns(&q, h * d, d), &columns(&k, h * d, d), &columns(&v, h * d, d));
        for r in 0..out.rows {
            for c in 0..d {
                cat.set(r, h * d + c, out.get(r, c));
            }
        }
    }
    linear(ps, &m.out_proj, &cat)
}

pub fn naive_ffn(ps: &ParamStore, f: &FeedForward, x: &Mat) -> Mat {
    let h = linear(ps, &f.fc1, x).map(|v| v.max(0.0));
    linear(ps, &f.fc2, &h)
}

/// Adds uniform noise of half-width `scale` to every parameter, so biases,
/// norm gains and shifts are not at their tidy initial values.
pub fn jitter_params(ps: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        for v in ps.get_mut(id).data.iter_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// `||a - n|| / (||a|| + ||n||)` over the kept coordinates.
    pub rel_error: f64,
    pub kept: usize,
    /// Coordinates redrawn because the difference window straddled a kink.
    pub kinks: usize,
}

/// Central-difference check of the analytic gradient on `coords` random
/// coordinates of the parameters and inputs (a tensor first, then an entry
/// of it). `objective` builds a scalar.
///
/// ReLU and max pooling make the objective piecewise smooth. A coordinate
/// whose forward and backward differences disagree by more than curvature
/// can explain sits on a kink, where no derivative exists; it is redrawn,
/// at most `coords` times, after which the check reports failure.
pub fn grad_check(
    params: &ParamStore,
    inputs: &[Mat],
    objective: &dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
    coords: usize,
    rng: &mut impl Rng,
) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.variable(m.clone())).collect();
    let out = objective(&mut g, params, &vars);
    assert_eq!(g.shape(out), (1, 1), "objective must be a scalar");
    let f0 = g.value(out).data[0];
    g.backward(out);
    let pgrads: std::collections::BTreeMap<ParamId, Mat> = g.param_grads().into_iter().collect();
    let value = |ps: &ParamStore, xs: &[Mat]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|m| g.variable(m.clone())).collect();
        let out = objective(&mut g, ps, &vars);
        g.value(out).data[0]
    };
    // tensors to sample from: parameters, then inputs
    let n_params = params.len();
    let tensors = n_params + inputs.len();
    let h = 1e-5;
    let max_kinks = coords;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut kinks = 0;
    while analytic.len() < coords && kinks <= max_kinks {
        let t = rng.random_range(0..tensors);
        let (a, fp, fm) = if t < n_params {
            let id = ParamId(t);
            let k = rng.random_range(0..params.get(id).len());
            let mut ps = params.clone();
            ps.get_mut(id).data[k] += h;
            let fp = value(&ps, inputs);
            ps.get_mut(id).data[k] -= 2.0 * h;
            (pgrads.get(&id).map_or(0.0, |m| m.data[k]), fp, value(&ps, inputs))
        } else {
            let i = t - n_params;
            let k = rng.random_range(0..inputs[i].len());
            let mut xs = inputs.to_vec();
            xs[i].data[k] += h;
            let fp = value(params, &xs);
            xs[i].data[k] -= 2.0 * h;
            (g.grad(vars[i]).map_or(0.0, |m| m.data[k]), fp, value(params, &xs))
        };
        let central = (fp - fm) / (2.0 * h);
        let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
        if (fwd - bwd).abs() > 1e-3 * (1.0 + central.abs()) {
            if std::env::var("GRAD_DEBUG").is_ok() {
                eprintln!("kink: a {a:+.6e} fwd {fwd:+.6e} bwd {bwd:+.6e} f0 {f0:.6e}");
            }
            kinks += 1;
            continue;
        }
        if std::env::var("GRAD_DEBUG").is_ok() {
            eprintln!("{a:+.9e} {central:+.9e} {:.2e}", (a - central).abs());
        }
        analytic.push(a);
        numeric.push(central);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let denom = norm(&analytic) + norm(&numeric);
    let rel_error = if analytic.len() < coords {
        f64::INFINITY
    } else if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    };
    GradCheck {
        rel_error,
        kept: analytic.len(),
        kinks,
    }
}

/// `sum(out * weights)`: a scalar whose gradient reaches every output entry.
pub fn project(g: &mut Graph, out: Var, weights: &Mat) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w);
    g.sum(p)
}

/// Minimum summed cost over all one-to-one assignments of
/// `min(rows, cols)` pairs, each assignment summed in row order.
pub fn brute_force_assignment(cost: &Mat) -> f64 {
    // enumerate injections from the shorter side into the longer one
    let wide = cost.rows <= cost.cols;
    let (short, long) = if wide { (cost.rows, cost.cols) } else { (cost.cols, cost.rows) };
    fn rec(i: usize, short: usize, long: usize, used: &mut [bool], picked: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == short {
            out.push(picked.clone());
            return;
        }
        for j in 0..long {
            if !used[j] {
                used[j] = true;
                picked.push(j);
                rec(i + 1, short, long, used, picked, out);
                picked.pop();
                used[j] = false;
            }
        }
    }
    let mut all = Vec::new();
    rec(0, short, long, &mut vec![false; long], &mut Vec::new(), &mut all);
    let mut best = f64::INFINITY;
    for a in all {
        let mut pairs: Vec<(usize, usize)> = a.iter().enumerate().map(|(i, &j)| if wide { (i, j) } else { (j, i) }).collect();
        pairs.sort_unstable();
        let s: f64 = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
        if s < best {
            best = s;
        }
    }
    best
}

/// Point-in-box by rotating into the box frame; `l` runs along the heading.
pub fn inside(b: &Box3D, p: [f64; 3]) -> bool {
    let c = b.center();
    let [w, l, h] = b.size();
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    let (s, co) = (-b.yaw()).sin_cos();
    let u = co * dx - s * dy;
    let v = s * dx + co * dy;
    u.abs() <= l / 2.0 && v.abs() <= w / 2.0 && (p[2] - c[2]).abs() <= h / 2.0
}

/// Monte Carlo 3D IoU from `n` uniform samples in the joint bounding box.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, n: usize, rng: &mut impl Rng) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for bx in [a, b] {
        let [w, l, h] = bx.size();
        let r = (w * w + l * l).sqrt() / 2.0;
        let c = bx.center();
        for k in 0..2 {
            lo[k] = lo[k].min(c[k] - r);
            hi[k] = hi[k].max(c[k] + r);
        }
        lo[2] = lo[2].min(c[2] - h / 2.0);
        hi[2] = hi[2].max(c[2] + h / 2.0);
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..n {
        let p = [0, 1, 2].map(|k| rng.random_range(lo[k]..hi[k]));
        let (ia, ib) = (inside(a, p), inside(b, p));
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Success and Precision by a double loop over thresholds and frames.
pub fn naive_auc(ious: &[f64], dists: &[f64]) -> (f64, f64) {
    let mut s_hits = 0usize;
    let mut p_hits = 0usize;
    for j in 0..=20 {
        for &v in ious {
            if v > j as f64 / 20.0 {
                s_hits += 1;
            }
        }
        for &d in dists {
            if d < j as f64 / 10.0 {
                p_hits += 1;
            }
        }
    }
    (
        100.0 * s_hits as f64 / (21 * ious.len()) as f64,
        100.0 * p_hits as f64 / (21 * dists.len()) as f64,
    )
}
