//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p smat --test acceptance`.

mod common;

use std::fmt::Display;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use smat::attention::{attention_with_weights, FeedForward, MultiHeadAttention};
use smat::backbone::{Backbone, BackboneConfig, MultiScaleFeatures};
use smat::config::RunConfig;
use smat::decoder::{Decoder, DecoderConfig};
use smat::geometry::{center_distance, iou3d, precision_auc, success_auc, Box3D};
use smat::mae::{BranchFeatures, Encoder, EncoderConfig};
use smat::model::{grid_frame, ModelConfig, SmatModel};
use smat::nn::ParamStore;
use smat::pillars::{pillarize, Area, PillarConfig, PillarFeatureNet, PointCloud};
use smat::run;
use smat::synthdata::{generate_dataset, sparsity_sweep, ScenarioConfig};
use smat::tensor::{FeatureMap, Graph, Mat, Var};
use smat::tracker::{evaluate, track_sequence};
use smat::training::{augment_labels, build_sample, hungarian, assignment_cost, sample_loss, TrainConfig};

type Check = Result<String, String>;

fn err(e: impl Display) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1

fn attention_correctness() -> Check {
    let mut r = rng(1);
    let mut worst_sum = 0.0f64;
    let mut worst = 0.0f64;
    for case in 0..200 {
        // plain attention
        let (nq, nk, d) = (r.random_range(1..9), r.random_range(1..9), r.random_range(1..9));
        let dv = r.random_range(1..6);
        let (q, k, v) = (rand_mat(&mut r, nq, d), rand_mat(&mut r, nk, d), rand_mat(&mut r, nk, dv));
        let mut g = Graph::new();
        let (vq, vk, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let (out, w) = attention_with_weights(&mut g, vq, vk, vv).map_err(err)?;
        for row in 0..nq {
            let s: f64 = g.value(w).row(row).iter().sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
        let (want, want_w) = naive_attention(&q, &k, &v);
        worst = worst.max(max_abs_diff(g.value(out), &want)).max(max_abs_diff(g.value(w), &want_w));

        // multi-head attention with nonzero biases
        let mut ps = ParamStore::new();
        let heads = r.random_range(1..5);
        let width = heads * r.random_range(1..5);
        let (q_in, kv_in) = (r.random_range(1..7), r.random_range(1..7));
        let mha = MultiHeadAttention::new(&mut ps, &mut r, "m", q_in, kv_in, width, heads).map_err(err)?;
        let hidden = r.random_range(1..9);
        let ffn = FeedForward::new(&mut ps, &mut r, "f", width, hidden);
        jitter_params(&mut ps, &mut r, 0.5);
        let (xq, xk, xv) = (rand_mat(&mut r, nq, q_in), rand_mat(&mut r, nk, kv_in), rand_mat(&mut r, nk, kv_in));
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(xq.clone()), g.constant(xk.clone()), g.constant(xv.clone()));
        let out = mha.forward(&mut g, &ps, a, b, c).map_err(err)?;
        worst = worst.max(max_abs_diff(g.value(out), &naive_mha(&ps, &mha, &xq, &xk, &xv)));

        let x = rand_mat(&mut r, nq, width);
        let vx = g.constant(x.clone());
        let out = ffn.forward(&mut g, &ps, vx);
        worst = worst.max(max_abs_diff(g.value(out), &naive_ffn(&ps, &ffn, &x)));
        if worst > 1e-12 || worst_sum > 1e-6 {
            return Err(format!("case {case}: max |diff| {worst:.2e}, row-sum error {worst_sum:.2e}"));
        }
    }
    Ok(format!("200 cases, max |diff| {worst:.2e}, max row-sum error {worst_sum:.2e}"))
}

// ---------------------------------------------------------------- 2

const GRAD_INSTANCES: usize = 20;
const GRAD_TOL: f64 = 1e-3;

/// Runs `instance` for every seed and keeps the worst relative error.
fn grad_suite(name: &str, coords: usize, instance: impl Fn(&mut ChaCha8Rng, usize) -> Result<GradCheck, String>) -> Result<String, String> {
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for i in 0..GRAD_INSTANCES {
        let mut r = rng(1000 + i as u64);
        let c = instance(&mut r, coords)?;
        if !(c.rel_error < GRAD_TOL) {
            return Err(format!(
                "{name} instance {i}: relative error {:.2e} ({} coordinates, {} on kinks)",
                c.rel_error, c.kept, c.kinks
            ));
        }
        worst = worst.max(c.rel_error);
        kinks += c.kinks;
    }
    Ok(format!("{name} {worst:.1e} ({kinks} kink redraws)"))
}

fn weights_like(r: &mut ChaCha8Rng, g: &Graph, v: Var) -> Mat {
    let (rows, cols) = g.shape(v);
    rand_mat(r, rows, cols)
}

fn pillar_instance(r: &mut ChaCha8Rng, coords: usize) -> Result<GradCheck, String> {
    let cfg = PillarConfig {
        area: Area::from_array([-0.8, -0.8, -1.0, 0.8, 0.8, 1.0]),
        pillar_size: [0.1, 0.1, 2.0],
        max_points_per_pillar: 4,
        max_pillars: 64,
    };
    let pts = (0..60).map(|_| [r.random_range(-0.8..0.8), r.random_range(-0.8..0.8), r.random_range(-1.0..1.0), r.random_range(0.0..1.0)]).collect();
    let pt = pillarize(&PointCloud::new(pts).map_err(err)?, &cfg, r.random());
    let mut ps = ParamStore::new();
    let net = PillarFeatureNet::new(&mut ps, r, "pillar", 8);
    jitter_params(&mut ps, r, 0.2);
    let w = rand_mat(r, 16 * 16, 8);
    let obj = |g: &mut Graph, ps: &ParamStore, _: &[Var]| {
        let fm = net.forward(g, ps, &pt);
        project(g, fm.var, &w)
    };
    Ok(grad_check(&ps, &[], &obj, coords, r))
}

fn backbone_instance(r: &mut ChaCha8Rng, coords: usize) -> Result<GradCheck, String> {
    let mut ps = ParamStore::new();
    let bb = Backbone::new(&mut ps, r, "backbone", 16, &BackboneConfig::desk()).map_err(err)?;
    jitter_params(&mut ps, r, 0.05);
    let bev = rand_mat(r, 32 * 32, 16);
    let ch = BackboneConfig::desk().channels();
    let ws: Vec<Mat> = (0..4).map(|i| rand_mat(r, (32 >> (i + 2)) * (32 >> (i + 2)), ch[i])).collect();
    let obj = |g: &mut Graph, ps: &ParamStore, x: &[Var]| {
        let f = bb.extract(g, ps, FeatureMap::new(x[0], 32, 32)).expect("32 x 32 input");
        let parts: Vec<Var> = f.levels.iter().zip(&ws).map(|(l, w)| project(g, l.var, w)).collect();
        let all = g.concat_cols(&parts);
        g.sum(all)
    };
    Ok(grad_check(&ps, &[bev], &obj, coords, r))
}

fn encoder_instance(r: &mut ChaCha8Rng, coords: usize) -> Result<GradCheck, String> {
    let mc = ModelConfig::desk();
    let ch = mc.backbone.channels();
    let mut ps = ParamStore::new();
    let enc = Encoder::new(&mut ps, r, "encoder", ch, &EncoderConfig::desk()).map_err(err)?;
    jitter_params(&mut ps, r, 0.05);
    // both branches on the 32 x 32 template grid (levels 8, 4, 2, 1) to keep
    // the ReLU count, and with it the kink rate, down
    let (sh, th) = (mc.template().grid().0, mc.template().grid().0);
    let mut inputs = Vec::new();
    for side in [sh, th] {
        for (i, stride) in MultiScaleFeatures::STRIDES.into_iter().enumerate() {
            let n = side / stride;
            inputs.push(rand_mat(r, n * n, ch[i]));
        }
    }
    let (sf, tf) = (grid_frame(&mc.template()), grid_frame(&mc.template()));
    let w = rand_mat(r, (sh / 4) * (sh / 4), EncoderConfig::desk().width);
    let obj = |g: &mut Graph, ps: &ParamStore, x: &[Var]| {
        let branch = |off: usize, side: usize, frame| BranchFeatures {
            feats: MultiScaleFeatures {
                levels: std::array::from_fn(|i| {
                    let n = side / MultiScaleFeatures::STRIDES[i];
                    FeatureMap::new(x[off + i], n, n)
                }),
            },
            frame,
        };
        let u = enc.forward(g, ps, &branch(0, sh, sf), &branch(4, th, tf)).expect("encoder shapes");
        project(g, u.var, &w)
    };
    Ok(grad_check(&ps, &inputs, &obj, coords, r))
}

fn decoder_instance(r: &mut ChaCha8Rng, coords: usize) -> Result<GradCheck, String> {
    let mc = ModelConfig::desk();
    let width = mc.encoder.width;
    let mut ps = ParamStore::new();
    let dec = Decoder::new(&mut ps, r, "decoder", width, &DecoderConfig::desk()).map_err(err)?;
    jitter_params(&mut ps, r, 0.05);
    let side = mc.search.grid().0 / 4;
    let frame = grid_frame(&mc.search).coarsened(4);
    let u = rand_mat(r, side * side, width);
    // selection is a discrete choice; pin it to the unperturbed top-k
    let mut g = Graph::new();
    let v = g.constant(u.clone());
    let out = dec.forward(&mut g, &ps, FeatureMap::new(v, side, side), &frame, None).map_err(err)?;
    let idx = out.selection.expect("two-stage").indices;
    let s1 = out.stage_one.expect("two-stage");
    let ws = [
        weights_like(r, &g, s1.scores),
        weights_like(r, &g, s1.boxes),
        weights_like(r, &g, out.predictions.scores),
        weights_like(r, &g, out.predictions.boxes),
    ];
    let obj = |g: &mut Graph, ps: &ParamStore, x: &[Var]| {
        let o = dec.forward(g, ps, FeatureMap::new(x[0], side, side), &frame, Some(&idx)).expect("decoder");
        let s1 = o.stage_one.expect("two-stage");
        let vars = [s1.scores, s1.boxes, o.predictions.scores, o.predictions.boxes];
        let parts: Vec<Var> = vars.iter().zip(&ws).map(|(&v, w)| project(g, v, w)).collect();
        let all = g.concat_cols(&parts);
        g.sum(all)
    };
    Ok(grad_check(&ps, &[u], &obj, coords, r))
}

fn loss_instance(r: &mut ChaCha8Rng, coords: usize) -> Result<GradCheck, String> {
    let mut model = SmatModel::new(&ModelConfig::desk(), r.random()).map_err(err)?;
    jitter_params(&mut model.params, r, 0.02);
    let data = generate_dataset(&ScenarioConfig::default(), 1, r.random()).map_err(err)?;
    let cfg = TrainConfig {
        stage_one_dense: r.random(),
        ..TrainConfig::default()
    };
    let t = r.random_range(1..data[0].frames.len());
    let sample = build_sample(&model, &data[0], t, &cfg, r);
    let mut g = Graph::new();
    let (_, _, plan) = sample_loss(&mut g, &model, &sample, &cfg, None).map_err(err)?;
    let obj = |g: &mut Graph, ps: &ParamStore, _: &[Var]| {
        let mut m = model.clone();
        m.params = ps.clone();
        sample_loss(g, &m, &sample, &cfg, Some(&plan)).expect("loss").0
    };
    Ok(grad_check(&model.params, &[], &obj, coords, r))
}

fn gradient_suite() -> Check {
    let parts = [
        grad_suite("pillar_feature_net", 30, pillar_instance)?,
        grad_suite("backbone", 30, backbone_instance)?,
        grad_suite("encoder", 30, encoder_instance)?,
        grad_suite("decoder", 30, decoder_instance)?,
        grad_suite("loss", 24, loss_instance)?,
    ];
    Ok(format!("{GRAD_INSTANCES} instances each, worst relative error: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 3

fn hungarian_exact() -> Check {
    let mut r = rng(3);
    for case in 0..200 {
        let (n, m) = (r.random_range(1..8), r.random_range(1..8));
        let cost = if case % 2 == 0 {
            Mat::from_fn(n, m, |_, _| r.random_range(0..6) as f64)
        } else {
            Mat::from_fn(n, m, |_, _| r.random_range(-10.0..10.0))
        };
        let pairs = hungarian(&cost);
        let got = assignment_cost(&cost, &pairs);
        let want = brute_force_assignment(&cost);
        let one_to_one = pairs.len() == n.min(m)
            && pairs.iter().map(|p| p.0).collect::<std::collections::BTreeSet<_>>().len() == pairs.len()
            && pairs.iter().map(|p| p.1).collect::<std::collections::BTreeSet<_>>().len() == pairs.len();
        if got != want || !one_to_one {
            return Err(format!("case {case} ({n}x{m}): hungarian {got} vs brute force {want}"));
        }
    }
    Ok("200 matrices up to 7x7, exact".into())
}

// ---------------------------------------------------------------- 4

fn random_box(r: &mut ChaCha8Rng, near: [f64; 3]) -> Box3D {
    let c = [near[0] + r.random_range(-1.5..1.5), near[1] + r.random_range(-1.5..1.5), near[2] + r.random_range(-0.5..0.5)];
    let s = [r.random_range(0.5..3.0), r.random_range(0.5..5.0), r.random_range(0.5..2.0)];
    Box3D::new(c, s, r.random_range(-3.2..3.2)).expect("valid box")
}

fn iou_monte_carlo() -> Check {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let a = random_box(&mut r, [0.0; 3]);
        let b = random_box(&mut r, a.center());
        let d = (iou3d(&a, &b) - monte_carlo_iou(&a, &b, 1_000_000, &mut r)).abs();
        if d > 0.01 {
            return Err(format!("pair {case}: |iou - monte carlo| = {d:.4}"));
        }
        worst = worst.max(d);
    }
    let a = Box3D::new([1.0, -2.0, 0.3], [1.8, 4.0, 1.5], 0.7).unwrap();
    let far = a.with_center([30.0, 30.0, 0.3]);
    let (same, apart) = (iou3d(&a, &a), iou3d(&a, &far));
    if same != 1.0 || apart != 0.0 {
        return Err(format!("identical {same}, disjoint {apart}"));
    }
    Ok(format!("100 pairs, max |diff| {worst:.4}; identical 1.0, disjoint 0.0"))
}

// ---------------------------------------------------------------- 5

fn pillar_partition() -> Check {
    let car = PillarConfig::car();
    if car.grid() != (64, 64) || car.pillar_size != [0.1, 0.1, 4.0] || car.area.min[..2] != [-3.2, -3.2] || car.area.max[..2] != [3.2, 3.2] {
        return Err(format!("car preset grid {:?}", car.grid()));
    }
    let cfg = PillarConfig {
        max_points_per_pillar: 512,
        max_pillars: 64 * 64,
        ..car
    };
    let (min, size) = (cfg.area.min, cfg.pillar_size);
    let mut r = rng(5);
    for case in 0..1000 {
        let n = r.random_range(0..200);
        let mut pts: Vec<[f64; 4]> = (0..n)
            .map(|_| [r.random_range(-4.0..4.0), r.random_range(-4.0..4.0), r.random_range(-3.5..1.5), r.random_range(0.0..1.0)])
            .collect();
        // points on grid lines and on the min/max faces
        for _ in 0..10 {
            let gx = min[0] + r.random_range(0..=64) as f64 * size[0];
            let gy = min[1] + r.random_range(0..=64) as f64 * size[1];
            let z = [-3.0, 1.0, 0.0][r.random_range(0..3)];
            pts.push([gx, gy, z, 0.5]);
        }
        let pc = PointCloud::new(pts.clone()).map_err(err)?;
        let pt = pillarize(&pc, &cfg, case);
        let in_area: Vec<&[f64; 4]> = pts
            .iter()
            .filter(|p| (0..3).all(|k| p[k] >= cfg.area.min[k] && p[k] < cfg.area.max[k]))
            .collect();
        // every in-area point exactly once, in a pillar whose cell holds it
        let mut seen = vec![0usize; pts.len()];
        let mut cells = std::collections::BTreeSet::new();
        for (p, &(row, col)) in pt.coords.iter().enumerate() {
            if !cells.insert((row, col)) {
                return Err(format!("cloud {case}: cell ({row}, {col}) used twice"));
            }
            for slot in 0..pt.max_points {
                let idx = p * pt.max_points + slot;
                if !pt.mask[idx] {
                    continue;
                }
                let f = pt.features.row(idx);
                let Some(i) = pts.iter().enumerate().position(|(i, q)| seen[i] == 0 && q[..] == f[..4]) else {
                    return Err(format!("cloud {case}: pillar point {:?} is not an unused input point", &f[..4]));
                };
                seen[i] += 1;
                let tol = 1e-9;
                let ok_x = f[0] >= min[0] + col as f64 * size[0] - tol && f[0] <= min[0] + (col + 1) as f64 * size[0] + tol;
                let ok_y = f[1] >= min[1] + row as f64 * size[1] - tol && f[1] <= min[1] + (row + 1) as f64 * size[1] + tol;
                if !(ok_x && ok_y) {
                    return Err(format!("cloud {case}: point {:?} outside cell ({row}, {col})", &f[..2]));
                }
            }
        }
        let kept: usize = seen.iter().sum();
        if kept != in_area.len() {
            return Err(format!("cloud {case}: {kept} points kept, {} in area", in_area.len()));
        }
    }
    Ok("1000 clouds partition; car grid 64x64".into())
}

// ---------------------------------------------------------------- 6

/// Distinct stride-`s` cells, found by scanning every cell's bounds.
fn brute_occupancy(pts: &[[f64; 4]], gt: &Box3D, cfg: &PillarConfig, stride: usize) -> Vec<(usize, usize)> {
    let (h, w) = cfg.grid();
    let (gh, gw) = (h / stride, w / stride);
    let cw = [cfg.pillar_size[0] * stride as f64, cfg.pillar_size[1] * stride as f64];
    let mut out = Vec::new();
    for row in 0..gh {
        for col in 0..gw {
            let x0 = cfg.area.min[0] + col as f64 * cw[0];
            let y0 = cfg.area.min[1] + row as f64 * cw[1];
            let hit = pts.iter().any(|p| {
                let q = [p[0], p[1], p[2]];
                (0..3).all(|k| q[k] >= cfg.area.min[k] && q[k] < cfg.area.max[k])
                    && inside(gt, q)
                    && q[0] >= x0
                    && q[0] < x0 + cw[0]
                    && q[1] >= y0
                    && q[1] < y0 + cw[1]
            });
            if hit {
                out.push((row, col));
            }
        }
    }
    out
}

fn label_occupancy() -> Check {
    let cfg = PillarConfig::car();
    let mut r = rng(6);
    let mut total = 0;
    for case in 0..1000 {
        let gt = Box3D::new(
            [r.random_range(-2.5..2.5), r.random_range(-2.5..2.5), r.random_range(-1.5..0.0)],
            [r.random_range(0.3..2.0), r.random_range(0.3..4.5), r.random_range(0.5..2.0)],
            r.random_range(-3.2..3.2),
        )
        .map_err(err)?;
        let n = r.random_range(0..120);
        let pts: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                let [w, l, h] = gt.size();
                let local = [r.random_range(-0.7..0.7) * l, r.random_range(-0.7..0.7) * w, r.random_range(-0.7..0.7) * h];
                let p = gt.to_world(local);
                [p[0], p[1], p[2], 0.0]
            })
            .collect();
        let labels = augment_labels(&PointCloud::new(pts.clone()).map_err(err)?, &gt, &cfg, 4);
        let want = brute_occupancy(&pts, &gt, &cfg, 4);
        if want.is_empty() {
            if !(labels.fallback && labels.n_fg() == 1) {
                return Err(format!("case {case}: empty box gave N_fg {}", labels.n_fg()));
            }
        } else if labels.cells != want {
            return Err(format!("case {case}: N_fg {} vs brute force {}", labels.n_fg(), want.len()));
        }
        total += want.len();
    }
    let gt = Box3D::new([0.5, -0.5, -1.0], [1.8, 4.0, 1.5], 0.4).unwrap();
    let empty = augment_labels(&PointCloud::new(vec![[3.0, 3.0, 0.5, 0.0]]).unwrap(), &gt, &cfg, 4);
    if !(empty.fallback && empty.n_fg() == 1) {
        return Err(format!("empty-box fallback gave N_fg {}", empty.n_fg()));
    }
    Ok(format!("1000 pairs ({total} foreground cells) match; empty box N_fg = 1"))
}

// ---------------------------------------------------------------- 7

fn metric_auc() -> Check {
    let mut r = rng(7);
    for case in 0..500 {
        let n = r.random_range(1..40);
        // mix of random values and values sitting exactly on thresholds
        let ious: Vec<f64> = (0..n)
            .map(|_| if r.random_bool(0.3) { r.random_range(0..=20) as f64 / 20.0 } else { r.random_range(0.0..1.0) })
            .collect();
        let dists: Vec<f64> = (0..n)
            .map(|_| if r.random_bool(0.3) { r.random_range(0..=20) as f64 / 10.0 } else { r.random_range(0.0..2.5) })
            .collect();
        let (s, p) = naive_auc(&ious, &dists);
        let (gs, gp) = (success_auc(&ious).map_err(err)?, precision_auc(&dists).map_err(err)?);
        if gs != s || gp != p {
            return Err(format!("case {case}: success {gs} vs {s}, precision {gp} vs {p}"));
        }
    }
    let ceiling = 100.0 * 20.0 / 21.0;
    let (s, p) = (success_auc(&[1.0; 7]).map_err(err)?, precision_auc(&[0.0; 7]).map_err(err)?);
    if s != ceiling || p != ceiling {
        return Err(format!("ceilings {s} / {p}, expected {ceiling}"));
    }
    Ok(format!("500 lists exact; ceilings {ceiling:.4}"))
}

// ---------------------------------------------------------------- 8, 9

fn overfit(trained: &mut Option<SmatModel>) -> Check {
    let cfg = RunConfig::default();
    let data = run::training_data(&cfg).map_err(err)?;
    let frames: usize = data.iter().map(|s| s.frames.len()).sum();
    let steps: usize = cfg.parse("train.steps").map_err(err)?;
    let trainer = run::train_model(&cfg, 0, &data, |rec| {
        if rec.step % 250 == 0 || rec.step == steps {
            eprintln!("  step {:>5} loss {:.4}", rec.step, rec.loss);
        }
    })
    .map_err(err)?;
    let summary = evaluate(&data, &trainer.model, &cfg.track().map_err(err)?).map_err(err)?;
    let mut dist = Vec::new();
    for rec in summary.records.iter().filter(|r| r.frame > 0) {
        let seq = data.iter().find(|s| s.id == rec.sequence).expect("known sequence");
        let b = Box3D::from_array(rec.bbox).map_err(err)?;
        dist.push(center_distance(&b, &seq.frames[rec.frame].gt));
    }
    let mean = dist.iter().sum::<f64>() / dist.len() as f64;
    *trained = Some(trainer.model);
    let line = format!(
        "{} sequences, {frames} frames, {steps} steps: mean center error {mean:.3} m, Success {:.2}, Precision {:.2}",
        data.len(),
        summary.mean_success,
        summary.mean_precision
    );
    if mean < 0.5 && summary.mean_success > 40.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn sparsity(trained: &Option<SmatModel>) -> Check {
    let model = trained.as_ref().ok_or("no trained model from criterion 8")?;
    let cfg = RunConfig::default();
    let opts = cfg.track().map_err(err)?;
    let table = sparsity_sweep(|s| track_sequence(s, model, &opts), &cfg.scenario().map_err(err)?, &[8, 16, 32, 64, 128, 256], 30)
        .map_err(err)?;
    eprint!("{}", table.table());
    let rho = table.spearman().ok_or("spearman undefined")?;
    let thin = table.rows.iter().find(|r| r.sequences < 30);
    let line = format!("rho {rho:.3} over {} sequences", table.per_sequence.len());
    match thin {
        Some(row) => Err(format!("{line}; bucket {} has only {} sequences", row.points, row.sequences)),
        None if rho > 0.0 => Ok(line),
        None => Err(line),
    }
}

// ---------------------------------------------------------------- 10

/// Training steps per ablation run; the milestone stays at 3/4 of them.
const ABLATION_STEPS: usize = 300;

fn ablation() -> Check {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("train.steps", ABLATION_STEPS.to_string()),
        ("train.milestones", (ABLATION_STEPS * 3 / 4).to_string()),
        ("ablate.seeds", "3".into()),
        ("ablate.variants", "similarity=attention | similarity=cosine".into()),
    ] {
        cfg.set(k, &v).map_err(err)?;
    }
    let table = run::cmd_ablate(&cfg, 0, None).map_err(err)?;
    eprint!("{}", table.table());
    let (att, _) = table.median("similarity=attention").ok_or("no attention rows")?;
    let (cos, _) = table.median("similarity=cosine").ok_or("no cosine rows")?;
    let line = format!("{ABLATION_STEPS} steps x 3 seeds: median Success attention {att:.2}, cosine {cos:.2}");
    if att >= cos - 2.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

// ---------------------------------------------------------------- 11

fn determinism(trained: &Option<SmatModel>) -> Check {
    let mut cfg = RunConfig::default();
    cfg.set("train.steps", "4").map_err(err)?;
    cfg.set("train.sequences", "3").map_err(err)?;
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        let out = run::cmd_train(&cfg, 11, dir.path(), None).map_err(err)?;
        files.push(std::fs::read(out.metrics).map_err(err)?);
    }
    if files[0] != files[1] {
        return Err("metrics files differ between identical runs".into());
    }
    let fresh;
    let model = match trained {
        Some(m) => m,
        None => {
            fresh = SmatModel::new(&ModelConfig::desk(), 3).map_err(err)?;
            &fresh
        }
    };
    let data = generate_dataset(&ScenarioConfig::default(), 2, 5).map_err(err)?;
    let opts = RunConfig::default().track().map_err(err)?;
    for seq in &data {
        let a = track_sequence(seq, model, &opts).map_err(err)?;
        let b = track_sequence(seq, model, &opts).map_err(err)?;
        if a != b {
            return Err(format!("track_sequence replay differs on {}", seq.id));
        }
    }
    Ok(format!("metrics identical ({} bytes); tracking replay identical", files[0].len()))
}

// ----------------------------------------------------------------

/// `ACCEPTANCE_ONLY=2,8` runs a subset; skipped criteria count as neither.
fn selected(n: usize) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim() == n.to_string()),
        Err(_) => true,
    }
}

fn report(n: usize, limit: Option<Duration>, f: impl FnOnce() -> Check) -> Option<bool> {
    if !selected(n) {
        println!("SKIP criterion {n}");
        return None;
    }
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let took = start.elapsed();
    let (ok, mut detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let ok = match limit {
        Some(l) if took > l => {
            detail += &format!("; over the {} s budget", l.as_secs());
            false
        }
        _ => ok,
    };
    println!("{} criterion {n}: {detail} [{:.1} s]", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64());
    Some(ok)
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let mut trained = None;
    let results = [
        report(1, secs(10), attention_correctness),
        report(2, secs(300), gradient_suite),
        report(3, secs(30), hungarian_exact),
        report(4, secs(120), iou_monte_carlo),
        report(5, None, pillar_partition),
        report(6, None, label_occupancy),
        report(7, None, metric_auc),
        report(8, secs(1800), || overfit(&mut trained)),
        report(9, None, || sparsity(&trained)),
        report(10, None, ablation),
        report(11, None, || determinism(&trained)),
    ];
    let ran: Vec<bool> = results.into_iter().flatten().collect();
    let failed = ran.iter().filter(|ok| !**ok).count();
    println!("{} of {} criteria passed", ran.len() - failed, ran.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
