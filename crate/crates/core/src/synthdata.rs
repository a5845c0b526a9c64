//! Seeded synthetic tracking sequences and the sparsity sweep.
//!
//! A box moves with noisy constant speed and yaw rate. Each frame holds
//! points sampled on the faces a sensor at the origin can see (the sides
//! facing it and the top) plus uniform clutter around the target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Box3D, GeometryError};
use crate::pillars::PointCloud;
use crate::tracker::{Frame, Sequence, TrackError, TrackResult};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    Invalid(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("sweep bucket for {0} points is empty")]
    EmptyBucket(usize),
    #[error("sweep needs at least one point count")]
    NoBuckets,
    #[error(transparent)]
    Track(#[from] TrackError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_frames: usize,
    /// `(w, l, h)` meters.
    pub size: [f64; 3],
    pub center: [f64; 3],
    pub yaw: f64,
    /// Meters per frame along the heading.
    pub velocity: f64,
    /// Radians per frame.
    pub yaw_rate: f64,
    /// Per-frame position noise std (meters).
    pub position_noise: f64,
    /// Per-frame yaw noise std (radians).
    pub yaw_noise: f64,
    pub points_on_target: usize,
    pub clutter_points: usize,
    /// Clutter is uniform in the target center plus or minus these extents.
    pub clutter_half_extent: [f64; 3],
    /// Drop the points of one visible side face.
    pub occlusion: bool,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_frames: 10,
            size: [1.8, 4.0, 1.5],
            center: [10.0, 0.0, -0.8],
            yaw: 0.0,
            velocity: 0.3,
            yaw_rate: 0.05,
            position_noise: 0.02,
            yaw_noise: 0.01,
            points_on_target: 256,
            clutter_points: 64,
            clutter_half_extent: [3.2, 3.2, 1.0],
            occlusion: false,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_frames == 0 {
            return Err(SynthError::Invalid("n_frames must be positive"));
        }
        if !(self.position_noise >= 0.0 && self.yaw_noise >= 0.0) {
            return Err(SynthError::Invalid("noise std must be nonnegative"));
        }
        if self.clutter_half_extent.iter().any(|&e| !(e >= 0.0)) {
            return Err(SynthError::Invalid("clutter extent must be nonnegative"));
        }
        Box3D::new(self.center, self.size, self.yaw)?;
        Ok(())
    }

    /// A copy with a random start (5 to 15 m from the sensor, any bearing
    /// and heading), speed in `[0, 2 velocity]`, yaw rate in
    /// `[-yaw_rate, yaw_rate]`, and the given seed.
    pub fn randomized(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ce7e);
        let r = rng.random_range(5.0..15.0);
        let bearing = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        Self {
            center: [r * bearing.cos(), r * bearing.sin(), self.center[2]],
            yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            velocity: rng.random_range(0.0..=2.0 * self.velocity),
            yaw_rate: rng.random_range(-1.0..=1.0) * self.yaw_rate,
            seed,
            ..self.clone()
        }
    }
}

/// Visible faces as `(axis, sign)` in the box frame; axis 2 is the top.
fn visible_faces(b: &Box3D) -> Vec<(usize, f64)> {
    let s = b.to_local([0.0, 0.0, 0.0]);
    let [w, l, _] = b.size();
    let mut faces = Vec::new();
    if s[0] > l / 2.0 {
        faces.push((0, 1.0));
    } else if s[0] < -l / 2.0 {
        faces.push((0, -1.0));
    }
    if s[1] > w / 2.0 {
        faces.push((1, 1.0));
    } else if s[1] < -w / 2.0 {
        faces.push((1, -1.0));
    }
    faces.push((2, 1.0));
    faces
}

fn face_area(b: &Box3D, axis: usize) -> f64 {
    let [w, l, h] = b.size();
    match axis {
        0 => w * h,
        1 => l * h,
        _ => l * w,
    }
}

/// `n` points uniform over the visible faces (by area), in world coordinates.
pub fn sample_surface(b: &Box3D, n: usize, occlusion: bool, rng: &mut impl Rng) -> Vec<[f64; 4]> {
    let mut faces = visible_faces(b);
    if occlusion && faces.len() > 1 {
        faces.remove(0);
    }
    let areas: Vec<f64> = faces.iter().map(|&(a, _)| face_area(b, a)).collect();
    let total: f64 = areas.iter().sum();
    let [w, l, h] = b.size();
    let half = [l / 2.0, w / 2.0, h / 2.0];
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut f = faces.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    f = i;
                    break;
                }
                pick -= a;
            }
            let (axis, sign) = faces[f];
            let mut q = [0.0; 3];
            for (k, qk) in q.iter_mut().enumerate() {
                *qk = if k == axis {
                    sign * half[k]
                } else {
                    rng.random_range(-half[k]..=half[k])
                };
            }
            let p = b.to_world(q);
            [p[0], p[1], p[2], rng.random_range(0.0..1.0)]
        })
        .collect()
}

fn clutter(b: &Box3D, cfg: &ScenarioConfig, rng: &mut impl Rng) -> Vec<[f64; 4]> {
    let c = b.center();
    let e = cfg.clutter_half_extent;
    let keep_out = b.enlarged(0.1);
    let mut out = Vec::with_capacity(cfg.clutter_points);
    while out.len() < cfg.clutter_points {
        let p = [0, 1, 2].map(|k| c[k] + if e[k] > 0.0 { rng.random_range(-e[k]..e[k]) } else { 0.0 });
        if !keep_out.contains(p) {
            out.push([p[0], p[1], p[2], rng.random_range(0.0..1.0)]);
        } else if e.iter().all(|&x| x == 0.0) {
            break;
        }
    }
    out
}

/// Fully determined by `cfg` (including its seed).
pub fn generate_sequence(cfg: &ScenarioConfig, id: &str) -> Result<Sequence, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pos = Normal::new(0.0, cfg.position_noise).map_err(|_| SynthError::Invalid("position noise"))?;
    let rot = Normal::new(0.0, cfg.yaw_noise).map_err(|_| SynthError::Invalid("yaw noise"))?;
    let mut b = Box3D::new(cfg.center, cfg.size, cfg.yaw)?;
    let mut frames = Vec::with_capacity(cfg.n_frames);
    for t in 0..cfg.n_frames {
        if t > 0 {
            let (s, c) = b.yaw().sin_cos();
            let [x, y, z] = b.center();
            let center = [
                x + cfg.velocity * c + pos.sample(&mut rng),
                y + cfg.velocity * s + pos.sample(&mut rng),
                z,
            ];
            let yaw = b.yaw() + cfg.yaw_rate + rot.sample(&mut rng);
            b = b.with_center(center).with_yaw(yaw);
        }
        let mut points = sample_surface(&b, cfg.points_on_target, cfg.occlusion, &mut rng);
        points.extend(clutter(&b, cfg, &mut rng));
        frames.push(Frame {
            points: PointCloud { points },
            gt: b,
        });
    }
    Ok(Sequence {
        id: id.to_string(),
        category: "car".to_string(),
        frames,
    })
}

/// `n` randomized sequences; sequence `i` uses seed `seed * 1_000_003 + i`.
pub fn generate_dataset(base: &ScenarioConfig, n: usize, seed: u64) -> Result<Vec<Sequence>, SynthError> {
    (0..n)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            generate_sequence(&base.randomized(s), &format!("seq{seed}-{i:04}"))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub points: usize,
    pub sequences: usize,
    pub success: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// `(first-frame target points, sequence success)` for every sequence.
    pub per_sequence: Vec<(usize, f64)>,
}

impl SweepTable {
    /// Rank correlation of point count with per-sequence Success.
    pub fn spearman(&self) -> Option<f64> {
        let x: Vec<f64> = self.per_sequence.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = self.per_sequence.iter().map(|p| p.1).collect();
        spearman(&x, &y)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>7} {:>9} {:>8} {:>9}\n", "points", "sequences", "success", "precision");
        for r in &self.rows {
            s += &format!("{:>7} {:>9} {:>8.2} {:>9.2}\n", r.points, r.sequences, r.success, r.precision);
        }
        s
    }
}

/// Tracks `per_bucket` randomized sequences for every point count. A
/// sequence belongs to a bucket when its first frame holds exactly that
/// many target points; a bucket that ends up empty is an error.
/// `track` runs one sequence, normally [`crate::tracker::track_sequence`] with a model.
pub fn sparsity_sweep(
    track: impl Fn(&Sequence) -> Result<TrackResult, TrackError>,
    base: &ScenarioConfig,
    counts: &[usize],
    per_bucket: usize,
) -> Result<SweepTable, SynthError> {
    if counts.is_empty() {
        return Err(SynthError::NoBuckets);
    }
    let mut rows = Vec::new();
    let mut per_sequence = Vec::new();
    for &count in counts {
        let mut ious = Vec::new();
        let mut dists = Vec::new();
        let mut n = 0;
        for i in 0..per_bucket {
            let cfg = ScenarioConfig {
                points_on_target: count,
                ..base.randomized(base.seed.wrapping_mul(7919).wrapping_add((count * 100_003 + i) as u64))
            };
            let seq = generate_sequence(&cfg, &format!("sweep{count}-{i}"))?;
            let first = &seq.frames[0];
            let on_target = first.points.points.iter().filter(|p| first.gt.contains_with_tolerance([p[0], p[1], p[2]], 1e-6)).count();
            if on_target != count {
                continue;
            }
            let r = track(&seq)?;
            per_sequence.push((count, r.score.success));
            ious.extend(r.score.ious);
            dists.extend(r.score.distances);
            n += 1;
        }
        if n == 0 {
            return Err(SynthError::EmptyBucket(count));
        }
        rows.push(SweepRow {
            points: count,
            sequences: n,
            success: crate::geometry::success_auc(&ious)?,
            precision: crate::geometry::precision_auc(&dists)?,
        });
    }
    Ok(SweepTable { rows, per_sequence })
}

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho (Pearson correlation of average ranks). `None` when
/// either side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pillars::PillarConfig;
    use crate::tracker::{track_sequence, OraclePredictor, TrackOptions};

    #[test]
    fn still_target_stays_put() {
        let cfg = ScenarioConfig {
            velocity: 0.0,
            yaw_rate: 0.0,
            position_noise: 0.0,
            yaw_noise: 0.0,
            ..Default::default()
        };
        let s = generate_sequence(&cfg, "a").unwrap();
        assert!(s.frames.iter().all(|f| f.gt == s.frames[0].gt));
    }

    #[test]
    fn no_target_points_only_clutter() {
        let cfg = ScenarioConfig {
            points_on_target: 0,
            ..Default::default()
        };
        let s = generate_sequence(&cfg, "a").unwrap();
        for f in &s.frames {
            assert_eq!(f.points.len(), 64);
            assert!(f.points.points.iter().all(|p| !f.gt.contains([p[0], p[1], p[2]])));
        }
    }

    #[test]
    fn seeded_and_on_the_surface() {
        let cfg = ScenarioConfig::default().randomized(9);
        let a = generate_sequence(&cfg, "a").unwrap();
        assert_eq!(a, generate_sequence(&cfg, "a").unwrap());
        for f in &a.frames {
            let on = f.points.points[..256].iter().filter(|p| f.gt.contains_with_tolerance([p[0], p[1], p[2]], 1e-6)).count();
            assert_eq!(on, 256);
        }
    }

    #[test]
    fn sensor_side_faces_only() {
        // target straight ahead, heading away: the rear face and the top are visible
        let b = Box3D::new([10.0, 0.0, 0.0], [1.8, 4.0, 1.5], 0.0).unwrap();
        assert_eq!(visible_faces(&b), vec![(0, -1.0), (2, 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in sample_surface(&b, 100, false, &mut rng) {
            let q = b.to_local([p[0], p[1], p[2]]);
            assert!((q[0] + 2.0).abs() < 1e-9 || (q[2] - 0.75).abs() < 1e-9);
        }
        for p in sample_surface(&b, 100, true, &mut rng) {
            assert!((b.to_local([p[0], p[1], p[2]])[2] - 0.75).abs() < 1e-9);
        }
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn sweep_errors() {
        let never = |_: &Sequence| -> Result<TrackResult, TrackError> { unreachable!() };
        assert!(matches!(sparsity_sweep(never, &ScenarioConfig::default(), &[], 1), Err(SynthError::NoBuckets)));
        assert!(matches!(
            sparsity_sweep(never, &ScenarioConfig::default(), &[8], 0),
            Err(SynthError::EmptyBucket(8))
        ));
    }

    #[test]
    fn oracle_sweep_is_flat() {
        let opts = TrackOptions::new(PillarConfig::car().area);
        let base = ScenarioConfig {
            n_frames: 4,
            ..Default::default()
        };
        let t = sparsity_sweep(|s| track_sequence(s, &OraclePredictor { seq: s }, &opts), &base, &[8, 32], 3).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows.iter().all(|r| r.sequences == 3 && (r.success - 100.0 * 20.0 / 21.0).abs() < 1e-9));
        assert_eq!(t.spearman(), None);
    }
}
