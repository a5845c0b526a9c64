//! Oriented boxes, rotated 3D IoU and the one-pass-evaluation metrics.
//!
//! Boxes are `(x, y, z, w, l, h, yaw)`: the center, the width across the
//! heading, the length along the heading, the height, and the heading angle
//! about +z. In the box's own frame the length runs along +x.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box size must be positive and finite, got {0:?}")]
    InvalidSize([f64; 3]),
    #[error("non-finite box component")]
    NonFinite,
    #[error("metric input is empty")]
    Empty,
    #[error("metric input out of range: {0}")]
    OutOfRange(f64),
}

/// Slack for points sampled exactly on a box face.
pub const SURFACE_TOLERANCE: f64 = 1e-6;

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a - two_pi * ((a + PI) / two_pi).floor();
    if r >= PI {
        r -= two_pi;
    }
    if r < -PI {
        r += two_pi;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self, GeometryError> {
        if !center.iter().all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if !size.iter().all(|&v| v.is_finite() && v > 0.0) {
            return Err(GeometryError::InvalidSize(size));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_angle(yaw),
        })
    }

    /// From the 7-tuple `(x, y, z, w, l, h, yaw)`.
    pub fn from_array(v: [f64; 7]) -> Result<Self, GeometryError> {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        let [x, y, z] = self.center;
        let [w, l, h] = self.size;
        [x, y, z, w, l, h, self.yaw]
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    /// `(w, l, h)`.
    pub fn size(&self) -> [f64; 3] {
        self.size
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn with_center(&self, center: [f64; 3]) -> Self {
        Self { center, ..*self }
    }

    pub fn with_yaw(&self, yaw: f64) -> Self {
        Self {
            yaw: normalize_angle(yaw),
            ..*self
        }
    }

    /// Same box grown by `margin` on every side.
    pub fn enlarged(&self, margin: f64) -> Self {
        let s = self.size.map(|v| (v + 2.0 * margin).max(f64::MIN_POSITIVE));
        Self { size: s, ..*self }
    }

    /// World point to box frame (translation, then rotation by `-yaw`).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Box frame point back to world.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.center[0],
            s * p[0] + c * p[1] + self.center[1],
            p[2] + self.center[2],
        ]
    }

    /// Inside test with a tolerance on every face.
    pub fn contains_with_tolerance(&self, p: [f64; 3], tol: f64) -> bool {
        let q = self.to_local(p);
        let [w, l, h] = self.size;
        q[0].abs() <= l / 2.0 + tol && q[1].abs() <= w / 2.0 + tol && q[2].abs() <= h / 2.0 + tol
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.contains_with_tolerance(p, 0.0)
    }

    fn z_range(&self) -> (f64, f64) {
        (self.center[2] - self.size[2] / 2.0, self.center[2] + self.size[2] / 2.0)
    }
}

/// BEV footprint corners, counter-clockwise, starting at the rear-right corner.
pub fn bev_corners(b: &Box3D) -> [[f64; 2]; 4] {
    let [w, l, _] = b.size;
    let (hl, hw) = (l / 2.0, w / 2.0);
    let (s, c) = b.yaw.sin_cos();
    let local = [[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]];
    local.map(|[u, v]| [c * u - s * v + b.center[0], s * u + c * v + b.center[1]])
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland–Hodgman: clips `subject` by the convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Area of the BEV footprint intersection.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let poly = clip_convex(&bev_corners(a), &bev_corners(b));
    polygon_area(&poly).max(0.0)
}

/// Rotated 3D IoU (BEV polygon overlap times vertical overlap).
///
/// Exactly symmetric: the pair is put in a canonical order before clipping.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let (first, second) = if a.to_array().partial_cmp(&b.to_array()) == Some(std::cmp::Ordering::Greater) {
        (b, a)
    } else {
        (a, b)
    };
    let (a0, a1) = first.z_range();
    let (b0, b1) = second.z_range();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    let area = bev_intersection_area(first, second);
    if area <= 0.0 {
        return 0.0;
    }
    let inter = area * dz;
    let union = first.volume() + second.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    let (p, q) = (a.center, b.center);
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// Number of thresholds on each OPE curve.
pub const OPE_THRESHOLDS: usize = 21;

/// IoU thresholds `0, 0.05, ..., 1`.
pub fn success_thresholds() -> [f64; OPE_THRESHOLDS] {
    std::array::from_fn(|j| j as f64 / 20.0)
}

/// Center-distance thresholds `0, 0.1, ..., 2` meters.
pub fn precision_thresholds() -> [f64; OPE_THRESHOLDS] {
    std::array::from_fn(|j| j as f64 / 10.0)
}

fn auc(values: &[f64], thresholds: &[f64], passes: impl Fn(f64, f64) -> bool) -> f64 {
    // Each threshold's hit count via a sorted sweep; counts are integers so
    // the result is independent of the summation order.
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let hits: usize = thresholds
        .iter()
        .map(|&t| sorted.iter().filter(|&&v| passes(v, t)).count())
        .sum();
    100.0 * hits as f64 / (values.len() * thresholds.len()) as f64
}

/// OPE Success: area under the `iou > t` curve, in percent.
pub fn success_auc(ious: &[f64]) -> Result<f64, GeometryError> {
    if ious.is_empty() {
        return Err(GeometryError::Empty);
    }
    if let Some(&bad) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(GeometryError::OutOfRange(bad));
    }
    Ok(auc(ious, &success_thresholds(), |v, t| v > t))
}

/// OPE Precision: area under the `distance < t` curve over `[0, 2]` m, in percent.
pub fn precision_auc(distances: &[f64]) -> Result<f64, GeometryError> {
    if distances.is_empty() {
        return Err(GeometryError::Empty);
    }
    if let Some(&bad) = distances.iter().find(|v| !(**v >= 0.0)) {
        return Err(GeometryError::OutOfRange(bad));
    }
    Ok(auc(distances, &precision_thresholds(), |v, t| v < t))
}

/// Per-sequence tracking score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackScore {
    pub success: f64,
    pub precision: f64,
    pub ious: Vec<f64>,
    pub distances: Vec<f64>,
}

impl TrackScore {
    pub fn from_boxes(predicted: &[Box3D], truth: &[Box3D]) -> Result<Self, GeometryError> {
        assert_eq!(predicted.len(), truth.len(), "prediction/ground-truth length mismatch");
        let ious: Vec<f64> = predicted.iter().zip(truth).map(|(p, t)| iou3d(p, t)).collect();
        let distances: Vec<f64> = predicted.iter().zip(truth).map(|(p, t)| center_distance(p, t)).collect();
        Ok(Self {
            success: success_auc(&ious)?,
            precision: precision_auc(&distances)?,
            ious,
            distances,
        })
    }

    pub fn frames(&self) -> usize {
        self.ious.len()
    }
}

/// Frame-count weighted mean of `(success, precision)` across groups.
pub fn weighted_mean(scores: &[(f64, f64, usize)]) -> Option<(f64, f64)> {
    let total: usize = scores.iter().map(|s| s.2).sum();
    if total == 0 {
        return None;
    }
    let (s, p) = scores
        .iter()
        .fold((0.0, 0.0), |(s, p), &(si, pi, n)| (s + si * n as f64, p + pi * n as f64));
    Some((s / total as f64, p / total as f64))
}
