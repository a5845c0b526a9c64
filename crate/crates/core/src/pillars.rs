//! Sparse-to-dense encoding: crop, bin points into vertical pillars, run a
//! small per-point network and max-pool each pillar onto a dense BEV grid.

use std::collections::BTreeMap;

use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Linear, ParamStore};
use crate::tensor::{FeatureMap, Graph, Mat, NONE};

/// Decorated per-point feature width.
pub const DECORATED_DIMS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum PillarError {
    #[error("area extents must be positive, got {0:?}")]
    EmptyArea([f64; 6]),
    #[error("pillar size must be positive, got {0:?}")]
    BadPillarSize([f64; 3]),
    #[error("area extent {extent} is not a whole number of {size} m pillars")]
    FractionalGrid { extent: f64, size: f64 },
    #[error("pillar height {dz} must span the full z extent {extent}")]
    NotAPillar { dz: f64, extent: f64 },
    #[error("caps must be positive")]
    ZeroCap,
    #[error("non-finite point coordinate")]
    NonFinite,
}

/// `N x 4` points: `x, y, z` in meters plus intensity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self, PillarError> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PillarError::NonFinite);
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Multiset union; duplicates are kept.
    pub fn concat(parts: &[PointCloud]) -> Self {
        Self {
            points: parts.iter().flat_map(|p| p.points.iter().copied()).collect(),
        }
    }
}

/// Axis-aligned half-open box `[min, max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Area {
    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            min: [v[0], v[1], v[2]],
            max: [v[3], v[4], v[5]],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2]]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] < self.max[k])
    }

    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.max[k] - self.min[k])
    }

    /// Same area scaled about its center.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = *self;
        for k in 0..3 {
            let c = (self.min[k] + self.max[k]) / 2.0;
            let half = (self.max[k] - self.min[k]) / 2.0 * factor;
            out.min[k] = c - half;
            out.max[k] = c + half;
        }
        out
    }
}

/// Keeps exactly the points inside the half-open area, in order.
pub fn crop_points(pc: &PointCloud, area: &Area) -> PointCloud {
    PointCloud {
        points: pc
            .points
            .iter()
            .filter(|p| area.contains([p[0], p[1], p[2]]))
            .copied()
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PillarConfig {
    pub area: Area,
    pub pillar_size: [f64; 3],
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
}

impl PillarConfig {
    /// Car search area `[-3.2, -3.2, -3, 3.2, 3.2, 1]` m with `0.1 x 0.1 x 4` m pillars.
    pub fn car() -> Self {
        Self {
            area: Area::from_array([-3.2, -3.2, -3.0, 3.2, 3.2, 1.0]),
            pillar_size: [0.1, 0.1, 4.0],
            max_points_per_pillar: 32,
            max_pillars: 4096,
        }
    }

    /// The same pillar footprint over a scaled area; the pillar height
    /// follows the new z extent.
    pub fn scaled(&self, factor: f64) -> Self {
        let area = self.area.scaled(factor);
        Self {
            area,
            pillar_size: [self.pillar_size[0], self.pillar_size[1], area.extent()[2]],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), PillarError> {
        let ext = self.area.extent();
        if ext.iter().any(|&e| !(e > 0.0)) {
            return Err(PillarError::EmptyArea(self.area.to_array()));
        }
        if self.pillar_size.iter().any(|&s| !(s > 0.0)) {
            return Err(PillarError::BadPillarSize(self.pillar_size));
        }
        for k in 0..2 {
            let ratio = ext[k] / self.pillar_size[k];
            if (ratio - ratio.round()).abs() > 1e-6 {
                return Err(PillarError::FractionalGrid {
                    extent: ext[k],
                    size: self.pillar_size[k],
                });
            }
        }
        if (self.pillar_size[2] - ext[2]).abs() > 1e-9 {
            return Err(PillarError::NotAPillar {
                dz: self.pillar_size[2],
                extent: ext[2],
            });
        }
        if self.max_points_per_pillar == 0 || self.max_pillars == 0 {
            return Err(PillarError::ZeroCap);
        }
        Ok(())
    }

    /// `(height, width)` = `(cells along y, cells along x)`.
    pub fn grid(&self) -> (usize, usize) {
        let ext = self.area.extent();
        let nx = (ext[0] / self.pillar_size[0]).round() as usize;
        let ny = (ext[1] / self.pillar_size[1]).round() as usize;
        (ny, nx)
    }

    /// `(row, col)` of the pillar holding `p`, for an in-area point.
    pub fn cell_of(&self, p: [f64; 3]) -> (usize, usize) {
        let (h, w) = self.grid();
        let ix = ((p[0] - self.area.min[0]) / self.pillar_size[0]).floor() as isize;
        let iy = ((p[1] - self.area.min[1]) / self.pillar_size[1]).floor() as isize;
        (iy.clamp(0, h as isize - 1) as usize, ix.clamp(0, w as isize - 1) as usize)
    }

    /// Center of cell `(row, col)` on a grid coarsened by `stride`.
    pub fn cell_center(&self, row: usize, col: usize, stride: usize) -> [f64; 3] {
        let s = stride as f64;
        [
            self.area.min[0] + (col as f64 + 0.5) * self.pillar_size[0] * s,
            self.area.min[1] + (row as f64 + 0.5) * self.pillar_size[1] * s,
            (self.area.min[2] + self.area.max[2]) / 2.0,
        ]
    }
}

/// Pillar-major point features ready for the per-point network.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarTensor {
    /// `(P * M) x 10`; padded rows are zero.
    pub features: Mat,
    /// `(row, col)` grid cell of each pillar.
    pub coords: Vec<(usize, usize)>,
    /// `P * M` flags, true for real points.
    pub mask: Vec<bool>,
    pub max_points: usize,
    pub grid: (usize, usize),
}

impl PillarTensor {
    pub fn pillars(&self) -> usize {
        self.coords.len()
    }

    pub fn point_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Bins points into pillars and decorates each kept point to
/// `(x, y, z, i, x - mean, y - mean, z - mean, x - cx, y - cy, z - cz)`.
///
/// Points outside the area are ignored. Overflowing pillars and surplus
/// pillars are thinned by a seeded random choice.
pub fn pillarize(pc: &PointCloud, cfg: &PillarConfig, seed: u64) -> PillarTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = cfg.grid();
    let mut cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in pc.points.iter().enumerate() {
        let xyz = [p[0], p[1], p[2]];
        if !cfg.area.contains(xyz) {
            continue;
        }
        let (r, c) = cfg.cell_of(xyz);
        cells.entry(r * w + c).or_default().push(i);
    }
    let mut chosen: Vec<(usize, Vec<usize>)> = cells.into_iter().collect();
    if chosen.len() > cfg.max_pillars {
        let mut keep: Vec<usize> = sample(&mut rng, chosen.len(), cfg.max_pillars).into_vec();
        keep.sort_unstable();
        chosen = keep.into_iter().map(|k| std::mem::take(&mut chosen[k])).collect();
    }
    let m = cfg.max_points_per_pillar;
    let mut features = Mat::zeros(chosen.len() * m, DECORATED_DIMS);
    let mut mask = vec![false; chosen.len() * m];
    let mut coords = Vec::with_capacity(chosen.len());
    for (p, (cell, mut idx)) in chosen.into_iter().enumerate() {
        if idx.len() > m {
            let mut keep: Vec<usize> = sample(&mut rng, idx.len(), m).into_vec();
            keep.sort_unstable();
            idx = keep.into_iter().map(|k| idx[k]).collect();
        }
        let (row, col) = (cell / w, cell % w);
        coords.push((row, col));
        let n = idx.len() as f64;
        let mut mean = [0.0; 3];
        for &i in &idx {
            for k in 0..3 {
                mean[k] += pc.points[i][k] / n;
            }
        }
        let center = cfg.cell_center(row, col, 1);
        for (slot, &i) in idx.iter().enumerate() {
            let q = pc.points[i];
            let r = p * m + slot;
            mask[r] = true;
            features.row_mut(r).copy_from_slice(&[
                q[0],
                q[1],
                q[2],
                q[3],
                q[0] - mean[0],
                q[1] - mean[1],
                q[2] - mean[2],
                q[0] - center[0],
                q[1] - center[1],
                q[2] - center[2],
            ]);
        }
    }
    PillarTensor {
        features,
        coords,
        mask,
        max_points: m,
        grid: (h, w),
    }
}

/// Per-point affine map and ReLU, masked max over each pillar, scattered
/// onto the dense grid. Cells without a pillar stay zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PillarFeatureNet {
    pub linear: Linear,
    pub channels: usize,
}

impl PillarFeatureNet {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        Self {
            linear: Linear::new(ps, rng, &format!("{name}.linear"), DECORATED_DIMS, channels),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, pt: &PillarTensor) -> FeatureMap {
        let (h, w) = pt.grid;
        let c = self.channels;
        let x = g.constant(pt.features.clone());
        let y = self.linear.forward(g, ps, x);
        let y = g.relu(y);
        let pooled = g.group_max(y, pt.max_points, &pt.mask);
        let mut index = vec![NONE; h * w * c];
        for (p, &(row, col)) in pt.coords.iter().enumerate() {
            let cell = row * w + col;
            for ch in 0..c {
                index[cell * c + ch] = (p * c + ch) as u32;
            }
        }
        FeatureMap::new(g.gather(pooled, h * w, c, index), h, w)
    }
}
