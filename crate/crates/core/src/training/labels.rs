//! Foreground-pixel label augmentation: every stride-4 BEV cell holding a
//! point of the target becomes its own copy of the ground-truth label.

use std::collections::BTreeSet;

use crate::geometry::{Box3D, SURFACE_TOLERANCE};
use crate::pillars::{PillarConfig, PointCloud};

/// Regression target `(x, y, z, sin yaw, cos yaw)`.
pub fn box_target(b: &Box3D) -> [f64; 5] {
    let [x, y, z] = b.center();
    let (s, c) = b.yaw().sin_cos();
    [x, y, z, s, c]
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    pub target: [f64; 5],
    /// Foreground cells `(row, col)` on the coarsened grid, row-major order.
    pub cells: Vec<(usize, usize)>,
    /// True when no point fell in the box and the center cell was used.
    pub fallback: bool,
}

impl LabelSet {
    pub fn n_fg(&self) -> usize {
        self.cells.len()
    }
}

fn coarse_cell(cfg: &PillarConfig, stride: usize, p: [f64; 3]) -> (usize, usize) {
    let (h, w) = cfg.grid();
    let (gh, gw) = (h / stride, w / stride);
    let s = stride as f64;
    let ix = ((p[0] - cfg.area.min[0]) / (cfg.pillar_size[0] * s)).floor() as isize;
    let iy = ((p[1] - cfg.area.min[1]) / (cfg.pillar_size[1] * s)).floor() as isize;
    (iy.clamp(0, gh as isize - 1) as usize, ix.clamp(0, gw as isize - 1) as usize)
}

/// Occupancy of in-box (within [`SURFACE_TOLERANCE`]), in-area points at `stride`. With no such point the
/// cell under the box center is used so every frame has one positive.
pub fn augment_labels(pc: &PointCloud, gt: &Box3D, cfg: &PillarConfig, stride: usize) -> LabelSet {
    let cells: BTreeSet<(usize, usize)> = pc
        .points
        .iter()
        .map(|p| [p[0], p[1], p[2]])
        .filter(|&p| cfg.area.contains(p) && gt.contains_with_tolerance(p, SURFACE_TOLERANCE))
        .map(|p| coarse_cell(cfg, stride, p))
        .collect();
    let fallback = cells.is_empty();
    let cells = if fallback {
        vec![coarse_cell(cfg, stride, gt.center())]
    } else {
        cells.into_iter().collect()
    };
    LabelSet {
        target: box_target(gt),
        cells,
        fallback,
    }
}
