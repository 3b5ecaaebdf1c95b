//! Cloud-to-cloud distance metrics with a uniform-grid nearest-neighbour
//! index.

use std::collections::HashMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::DepthHypothesisSet;
use crate::error::{MvsError, Result};

type Cell = (i64, i64, i64);

/// Exact nearest-neighbour search over a fixed point set.
#[derive(Debug, Clone)]
pub struct GridIndex {
    points: Vec<[f64; 3]>,
    cell: f64,
    cells: HashMap<Cell, Vec<u32>>,
    lo: Cell,
    hi: Cell,
}

impl GridIndex {
    /// Builds an index with a cell size chosen for about two points per
    /// occupied cell on surface-like data.
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let cell = Self::auto_cell(&points);
        Self::with_cell(points, cell)
    }

    pub fn with_cell(points: Vec<[f64; 3]>, cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "grid cell size must be positive");
        assert!(points.len() < u32::MAX as usize, "too many points for the grid index");
        let mut cells: HashMap<Cell, Vec<u32>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let c = Self::key(cell, p);
            lo = (lo.0.min(c.0), lo.1.min(c.1), lo.2.min(c.2));
            hi = (hi.0.max(c.0), hi.1.max(c.1), hi.2.max(c.2));
            cells.entry(c).or_default().push(i as u32);
        }
        Self {
            points,
            cell,
            cells,
            lo,
            hi,
        }
    }

    fn auto_cell(points: &[[f64; 3]]) -> f64 {
        if points.len() < 2 {
            return 1.0;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut ext: Vec<f64> = (0..3).map(|a| hi[a] - lo[a]).collect();
        ext.sort_by(f64::total_cmp);
        // Points are assumed to cover the two largest extents.
        let area = ext[1] * ext[2];
        let cell = (2.0 * area / points.len() as f64).sqrt();
        if cell > 0.0 && cell.is_finite() {
            cell
        } else if ext[2] > 0.0 {
            ext[2] / points.len() as f64
        } else {
            1.0
        }
    }

    fn key(cell: f64, p: &[f64; 3]) -> Cell {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Nearest point and its distance; ties go to the smaller index.
    pub fn nearest(&self, q: &[f64; 3]) -> Option<(usize, f64)> {
        self.nearest_within(q, f64::INFINITY)
    }

    /// Nearest point closer than `limit`, if any.
    pub fn nearest_within(&self, q: &[f64; 3], limit: f64) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let c = Self::key(self.cell, q);
        // Shells beyond this radius are empty.
        let reach = [
            (c.0 - self.lo.0).abs().max((self.hi.0 - c.0).abs()),
            (c.1 - self.lo.1).abs().max((self.hi.1 - c.1).abs()),
            (c.2 - self.lo.2).abs().max((self.hi.2 - c.2).abs()),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        let mut best: Option<(usize, f64)> = None;
        let mut best_sq = f64::INFINITY;
        for r in 0..=reach {
            for dx in -r..=r {
                for dy in -r..=r {
                    let on_face = dx.abs() == r || dy.abs() == r;
                    let step = if on_face || r == 0 { 1 } else { (2 * r) as usize };
                    for dz in (-r..=r).step_by(step) {
                        let Some(ids) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) else {
                            continue;
                        };
                        for &i in ids {
                            let p = &self.points[i as usize];
                            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                            let better = d2 < best_sq || (d2 == best_sq && best.is_some_and(|(b, _)| (i as usize) < b));
                            if better {
                                best_sq = d2;
                                best = Some((i as usize, d2));
                            }
                        }
                    }
                }
            }
            // Unvisited cells lie at least `r * cell` away.
            let cleared = r as f64 * self.cell;
            if best_sq.sqrt() <= cleared || cleared >= limit {
                break;
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt())).filter(|&(_, d)| d < limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    /// Mean capped distance from reconstructed points to ground truth.
    pub accuracy: f64,
    /// Mean capped distance from ground-truth points to the reconstruction.
    pub completeness: f64,
    pub overall: f64,
    pub cap: f64,
}

/// Default distance cap: 20 inverse-depth plane spacings at `median_depth`.
pub fn default_cap(hypotheses: &DepthHypothesisSet, median_depth: f64) -> f64 {
    20.0 * hypotheses.spacing_at(median_depth)
}

fn mean_capped_distance(queries: &[[f64; 3]], index: &GridIndex, cap: f64) -> f64 {
    let sum: f64 = queries
        .par_iter()
        .map(|q| index.nearest_within(q, cap).map_or(cap, |(_, d)| d))
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    sum / queries.len() as f64
}

/// Accuracy, completeness and their mean, each distance clamped at `cap`.
/// An empty cloud scores `cap` on both with a warning.
pub fn evaluate(cloud: &[[f64; 3]], gt: &[[f64; 3]], cap: f64) -> Result<ReconMetrics> {
    if gt.is_empty() {
        return Err(MvsError::Invalid("ground-truth cloud is empty".into()));
    }
    if !(cap > 0.0) {
        return Err(MvsError::Config(format!("distance cap must be positive, got {cap}")));
    }
    let (accuracy, completeness) = if cloud.is_empty() {
        warn!("evaluating an empty cloud: accuracy and completeness set to the cap {cap}");
        (cap, cap)
    } else {
        let gt_index = GridIndex::new(gt.to_vec());
        let cloud_index = GridIndex::new(cloud.to_vec());
        (
            mean_capped_distance(cloud, &gt_index, cap),
            mean_capped_distance(gt, &cloud_index, cap),
        )
    };
    Ok(ReconMetrics {
        accuracy,
        completeness,
        overall: (accuracy + completeness) / 2.0,
        cap,
    })
}
