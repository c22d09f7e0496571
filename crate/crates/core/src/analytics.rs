//! Behaviour summaries derived from a fitted model and its segmentations:
//! agent-to-agent transition tables and graphs, per-cell agent occurrence
//! counts and per-agent kernel density maps.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use image::{GrayImage, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::types::{Segmentation, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedTransitions {
    pub matrix: Vec<Vec<f64>>,
    /// Rows with no off-diagonal mass; left all zero.
    pub empty_rows: Vec<usize>,
}

fn check_square(a: &[Vec<f64>]) -> Result<()> {
    if a.is_empty() || a.iter().any(|r| r.len() != a.len()) {
        return Err(Error::InvalidConfig("transition matrix must be square and non-empty".into()));
    }
    Ok(())
}

/// Removes self-transitions and renormalizes every row.
pub fn normalize_transitions(a: &[Vec<f64>]) -> Result<NormalizedTransitions> {
    check_square(a)?;
    let mut empty_rows = Vec::new();
    let matrix = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let off: f64 = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
            if off > 0.0 {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| if j == i { 0.0 } else { v / off })
                    .collect()
            } else {
                empty_rows.push(i);
                vec![0.0; row.len()]
            }
        })
        .collect();
    Ok(NormalizedTransitions { matrix, empty_rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Edges `i -> j` with weight strictly above `threshold`, row by row.
pub fn transition_graph(a: &[Vec<f64>], threshold: f64) -> Result<Vec<Edge>> {
    check_square(a)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(a.iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(move |(_, &w)| w > threshold)
                .map(move |(j, &w)| Edge { from: i, to: j, weight: w })
        })
        .collect())
}

/// A `rows x cols` partition of a `width x height` scene; row 0 is the top.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub width: f64,
    pub height: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rows: 10,
            cols: 10,
            width: 1920.0,
            height: 1080.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || !(self.width > 0.0) || !(self.height > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid grid {self:?}")));
        }
        Ok(())
    }

    pub fn cell_width(&self) -> f64 {
        self.width / self.cols as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.height / self.rows as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_width() * self.cell_height()
    }

    /// Cell `(row, col)` holding `p`. A point on a shared edge belongs to the
    /// lower-index cell; points outside the scene go to the border cell.
    pub fn cell_of(&self, p: &Vec2) -> (usize, usize) {
        let index = |v: f64, size: f64, n: usize| -> usize {
            let k = (v / size).ceil() - 1.0;
            k.clamp(0.0, (n - 1) as f64) as usize
        };
        (
            index(p.y, self.cell_height(), self.rows),
            index(p.x, self.cell_width(), self.cols),
        )
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Vec2 {
        Vec2::new(
            (col as f64 + 0.5) * self.cell_width(),
            (row as f64 + 0.5) * self.cell_height(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceGrid {
    pub spec: GridSpec,
    /// `counts[row][col]`: number of distinct agents with a point in the cell.
    pub counts: Vec<Vec<usize>>,
}

fn pair_up<'a>(
    segs: &'a [Segmentation],
    trajs: &'a [Trajectory],
) -> Result<Vec<(&'a Segmentation, &'a Trajectory)>> {
    let by_id: HashMap<&str, &Trajectory> = trajs.iter().map(|t| (t.id(), t)).collect();
    segs.iter()
        .map(|s| {
            let t = by_id.get(s.trajectory_id.as_str()).ok_or_else(|| {
                Error::Format(format!("segmentation for unknown trajectory `{}`", s.trajectory_id))
            })?;
            if t.len() != s.labels.len() {
                return Err(Error::InvalidTrajectory {
                    id: t.id().to_string(),
                    reason: format!("{} labels for {} points", s.labels.len(), t.len()),
                });
            }
            Ok((s, *t))
        })
        .collect()
}

pub fn occurrence_map(
    segs: &[Segmentation],
    trajs: &[Trajectory],
    spec: &GridSpec,
) -> Result<OccurrenceGrid> {
    spec.validate()?;
    let mut seen = vec![vec![BTreeSet::new(); spec.cols]; spec.rows];
    for (s, t) in pair_up(segs, trajs)? {
        for (p, &label) in t.points().iter().zip(&s.labels) {
            let (r, c) = spec.cell_of(p);
            seen[r][c].insert(label);
        }
    }
    Ok(OccurrenceGrid {
        spec: *spec,
        counts: seen
            .into_iter()
            .map(|row| row.into_iter().map(|s| s.len()).collect())
            .collect(),
    })
}

/// Points labelled `agent` across all segmentations, in input order.
pub fn agent_points(segs: &[Segmentation], trajs: &[Trajectory], agent: usize) -> Result<Vec<Vec2>> {
    Ok(pair_up(segs, trajs)?
        .into_iter()
        .flat_map(|(s, t)| {
            t.points()
                .iter()
                .zip(&s.labels)
                .filter(move |(_, &l)| l == agent)
                .map(|(p, _)| *p)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub bandwidth: f64,
    /// `values[row][col]`, normalized so that the sum times the cell area is 1.
    pub values: Vec<Vec<f64>>,
}

/// `n^(-1/6)` times the pooled per-axis standard deviation; the smaller
/// cell side when the points have no spread.
pub fn scott_bandwidth(points: &[Vec2], spec: &GridSpec) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vec2>() / n;
    let var = if points.len() > 1 {
        points.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / (2.0 * (n - 1.0))
    } else {
        0.0
    };
    let h = n.powf(-1.0 / 6.0) * var.sqrt();
    if h > 0.0 {
        h
    } else {
        spec.cell_width().min(spec.cell_height())
    }
}

/// Isotropic Gaussian KDE evaluated at the cell centres.
pub fn density_map(points: &[Vec2], spec: &GridSpec, bandwidth: Option<f64>) -> Result<DensityGrid> {
    spec.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyCorpus("density map needs at least one point".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}"))),
        None => scott_bandwidth(points, spec),
    };
    let inv = 1.0 / (2.0 * h * h);
    let mut values: Vec<Vec<f64>> = (0..spec.rows)
        .into_par_iter()
        .map(|r| {
            (0..spec.cols)
                .map(|c| {
                    let center = spec.cell_center(r, c);
                    points.iter().map(|p| (-(p - center).norm_squared() * inv).exp()).sum()
                })
                .collect()
        })
        .collect();
    let total: f64 = values.iter().flatten().sum::<f64>() * spec.cell_area();
    if total > 0.0 {
        for v in values.iter_mut().flatten() {
            *v /= total;
        }
    }
    Ok(DensityGrid {
        spec: *spec,
        bandwidth: h,
        values,
    })
}

/// Grey-level raster, `scale` pixels per cell, brightest at `max`.
pub fn grid_image(values: &[Vec<f64>], max: f64, scale: u32) -> GrayImage {
    let rows = values.len() as u32;
    let cols = values.first().map_or(0, |r| r.len()) as u32;
    GrayImage::from_fn(cols * scale, rows * scale, |x, y| {
        let v = values[(y / scale) as usize][(x / scale) as usize];
        let level = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
        Luma([(level * 255.0).round() as u8])
    })
}

pub fn save_png(values: &[Vec<f64>], path: &Path) -> Result<()> {
    let max = values.iter().flatten().copied().fold(0.0, f64::max);
    grid_image(values, max, 16).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
