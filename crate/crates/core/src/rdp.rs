//! Ramer-Douglas-Peucker simplification as a shape-only segmentation baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::metrics::{self, ErrorCriterion};
use crate::types::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdpParams {
    pub epsilon: f64,
}

impl RdpParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }
}

/// Distance from `p` to the segment `a`-`b`; point distance if `a == b`.
pub fn segment_distance(p: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn simplify_range(points: &[Vec2], lo: usize, hi: usize, eps: f64, mask: &mut [bool]) {
    if hi <= lo + 1 {
        return;
    }
    let mut best = lo;
    let mut best_d = -1.0;
    for k in lo + 1..hi {
        let d = segment_distance(&points[k], &points[lo], &points[hi]);
        if d > best_d {
            best_d = d;
            best = k;
        }
    }
    if best_d > eps {
        mask[best] = true;
        simplify_range(points, lo, best, eps, mask);
        simplify_range(points, best, hi, eps, mask);
    }
}

/// Split mask of the interior points RDP preserves. Endpoints are always
/// preserved and never marked.
pub fn rdp_simplify(traj: &Trajectory, params: &RdpParams) -> Vec<bool> {
    rdp_points(traj.points(), params.epsilon)
}

pub fn rdp_points(points: &[Vec2], epsilon: f64) -> Vec<bool> {
    let mut mask = vec![false; points.len()];
    if points.len() > 2 {
        simplify_range(points, 0, points.len() - 1, epsilon, &mut mask);
    }
    mask
}

/// 30 log-spaced values in `[10, 300]`.
pub fn default_grid() -> Vec<f64> {
    log_grid(10.0, 300.0, 30).expect("valid default grid")
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || count == 0 {
        return Err(Error::InvalidConfig(format!(
            "invalid epsilon grid: {count} values in [{lo}, {hi}]"
        )));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonScore {
    pub epsilon: f64,
    pub mean_error: f64,
    pub skipped: usize,
}

/// Scores every grid value on the training set and returns the best one
/// together with all scores. Values leaving fewer trajectories unscorable
/// win first; then the lower mean error; then the smaller epsilon.
pub fn select_epsilon(
    trajs: &[Trajectory],
    truths: &[Vec<bool>],
    grid: &[f64],
    criterion: ErrorCriterion,
) -> Result<(f64, Vec<EpsilonScore>)> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("epsilon grid is empty".into()));
    }
    if trajs.len() != truths.len() {
        return Err(Error::InvalidConfig(format!(
            "{} trajectories but {} ground truths",
            trajs.len(),
            truths.len()
        )));
    }
    for &e in grid {
        RdpParams::new(e)?;
    }
    let scores: Vec<EpsilonScore> = grid
        .par_iter()
        .map(|&epsilon| {
            let est: Vec<Vec<bool>> = trajs.iter().map(|t| rdp_points(t.points(), epsilon)).collect();
            let report = metrics::evaluate(trajs, &est, truths)?;
            Ok(EpsilonScore {
                epsilon,
                mean_error: report.value(criterion),
                skipped: report.skipped.len(),
            })
        })
        .collect::<Result<_>>()?;
    let best = scores
        .iter()
        .min_by(|a, b| {
            a.skipped
                .cmp(&b.skipped)
                .then(a.mean_error.total_cmp(&b.mean_error))
                .then(a.epsilon.total_cmp(&b.epsilon))
        })
        .expect("grid is non-empty")
        .epsilon;
    Ok((best, scores))
}
