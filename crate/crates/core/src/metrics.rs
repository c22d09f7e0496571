//! Positional and step errors between split masks, and k-fold cross-validation.
//!
//! For every split in one mask the nearest split (by index) in the other mask
//! is found; the positional error accumulates the distance between the two
//! trajectory points and the step error the index gap. Both directions are
//! summed and divided by the total number of splits.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{self, EmConfig};
use crate::error::{Error, Result};
use crate::hmm::{self, BaumWelchConfig, HmmModel, SegmentConfig};
use crate::rdp;
use crate::types::{MixtureModel, Segmentation, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCriterion {
    Positional,
    Step,
}

impl std::str::FromStr for ErrorCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positional" => Ok(Self::Positional),
            "step" => Ok(Self::Step),
            _ => Err(Error::InvalidConfig(format!("unknown error criterion `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Errors {
    pub positional: f64,
    pub step: f64,
}

/// Sums over the splits of `from` of the distance to the nearest split in `to`.
fn one_way(traj: &Trajectory, from: &[usize], to: &[usize]) -> (f64, f64) {
    let pts = traj.points();
    let mut pos = 0.0;
    let mut step = 0.0;
    for &i in from {
        // `to` is sorted, so the first minimum is the smaller index.
        let mut best = to[0];
        for &j in to {
            if j.abs_diff(i) < best.abs_diff(i) {
                best = j;
            }
        }
        pos += (pts[i] - pts[best]).norm();
        step += best.abs_diff(i) as f64;
    }
    (pos, step)
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Symmetrized errors of estimate `d` against ground truth `g`. `None` when
/// exactly one of the masks is empty; zero errors when both are.
pub fn calc_errors(traj: &Trajectory, d: &[bool], g: &[bool]) -> Result<Option<Errors>> {
    if d.len() != traj.len() || g.len() != traj.len() {
        return Err(Error::InvalidTrajectory {
            id: traj.id().to_string(),
            reason: format!(
                "mask lengths {} and {} differ from trajectory length {}",
                d.len(),
                g.len(),
                traj.len()
            ),
        });
    }
    let (est, gt) = (indices(d), indices(g));
    match (est.is_empty(), gt.is_empty()) {
        (true, true) => {
            return Ok(Some(Errors {
                positional: 0.0,
                step: 0.0,
            }))
        }
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let (p1, s1) = one_way(traj, &est, &gt);
    let (p2, s2) = one_way(traj, &gt, &est);
    let n = (est.len() + gt.len()) as f64;
    Ok(Some(Errors {
        positional: (p1 + p2) / n,
        step: (s1 + s2) / n,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryErrors {
    pub trajectory_id: String,
    pub positional: f64,
    pub step: f64,
    pub n_est: usize,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Mean over scored trajectories; 0 when none could be scored.
    pub e_pos: f64,
    pub e_step: f64,
    pub per_trajectory: Vec<TrajectoryErrors>,
    /// Trajectories with splits on exactly one side.
    pub skipped: Vec<String>,
}

impl ErrorReport {
    pub fn value(&self, criterion: ErrorCriterion) -> f64 {
        match criterion {
            ErrorCriterion::Positional => self.e_pos,
            ErrorCriterion::Step => self.e_step,
        }
    }
}

pub fn evaluate(trajs: &[Trajectory], estimates: &[Vec<bool>], truths: &[Vec<bool>]) -> Result<ErrorReport> {
    if trajs.len() != estimates.len() || trajs.len() != truths.len() {
        return Err(Error::InvalidConfig(format!(
            "{} trajectories, {} estimates, {} ground truths",
            trajs.len(),
            estimates.len(),
            truths.len()
        )));
    }
    let mut per_trajectory = Vec::new();
    let mut skipped = Vec::new();
    for ((t, d), g) in trajs.iter().zip(estimates).zip(truths) {
        match calc_errors(t, d, g)? {
            Some(e) => per_trajectory.push(TrajectoryErrors {
                trajectory_id: t.id().to_string(),
                positional: e.positional,
                step: e.step,
                n_est: d.iter().filter(|&&x| x).count(),
                n_gt: g.iter().filter(|&&x| x).count(),
            }),
            None => skipped.push(t.id().to_string()),
        }
    }
    let n = per_trajectory.len();
    let mean = |f: fn(&TrajectoryErrors) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_trajectory.iter().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(ErrorReport {
        e_pos: mean(|e| e.positional),
        e_step: mean(|e| e.step),
        per_trajectory,
        skipped,
    })
}

/// A segmentation method that can be trained on one part of a corpus and
/// applied to another.
pub trait Segmenter: Sync {
    type Trained: Send + Sync;

    fn name(&self) -> String;

    fn train(&self, trajs: &[Trajectory], truths: &[Vec<bool>]) -> Result<Self::Trained>;

    fn predict(&self, trained: &Self::Trained, trajs: &[Trajectory]) -> Result<Vec<Vec<bool>>>;

    /// A scalar summary of the trained state, reported per fold.
    fn parameter(&self, _trained: &Self::Trained) -> Option<f64> {
        None
    }
}

/// RDP with epsilon chosen on the training folds.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpMethod {
    pub grid: Vec<f64>,
    pub criterion: ErrorCriterion,
}

impl Segmenter for RdpMethod {
    type Trained = f64;

    fn name(&self) -> String {
        "rdp".into()
    }

    fn train(&self, trajs: &[Trajectory], truths: &[Vec<bool>]) -> Result<f64> {
        Ok(rdp::select_epsilon(trajs, truths, &self.grid, self.criterion)?.0)
    }

    fn predict(&self, eps: &f64, trajs: &[Trajectory]) -> Result<Vec<Vec<bool>>> {
        Ok(trajs.iter().map(|t| rdp::rdp_points(t.points(), *eps)).collect())
    }

    fn parameter(&self, eps: &f64) -> Option<f64> {
        Some(*eps)
    }
}

/// Agent mixture by EM followed by Baum-Welch; ground truth is not used in training.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentHmmMethod {
    pub em: EmConfig,
    pub baum_welch: BaumWelchConfig,
    pub segment: SegmentConfig,
}

impl Segmenter for AgentHmmMethod {
    type Trained = (MixtureModel, HmmModel);

    fn name(&self) -> String {
        format!("{}+hmm", self.em.variant)
    }

    fn train(&self, trajs: &[Trajectory], _truths: &[Vec<bool>]) -> Result<Self::Trained> {
        let (fit, bw) = train_pipeline(trajs, &self.em, &self.baum_welch, &self.segment)?;
        Ok((fit.model, bw.hmm))
    }

    fn predict(&self, trained: &Self::Trained, trajs: &[Trajectory]) -> Result<Vec<Vec<bool>>> {
        let segs = hmm::segment_corpus(trajs, &trained.0, &trained.1, &self.em, &self.segment)?;
        Ok(segs.into_iter().map(|s| s.split_mask).collect())
    }
}

/// EM on the corpus, then Baum-Welch on the windowed MAP states.
pub fn train_pipeline(
    trajs: &[Trajectory],
    em_cfg: &EmConfig,
    bw_cfg: &BaumWelchConfig,
    seg_cfg: &SegmentConfig,
) -> Result<(em::FitResult, hmm::BaumWelchResult)> {
    let fit = em::fit(trajs, em_cfg)?;
    let windows = hmm::windows_for_corpus(trajs, &fit.model, em_cfg, seg_cfg)?;
    let bw = hmm::baum_welch(&windows, &fit.model, bw_cfg)?;
    Ok((fit, bw))
}

/// Precomputed split masks looked up by trajectory id; training is a no-op.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedSegmentation {
    pub name: String,
    pub masks: HashMap<String, Vec<bool>>,
    pub parameter: Option<f64>,
}

impl FixedSegmentation {
    pub fn new(name: impl Into<String>, segs: &[Segmentation], parameter: Option<f64>) -> Self {
        Self {
            name: name.into(),
            masks: segs
                .iter()
                .map(|s| (s.trajectory_id.clone(), s.split_mask.clone()))
                .collect(),
            parameter,
        }
    }
}

impl Segmenter for FixedSegmentation {
    type Trained = ();

    fn name(&self) -> String {
        self.name.clone()
    }

    fn train(&self, _trajs: &[Trajectory], _truths: &[Vec<bool>]) -> Result<()> {
        Ok(())
    }

    fn predict(&self, _trained: &(), trajs: &[Trajectory]) -> Result<Vec<Vec<bool>>> {
        trajs
            .iter()
            .map(|t| {
                self.masks.get(t.id()).cloned().ok_or_else(|| {
                    Error::Format(format!("no segmentation for trajectory `{}`", t.id()))
                })
            })
            .collect()
    }

    fn parameter(&self, _trained: &()) -> Option<f64> {
        self.parameter
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_ids: Vec<String>,
    pub report: Option<ErrorReport>,
    pub parameter: Option<f64>,
    /// Set when training or prediction failed.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 with fewer than two folds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub method: String,
    pub folds: Vec<FoldReport>,
    pub positional: MeanStd,
    pub step: MeanStd,
    pub parameter: Option<MeanStd>,
}

/// Fold of every trajectory: a seeded shuffle, then position modulo `folds`.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

pub fn cross_validate<S: Segmenter>(
    method: &S,
    trajs: &[Trajectory],
    truths: &[Vec<bool>],
    folds: usize,
    seed: u64,
) -> Result<CvReport> {
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {folds}")));
    }
    if trajs.len() < folds {
        return Err(Error::EmptyCorpus(format!("{} trajectories for {folds} folds", trajs.len())));
    }
    if trajs.len() != truths.len() {
        return Err(Error::InvalidConfig(format!(
            "{} trajectories but {} ground truths",
            trajs.len(),
            truths.len()
        )));
    }
    let assignment = fold_assignment(trajs.len(), folds, seed);
    let reports: Vec<FoldReport> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let pick = |test: bool| -> (Vec<Trajectory>, Vec<Vec<bool>>) {
                assignment
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| (a == f) == test)
                    .map(|(i, _)| (trajs[i].clone(), truths[i].clone()))
                    .unzip()
            };
            let (train, train_gt) = pick(false);
            let (test, test_gt) = pick(true);
            let test_ids = test.iter().map(|t| t.id().to_string()).collect();
            let outcome = method.train(&train, &train_gt).and_then(|trained| {
                let est = method.predict(&trained, &test)?;
                let report = evaluate(&test, &est, &test_gt)?;
                Ok((report, method.parameter(&trained)))
            });
            match outcome {
                Ok((report, parameter)) => FoldReport {
                    fold: f,
                    test_ids,
                    report: Some(report),
                    parameter,
                    failure: None,
                },
                Err(e) => FoldReport {
                    fold: f,
                    test_ids,
                    report: None,
                    parameter: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    let ok: Vec<&ErrorReport> = reports.iter().filter_map(|r| r.report.as_ref()).collect();
    let params: Vec<f64> = reports.iter().filter_map(|r| r.parameter).collect();
    Ok(CvReport {
        method: method.name(),
        positional: MeanStd::of(&ok.iter().map(|r| r.e_pos).collect::<Vec<_>>()),
        step: MeanStd::of(&ok.iter().map(|r| r.e_step).collect::<Vec<_>>()),
        parameter: if params.is_empty() {
            None
        } else {
            Some(MeanStd::of(&params))
        },
        folds: reports,
    })
}
