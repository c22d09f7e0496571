//! Domain types shared by every stage of the pipeline.
//!
//! Coordinates are scene pixels and time is the integer sample index; nothing
//! is rescaled internally. Agent indices are 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat2, Vec2, COVARIANCE_FLOOR};

/// An observed pedestrian track: `points[t]` is the position at step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    id: String,
    #[serde(with = "linalg::serde_points")]
    points: Vec<Vec2>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, points: Vec<Vec2>) -> Result<Self> {
        let id = id.into();
        if points.len() < 2 {
            return Err(Error::InvalidTrajectory {
                id,
                reason: format!("{} point(s), at least 2 required", points.len()),
            });
        }
        if let Some(i) = points.iter().position(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::InvalidTrajectory {
                id,
                reason: format!("non-finite coordinate at index {i}"),
            });
        }
        Ok(Self { id, points })
    }

    pub fn from_xy(id: impl Into<String>, xy: &[(f64, f64)]) -> Result<Self> {
        Self::new(id, xy.iter().map(|&(x, y)| Vec2::new(x, y)).collect())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the last observation (the trajectory has `last_index() + 1` points).
    pub fn last_index(&self) -> usize {
        self.points.len() - 1
    }

    pub fn first(&self) -> Vec2 {
        self.points[0]
    }

    pub fn last(&self) -> Vec2 {
        self.points[self.points.len() - 1]
    }

    pub fn steps(&self) -> impl Iterator<Item = Vec2> + '_ {
        self.points.windows(2).map(|w| w[1] - w[0])
    }
}

/// Affine-Gaussian motion model `x_t = A x_{t-1} + b + w`, `y_t = x_t + v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    #[serde(with = "linalg::serde_mat2")]
    pub a: Mat2,
    #[serde(with = "linalg::serde_vec2")]
    pub b: Vec2,
    /// State noise covariance.
    #[serde(with = "linalg::serde_mat2")]
    pub q: Mat2,
    /// Observation noise covariance.
    #[serde(with = "linalg::serde_mat2")]
    pub r: Mat2,
}

impl DynamicsParams {
    pub fn propagate(&self, x: &Vec2) -> Vec2 {
        self.a * x + self.b
    }
}

/// Gaussian beliefs over where an agent's paths start and end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefParams {
    #[serde(with = "linalg::serde_vec2")]
    pub mu_s: Vec2,
    #[serde(with = "linalg::serde_mat2")]
    pub phi_s: Mat2,
    #[serde(with = "linalg::serde_vec2")]
    pub mu_e: Vec2,
    #[serde(with = "linalg::serde_mat2")]
    pub phi_e: Mat2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentModel {
    pub dynamics: DynamicsParams,
    pub belief: BeliefParams,
    /// Mixture weight.
    pub pi: f64,
    /// Poisson rate of unobserved steps before the first observation.
    pub lambda_s: f64,
    /// Poisson rate of unobserved steps after the last observation.
    pub lambda_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub agents: Vec<AgentModel>,
}

impl MixtureModel {
    pub fn new(agents: Vec<AgentModel>) -> Self {
        Self { agents }
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.pi).collect()
    }

    /// Returns the model, or `Error::InvalidModel` listing every violation.
    pub fn validated(self) -> Result<Self> {
        let violations = validate_model(&self);
        if violations.is_empty() {
            Ok(self)
        } else {
            let msg: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidModel(msg.join("; ")))
        }
    }
}

/// Unobserved explanation of one trajectory: which agent, and how many
/// unobserved steps precede and follow the observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HiddenTuple {
    pub z: usize,
    pub t_s: usize,
    pub t_e: usize,
}

impl HiddenTuple {
    pub fn new(z: usize, t_s: usize, t_e: usize) -> Self {
        Self { z, t_s, t_e }
    }
}

/// Per-point agent labels and the derived split mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub trajectory_id: String,
    pub labels: Vec<usize>,
    pub split_mask: Vec<bool>,
}

impl Segmentation {
    pub fn from_labels(trajectory_id: impl Into<String>, labels: Vec<usize>) -> Self {
        let split_mask = split_mask_from_labels(&labels);
        Self {
            trajectory_id: trajectory_id.into(),
            labels,
            split_mask,
        }
    }

    /// Labels counting segments from 0, incremented at every split.
    pub fn from_split_mask(trajectory_id: impl Into<String>, split_mask: Vec<bool>) -> Self {
        let mut label = 0;
        let labels = split_mask
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                if d && i > 0 {
                    label += 1;
                }
                label
            })
            .collect();
        Self::from_labels(trajectory_id, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_splits(&self) -> usize {
        self.split_mask.iter().filter(|&&d| d).count()
    }
}

pub fn split_mask_from_labels(labels: &[usize]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        mask.push(i > 0 && labels[i] != labels[i - 1]);
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoAgents,
    WeightSum { sum: f64 },
    WeightRange { agent: usize, pi: f64 },
    NonPositiveRate { agent: usize, name: &'static str, value: f64 },
    NotPositiveDefinite { agent: usize, name: &'static str, min_eigenvalue: f64 },
    NotSymmetric { agent: usize, name: &'static str },
    NonFinite { agent: usize, name: &'static str },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NoAgents => write!(f, "mixture has no agents"),
            Violation::WeightSum { sum } => {
                write!(f, "mixture weights must sum to 1 (sum = {sum})")
            }
            Violation::WeightRange { agent, pi } => {
                write!(f, "agent {agent}: weight {pi} outside (0, 1]")
            }
            Violation::NonPositiveRate { agent, name, value } => {
                write!(f, "agent {agent}: {name} = {value} must be positive")
            }
            Violation::NotPositiveDefinite {
                agent,
                name,
                min_eigenvalue,
            } => write!(
                f,
                "agent {agent}: {name} must be symmetric positive definite with eigenvalues >= {COVARIANCE_FLOOR} (min eigenvalue {min_eigenvalue})"
            ),
            Violation::NotSymmetric { agent, name } => {
                write!(f, "agent {agent}: {name} must be symmetric")
            }
            Violation::NonFinite { agent, name } => {
                write!(f, "agent {agent}: {name} has non-finite entries")
            }
        }
    }
}

const WEIGHT_SUM_TOL: f64 = 1e-9;
// Relative slack for the eigenvalue floor, so a floored matrix passes after rounding.
const FLOOR_SLACK: f64 = 1e-9;

/// Checks every model invariant and reports all violations found.
pub fn validate_model(model: &MixtureModel) -> Vec<Violation> {
    let mut out = Vec::new();
    if model.agents.is_empty() {
        out.push(Violation::NoAgents);
        return out;
    }
    let sum: f64 = model.agents.iter().map(|a| a.pi).sum();
    if !((sum - 1.0).abs() <= WEIGHT_SUM_TOL) {
        out.push(Violation::WeightSum { sum });
    }
    for (m, agent) in model.agents.iter().enumerate() {
        if !(agent.pi > 0.0 && agent.pi <= 1.0) {
            out.push(Violation::WeightRange { agent: m, pi: agent.pi });
        }
        for (name, value) in [("lambda_s", agent.lambda_s), ("lambda_e", agent.lambda_e)] {
            if !(value > 0.0 && value.is_finite()) {
                out.push(Violation::NonPositiveRate { agent: m, name, value });
            }
        }
        let d = &agent.dynamics;
        let bl = &agent.belief;
        let finite_vecs = [("A", d.a.iter().all(|v| v.is_finite())),
            ("b", d.b.iter().all(|v| v.is_finite())),
            ("mu_s", bl.mu_s.iter().all(|v| v.is_finite())),
            ("mu_e", bl.mu_e.iter().all(|v| v.is_finite()))];
        for (name, ok) in finite_vecs {
            if !ok {
                out.push(Violation::NonFinite { agent: m, name });
            }
        }
        for (name, cov) in [("Q", &d.q), ("R", &d.r), ("Phi_s", &bl.phi_s), ("Phi_e", &bl.phi_e)] {
            if !cov.iter().all(|v| v.is_finite()) {
                out.push(Violation::NonFinite { agent: m, name });
                continue;
            }
            let scale = cov[(0, 1)].abs().max(cov[(1, 0)].abs()).max(1.0);
            if (cov[(0, 1)] - cov[(1, 0)]).abs() > 1e-12 * scale {
                out.push(Violation::NotSymmetric { agent: m, name });
            }
            let lo = linalg::min_eigenvalue(cov);
            if lo < COVARIANCE_FLOOR * (1.0 - FLOOR_SLACK) {
                out.push(Violation::NotPositiveDefinite {
                    agent: m,
                    name,
                    min_eigenvalue: lo,
                });
            }
        }
    }
    out
}
