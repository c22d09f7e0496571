use rayon::prelude::*;

use super::{EmConfig, SmootherMode};
use crate::error::{Error, Result};
use crate::lds::{self, SmootherPriors};
use crate::linalg::{self, Mat2, Vec2};
use crate::types::{HiddenTuple, MixtureModel, Trajectory};

/// Posterior weights of every enumerated hidden tuple for one trajectory.
///
/// Tuples are stored densely in `(z, t_s, t_e)` lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibility {
    pub trajectory: usize,
    pub num_agents: usize,
    pub t_cap: usize,
    pub weights: Vec<f64>,
    /// `log sum_h w(h)` of the unnormalized tuple weights.
    pub log_evidence: f64,
}

impl Responsibility {
    fn side(&self) -> usize {
        self.t_cap + 1
    }

    pub fn index(&self, h: HiddenTuple) -> usize {
        (h.z * self.side() + h.t_s) * self.side() + h.t_e
    }

    pub fn tuple(&self, index: usize) -> HiddenTuple {
        let side = self.side();
        HiddenTuple::new(index / (side * side), (index / side) % side, index % side)
    }

    pub fn weight(&self, h: HiddenTuple) -> f64 {
        self.weights[self.index(h)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (HiddenTuple, f64)> + '_ {
        self.weights.iter().enumerate().map(|(i, &w)| (self.tuple(i), w))
    }

    /// Most probable tuple; the first in enumeration order on ties.
    pub fn map_tuple(&self) -> HiddenTuple {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        self.tuple(best)
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// Posterior over agents, summed over padding lengths.
    pub fn agent_posterior(&self) -> Vec<f64> {
        let block = self.side() * self.side();
        self.weights.chunks(block).map(|c| c.iter().sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Smoothed states of one (trajectory, tuple) cell together with its weight.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedStates {
    pub trajectory: usize,
    pub hidden: HiddenTuple,
    pub gamma: f64,
    /// Padded posterior means, time `-t_s ..= tau + t_e`.
    pub states: Vec<Vec2>,
    /// Posterior covariances per state; empty means point estimates.
    pub covs: Vec<Mat2>,
    /// `Cov(x_{i+1}, x_i)`; empty means point estimates.
    pub cross_covs: Vec<Mat2>,
}

impl CachedStates {
    /// A cell whose states carry no uncertainty.
    pub fn point(trajectory: usize, hidden: HiddenTuple, gamma: f64, states: Vec<Vec2>) -> Self {
        Self {
            trajectory,
            hidden,
            gamma,
            states,
            covs: Vec::new(),
            cross_covs: Vec::new(),
        }
    }

    pub fn cov(&self, i: usize) -> Mat2 {
        self.covs.get(i).copied().unwrap_or_else(Mat2::zeros)
    }

    pub fn cross_cov(&self, i: usize) -> Mat2 {
        self.cross_covs.get(i).copied().unwrap_or_else(Mat2::zeros)
    }

    pub fn start_state(&self) -> Vec2 {
        self.states[0]
    }

    pub fn end_state(&self) -> Vec2 {
        self.states[self.states.len() - 1]
    }

    pub fn observed(&self) -> &[Vec2] {
        &self.states[self.hidden.t_s..self.states.len() - self.hidden.t_e]
    }
}

/// Everything the E-step of one trajectory produces.
#[derive(Debug, Clone)]
pub struct TrajectoryPosterior {
    pub responsibility: Responsibility,
    /// Cells kept for the M-step, in tuple enumeration order.
    pub cells: Vec<CachedStates>,
    /// Unnormalized log weights, same order as `responsibility.weights`.
    pub log_weights: Vec<f64>,
}

impl TrajectoryPosterior {
    pub fn map_cell(&self) -> &CachedStates {
        let h = self.responsibility.map_tuple();
        self.cells
            .iter()
            .find(|c| c.hidden == h)
            .expect("the MAP tuple is always cached")
    }
}

#[derive(Debug, Clone)]
pub struct EStep {
    pub responsibilities: Vec<Responsibility>,
    /// Retained cells across all trajectories, ordered by trajectory then tuple.
    pub cache: Vec<CachedStates>,
    /// Observed-data log-likelihood, `sum_k log sum_h w_k(h)`.
    pub log_likelihood: f64,
}

impl EStep {
    pub fn map_cell(&self, trajectory: usize) -> &CachedStates {
        let h = self.responsibilities[trajectory].map_tuple();
        self.cache
            .iter()
            .find(|c| c.trajectory == trajectory && c.hidden == h)
            .expect("the MAP tuple is always cached")
    }

    pub fn map_labels(&self) -> Vec<usize> {
        self.responsibilities.iter().map(|r| r.map_tuple().z).collect()
    }
}

/// Evaluates and normalizes every tuple for one trajectory.
pub fn e_step_trajectory(
    traj: &Trajectory,
    index: usize,
    model: &MixtureModel,
    cfg: &EmConfig,
) -> Result<TrajectoryPosterior> {
    let side = cfg.t_cap + 1;
    let m_count = model.num_agents();
    let total = m_count * side * side;
    let mode = cfg.smoother_mode();
    let uniform_padding = -2.0 * (side as f64).ln();

    let priors_of = |z: usize| -> SmootherPriors {
        match mode {
            SmootherMode::BeliefConditioned => SmootherPriors::from_belief(&model.agents[z].belief),
            SmootherMode::BeliefFree => SmootherPriors::belief_free(traj),
        }
    };

    let mut log_weights = Vec::with_capacity(total);
    for (z, agent) in model.agents.iter().enumerate() {
        let priors = priors_of(z);
        let log_pi = agent.pi.ln();
        for t_s in 0..side {
            for t_e in 0..side {
                let h = HiddenTuple::new(z, t_s, t_e);
                let s = lds::smooth_means(traj, &agent.dynamics, &priors, h)?;
                let mut lw = log_pi + s.log_likelihood;
                if cfg.variant.uses_poisson() {
                    lw += linalg::log_poisson(t_s as u32, agent.lambda_s)
                        + linalg::log_poisson(t_e as u32, agent.lambda_e);
                } else {
                    lw += uniform_padding;
                }
                if cfg.variant.uses_belief_factors() {
                    let b = &agent.belief;
                    let start = linalg::gaussian_logpdf(&s.start_state(), &b.mu_s, &b.phi_s);
                    let end = linalg::gaussian_logpdf(&s.end_state(), &b.mu_e, &b.phi_e);
                    match (start, end) {
                        (Some(a), Some(e)) => lw += a + e,
                        _ => {
                            return Err(Error::InvalidModel(format!(
                                "agent {z}: belief covariance is not positive definite"
                            )))
                        }
                    }
                }
                log_weights.push(lw);
            }
        }
    }

    let log_evidence = linalg::log_sum_exp(&log_weights);
    if !log_evidence.is_finite() {
        return Err(Error::WeightUnderflow {
            trajectory: traj.id().to_string(),
        });
    }
    let weights: Vec<f64> = log_weights.iter().map(|lw| (lw - log_evidence).exp()).collect();
    let responsibility = Responsibility {
        trajectory: index,
        num_agents: m_count,
        t_cap: cfg.t_cap,
        weights,
        log_evidence,
    };
    // Second pass: full moments for the retained cells only.
    let best = responsibility.index(responsibility.map_tuple());
    let mut cells = Vec::new();
    for (i, &gamma) in responsibility.weights.iter().enumerate() {
        if i != best && gamma < cfg.cache_min_weight {
            continue;
        }
        let h = responsibility.tuple(i);
        let s = lds::smooth_with_priors(traj, &model.agents[h.z].dynamics, &priors_of(h.z), h)?;
        cells.push(CachedStates {
            trajectory: index,
            hidden: h,
            gamma,
            states: s.states,
            covs: s.state_covs,
            cross_covs: s.cross_covs,
        });
    }
    Ok(TrajectoryPosterior {
        responsibility,
        cells,
        log_weights,
    })
}

/// E-step over a corpus. Trajectories are processed in parallel; results are
/// gathered in input order, so the output does not depend on thread count.
pub fn e_step(trajs: &[Trajectory], model: &MixtureModel, cfg: &EmConfig) -> Result<EStep> {
    if model.num_agents() == 0 {
        return Err(Error::InvalidModel("mixture has no agents".into()));
    }
    if trajs.is_empty() {
        return Err(Error::EmptyCorpus("no trajectories for the E-step".into()));
    }
    let posts: Vec<TrajectoryPosterior> = trajs
        .par_iter()
        .enumerate()
        .map(|(k, t)| e_step_trajectory(t, k, model, cfg))
        .collect::<Result<_>>()?;
    let mut responsibilities = Vec::with_capacity(posts.len());
    let mut cache = Vec::new();
    let mut log_likelihood = 0.0;
    for p in posts {
        log_likelihood += p.responsibility.log_evidence;
        responsibilities.push(p.responsibility);
        cache.extend(p.cells);
    }
    Ok(EStep {
        responsibilities,
        cache,
        log_likelihood,
    })
}
