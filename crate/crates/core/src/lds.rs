//! Linear-Gaussian filtering and smoothing over padded state sequences.
//!
//! A hidden tuple `(z, t_s, t_e)` extends the `tau + 1` observed points with
//! `t_s` unobserved states before and `t_e` after. The padded sequence has
//! `t_s + tau + 1 + t_e` states; index `i` of the sequence is time `i - t_s`.
//!
//! The first padded state gets a Gaussian prior, the real observations attach
//! to padded indices `t_s ..= t_s + tau`, and an optional Gaussian
//! pseudo-observation attaches to the final padded state. With the agent's
//! beliefs as priors this is the start/goal-aware smoother; the log-likelihood
//! is the prediction-error decomposition over every update.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat2, Vec2, FILTER_FLOOR};
use crate::types::{AgentModel, BeliefParams, DynamicsParams, HiddenTuple, Trajectory};

/// Prior variance used for the start state when the beliefs are ignored.
pub const DIFFUSE_VARIANCE: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrior {
    pub mean: Vec2,
    pub cov: Mat2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmootherPriors {
    /// Prior on the first padded state.
    pub start: GaussianPrior,
    /// Pseudo-observation of the last padded state.
    pub end: Option<GaussianPrior>,
}

impl SmootherPriors {
    pub fn from_belief(belief: &BeliefParams) -> Self {
        Self {
            start: GaussianPrior {
                mean: belief.mu_s,
                cov: belief.phi_s,
            },
            end: Some(GaussianPrior {
                mean: belief.mu_e,
                cov: belief.phi_e,
            }),
        }
    }

    /// Broad prior centred on the first observation and no end constraint.
    pub fn belief_free(traj: &Trajectory) -> Self {
        Self {
            start: GaussianPrior {
                mean: traj.first(),
                cov: Mat2::identity() * DIFFUSE_VARIANCE,
            },
            end: None,
        }
    }
}

/// Posterior means over a padded sequence plus the observation likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedStates {
    pub hidden: HiddenTuple,
    /// Posterior means, padded index order (time `-t_s ..= tau + t_e`).
    pub states: Vec<Vec2>,
    /// Posterior covariances; empty when smoothing ran in means-only mode.
    pub state_covs: Vec<Mat2>,
    /// `cross_covs[i] = Cov(x_{i+1}, x_i | y)`; empty in means-only mode.
    pub cross_covs: Vec<Mat2>,
    /// `log p(y | h)`, including the end pseudo-observation when present.
    pub log_likelihood: f64,
}

impl SmoothedStates {
    pub fn padded_len(&self) -> usize {
        self.states.len()
    }

    pub fn t_s(&self) -> usize {
        self.hidden.t_s
    }

    pub fn t_e(&self) -> usize {
        self.hidden.t_e
    }

    /// Smoothed start state `x_{-t_s}`.
    pub fn start_state(&self) -> Vec2 {
        self.states[0]
    }

    /// Smoothed end state `x_{tau + t_e}`.
    pub fn end_state(&self) -> Vec2 {
        self.states[self.states.len() - 1]
    }

    /// States aligned with the observations, `x_0 ..= x_tau`.
    pub fn observed(&self) -> &[Vec2] {
        let end = self.states.len() - self.hidden.t_e;
        &self.states[self.hidden.t_s..end]
    }

    /// The padded sequence without its two endpoint states.
    pub fn interior(&self) -> &[Vec2] {
        let n = self.states.len();
        if n <= 2 {
            &self.states[0..0]
        } else {
            &self.states[1..n - 1]
        }
    }

    pub fn num_transitions(&self) -> usize {
        self.states.len() - 1
    }
}

/// Applies the noise-free dynamics `n` times.
pub fn propagate(agent: &AgentModel, x: Vec2, n: usize) -> Vec2 {
    propagate_dynamics(&agent.dynamics, x, n)
}

pub fn propagate_dynamics(dynamics: &DynamicsParams, mut x: Vec2, n: usize) -> Vec2 {
    for _ in 0..n {
        x = dynamics.propagate(&x);
    }
    x
}

/// Smooths `traj` under `agent` for the padding in `h`, using the agent's
/// beliefs as start prior and end pseudo-observation.
pub fn smooth(traj: &Trajectory, agent: &AgentModel, h: HiddenTuple) -> Result<SmoothedStates> {
    let priors = SmootherPriors::from_belief(&agent.belief);
    run(traj, &agent.dynamics, &priors, h, true)
}

/// Like [`smooth`] with caller-chosen priors.
pub fn smooth_with_priors(
    traj: &Trajectory,
    dynamics: &DynamicsParams,
    priors: &SmootherPriors,
    h: HiddenTuple,
) -> Result<SmoothedStates> {
    run(traj, dynamics, priors, h, true)
}

/// Means and likelihood only; `state_covs` and `cross_covs` are left empty.
pub fn smooth_means(
    traj: &Trajectory,
    dynamics: &DynamicsParams,
    priors: &SmootherPriors,
    h: HiddenTuple,
) -> Result<SmoothedStates> {
    run(traj, dynamics, priors, h, false)
}

struct Filtered {
    mean: Vec2,
    cov: Mat2,
}

fn update(
    mean: &mut Vec2,
    cov: &mut Mat2,
    obs: &Vec2,
    noise: &Mat2,
    step: usize,
    loglik: &mut f64,
) -> Result<()> {
    let s = *cov + noise;
    let s_inv = linalg::inverse(&s).ok_or(Error::NonSpdInnovation { step })?;
    let innovation = obs - *mean;
    let ll = linalg::gaussian_logpdf(obs, mean, &s).ok_or(Error::NonSpdInnovation { step })?;
    *loglik += ll;
    let gain = *cov * s_inv;
    *mean += gain * innovation;
    let i_minus_k = Mat2::identity() - gain;
    let joseph = i_minus_k * *cov * i_minus_k.transpose() + gain * noise * gain.transpose();
    *cov = linalg::project_spd(&joseph, FILTER_FLOOR);
    Ok(())
}

fn run(
    traj: &Trajectory,
    dynamics: &DynamicsParams,
    priors: &SmootherPriors,
    h: HiddenTuple,
    with_covs: bool,
) -> Result<SmoothedStates> {
    let tau = traj.last_index();
    let len = h.t_s + tau + 1 + h.t_e;
    let obs = traj.points();
    let a = dynamics.a;
    let a_t = a.transpose();

    let mut filtered: Vec<Filtered> = Vec::with_capacity(len);
    let mut predicted: Vec<Filtered> = Vec::with_capacity(len);
    let mut loglik = 0.0;
    let mut mean = priors.start.mean;
    let mut cov = linalg::project_spd(&priors.start.cov, FILTER_FLOOR);

    for i in 0..len {
        if i > 0 {
            mean = dynamics.propagate(&mean);
            cov = linalg::project_spd(&(a * cov * a_t + dynamics.q), FILTER_FLOOR);
        }
        predicted.push(Filtered { mean, cov });
        if i >= h.t_s && i <= h.t_s + tau {
            update(&mut mean, &mut cov, &obs[i - h.t_s], &dynamics.r, i, &mut loglik)?;
        }
        if i == len - 1 {
            if let Some(end) = &priors.end {
                update(&mut mean, &mut cov, &end.mean, &end.cov, i, &mut loglik)?;
            }
        }
        filtered.push(Filtered { mean, cov });
    }

    // Rauch-Tung-Striebel backward pass.
    let mut states = vec![Vec2::zeros(); len];
    let (mut covs, mut cross) = if with_covs {
        (vec![Mat2::zeros(); len], vec![Mat2::zeros(); len - 1])
    } else {
        (Vec::new(), Vec::new())
    };
    states[len - 1] = filtered[len - 1].mean;
    if with_covs {
        covs[len - 1] = filtered[len - 1].cov;
    }
    let mut next_cov = filtered[len - 1].cov;
    for i in (0..len - 1).rev() {
        let pred = &predicted[i + 1];
        let pred_inv = linalg::inverse(&pred.cov).ok_or(Error::NonSpdInnovation { step: i + 1 })?;
        let gain = filtered[i].cov * a_t * pred_inv;
        states[i] = filtered[i].mean + gain * (states[i + 1] - pred.mean);
        if with_covs {
            cross[i] = next_cov * gain.transpose();
            let c = filtered[i].cov + gain * (next_cov - pred.cov) * gain.transpose();
            let c = linalg::project_spd(&c, FILTER_FLOOR);
            covs[i] = c;
            next_cov = c;
        }
    }

    if !loglik.is_finite() {
        return Err(Error::NonSpdInnovation { step: len - 1 });
    }

    Ok(SmoothedStates {
        hidden: h,
        states,
        state_covs: covs,
        cross_covs: cross,
        log_likelihood: loglik,
    })
}
