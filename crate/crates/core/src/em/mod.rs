//! Mixture-of-dynamic-agents estimation by EM.
//!
//! Each trajectory is explained by a hidden tuple `h = (z, t_s, t_e)`. The
//! E-step enumerates every tuple up to the configured padding cap, smooths the
//! trajectory under it and weighs it by the mixture weight, Poisson padding
//! priors, start/goal belief densities of the smoothed endpoints and the
//! observation likelihood. The M-step re-estimates every agent from the
//! weighted smoothed states in closed form.

mod estep;
mod init;
mod mstep;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{MixtureModel, Trajectory};

pub use estep::{
    e_step, e_step_trajectory, CachedStates, EStep, Responsibility, TrajectoryPosterior,
};
pub use init::{initialize, kmeans, KMeans};
pub use mstep::{m_step, m_step_dynamics, m_step_rest, RestParams, LAMBDA_FLOOR};

/// Which factors enter the tuple weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EStepVariant {
    /// Poisson padding priors and Gaussian belief factors.
    Imda,
    /// Belief factors only; padding lengths uniform.
    ImdaNoPoisson,
    /// Poisson priors only; no belief factors.
    ImdaNoGauss,
    /// Mixture weight and observation likelihood only, uniform padding.
    OriginalMda,
}

impl EStepVariant {
    pub const ALL: [EStepVariant; 4] = [
        EStepVariant::Imda,
        EStepVariant::ImdaNoPoisson,
        EStepVariant::ImdaNoGauss,
        EStepVariant::OriginalMda,
    ];

    pub fn uses_poisson(self) -> bool {
        matches!(self, EStepVariant::Imda | EStepVariant::ImdaNoGauss)
    }

    pub fn uses_belief_factors(self) -> bool {
        matches!(self, EStepVariant::Imda | EStepVariant::ImdaNoPoisson)
    }

    pub fn name(self) -> &'static str {
        match self {
            EStepVariant::Imda => "imda",
            EStepVariant::ImdaNoPoisson => "imda_no_poisson",
            EStepVariant::ImdaNoGauss => "imda_no_gauss",
            EStepVariant::OriginalMda => "original_mda",
        }
    }
}

impl std::fmt::Display for EStepVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EStepVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EStepVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown E-step variant `{s}`")))
    }
}

/// How the padded states are smoothed inside the E-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmootherMode {
    /// Start belief as prior, goal belief as terminal pseudo-observation.
    BeliefConditioned,
    /// Diffuse start prior centred on the first observation, no goal term.
    BeliefFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub num_agents: usize,
    /// Largest `t_s` / `t_e` enumerated.
    pub t_cap: usize,
    pub max_iters: usize,
    /// Stop once the observed-data log-likelihood improves by less than this.
    pub loglik_tol: f64,
    pub variant: EStepVariant,
    /// `None` picks the variant's default, see [`EmConfig::smoother_mode`].
    #[serde(default)]
    pub smoother: Option<SmootherMode>,
    pub rng_seed: u64,
    /// Tuples whose responsibility falls below this are left out of the
    /// state cache that feeds the M-step.
    pub cache_min_weight: f64,
}

impl EmConfig {
    pub fn new(num_agents: usize) -> Self {
        Self {
            num_agents,
            t_cap: 20,
            max_iters: 50,
            loglik_tol: 1e-4,
            variant: EStepVariant::Imda,
            smoother: None,
            rng_seed: 0,
            cache_min_weight: 1e-10,
        }
    }

    pub fn with_variant(mut self, variant: EStepVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_t_cap(mut self, t_cap: usize) -> Self {
        self.t_cap = t_cap;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_smoother(mut self, mode: SmootherMode) -> Self {
        self.smoother = Some(mode);
        self
    }

    /// The original variant has no notion of beliefs in its filter; every
    /// improved variant smooths with the beliefs attached.
    pub fn smoother_mode(&self) -> SmootherMode {
        self.smoother.unwrap_or(match self.variant {
            EStepVariant::OriginalMda => SmootherMode::BeliefFree,
            _ => SmootherMode::BeliefConditioned,
        })
    }

    pub fn num_tuples(&self) -> usize {
        self.num_agents * (self.t_cap + 1) * (self.t_cap + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_agents == 0 {
            return Err(Error::InvalidConfig("num_agents must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.loglik_tol >= 0.0) {
            return Err(Error::InvalidConfig("loglik_tol must be non-negative".into()));
        }
        if !(self.cache_min_weight >= 0.0 && self.cache_min_weight < 1.0) {
            return Err(Error::InvalidConfig("cache_min_weight must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: MixtureModel,
    /// Observed-data log-likelihood after initialization and after every M-step.
    pub trace: Vec<f64>,
    /// The E-step of the returned model.
    pub estep: EStep,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn responsibilities(&self) -> &[Responsibility] {
        &self.estep.responsibilities
    }
}

/// Initializes with k-means and runs EM to convergence.
pub fn fit(trajs: &[Trajectory], cfg: &EmConfig) -> Result<FitResult> {
    cfg.validate()?;
    if trajs.len() < cfg.num_agents {
        return Err(Error::EmptyCorpus(format!(
            "{} trajectories for {} agents",
            trajs.len(),
            cfg.num_agents
        )));
    }
    let init = initialize(trajs, cfg)?;
    fit_from(trajs, init, cfg)
}

/// Runs EM from a given starting model.
pub fn fit_from(trajs: &[Trajectory], init: MixtureModel, cfg: &EmConfig) -> Result<FitResult> {
    cfg.validate()?;
    if init.num_agents() != cfg.num_agents {
        return Err(Error::InvalidConfig(format!(
            "model has {} agents, configuration expects {}",
            init.num_agents(),
            cfg.num_agents
        )));
    }
    let mut model = init;
    let mut est = e_step(trajs, &model, cfg)?;
    let mut trace = vec![est.log_likelihood];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        let next_model = m_step(trajs, &est, &model, cfg)?;
        let next = e_step(trajs, &next_model, cfg)?;
        iterations += 1;
        trace.push(next.log_likelihood);
        let gain = next.log_likelihood - est.log_likelihood;
        model = next_model;
        est = next;
        if gain < cfg.loglik_tol {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        model,
        trace,
        estep: est,
        iterations,
        converged,
    })
}
