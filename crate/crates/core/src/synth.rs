//! Sampling from the generative agent model.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), which produces the same
//! stream on every platform. Normal variates use the Box-Muller transform on
//! 53-bit uniforms and Poisson variates use Knuth's product method, so outputs
//! depend only on the seed. Trajectory `i` of a corpus draws from stream `i`
//! of the corpus seed, which makes parallel and serial generation identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat2, Vec2};
use crate::types::{AgentModel, HiddenTuple, MixtureModel, Trajectory};

pub struct SynthRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SynthRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.gen::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn gaussian(&mut self, mean: &Vec2, cov: &Mat2) -> Vec2 {
        let l = cholesky(cov);
        let n = Vec2::new(self.standard_normal(), self.standard_normal());
        mean + l * n
    }

    pub fn poisson(&mut self, lambda: f64) -> usize {
        if lambda <= 0.0 {
            return 0;
        }
        if lambda > 30.0 {
            let v = lambda + lambda.sqrt() * self.standard_normal();
            return v.round().max(0.0) as usize;
        }
        let limit = (-lambda).exp();
        let mut k = 0;
        let mut p = self.uniform();
        while p > limit {
            k += 1;
            p *= self.uniform();
        }
        k
    }

    /// Index drawn from unnormalized `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }
}

/// Lower Cholesky factor of a 2x2 covariance, floored to stay real.
fn cholesky(cov: &Mat2) -> Mat2 {
    let c = linalg::project_spd(cov, 1e-12);
    let l11 = c[(0, 0)].sqrt();
    let l21 = c[(1, 0)] / l11;
    let l22 = (c[(1, 1)] - l21 * l21).max(0.0).sqrt();
    Mat2::new(l11, 0.0, l21, l22)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rejection {
    /// Accept when the end state is within this many Mahalanobis units of the goal.
    pub k_sigma: f64,
    pub max_attempts: usize,
}

impl Default for Rejection {
    fn default() -> Self {
        Self {
            k_sigma: 3.0,
            max_attempts: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    /// Observed length range `[min_len, max_len]`, drawn uniformly per trajectory.
    pub min_len: usize,
    pub max_len: usize,
    pub rejection: Option<Rejection>,
}

impl SampleSpec {
    pub fn fixed(len: usize) -> Self {
        Self {
            min_len: len,
            max_len: len,
            rejection: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub trajectory: Trajectory,
    pub hidden: HiddenTuple,
    /// Full padded latent sequence, time `-t_s ..= tau + t_e`.
    pub latent: Vec<Vec2>,
    /// Mahalanobis distance of the final latent state from the goal belief.
    pub end_deviation: f64,
    pub accepted: bool,
}

fn mahalanobis(x: &Vec2, mean: &Vec2, cov: &Mat2) -> f64 {
    let d = x - mean;
    match linalg::inverse(cov) {
        Some(inv) => d.dot(&(inv * d)).max(0.0).sqrt(),
        None => f64::INFINITY,
    }
}

fn draw_once(
    agent: &AgentModel,
    z: usize,
    len: usize,
    id: &str,
    rng: &mut SynthRng,
) -> Result<SampledTrajectory> {
    let t_s = rng.poisson(agent.lambda_s);
    let t_e = rng.poisson(agent.lambda_e);
    let d = &agent.dynamics;
    let total = t_s + len + t_e;
    let mut latent = Vec::with_capacity(total);
    let mut x = rng.gaussian(&agent.belief.mu_s, &agent.belief.phi_s);
    latent.push(x);
    for _ in 1..total {
        let mean = d.propagate(&x);
        x = rng.gaussian(&mean, &d.q);
        latent.push(x);
    }
    let obs: Vec<Vec2> = latent[t_s..t_s + len]
        .iter()
        .map(|x| rng.gaussian(x, &d.r))
        .collect();
    let end_deviation = mahalanobis(&x, &agent.belief.mu_e, &agent.belief.phi_e);
    Ok(SampledTrajectory {
        trajectory: Trajectory::new(id, obs)?,
        hidden: HiddenTuple::new(z, t_s, t_e),
        latent,
        end_deviation,
        accepted: true,
    })
}

/// Draws padding lengths, a start state, the latent chain and the observations.
/// With rejection enabled, redraws until the end state is close to the goal;
/// `accepted` is false if every attempt failed (the last draw is returned).
pub fn sample_trajectory_with(
    agent: &AgentModel,
    z: usize,
    spec: &SampleSpec,
    id: &str,
    rng: &mut SynthRng,
) -> Result<SampledTrajectory> {
    if spec.min_len < 2 || spec.max_len < spec.min_len {
        return Err(Error::InvalidConfig(format!(
            "invalid length range [{}, {}]",
            spec.min_len, spec.max_len
        )));
    }
    let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    match spec.rejection {
        None => draw_once(agent, z, len, id, rng),
        Some(rej) => {
            let mut last = None;
            for _ in 0..rej.max_attempts.max(1) {
                let s = draw_once(agent, z, len, id, rng)?;
                if s.end_deviation <= rej.k_sigma {
                    return Ok(s);
                }
                last = Some(s);
            }
            let mut s = last.expect("at least one attempt");
            s.accepted = false;
            Ok(s)
        }
    }
}

pub fn sample_trajectory(
    agent: &AgentModel,
    spec: &SampleSpec,
    id: &str,
    seed: u64,
) -> Result<SampledTrajectory> {
    let mut rng = SynthRng::new(seed, 0);
    sample_trajectory_with(agent, 0, spec, id, &mut rng)
}

/// `count` trajectories with agents drawn from the mixture weights.
/// Trajectory `i` is named `{prefix}{i}`.
pub fn sample_corpus(
    model: &MixtureModel,
    count: usize,
    spec: &SampleSpec,
    prefix: &str,
    seed: u64,
) -> Result<Vec<SampledTrajectory>> {
    let weights = model.weights();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = SynthRng::new(seed, i as u64);
            let z = rng.categorical(&weights);
            sample_trajectory_with(&model.agents[z], z, spec, &format!("{prefix}{i}"), &mut rng)
        })
        .collect()
}

/// Which agent drives each stretch of a switching trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchSchedule {
    pub len: usize,
    pub initial_agent: usize,
    /// `(index, agent)`: from `index` on, `agent` drives the motion.
    pub switches: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingSample {
    pub trajectory: Trajectory,
    pub labels: Vec<usize>,
    /// True exactly at the switch indices.
    pub ground_truth: Vec<bool>,
    pub latent: Vec<Vec2>,
}

/// Samples one trajectory whose dynamics regime changes on schedule. The
/// start state comes from the initial agent's start belief; each new regime
/// continues from the current state.
pub fn sample_switching_with(
    agents: &[AgentModel],
    schedule: &SwitchSchedule,
    id: &str,
    rng: &mut SynthRng,
) -> Result<SwitchingSample> {
    let n = schedule.len;
    if n < 2 {
        return Err(Error::InvalidConfig("switching trajectories need at least 2 points".into()));
    }
    let check_agent = |a: usize| {
        if a >= agents.len() {
            Err(Error::InvalidConfig(format!("schedule names unknown agent {a}")))
        } else {
            Ok(())
        }
    };
    check_agent(schedule.initial_agent)?;
    let mut prev = 0;
    for &(idx, a) in &schedule.switches {
        check_agent(a)?;
        if idx <= prev || idx >= n {
            return Err(Error::InvalidConfig(format!(
                "switch indices must be strictly increasing within (0, {n}), got {idx}"
            )));
        }
        prev = idx;
    }

    let mut labels = vec![schedule.initial_agent; n];
    for &(idx, a) in &schedule.switches {
        for l in labels.iter_mut().skip(idx) {
            *l = a;
        }
    }
    let mut ground_truth = vec![false; n];
    for &(idx, _) in &schedule.switches {
        ground_truth[idx] = true;
    }

    let first = &agents[schedule.initial_agent];
    let mut x = rng.gaussian(&first.belief.mu_s, &first.belief.phi_s);
    let mut latent = vec![x];
    for &label in labels.iter().skip(1) {
        let d = &agents[label].dynamics;
        x = rng.gaussian(&d.propagate(&x), &d.q);
        latent.push(x);
    }
    let obs: Vec<Vec2> = latent
        .iter()
        .zip(&labels)
        .map(|(x, &l)| rng.gaussian(x, &agents[l].dynamics.r))
        .collect();
    // Ground truth may be stale if two consecutive regimes share an agent.
    let ground_truth = ground_truth
        .iter()
        .enumerate()
        .map(|(i, &g)| g && labels[i] != labels[i - 1])
        .collect();
    Ok(SwitchingSample {
        trajectory: Trajectory::new(id, obs)?,
        labels,
        ground_truth,
        latent,
    })
}

pub fn sample_switching(
    agents: &[AgentModel],
    schedule: &SwitchSchedule,
    id: &str,
    seed: u64,
) -> Result<SwitchingSample> {
    let mut rng = SynthRng::new(seed, 0);
    sample_switching_with(agents, schedule, id, &mut rng)
}

/// Shape of randomly scheduled switching trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchingSpec {
    pub min_len: usize,
    pub max_len: usize,
    /// Switch count is drawn uniformly from `1..=max_switches`.
    pub max_switches: usize,
    /// Minimum number of points in every regime.
    pub min_gap: usize,
}

impl Default for SwitchingSpec {
    fn default() -> Self {
        Self {
            min_len: 30,
            max_len: 60,
            max_switches: 2,
            min_gap: 10,
        }
    }
}

/// Random schedule: consecutive regimes use different agents and every
/// regime spans at least `min_gap` points. Fewer switches are used when the
/// trajectory is too short for the drawn count.
pub fn random_schedule(
    rng: &mut SynthRng,
    num_agents: usize,
    len: usize,
    spec: &SwitchingSpec,
) -> Result<SwitchSchedule> {
    if num_agents == 0 || spec.min_gap == 0 || spec.max_switches == 0 {
        return Err(Error::InvalidConfig(
            "switching needs agents, a positive gap and at least one switch".into(),
        ));
    }
    let initial_agent = rng.below(num_agents);
    if num_agents == 1 {
        return Ok(SwitchSchedule {
            len,
            initial_agent,
            switches: Vec::new(),
        });
    }
    let mut k = 1 + rng.below(spec.max_switches);
    while k > 0 && (k + 1) * spec.min_gap > len {
        k -= 1;
    }
    let slack = len - (k + 1) * spec.min_gap;
    let mut offsets: Vec<usize> = (0..k).map(|_| rng.below(slack + 1)).collect();
    offsets.sort_unstable();
    let mut current = initial_agent;
    let switches = offsets
        .iter()
        .enumerate()
        .map(|(j, off)| {
            let next = (current + 1 + rng.below(num_agents - 1)) % num_agents;
            current = next;
            ((j + 1) * spec.min_gap + off, next)
        })
        .collect();
    Ok(SwitchSchedule {
        len,
        initial_agent,
        switches,
    })
}

/// `count` switching trajectories over the mixture's agents, each from its
/// own stream of `seed`. Trajectory `i` is named `{prefix}{i}`.
pub fn sample_switching_corpus(
    model: &MixtureModel,
    count: usize,
    spec: &SwitchingSpec,
    prefix: &str,
    seed: u64,
) -> Result<Vec<SwitchingSample>> {
    if spec.min_len < 2 || spec.max_len < spec.min_len {
        return Err(Error::InvalidConfig(format!(
            "invalid length range [{}, {}]",
            spec.min_len, spec.max_len
        )));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = SynthRng::new(seed, i as u64);
            let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
            let schedule = random_schedule(&mut rng, model.num_agents(), len, spec)?;
            sample_switching_with(&model.agents, &schedule, &format!("{prefix}{i}"), &mut rng)
        })
        .collect()
}
