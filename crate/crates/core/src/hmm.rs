//! Hidden Markov segmentation over agent labels.
//!
//! Smoothed states are grouped into windows of `N` consecutive states. Each
//! window is emitted by one agent with log-likelihood
//! `sum_i log N(x_i | A x_{i-1} + b, Q)`; the label sequence is a Markov chain
//! whose initial distribution is the mixture weights. Baum-Welch estimates
//! only the transition matrix; Viterbi decodes the labels, which are then
//! expanded back to one label per observed point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{e_step_trajectory, EmConfig};
use crate::error::{Error, Result};
use crate::linalg::{self, Vec2};
use crate::types::{AgentModel, MixtureModel, Segmentation, Trajectory};

/// Diagonal of the transition matrix Baum-Welch starts from.
pub const INITIAL_STAY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedStates {
    pub windows: Vec<Vec<Vec2>>,
    pub window_len: usize,
    pub overlap: bool,
    /// Number of states the windows were cut from.
    pub source_len: usize,
}

impl WindowedStates {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Consecutive windows of `n` states: back to back (a trailing remainder
/// shorter than `n` is dropped) or with stride 1 when `overlap` is set.
pub fn build_windows(states: &[Vec2], n: usize, overlap: bool) -> Result<WindowedStates> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("window length must be at least 2, got {n}")));
    }
    if states.len() < n {
        return Err(Error::TooShort {
            id: String::new(),
            len: states.len(),
            needed: n,
        });
    }
    let windows = if overlap {
        states.windows(n).map(|w| w.to_vec()).collect()
    } else {
        states.chunks_exact(n).map(|w| w.to_vec()).collect()
    };
    Ok(WindowedStates {
        windows,
        window_len: n,
        overlap,
        source_len: states.len(),
    })
}

/// Log-likelihood of a window under an agent's dynamics; beliefs are unused.
pub fn emission_loglik(window: &[Vec2], agent: &AgentModel) -> f64 {
    let d = &agent.dynamics;
    let q_inv = linalg::inverse(&d.q);
    let log_det = d.q.determinant().ln();
    window
        .windows(2)
        .map(|w| {
            let r = w[1] - d.propagate(&w[0]);
            match q_inv {
                Some(inv) => -linalg::LN_2PI - 0.5 * log_det - 0.5 * r.dot(&(inv * r)),
                None => f64::NEG_INFINITY,
            }
        })
        .sum()
}

/// `out[t][m]`: emission log-likelihood of window `t` under agent `m`.
pub fn emission_matrix(windows: &WindowedStates, model: &MixtureModel) -> Vec<Vec<f64>> {
    windows
        .windows
        .iter()
        .map(|w| model.agents.iter().map(|a| emission_loglik(w, a)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    /// Row-stochastic, `transition[i][j] = p(z_t = j | z_{t-1} = i)`.
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

impl HmmModel {
    pub fn new(transition: Vec<Vec<f64>>, initial: Vec<f64>) -> Result<Self> {
        let hmm = Self { transition, initial };
        hmm.validate()?;
        Ok(hmm)
    }

    /// `stay` on the diagonal, the rest spread evenly.
    pub fn sticky(num_states: usize, stay: f64, initial: Vec<f64>) -> Result<Self> {
        let transition = (0..num_states)
            .map(|i| {
                (0..num_states)
                    .map(|j| {
                        if num_states == 1 {
                            1.0
                        } else if i == j {
                            stay
                        } else {
                            (1.0 - stay) / (num_states - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(transition, initial)
    }

    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.initial.len();
        if m == 0 {
            return Err(Error::InvalidModel("HMM has no states".into()));
        }
        let stochastic = |row: &[f64], what: &str| -> Result<()> {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidModel(format!("{what} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!("{what} sums to {s}")));
            }
            Ok(())
        };
        stochastic(&self.initial, "initial distribution")?;
        if self.transition.len() != m {
            return Err(Error::InvalidModel(format!(
                "transition matrix has {} rows for {m} states",
                self.transition.len()
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidModel(format!("transition row {i} has {} entries", row.len())));
            }
            stochastic(row, &format!("transition row {i}"))?;
        }
        Ok(())
    }

    fn log_initial(&self) -> Vec<f64> {
        self.initial.iter().map(|p| p.ln()).collect()
    }

    fn log_transition(&self) -> Vec<Vec<f64>> {
        self.transition
            .iter()
            .map(|r| r.iter().map(|p| p.ln()).collect())
            .collect()
    }
}

/// MAP label path. Scores accumulate left to right as
/// `((delta + log a) + emission)`; among equal scores the lowest predecessor
/// and the lowest final label win.
pub fn viterbi_emissions(log_pi: &[f64], log_a: &[Vec<f64>], emissions: &[Vec<f64>]) -> Vec<usize> {
    let m = log_pi.len();
    let n = emissions.len();
    if n == 0 {
        return Vec::new();
    }
    let mut delta: Vec<f64> = (0..m).map(|j| log_pi[j] + emissions[0][j]).collect();
    let mut back = vec![vec![0usize; m]; n];
    for t in 1..n {
        let mut next = vec![f64::NEG_INFINITY; m];
        for j in 0..m {
            let mut best = 0;
            let mut score = f64::NEG_INFINITY;
            for i in 0..m {
                let s = delta[i] + log_a[i][j];
                if s > score {
                    score = s;
                    best = i;
                }
            }
            back[t][j] = best;
            next[j] = score + emissions[t][j];
        }
        delta = next;
    }
    let mut last = 0;
    for j in 1..m {
        if delta[j] > delta[last] {
            last = j;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

pub fn viterbi(windows: &WindowedStates, hmm: &HmmModel, model: &MixtureModel) -> Vec<usize> {
    let e = emission_matrix(windows, model);
    viterbi_emissions(&hmm.log_initial(), &hmm.log_transition(), &e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaumWelchConfig {
    pub max_iters: usize,
    /// Stop once `log p(X | A)` improves by less than this.
    pub tol: f64,
}

impl Default for BaumWelchConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchResult {
    pub hmm: HmmModel,
    /// `log p(X | A)` of the starting matrix and after every update.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Accumulated {
    log_likelihood: f64,
    xi: Vec<Vec<f64>>,
}

/// Scaled forward-backward over one sequence; adds expected transition
/// counts into `xi` and returns `log p(X | A)`.
fn forward_backward(
    initial: &[f64],
    a: &[Vec<f64>],
    emissions: &[Vec<f64>],
    xi: &mut [Vec<f64>],
) -> Result<f64> {
    let m = initial.len();
    let n = emissions.len();
    let mut offsets = Vec::with_capacity(n);
    let scaled: Vec<Vec<f64>> = emissions
        .iter()
        .map(|row| {
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            offsets.push(hi);
            row.iter().map(|e| (e - hi).exp()).collect()
        })
        .collect();

    let mut alpha = vec![vec![0.0; m]; n];
    let mut scale = vec![0.0; n];
    for t in 0..n {
        for j in 0..m {
            let prior = if t == 0 {
                initial[j]
            } else {
                (0..m).map(|i| alpha[t - 1][i] * a[i][j]).sum()
            };
            alpha[t][j] = prior * scaled[t][j];
        }
        let c: f64 = alpha[t].iter().sum();
        if !(c > 0.0) || !offsets[t].is_finite() {
            return Err(Error::WeightUnderflow {
                trajectory: format!("window {t}"),
            });
        }
        scale[t] = c;
        for v in &mut alpha[t] {
            *v /= c;
        }
    }

    let mut beta = vec![1.0; m];
    for t in (1..n).rev() {
        for i in 0..m {
            for j in 0..m {
                xi[i][j] += alpha[t - 1][i] * a[i][j] * scaled[t][j] * beta[j] / scale[t];
            }
        }
        let prev: Vec<f64> = (0..m)
            .map(|i| (0..m).map(|j| a[i][j] * scaled[t][j] * beta[j]).sum::<f64>() / scale[t])
            .collect();
        beta = prev;
    }
    Ok(scale.iter().map(|c| c.ln()).sum::<f64>() + offsets.iter().sum::<f64>())
}

fn accumulate(initial: &[f64], a: &[Vec<f64>], sequences: &[Vec<Vec<f64>>]) -> Result<Accumulated> {
    let m = initial.len();
    let parts: Vec<Accumulated> = sequences
        .par_iter()
        .map(|e| {
            let mut xi = vec![vec![0.0; m]; m];
            let ll = forward_backward(initial, a, e, &mut xi)?;
            Ok(Accumulated {
                log_likelihood: ll,
                xi,
            })
        })
        .collect::<Result<_>>()?;
    let mut total = Accumulated {
        log_likelihood: 0.0,
        xi: vec![vec![0.0; m]; m],
    };
    for p in parts {
        total.log_likelihood += p.log_likelihood;
        for i in 0..m {
            for j in 0..m {
                total.xi[i][j] += p.xi[i][j];
            }
        }
    }
    Ok(total)
}

/// Baum-Welch on precomputed emission matrices (`sequences[k][t][m]`),
/// updating only the transition matrix. Rows that receive no expected
/// transitions keep their previous values.
pub fn baum_welch_emissions(
    sequences: &[Vec<Vec<f64>>],
    start: HmmModel,
    cfg: &BaumWelchConfig,
) -> Result<BaumWelchResult> {
    start.validate()?;
    let m = start.num_states();
    if !sequences.iter().any(|s| s.len() >= 2) {
        return Err(Error::EmptyCorpus(
            "Baum-Welch needs at least one sequence with two windows".into(),
        ));
    }
    if let Some(bad) = sequences.iter().flatten().find(|row| row.len() != m) {
        return Err(Error::InvalidConfig(format!(
            "emission row has {} entries for {m} states",
            bad.len()
        )));
    }
    let sequences: Vec<Vec<Vec<f64>>> =
        sequences.iter().filter(|s| !s.is_empty()).cloned().collect();
    let mut hmm = start;
    let mut acc = accumulate(&hmm.initial, &hmm.transition, &sequences)?;
    let mut trace = vec![acc.log_likelihood];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        let mut next = hmm.transition.clone();
        for (i, row) in next.iter_mut().enumerate() {
            let mass: f64 = acc.xi[i].iter().sum();
            if mass > 0.0 {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = acc.xi[i][j] / mass;
                }
            }
        }
        let next_acc = accumulate(&hmm.initial, &next, &sequences)?;
        iterations += 1;
        let gain = next_acc.log_likelihood - acc.log_likelihood;
        trace.push(next_acc.log_likelihood);
        hmm.transition = next;
        acc = next_acc;
        if gain < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(BaumWelchResult {
        hmm,
        trace,
        iterations,
        converged,
    })
}

/// Baum-Welch from the sticky starting matrix with the mixture weights as
/// initial distribution.
pub fn baum_welch(
    corpora: &[WindowedStates],
    model: &MixtureModel,
    cfg: &BaumWelchConfig,
) -> Result<BaumWelchResult> {
    if corpora.is_empty() {
        return Err(Error::EmptyCorpus("no windowed sequences".into()));
    }
    let emissions: Vec<Vec<Vec<f64>>> =
        corpora.par_iter().map(|w| emission_matrix(w, model)).collect();
    let start = HmmModel::sticky(model.num_agents(), INITIAL_STAY, model.weights())?;
    baum_welch_emissions(&emissions, start, cfg)
}

/// Per-point labels from window labels. Back-to-back windows label their own
/// points and the trailing remainder inherits the last label; overlapping
/// windows give each point the label of the window with the nearest centre,
/// the earlier window on ties.
pub fn expand_labels(window_labels: &[usize], len: usize, n: usize, overlap: bool) -> Vec<usize> {
    let w = window_labels.len();
    if w == 0 {
        return Vec::new();
    }
    (0..len)
        .map(|i| {
            let idx = if overlap {
                let twice = 2 * i as i64 - n as i64;
                (twice.div_euclid(2) + twice.rem_euclid(2)).clamp(0, w as i64 - 1) as usize
            } else {
                (i / n).min(w - 1)
            };
            window_labels[idx]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub window_len: usize,
    pub overlap: bool,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            window_len: 3,
            overlap: false,
        }
    }
}

/// Observed-span states of the MAP hidden tuple.
pub fn map_states(traj: &Trajectory, model: &MixtureModel, em: &EmConfig) -> Result<Vec<Vec2>> {
    let post = e_step_trajectory(traj, 0, model, em)?;
    let cell = post.map_cell();
    Ok(cell.observed().to_vec())
}

/// Segments one trajectory: MAP-tuple states, windows, Viterbi, expansion.
pub fn segment(
    traj: &Trajectory,
    model: &MixtureModel,
    hmm: &HmmModel,
    em: &EmConfig,
    cfg: &SegmentConfig,
) -> Result<Segmentation> {
    if traj.len() < cfg.window_len {
        return Err(Error::TooShort {
            id: traj.id().to_string(),
            len: traj.len(),
            needed: cfg.window_len,
        });
    }
    let states = map_states(traj, model, em)?;
    let windows = build_windows(&states, cfg.window_len, cfg.overlap)?;
    let labels = viterbi(&windows, hmm, model);
    let per_point = expand_labels(&labels, traj.len(), cfg.window_len, cfg.overlap);
    Ok(Segmentation::from_labels(traj.id(), per_point))
}

pub fn segment_corpus(
    trajs: &[Trajectory],
    model: &MixtureModel,
    hmm: &HmmModel,
    em: &EmConfig,
    cfg: &SegmentConfig,
) -> Result<Vec<Segmentation>> {
    trajs
        .par_iter()
        .map(|t| segment(t, model, hmm, em, cfg))
        .collect()
}

/// Windows of the MAP-tuple states of every trajectory long enough to hold one.
pub fn windows_for_corpus(
    trajs: &[Trajectory],
    model: &MixtureModel,
    em: &EmConfig,
    cfg: &SegmentConfig,
) -> Result<Vec<WindowedStates>> {
    trajs
        .par_iter()
        .filter(|t| t.len() >= cfg.window_len)
        .map(|t| {
            let states = map_states(t, model, em)?;
            build_windows(&states, cfg.window_len, cfg.overlap)
        })
        .collect()
}
