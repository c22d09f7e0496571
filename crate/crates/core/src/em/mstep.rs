use nalgebra::{SMatrix, SVector};

use super::{CachedStates, EStep, EmConfig};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat2, Vec2, COVARIANCE_FLOOR};
use crate::types::{AgentModel, BeliefParams, DynamicsParams, MixtureModel, Trajectory};

type Mat6 = SMatrix<f64, 6, 6>;
type Vec6 = SVector<f64, 6>;

/// Smallest Poisson rate kept after an update.
pub const LAMBDA_FLOOR: f64 = 1e-3;

/// Agents whose total responsibility falls below this are re-seeded.
const STARVATION_MASS: f64 = 1e-8;

/// Ratio of extreme eigenvalues below which the normal matrix counts as singular.
const SINGULAR_RATIO: f64 = 1e-12;

fn cells_of(cache: &[CachedStates], m: usize) -> impl Iterator<Item = &CachedStates> {
    cache.iter().filter(move |c| c.hidden.z == m)
}

/// Solves the weighted normal equations for `[vec(A^T); b]`.
///
/// Every transition `x_{t-1} -> x_t` of every cached cell assigned to agent
/// `m` contributes `gamma * [[I2 (x) E[p p^T], I2 (x) E[p]], [I2 (x) E[p]^T, I2]]`
/// to the 6x6 matrix and `gamma * [vec(E[p x^T]); E[x]]` to the right-hand
/// side, with `p = x_{t-1}` and `x = x_t`. Cells without covariances
/// contribute plain outer products of their means.
pub fn m_step_dynamics(cache: &[CachedStates], m: usize) -> Result<(Mat2, Vec2)> {
    let mut normal = Mat6::zeros();
    let mut rhs = Vec6::zeros();
    for cell in cells_of(cache, m) {
        let g = cell.gamma;
        for t in 1..cell.states.len() {
            let (p, x) = (cell.states[t - 1], cell.states[t]);
            let epp = (p * p.transpose() + cell.cov(t - 1)) * g;
            // exp[(a, i)] = E[x_a p_i]
            let exp = (x * p.transpose() + cell.cross_cov(t - 1)) * g;
            for blk in 0..2 {
                let o = 2 * blk;
                for i in 0..2 {
                    for j in 0..2 {
                        normal[(o + i, o + j)] += epp[(i, j)];
                    }
                    normal[(o + i, 4 + blk)] += g * p[i];
                    normal[(4 + blk, o + i)] += g * p[i];
                    rhs[o + i] += exp[(blk, i)];
                }
                normal[(4 + blk, 4 + blk)] += g;
                rhs[4 + blk] += g * x[blk];
            }
        }
    }
    let eig = normal.symmetric_eigenvalues();
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(hi > 0.0) || !(lo > SINGULAR_RATIO * hi) {
        return Err(Error::SingularDynamics { agent: m });
    }
    let theta = normal
        .cholesky()
        .ok_or(Error::SingularDynamics { agent: m })?
        .solve(&rhs);
    let a = Mat2::new(theta[0], theta[1], theta[2], theta[3]);
    let b = Vec2::new(theta[4], theta[5]);
    Ok((a, b))
}

/// Closed-form updates of everything except `A` and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RestParams {
    pub q: Mat2,
    pub r: Mat2,
    pub mu_s: Vec2,
    pub phi_s: Mat2,
    pub mu_e: Vec2,
    pub phi_e: Mat2,
    pub pi: f64,
    pub lambda_s: f64,
    pub lambda_e: f64,
}

/// Updates agent `m` given its new `(A, b)`.
///
/// All second moments are posterior expectations: residual outer products
/// plus the smoothed (cross-)covariances. `Q` divides by the weighted
/// transition count of each padded sequence and `R` by the weighted number
/// of observations; the goal scatter uses the end states. Covariances are
/// floored and rates clamped at [`LAMBDA_FLOOR`].
pub fn m_step_rest(
    trajs: &[Trajectory],
    cache: &[CachedStates],
    m: usize,
    a: &Mat2,
    b: &Vec2,
) -> Result<RestParams> {
    let total: f64 = cache.iter().map(|c| c.gamma).sum();
    let mut mass = 0.0;
    let mut q_num = Mat2::zeros();
    let mut q_den = 0.0;
    let mut r_num = Mat2::zeros();
    let mut r_den = 0.0;
    let mut sum_s = Vec2::zeros();
    let mut sum_e = Vec2::zeros();
    let mut sum_ts = 0.0;
    let mut sum_te = 0.0;
    for cell in cells_of(cache, m) {
        let g = cell.gamma;
        mass += g;
        for t in 1..cell.states.len() {
            let res = cell.states[t] - a * cell.states[t - 1] - b;
            let c = cell.cross_cov(t - 1);
            let spread = cell.cov(t) + a * cell.cov(t - 1) * a.transpose()
                - c * a.transpose()
                - a * c.transpose();
            q_num += (res * res.transpose() + spread) * g;
        }
        q_den += g * (cell.states.len() - 1) as f64;
        let ys = trajs[cell.trajectory].points();
        for (i, (y, x)) in ys.iter().zip(cell.observed()).enumerate() {
            let res = y - x;
            r_num += (res * res.transpose() + cell.cov(cell.hidden.t_s + i)) * g;
        }
        r_den += g * ys.len() as f64;
        sum_s += cell.start_state() * g;
        sum_e += cell.end_state() * g;
        sum_ts += g * cell.hidden.t_s as f64;
        sum_te += g * cell.hidden.t_e as f64;
    }
    if !(mass > 0.0) {
        return Err(Error::StarvedAgent { agent: m });
    }
    let mu_s = sum_s / mass;
    let mu_e = sum_e / mass;
    let mut phi_s = Mat2::zeros();
    let mut phi_e = Mat2::zeros();
    for cell in cells_of(cache, m) {
        let ds = cell.start_state() - mu_s;
        let de = cell.end_state() - mu_e;
        let last = cell.states.len() - 1;
        phi_s += (ds * ds.transpose() + cell.cov(0)) * cell.gamma;
        phi_e += (de * de.transpose() + cell.cov(last)) * cell.gamma;
    }
    Ok(RestParams {
        q: linalg::project_spd(&(q_num / q_den), COVARIANCE_FLOOR),
        r: linalg::project_spd(&(r_num / r_den), COVARIANCE_FLOOR),
        mu_s,
        phi_s: linalg::project_spd(&(phi_s / mass), COVARIANCE_FLOOR),
        mu_e,
        phi_e: linalg::project_spd(&(phi_e / mass), COVARIANCE_FLOOR),
        pi: mass / total,
        lambda_s: (sum_ts / mass).max(LAMBDA_FLOOR),
        lambda_e: (sum_te / mass).max(LAMBDA_FLOOR),
    })
}

/// Full M-step. Agents left without responsibility mass keep their dynamics
/// and have their beliefs re-seeded from the least confidently explained
/// trajectory; agents whose dynamics system is singular keep `(A, b)`.
pub fn m_step(
    trajs: &[Trajectory],
    est: &EStep,
    previous: &MixtureModel,
    _cfg: &EmConfig,
) -> Result<MixtureModel> {
    let cache = &est.cache;
    let k = est.responsibilities.len() as f64;
    let mut masses = vec![0.0; previous.num_agents()];
    for c in cache {
        masses[c.hidden.z] += c.gamma;
    }

    // Worst-explained trajectories first, used to re-seed starved agents.
    let mut worst: Vec<usize> = (0..est.responsibilities.len()).collect();
    worst.sort_by(|&i, &j| {
        est.responsibilities[i]
            .max_weight()
            .total_cmp(&est.responsibilities[j].max_weight())
            .then(i.cmp(&j))
    });
    let mut reseed = worst.into_iter();

    let mut agents = Vec::with_capacity(previous.num_agents());
    for (m, prev) in previous.agents.iter().enumerate() {
        if masses[m] < STARVATION_MASS {
            let mut agent = prev.clone();
            if let Some(t) = reseed.next() {
                agent.belief.mu_s = trajs[t].first();
                agent.belief.mu_e = trajs[t].last();
            }
            agent.pi = 1.0 / k;
            agents.push(agent);
            continue;
        }
        let (a, b) = match m_step_dynamics(cache, m) {
            Ok(ab) => ab,
            Err(Error::SingularDynamics { .. }) => (prev.dynamics.a, prev.dynamics.b),
            Err(e) => return Err(e),
        };
        let rest = m_step_rest(trajs, cache, m, &a, &b)?;
        agents.push(AgentModel {
            dynamics: DynamicsParams {
                a,
                b,
                q: rest.q,
                r: rest.r,
            },
            belief: BeliefParams {
                mu_s: rest.mu_s,
                phi_s: rest.phi_s,
                mu_e: rest.mu_e,
                phi_e: rest.phi_e,
            },
            pi: rest.pi,
            lambda_s: rest.lambda_s,
            lambda_e: rest.lambda_e,
        });
    }
    let sum: f64 = agents.iter().map(|a| a.pi).sum();
    for a in &mut agents {
        a.pi /= sum;
    }
    Ok(MixtureModel::new(agents))
}
