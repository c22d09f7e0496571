//! Independent reference computations used only by tests.
//!
//! Compiled into the library under `cfg(test)` and included by path from the
//! integration tests, so it only refers to the public API through `agentseg::`.

#![allow(dead_code)]

use agentseg::lds::{GaussianPrior, SmootherPriors};
use agentseg::linalg::{Mat2, Vec2};
use agentseg::em::EStepVariant;
use agentseg::types::{AgentModel, DynamicsParams, HiddenTuple, MixtureModel, Trajectory};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;

pub struct LdsInstance {
    pub traj: Trajectory,
    pub dynamics: DynamicsParams,
    pub priors: SmootherPriors,
    pub hidden: HiddenTuple,
}

pub fn random_spd<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Mat2 {
    let l1 = rng.gen_range(lo..hi);
    let l2 = rng.gen_range(lo..hi);
    let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (s, c) = th.sin_cos();
    let v = Vec2::new(c, s);
    let w = Vec2::new(-s, c);
    v * v.transpose() * l1 + w * w.transpose() * l2
}

/// Random dynamics, priors, padding and observations with padded length at most `max_len`.
pub fn random_lds_instance<R: Rng>(rng: &mut R, max_len: usize) -> LdsInstance {
    let obs_len = rng.gen_range(2..=max_len.min(8));
    let spare = max_len - obs_len;
    let t_s = rng.gen_range(0..=spare.min(3));
    let t_e = rng.gen_range(0..=(spare - t_s).min(3));
    let angle: f64 = rng.gen_range(-0.3..0.3);
    let scale = rng.gen_range(0.85..1.1);
    let (s, c) = angle.sin_cos();
    let dynamics = DynamicsParams {
        a: Mat2::new(c, -s, s, c) * scale,
        b: Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
        q: random_spd(rng, 0.2, 4.0),
        r: random_spd(rng, 0.2, 4.0),
    };
    let x0 = Vec2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
    let mut x = x0;
    let mut pts = Vec::with_capacity(obs_len);
    for _ in 0..obs_len {
        x = dynamics.propagate(&x);
        pts.push(x + Vec2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)));
    }
    let end = if rng.gen_bool(0.8) {
        Some(GaussianPrior {
            mean: x + Vec2::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)),
            cov: random_spd(rng, 1.0, 30.0),
        })
    } else {
        None
    };
    LdsInstance {
        traj: Trajectory::new("rand", pts).unwrap(),
        dynamics,
        priors: SmootherPriors {
            start: GaussianPrior {
                mean: x0 + Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
                cov: random_spd(rng, 1.0, 30.0),
            },
            end,
        },
        hidden: HiddenTuple::new(0, t_s, t_e),
    }
}

fn put2(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Mat2) {
    for i in 0..2 {
        for j in 0..2 {
            m[(2 * r + i, 2 * c + j)] = b[(i, j)];
        }
    }
}

/// Posterior means and marginal log-likelihood by assembling the full joint
/// Gaussian of states and observations and conditioning densely.
pub fn dense_smooth(
    traj: &Trajectory,
    dynamics: &DynamicsParams,
    priors: &SmootherPriors,
    t_s: usize,
    t_e: usize,
) -> (Vec<Vec2>, f64) {
    let d = dense_posterior(traj, dynamics, priors, t_s, t_e);
    (d.means, d.log_likelihood)
}

pub struct DensePosterior {
    pub means: Vec<Vec2>,
    /// Full `2L x 2L` posterior covariance of the stacked states.
    pub cov: DMatrix<f64>,
    pub log_likelihood: f64,
}

impl DensePosterior {
    /// `Cov(x_i, x_j | y)`.
    pub fn block(&self, i: usize, j: usize) -> Mat2 {
        Mat2::new(
            self.cov[(2 * i, 2 * j)],
            self.cov[(2 * i, 2 * j + 1)],
            self.cov[(2 * i + 1, 2 * j)],
            self.cov[(2 * i + 1, 2 * j + 1)],
        )
    }
}

pub fn dense_posterior(
    traj: &Trajectory,
    dynamics: &DynamicsParams,
    priors: &SmootherPriors,
    t_s: usize,
    t_e: usize,
) -> DensePosterior {
    let tau = traj.len() - 1;
    let len = t_s + tau + 1 + t_e;
    let n = 2 * len;

    let mut mean = DVector::zeros(n);
    let mut c = priors.start.mean;
    for i in 0..len {
        if i > 0 {
            c = dynamics.a * c + dynamics.b;
        }
        mean[2 * i] = c.x;
        mean[2 * i + 1] = c.y;
    }

    let mut g = DMatrix::zeros(n, n);
    let mut powers = vec![Mat2::identity()];
    for k in 1..len {
        let p = dynamics.a * powers[k - 1];
        powers.push(p);
    }
    for i in 0..len {
        for j in 0..=i {
            put2(&mut g, i, j, &powers[i - j]);
        }
    }
    let mut cu = DMatrix::zeros(n, n);
    put2(&mut cu, 0, 0, &priors.start.cov);
    for i in 1..len {
        put2(&mut cu, i, i, &dynamics.q);
    }
    let sigma_x = &g * cu * g.transpose();

    let mut rows: Vec<(usize, Vec2, Mat2)> = (0..=tau)
        .map(|t| (t_s + t, traj.points()[t], dynamics.r))
        .collect();
    if let Some(end) = &priors.end {
        rows.push((len - 1, end.mean, end.cov));
    }
    let m = 2 * rows.len();
    let mut h = DMatrix::zeros(m, n);
    let mut noise = DMatrix::zeros(m, m);
    let mut z = DVector::zeros(m);
    for (r, (idx, val, cov)) in rows.iter().enumerate() {
        h[(2 * r, 2 * idx)] = 1.0;
        h[(2 * r + 1, 2 * idx + 1)] = 1.0;
        put2(&mut noise, r, r, cov);
        z[2 * r] = val.x;
        z[2 * r + 1] = val.y;
    }
    let s = &h * &sigma_x * h.transpose() + noise;
    let resid = z - &h * &mean;
    let chol = s.clone().cholesky().expect("joint covariance must be SPD");
    let solved = chol.solve(&resid);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ll = -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + resid.dot(&solved));
    let post = mean + &sigma_x * h.transpose() * solved;
    let means = (0..len).map(|i| Vec2::new(post[2 * i], post[2 * i + 1])).collect();
    let cross = &h * &sigma_x;
    let cov = &sigma_x - cross.transpose() * chol.solve(&cross);
    DensePosterior {
        means,
        cov,
        log_likelihood: ll,
    }
}

/// Weighted least squares of `next` on `(prev, 1)`, one output axis at a time.
pub fn weighted_regression(samples: &[(Vec2, Vec2, f64)]) -> (Mat2, Vec2) {
    let moments: Vec<TransitionMoments> = samples
        .iter()
        .map(|&(prev, next, weight)| TransitionMoments {
            prev,
            next,
            prev_cov: Mat2::zeros(),
            cross_cov: Mat2::zeros(),
            weight,
        })
        .collect();
    moment_regression(&moments)
}

/// A transition with Gaussian uncertainty: `cross_cov = Cov(next, prev)`.
pub struct TransitionMoments {
    pub prev: Vec2,
    pub next: Vec2,
    pub prev_cov: Mat2,
    pub cross_cov: Mat2,
    pub weight: f64,
}

/// Least squares on expected second moments, one output axis at a time:
/// regressor moments `E[(p, 1)(p, 1)^T]` against `E[(p, 1) x_axis]`.
pub fn moment_regression(samples: &[TransitionMoments]) -> (Mat2, Vec2) {
    let mut a = Mat2::zeros();
    let mut b = Vec2::zeros();
    for axis in 0..2 {
        let mut xtx = Matrix3::zeros();
        let mut xty = Vector3::zeros();
        for s in samples {
            let row = Vector3::new(s.prev.x, s.prev.y, 1.0);
            let mut m = row * row.transpose();
            for i in 0..2 {
                for j in 0..2 {
                    m[(i, j)] += s.prev_cov[(i, j)];
                }
            }
            xtx += m * s.weight;
            let mut v = row * s.next[axis];
            v[0] += s.cross_cov[(axis, 0)];
            v[1] += s.cross_cov[(axis, 1)];
            xty += v * s.weight;
        }
        let coef = xtx.lu().solve(&xty).expect("regressors must have full rank");
        a[(axis, 0)] = coef[0];
        a[(axis, 1)] = coef[1];
        b[axis] = coef[2];
    }
    (a, b)
}

/// Exhaustive MAP path with the "lowest index, comparing from the last
/// window backwards" tie rule. Scores are accumulated left to right.
pub fn brute_force_viterbi(log_pi: &[f64], log_a: &[Vec<f64>], emissions: &[Vec<f64>]) -> Vec<usize> {
    let m = log_pi.len();
    let n = emissions.len();
    let total = m.pow(n as u32);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for code in 0..total {
        let mut path = vec![0; n];
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % m;
            c /= m;
        }
        let mut score = log_pi[path[0]] + emissions[0][path[0]];
        for t in 1..n {
            score = score + log_a[path[t - 1]][path[t]];
            score = score + emissions[t][path[t]];
        }
        let better = match &best {
            None => true,
            Some((s, p)) => {
                score > *s || (score == *s && reverse_lex_less(&path, p))
            }
        };
        if better {
            best = Some((score, path));
        }
    }
    best.unwrap().1
}

fn reverse_lex_less(a: &[usize], b: &[usize]) -> bool {
    for (x, y) in a.iter().rev().zip(b.iter().rev()) {
        if x != y {
            return x < y;
        }
    }
    false
}

/// Non-recursive Ramer-Douglas-Peucker with an explicit work stack.
pub fn stack_rdp(points: &[Vec2], epsilon: f64) -> Vec<bool> {
    let n = points.len();
    let mut mask = vec![false; n];
    let mut stack = vec![(0usize, n - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let p = points[lo];
        let q = points[hi];
        let dir = q - p;
        let len = dir.norm();
        let mut best = (lo, -1.0f64);
        for (k, pt) in points.iter().enumerate().take(hi).skip(lo + 1) {
            // Clamp the projection parameter to the segment in scalar form.
            let d = if len == 0.0 {
                ((pt.x - p.x).powi(2) + (pt.y - p.y).powi(2)).sqrt()
            } else {
                let u = ((pt.x - p.x) * dir.x + (pt.y - p.y) * dir.y) / (len * len);
                if u <= 0.0 {
                    ((pt.x - p.x).powi(2) + (pt.y - p.y).powi(2)).sqrt()
                } else if u >= 1.0 {
                    ((pt.x - q.x).powi(2) + (pt.y - q.y).powi(2)).sqrt()
                } else {
                    (dir.x * (pt.y - p.y) - dir.y * (pt.x - p.x)).abs() / len
                }
            };
            if d > best.1 {
                best = (k, d);
            }
        }
        if best.1 > epsilon {
            mask[best.0] = true;
            stack.push((lo, best.0));
            stack.push((best.0, hi));
        }
    }
    mask
}

/// Optimal 2-means partition by enumerating every split (points <= 20).
pub fn exhaustive_two_means(points: &[[f64; 4]]) -> Vec<usize> {
    let n = points.len();
    assert!(n <= 20);
    let mut best = (f64::INFINITY, vec![0; n]);
    for code in 1u32..(1 << (n - 1)) {
        let labels: Vec<usize> = (0..n).map(|i| ((code >> i) & 1) as usize).collect();
        let mut sse = 0.0;
        for k in 0..2 {
            let members: Vec<&[f64; 4]> =
                points.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(p, _)| p).collect();
            let mut c = [0.0; 4];
            for p in &members {
                for d in 0..4 {
                    c[d] += p[d] / members.len() as f64;
                }
            }
            for p in &members {
                sse += (0..4).map(|d| (p[d] - c[d]).powi(2)).sum::<f64>();
            }
        }
        if sse < best.0 {
            best = (sse, labels);
        }
    }
    best.1
}

/// Unnormalized log weight of one tuple and its dense posterior, with the
/// start belief as prior and the goal belief as terminal observation.
pub fn dense_tuple(
    traj: &Trajectory,
    agent: &AgentModel,
    t_s: usize,
    t_e: usize,
    variant: EStepVariant,
    t_cap: usize,
) -> (f64, DensePosterior) {
    let priors = SmootherPriors::from_belief(&agent.belief);
    let post = dense_posterior(traj, &agent.dynamics, &priors, t_s, t_e);
    let mut lw = agent.pi.ln() + post.log_likelihood;
    if variant.uses_poisson() {
        lw += log_poisson(t_s, agent.lambda_s) + log_poisson(t_e, agent.lambda_e);
    } else {
        lw -= 2.0 * ((t_cap + 1) as f64).ln();
    }
    if variant.uses_belief_factors() {
        let b = &agent.belief;
        lw += gaussian_logpdf(&post.means[0], &b.mu_s, &b.phi_s);
        lw += gaussian_logpdf(post.means.last().unwrap(), &b.mu_e, &b.phi_e);
    }
    (lw, post)
}

pub fn log_poisson(k: usize, lambda: f64) -> f64 {
    let log_fact: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
    k as f64 * lambda.ln() - lambda - log_fact
}

pub fn gaussian_logpdf(x: &Vec2, mean: &Vec2, cov: &Mat2) -> f64 {
    expected_gaussian_logpdf(x, &Mat2::zeros(), mean, cov)
}

/// `E[log N(x | mean, cov)]` for `x` with mean `m` and covariance `p`.
pub fn expected_gaussian_logpdf(m: &Vec2, p: &Mat2, mean: &Vec2, cov: &Mat2) -> f64 {
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    let inv = Mat2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let d = m - mean;
    let second = d * d.transpose() + p;
    -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * (inv * second).trace()
}

/// Posterior tuple weights and dense posteriors of every trajectory under `model`.
pub struct DenseEStep {
    /// `cells[k]`: `(tuple, gamma, posterior)` for every enumerated tuple.
    pub cells: Vec<Vec<(HiddenTuple, f64, DensePosterior)>>,
}

pub fn dense_e_step(trajs: &[Trajectory], model: &MixtureModel, variant: EStepVariant, t_cap: usize) -> DenseEStep {
    let cells = trajs
        .iter()
        .map(|t| {
            let mut raw = Vec::new();
            for (z, ag) in model.agents.iter().enumerate() {
                for t_s in 0..=t_cap {
                    for t_e in 0..=t_cap {
                        let (lw, post) = dense_tuple(t, ag, t_s, t_e, variant, t_cap);
                        raw.push((HiddenTuple::new(z, t_s, t_e), lw, post));
                    }
                }
            }
            let top = raw.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
            let norm = top + raw.iter().map(|r| (r.1 - top).exp()).sum::<f64>().ln();
            raw.into_iter().map(|(h, lw, p)| (h, (lw - norm).exp(), p)).collect()
        })
        .collect();
    DenseEStep { cells }
}

/// Expected complete-data log-likelihood of `model` under fixed posteriors:
/// mixture weight, Poisson padding, start and goal beliefs on the chain
/// endpoints, every transition and every observation.
pub fn expected_complete_loglik(trajs: &[Trajectory], est: &DenseEStep, model: &MixtureModel) -> f64 {
    let mut total = 0.0;
    for (traj, cells) in trajs.iter().zip(&est.cells) {
        for (h, gamma, post) in cells {
            let ag = &model.agents[h.z];
            let d = &ag.dynamics;
            let last = post.means.len() - 1;
            let mut v = ag.pi.ln()
                + log_poisson(h.t_s, ag.lambda_s)
                + log_poisson(h.t_e, ag.lambda_e)
                + expected_gaussian_logpdf(&post.means[0], &post.block(0, 0), &ag.belief.mu_s, &ag.belief.phi_s)
                + expected_gaussian_logpdf(
                    &post.means[last],
                    &post.block(last, last),
                    &ag.belief.mu_e,
                    &ag.belief.phi_e,
                );
            for i in 1..=last {
                let mean = post.means[i] - d.a * post.means[i - 1] - d.b;
                let c = post.block(i, i - 1);
                let cov = post.block(i, i) + d.a * post.block(i - 1, i - 1) * d.a.transpose()
                    - c * d.a.transpose()
                    - d.a * c.transpose();
                v += expected_gaussian_logpdf(&mean, &cov, &Vec2::zeros(), &d.q);
            }
            for (t, y) in traj.points().iter().enumerate() {
                let i = h.t_s + t;
                v += expected_gaussian_logpdf(&(y - post.means[i]), &post.block(i, i), &Vec2::zeros(), &d.r);
            }
            total += gamma * v;
        }
    }
    total
}
