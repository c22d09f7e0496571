use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EmConfig;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat2, Vec2, COVARIANCE_FLOOR};
use crate::types::{AgentModel, BeliefParams, DynamicsParams, MixtureModel, Trajectory};

const KMEANS_ATTEMPTS: usize = 5;
const LLOYD_MAX_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans<const D: usize> {
    pub centers: Vec<[f64; D]>,
    pub labels: Vec<usize>,
}

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest<const D: usize>(p: &[f64; D], centers: &[[f64; D]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. `None` if a cluster empties.
fn kmeans_once<const D: usize>(
    points: &[[f64; D]],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Option<KMeans<D>> {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        centers.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[pick]));
        }
    }

    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..LLOYD_MAX_ITERS {
        let mut sums = vec![[0.0; D]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for d in 0..D {
                sums[l][d] += p[d];
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            for d in 0..D {
                centers[c][d] = sums[c][d] / counts[c] as f64;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    if counts.contains(&0) {
        return None;
    }
    Some(KMeans { centers, labels })
}

/// Seeded k-means, retried on empty clusters.
pub fn kmeans<const D: usize>(points: &[[f64; D]], k: usize, seed: u64) -> Result<KMeans<D>> {
    if k == 0 || points.len() < k {
        return Err(Error::InvalidConfig(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..KMEANS_ATTEMPTS {
        if let Some(res) = kmeans_once(points, k, &mut rng) {
            return Ok(res);
        }
    }
    Err(Error::DegenerateClustering {
        attempts: KMEANS_ATTEMPTS,
    })
}

/// Starting model from k-means over the concatenated first and last points.
pub fn initialize(trajs: &[Trajectory], cfg: &EmConfig) -> Result<MixtureModel> {
    cfg.validate()?;
    let m = cfg.num_agents;
    if trajs.len() < m {
        return Err(Error::EmptyCorpus(format!(
            "{} trajectories for {m} agents",
            trajs.len()
        )));
    }
    let points: Vec<[f64; 4]> = trajs
        .iter()
        .map(|t| {
            let (f, l) = (t.first(), t.last());
            [f.x, f.y, l.x, l.y]
        })
        .collect();
    let km = kmeans(&points, m, cfg.rng_seed)?;

    let mut agents = Vec::with_capacity(m);
    for c in 0..m {
        let members: Vec<&Trajectory> = trajs
            .iter()
            .zip(&km.labels)
            .filter(|(_, &l)| l == c)
            .map(|(t, _)| t)
            .collect();
        let center = km.centers[c];
        let mu_s = Vec2::new(center[0], center[1]);
        let mu_e = Vec2::new(center[2], center[3]);
        let radius2: f64 = members
            .iter()
            .map(|t| (t.first() - mu_s).norm_squared() + (t.last() - mu_e).norm_squared())
            .sum::<f64>()
            / (2 * members.len()) as f64;
        let belief_cov = linalg::project_spd(&(Mat2::identity() * radius2), COVARIANCE_FLOOR);

        let (step_sum, step_count) = members
            .iter()
            .flat_map(|t| t.steps())
            .fold((Vec2::zeros(), 0usize), |(s, n), d| (s + d, n + 1));
        let b = step_sum / step_count as f64;
        let resid2: f64 = members
            .iter()
            .flat_map(|t| t.steps())
            .map(|d| (d - b).norm_squared())
            .sum::<f64>()
            / (2 * step_count) as f64;
        let noise = linalg::project_spd(&(Mat2::identity() * resid2), COVARIANCE_FLOOR);

        agents.push(AgentModel {
            dynamics: DynamicsParams {
                a: Mat2::identity(),
                b,
                q: noise,
                r: noise,
            },
            belief: BeliefParams {
                mu_s,
                phi_s: belief_cov,
                mu_e,
                phi_e: belief_cov,
            },
            pi: 1.0 / m as f64,
            lambda_s: 1.0,
            lambda_e: 1.0,
        });
    }
    Ok(MixtureModel::new(agents))
}
