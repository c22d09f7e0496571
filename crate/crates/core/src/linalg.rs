//! Small fixed-size linear algebra used throughout the crate.
//!
//! Everything lives in the plane, so the helpers here work on 2-vectors and
//! 2x2 matrices and use closed forms where they exist.

use nalgebra::{Matrix2, Vector2};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Minimum eigenvalue for every estimated covariance (pixel^2).
pub const COVARIANCE_FLOOR: f64 = 1e-6;

/// Minimum eigenvalue kept on filter covariances.
pub const FILTER_FLOOR: f64 = 1e-9;

pub fn symmetrize(m: &Mat2) -> Mat2 {
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    Mat2::new(m[(0, 0)], off, off, m[(1, 1)])
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Mat2) -> (f64, f64) {
    let s = symmetrize(m);
    let mean = 0.5 * (s[(0, 0)] + s[(1, 1)]);
    let half_diff = 0.5 * (s[(0, 0)] - s[(1, 1)]);
    let r = half_diff.hypot(s[(0, 1)]);
    (mean - r, mean + r)
}

pub fn min_eigenvalue(m: &Mat2) -> f64 {
    sym_eigenvalues(m).0
}

/// Symmetrizes `m` and raises any eigenvalue below `floor` to `floor`.
///
/// Matrices already above the floor are only symmetrized, so well-conditioned
/// inputs pass through unchanged up to rounding of the off-diagonal mean.
pub fn project_spd(m: &Mat2, floor: f64) -> Mat2 {
    let s = symmetrize(m);
    let (lo, hi) = sym_eigenvalues(&s);
    if lo >= floor && lo.is_finite() {
        return s;
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Mat2::identity() * floor;
    }
    let b = s[(0, 1)];
    let (v1, v2) = if b.abs() <= f64::EPSILON * (s[(0, 0)].abs() + s[(1, 1)].abs()).max(1e-300) {
        if s[(0, 0)] <= s[(1, 1)] {
            (Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0))
        } else {
            (Vec2::new(0.0, 1.0), Vec2::new(1.0, 0.0))
        }
    } else {
        let v = Vec2::new(lo - s[(1, 1)], b).normalize();
        (v, Vec2::new(-v.y, v.x))
    };
    let l1 = lo.max(floor);
    let l2 = hi.max(floor);
    v1 * v1.transpose() * l1 + v2 * v2.transpose() * l2
}

/// Log-density of a bivariate normal. `None` when `cov` is not positive definite.
pub fn gaussian_logpdf(x: &Vec2, mean: &Vec2, cov: &Mat2) -> Option<f64> {
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) || !(cov[(0, 0)] > 0.0) {
        return None;
    }
    let d = x - mean;
    let inv = Mat2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let quad = d.dot(&(inv * d));
    Some(-LN_2PI - 0.5 * det.ln() - 0.5 * quad)
}

pub fn inverse(m: &Mat2) -> Option<Mat2> {
    let det = m.determinant();
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some(Mat2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

pub fn ln_factorial(k: u32) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}

pub fn log_poisson(k: u32, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k as f64 * lambda.ln() - lambda - ln_factorial(k)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-major serde representations for the plane types.
pub mod serde_vec2 {
    use super::Vec2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec2, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec2, D::Error> {
        let [x, y] = <[f64; 2]>::deserialize(d)?;
        Ok(Vec2::new(x, y))
    }
}

pub mod serde_mat2 {
    use super::Mat2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat2, s: S) -> Result<S::Ok, S::Error> {
        [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat2, D::Error> {
        let [[a, b], [c, e]] = <[[f64; 2]; 2]>::deserialize(d)?;
        Ok(Mat2::new(a, b, c, e))
    }
}

pub mod serde_points {
    use super::Vec2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec2], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<[f64; 2]> = v.iter().map(|p| [p.x, p.y]).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec2>, D::Error> {
        let raw = Vec::<[f64; 2]>::deserialize(d)?;
        Ok(raw.into_iter().map(|[x, y]| Vec2::new(x, y)).collect())
    }
}
