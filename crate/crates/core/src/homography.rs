//! Planar homography estimation.
//!
//! Normalized DLT solved through the smallest eigenvector of `A^T A`, wrapped
//! in an adaptive RANSAC whose inlier gate `sqrt(5.99) * sigma` tightens as
//! the RMS error of the incumbent model drops, and whose iteration budget is
//! re-derived from the observed outlier ratio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point = [f64; 2];
pub type Matrix3 = [[f64; 3]; 3];

/// Chi-square 95% quantile for two degrees of freedom.
pub const CHI2_95_2DOF: f64 = 5.99;
pub const SIGMA_FLOOR: f64 = 0.25;
const RANK_EPS: f64 = 1e-12;
const INFINITY_EPS: f64 = 1e-12;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const EIGEN_GAP_EPS: f64 = 1e-9;

/// 3x3 projective map, canonically scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    h: Matrix3,
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        h: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Canonically scale `m`; fails when the result is rank-deficient.
    pub fn new(m: Matrix3) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "non-finite homography entry".into(),
            ));
        }
        let h = canonicalize(m).ok_or(Error::Singular)?;
        if det3(&h).abs() <= RANK_EPS {
            return Err(Error::Singular);
        }
        Ok(Self { h })
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self> {
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            h: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> &Matrix3 {
        &self.h
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let h = &self.h;
        [
            h[0][0], h[0][1], h[0][2], h[1][0], h[1][1], h[1][2], h[2][0], h[2][1], h[2][2],
        ]
    }

    /// Map a point through the homography.
    pub fn apply(&self, p: Point) -> Result<Point> {
        apply_matrix(&self.h, p)
    }

    pub fn invert(&self) -> Result<Homography> {
        Homography::new(inverse3(&self.h).ok_or(Error::Singular)?)
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::new(mul3(&self.h, &other.h))
    }

    pub fn frobenius_distance(&self, other: &Homography) -> f64 {
        self.h
            .iter()
            .flatten()
            .zip(other.h.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn canonicalize(m: Matrix3) -> Option<Matrix3> {
    let scale = if m[2][2].abs() > 1e-12 {
        m[2][2]
    } else {
        let norm = m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let first = *m.iter().flatten().find(|v| **v != 0.0)?;
        norm * first.signum()
    };
    let mut out = m;
    out.iter_mut().flatten().for_each(|v| *v /= scale);
    Some(out)
}

fn apply_matrix(h: &Matrix3, p: Point) -> Result<Point> {
    let x = h[0][0] * p[0] + h[0][1] * p[1] + h[0][2];
    let y = h[1][0] * p[0] + h[1][1] * p[1] + h[1][2];
    let w = h[2][0] * p[0] + h[2][1] * p[1] + h[2][2];
    if w.abs() < INFINITY_EPS {
        return Err(Error::PointAtInfinity);
    }
    Ok([x / w, y / w])
}

pub(crate) fn mul3(a: &Matrix3, b: &Matrix3) -> Matrix3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn det3(m: &Matrix3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse3(m: &Matrix3) -> Option<Matrix3> {
    let det = det3(m);
    if det.abs() <= RANK_EPS || !det.is_finite() {
        return None;
    }
    let c =
        |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    let mut out = adj;
    out.iter_mut().flatten().for_each(|v| *v /= det);
    Some(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub p1: Point,
    pub p2: Point,
}

impl Correspondence {
    pub fn new(p1: Point, p2: Point) -> Self {
        Self { p1, p2 }
    }
}

/// Hartley normalization: centroid to the origin, mean radius `sqrt(2)`.
pub fn normalize_points(points: &[Point]) -> Result<(Matrix3, Vec<Point>)> {
    if points.len() < 2 {
        return Err(Error::Degenerate(
            "need at least two points to normalize".into(),
        ));
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_r = points
        .iter()
        .map(|p| (p[0] - cx).hypot(p[1] - cy))
        .sum::<f64>()
        / n;
    if !(mean_r > 1e-300) {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_r;
    let t = [[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]];
    let out = points
        .iter()
        .map(|p| [s * (p[0] - cx), s * (p[1] - cy)])
        .collect();
    Ok((t, out))
}

/// Eigen-decomposition of a symmetric 9x9 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues ascending with matching unit eigenvectors.
pub fn symmetric_eigen9(m: &[[f64; 9]; 9]) -> Result<Vec<(f64, [f64; 9])>> {
    let mut a = *m;
    let mut v = [[0.0; 9]; 9];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = (0..9)
            .flat_map(|p| ((p + 1)..9).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q].abs())
            .fold(0.0, f64::max);
        if off < JACOBI_TOL {
            converged = true;
            break;
        }
        for p in 0..9 {
            for q in (p + 1)..9 {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..9 {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..9 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence(JACOBI_MAX_SWEEPS));
    }
    let mut pairs: Vec<(f64, [f64; 9])> = (0..9)
        .map(|j| {
            let mut col = [0.0; 9];
            for (i, c) in col.iter_mut().enumerate() {
                *c = v[i][j];
            }
            (a[j][j], col)
        })
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    Ok(pairs)
}

fn gram(a: &[[f64; 9]]) -> [[f64; 9]; 9] {
    let mut m = [[0.0; 9]; 9];
    for row in a {
        for i in 0..9 {
            for j in i..9 {
                m[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..9 {
        for j in 0..i {
            m[i][j] = m[j][i];
        }
    }
    m
}

/// Unit vector minimizing `|A r|`: the eigenvector of `A^T A` with the
/// smallest eigenvalue (the last right-singular vector of `A`).
pub fn smallest_singular_vector(a: &[[f64; 9]]) -> Result<[f64; 9]> {
    if a.len() < 8 {
        return Err(Error::InvalidParameter(format!(
            "need at least 8 rows, got {}",
            a.len()
        )));
    }
    Ok(symmetric_eigen9(&gram(a))?[0].1)
}

fn dlt_rows(p: Point, q: Point) -> [[f64; 9]; 2] {
    let ([x, y], [u, v]) = (p, q);
    [
        [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u],
        [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v],
    ]
}

/// Normalized direct linear transform mapping every `p1` onto its `p2`.
pub fn dlt(correspondences: &[Correspondence]) -> Result<Homography> {
    if correspondences.len() < 4 {
        return Err(Error::InsufficientMatches {
            needed: 4,
            have: correspondences.len(),
        });
    }
    let src: Vec<Point> = correspondences.iter().map(|c| c.p1).collect();
    let dst: Vec<Point> = correspondences.iter().map(|c| c.p2).collect();
    let (t1, n1) = normalize_points(&src)?;
    let (t2, n2) = normalize_points(&dst)?;
    let a: Vec<[f64; 9]> = n1
        .iter()
        .zip(&n2)
        .flat_map(|(&p, &q)| dlt_rows(p, q))
        .collect();
    let eig = symmetric_eigen9(&gram(&a))?;
    if eig[1].0 - eig[0].0 <= EIGEN_GAP_EPS {
        return Err(Error::Degenerate(
            "null space is not one-dimensional".into(),
        ));
    }
    let h = eig[0].1;
    let hn = [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], h[8]]];
    let t2_inv = inverse3(&t2).ok_or(Error::Singular)?;
    let full = mul3(&mul3(&t2_inv, &hn), &t1);
    Homography::new(full).map_err(|_| Error::Degenerate("rank-deficient homography".into()))
}

/// Euclidean distance between `p2` and the projection of `p1`.
pub fn reprojection_error(h: &Homography, c: &Correspondence) -> Result<f64> {
    let q = h.apply(c.p1)?;
    Ok((q[0] - c.p2[0]).hypot(q[1] - c.p2[1]))
}

/// RMS of the errors, floored at [`SIGMA_FLOOR`].
pub fn update_sigma(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("error list"));
    }
    let rms = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    Ok(rms.max(SIGMA_FLOOR))
}

/// Iterations needed to draw one all-inlier sample of size `k` with
/// confidence `p` at outlier ratio `e`, clamped to `[1, cap]`.
pub fn required_iterations(p: f64, e: f64, k: usize, cap: usize) -> usize {
    let cap = cap.max(1);
    if e <= 0.0 {
        return 1;
    }
    let all_inlier = (1.0 - e).powi(k as i32);
    let denom = (-all_inlier).ln_1p();
    if denom == 0.0 {
        return cap;
    }
    let n = ((1.0 - p).ln() / denom).ceil();
    if !n.is_finite() || n >= cap as f64 {
        cap
    } else {
        (n as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RansacConfig {
    pub sample_size: usize,
    pub confidence: f64,
    pub initial_outlier_ratio: f64,
    pub max_iterations: usize,
    pub initial_sigma: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            sample_size: 10,
            confidence: 0.99,
            initial_outlier_ratio: 0.5,
            max_iterations: 5000,
            initial_sigma: 1.0,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size < 4 {
            return Err(Error::InvalidParameter(format!(
                "sample size {} below 4",
                self.sample_size
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "confidence {} outside (0, 1)",
                self.confidence
            )));
        }
        if !(self.initial_outlier_ratio >= 0.0 && self.initial_outlier_ratio < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "outlier ratio {} outside [0, 1)",
                self.initial_outlier_ratio
            )));
        }
        if !(self.initial_sigma > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidParameter(
                "initial sigma and iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    /// Least-squares refit over the consensus set.
    pub homography: Homography,
    /// Best sampled model before refinement.
    pub best_model: Homography,
    pub inliers: Vec<bool>,
    pub sigma: f64,
    pub iterations: usize,
    /// Sum of inlier reprojection errors under `homography`, px.
    pub inlier_error: f64,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }

    pub fn gate(&self) -> f64 {
        inlier_gate(self.sigma)
    }
}

pub fn inlier_gate(sigma: f64) -> f64 {
    CHI2_95_2DOF.sqrt() * sigma
}

struct Consensus {
    flags: Vec<bool>,
    count: usize,
    total_error: f64,
}

fn errors_under(h: &Homography, matches: &[Correspondence]) -> Vec<f64> {
    matches
        .iter()
        .map(|c| reprojection_error(h, c).unwrap_or(f64::INFINITY))
        .collect()
}

fn consensus(errors: &[f64], gate: f64) -> Consensus {
    let flags: Vec<bool> = errors.iter().map(|&e| e < gate).collect();
    let count = flags.iter().filter(|&&b| b).count();
    let total_error = errors
        .iter()
        .zip(&flags)
        .filter(|(_, &f)| f)
        .map(|(e, _)| e)
        .sum();
    Consensus {
        flags,
        count,
        total_error,
    }
}

fn sample_indices(seed: u64, iteration: usize, n: usize, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rand::seq::index::sample(&mut rng, n, k).into_vec()
}

/// Adaptive RANSAC homography estimation mapping `p1` onto `p2`.
///
/// Each iteration draws from its own random stream derived from
/// `(seed, iteration)`. The inlier gate is `sqrt(5.99) * sigma`; sigma is
/// the floored RMS error of the incumbent's inliers, capped at
/// `cfg.initial_sigma`, and is refreshed whenever the incumbent changes,
/// after which the incumbent is re-scored under the new gate. Without the
/// cap a wrong incumbent widens its own gate (uniform residuals have an RMS
/// near `gate / sqrt(3)`) and sigma runs away. The winner is refit over its consensus set and the inliers are
/// re-classified once: a correspondence stays an inlier only if it passes
/// the final gate under both the sampled and the refit model.
pub fn ransac(matches: &[Correspondence], cfg: &RansacConfig) -> Result<RansacResult> {
    cfg.validate()?;
    let n = matches.len();
    let k = cfg.sample_size;
    if n < k.max(4) {
        return Err(Error::InsufficientMatches {
            needed: k.max(4),
            have: n,
        });
    }
    let mut sigma = cfg.initial_sigma;
    let mut outlier_ratio = cfg.initial_outlier_ratio;
    let mut budget = required_iterations(cfg.confidence, outlier_ratio, k, cfg.max_iterations);
    let mut best: Option<(Homography, Consensus, Vec<f64>)> = None;
    let mut iteration = 0;
    let mut sample = Vec::with_capacity(k);
    while iteration < budget {
        let idx = sample_indices(cfg.seed, iteration, n, k);
        iteration += 1;
        sample.clear();
        sample.extend(idx.iter().map(|&i| matches[i]));
        let Ok(model) = dlt(&sample) else {
            continue;
        };
        let errors = errors_under(&model, matches);
        let cand = consensus(&errors, inlier_gate(sigma));
        let improves = cand.count > 0
            && match &best {
                None => true,
                Some((_, b, _)) => {
                    cand.count > b.count
                        || (cand.count == b.count && cand.total_error < b.total_error)
                }
            };
        if !improves {
            continue;
        }
        let inlier_errors: Vec<f64> = errors
            .iter()
            .zip(&cand.flags)
            .filter(|(_, &f)| f)
            .map(|(&e, _)| e)
            .collect();
        sigma = update_sigma(&inlier_errors)?.min(cfg.initial_sigma);
        let rescored = consensus(&errors, inlier_gate(sigma));
        outlier_ratio = outlier_ratio.min(1.0 - rescored.count as f64 / n as f64);
        budget = required_iterations(cfg.confidence, outlier_ratio, k, cfg.max_iterations);
        best = Some((model, rescored, errors));
    }
    let Some((best_model, best_consensus, best_errors)) = best else {
        return Err(Error::NoConsensus);
    };
    if best_consensus.count < 4 {
        return Err(Error::NoConsensus);
    }
    let consensus_set: Vec<Correspondence> = matches
        .iter()
        .zip(&best_consensus.flags)
        .filter(|(_, &f)| f)
        .map(|(c, _)| *c)
        .collect();
    let refined = dlt(&consensus_set).unwrap_or(best_model);
    let gate = inlier_gate(sigma);
    let refined_errors = errors_under(&refined, matches);
    let inliers: Vec<bool> = best_errors
        .iter()
        .zip(&refined_errors)
        .map(|(&pre, &post)| pre < gate && post < gate)
        .collect();
    let count = inliers.iter().filter(|&&b| b).count();
    if count < 4 {
        return Err(Error::NoConsensus);
    }
    let inlier_error = refined_errors
        .iter()
        .zip(&inliers)
        .filter(|(_, &f)| f)
        .map(|(e, _)| e)
        .sum();
    Ok(RansacResult {
        homography: refined,
        best_model,
        inliers,
        sigma,
        iterations: iteration,
        inlier_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_homography(rng: &mut impl Rng) -> Homography {
        Homography::new([
            [
                1.0 + rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-20.0..20.0),
            ],
            [
                rng.random_range(-0.2..0.2),
                1.0 + rng.random_range(-0.2..0.2),
                rng.random_range(-20.0..20.0),
            ],
            [
                rng.random_range(-5e-4..5e-4),
                rng.random_range(-5e-4..5e-4),
                1.0,
            ],
        ])
        .unwrap()
    }

    #[test]
    fn apply_examples() {
        assert_eq!(Homography::IDENTITY.apply([5.0, 7.0]).unwrap(), [5.0, 7.0]);
        assert_eq!(
            Homography::translation(3.0, -2.0)
                .apply([0.0, 0.0])
                .unwrap(),
            [3.0, -2.0]
        );
        let h = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.001, 0.0, 1.0]]).unwrap();
        let p = h.apply([100.0, 0.0]).unwrap();
        assert!((p[0] - 100.0 / 1.1).abs() < 1e-12 && p[1] == 0.0);
        assert!(matches!(
            h.apply([-1000.0, 0.0]),
            Err(Error::PointAtInfinity)
        ));
    }

    #[test]
    fn canonical_scaling() {
        let h = Homography::new([[2.0, 0.0, 4.0], [0.0, 2.0, 6.0], [0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(h, Homography::translation(2.0, 3.0));
        assert_eq!(Homography::new(*h.matrix()).unwrap(), h);
        let zero33 = Homography::new([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert!(zero33.is_err(), "rank 2 matrix must be rejected");
        let h = Homography::new([[0.0, -2.0, 1.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let norm: f64 = h
            .matrix()
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(h.matrix()[0][1] > 0.0);
        assert!(Homography::new([[1.0; 3]; 3]).is_err());
    }

    #[test]
    fn normalization_examples() {
        let (t, pts) = normalize_points(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
        let s = std::f64::consts::SQRT_2;
        assert!((t[0][0] - s).abs() < 1e-12 && (t[0][2] + s).abs() < 1e-12);
        assert!((pts[0][0] + s).abs() < 1e-12 && (pts[1][0] - s).abs() < 1e-12);

        let centered = [[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]];
        let (t, _) = normalize_points(&centered).unwrap();
        for (i, row) in t.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!(normalize_points(&[[3.0, 3.0], [3.0, 3.0]]).is_err());
    }

    proptest! {
        #[test]
        fn normalization_centroid_and_radius(pts in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..40)) {
            let pts: Vec<Point> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            if let Ok((_, out)) = normalize_points(&pts) {
                let n = out.len() as f64;
                let cx = out.iter().map(|p| p[0]).sum::<f64>() / n;
                let cy = out.iter().map(|p| p[1]).sum::<f64>() / n;
                let r = out.iter().map(|p| p[0].hypot(p[1])).sum::<f64>() / n;
                prop_assert!(cx.abs() < 1e-12 && cy.abs() < 1e-12);
                prop_assert!((r - std::f64::consts::SQRT_2).abs() < 1e-12);
            }
        }

        #[test]
        fn reprojection_error_scale_invariant(scale in 0.1f64..10.0, x in -100f64..100.0, y in -100f64..100.0) {
            let m = [[1.1, 0.05, 3.0], [-0.02, 0.95, -4.0], [1e-4, 2e-4, 1.0]];
            let h1 = Homography::new(m).unwrap();
            let scaled = m.map(|r| r.map(|v| v * scale));
            let h2 = Homography::new(scaled).unwrap();
            let c = Correspondence::new([x, y], [x + 1.0, y - 2.0]);
            prop_assert!((reprojection_error(&h1, &c).unwrap() - reprojection_error(&h2, &c).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn smallest_vector_of_basis_rows() {
        let mut rows = Vec::new();
        for i in 0..8 {
            let mut r = [0.0; 9];
            r[i] = 1.0;
            rows.push(r);
        }
        let v = smallest_singular_vector(&rows).unwrap();
        assert!((v[8].abs() - 1.0).abs() < 1e-12);
        assert!(v[..8].iter().all(|x| x.abs() < 1e-12));
        assert!(smallest_singular_vector(&rows[..7]).is_err());
    }

    #[test]
    fn smallest_vector_recovers_known_null_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_homography(&mut rng);
        let m = h.matrix();
        let norm = m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let truth: Vec<f64> = m.iter().flatten().map(|v| v / norm).collect();
        let rows: Vec<[f64; 9]> = (0..6)
            .flat_map(|_| {
                let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                dlt_rows(p, h.apply(p).unwrap())
            })
            .collect();
        let v = smallest_singular_vector(&rows).unwrap();
        let sign = v
            .iter()
            .zip(&truth)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .signum();
        for (a, b) in v.iter().zip(&truth) {
            assert!((sign * a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn smallest_vector_minimizes_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<[f64; 9]> = (0..12)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let r = smallest_singular_vector(&rows).unwrap();
        let residual = |u: &[f64; 9]| {
            rows.iter()
                .map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum::<f64>().powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let best = residual(&r);
        for _ in 0..1000 {
            let mut u: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= n);
            assert!(best <= residual(&u) + 1e-9);
        }
    }

    #[test]
    fn dlt_examples() {
        let truth = Homography::new([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let square = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let corr: Vec<_> = square
            .iter()
            .map(|&p| Correspondence::new(p, truth.apply(p).unwrap()))
            .collect();
        assert!(dlt(&corr).unwrap().frobenius_distance(&truth) < 1e-8);

        let same: Vec<_> = square.iter().map(|&p| Correspondence::new(p, p)).collect();
        assert!(
            dlt(&same)
                .unwrap()
                .frobenius_distance(&Homography::IDENTITY)
                < 1e-10
        );

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_homography(&mut rng);
        let corr: Vec<_> = (0..8)
            .map(|_| {
                let p = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
                Correspondence::new(p, h.apply(p).unwrap())
            })
            .collect();
        assert!(dlt(&corr).unwrap().frobenius_distance(&h) < 1e-7);

        let collinear: Vec<_> = (0..4)
            .map(|i| {
                let p = [i as f64, 2.0 * i as f64];
                Correspondence::new(p, p)
            })
            .collect();
        assert!(matches!(dlt(&collinear), Err(Error::Degenerate(_))));
        assert!(dlt(&corr[..3]).is_err());
    }

    #[test]
    fn reprojection_and_sigma() {
        let c = Correspondence::new([0.0, 0.0], [3.0, 4.0]);
        assert_eq!(reprojection_error(&Homography::IDENTITY, &c).unwrap(), 5.0);
        assert_eq!(update_sigma(&[0.0, 0.0, 0.0]).unwrap(), 0.25);
        assert!((update_sigma(&[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(update_sigma(&[0.7]).unwrap(), 0.7);
        assert!(update_sigma(&[]).is_err());
    }

    #[test]
    fn iteration_budget() {
        assert_eq!(required_iterations(0.99, 0.5, 10, 5000), 4714);
        assert_eq!(required_iterations(0.99, 0.5, 10, 1000), 1000);
        assert_eq!(required_iterations(0.99, 0.5, 4, 5000), 72);
        assert_eq!(required_iterations(0.99, 0.0, 10, 5000), 1);
        let mut prev = 0;
        for e in [0.1, 0.2, 0.3, 0.4, 0.5] {
            let n = required_iterations(0.99, e, 6, usize::MAX);
            assert!(n >= prev);
            prev = n;
        }
        assert!(
            required_iterations(0.99, 0.3, 4, usize::MAX)
                <= required_iterations(0.99, 0.3, 8, usize::MAX)
        );
    }

    #[test]
    fn invert_examples() {
        assert_eq!(Homography::IDENTITY.invert().unwrap(), Homography::IDENTITY);
        let inv = Homography::translation(3.0, -2.0).invert().unwrap();
        assert!(inv.frobenius_distance(&Homography::translation(-3.0, 2.0)) < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_homography(&mut rng);
        let hi = h.invert().unwrap();
        for _ in 0..100 {
            let p = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
            let q = hi.apply(h.apply(p).unwrap()).unwrap();
            assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn ransac_outlier_free_and_insufficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = random_homography(&mut rng);
        let matches: Vec<_> = (0..100)
            .map(|_| {
                let p = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
                Correspondence::new(p, h.apply(p).unwrap())
            })
            .collect();
        let res = ransac(&matches, &RansacConfig::default()).unwrap();
        assert_eq!(res.inlier_count(), 100);
        assert!(res.homography.frobenius_distance(&h) < 1e-6);
        assert!(matches!(
            ransac(
                &matches[..3],
                &RansacConfig {
                    sample_size: 4,
                    ..Default::default()
                }
            ),
            Err(Error::InsufficientMatches { .. })
        ));
        assert!(ransac(&matches[..9], &RansacConfig::default()).is_err());
    }

    // Half the matches are uniform junk: sigma must stay bounded by its start
    // value and the true model must win.
    #[test]
    fn ransac_sigma_does_not_run_away() {
        for seed in [4u64, 12, 43, 71] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_homography(&mut rng);
            let mut matches: Vec<_> = (0..100)
                .map(|_| {
                    let p = [rng.random_range(0.0..320.0), rng.random_range(0.0..240.0)];
                    let q = h.apply(p).unwrap();
                    Correspondence::new(p, [q[0] + rng.random_range(-0.5..0.5), q[1]])
                })
                .collect();
            matches.extend((0..100).map(|_| {
                Correspondence::new(
                    [rng.random_range(0.0..320.0), rng.random_range(0.0..240.0)],
                    [rng.random_range(0.0..320.0), rng.random_range(0.0..240.0)],
                )
            }));
            let cfg = RansacConfig {
                seed,
                ..Default::default()
            };
            let res = ransac(&matches, &cfg).unwrap();
            assert!(res.sigma <= cfg.initial_sigma);
            assert!(res.inliers[100..].iter().filter(|&&b| b).count() <= 2);
            assert!(res.inliers[..100].iter().filter(|&&b| b).count() >= 80);
        }
    }

    #[test]
    fn ransac_is_deterministic_and_gates_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = random_homography(&mut rng);
        let mut matches: Vec<_> = (0..60)
            .map(|_| {
                let p = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
                let q = h.apply(p).unwrap();
                Correspondence::new(
                    p,
                    [
                        q[0] + rng.random_range(-0.5..0.5),
                        q[1] + rng.random_range(-0.5..0.5),
                    ],
                )
            })
            .collect();
        matches.extend((0..30).map(|_| {
            Correspondence::new(
                [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)],
                [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)],
            )
        }));
        let cfg = RansacConfig {
            seed: 99,
            ..Default::default()
        };
        let a = ransac(&matches, &cfg).unwrap();
        let b = ransac(&matches, &cfg).unwrap();
        assert_eq!(a, b);
        let gate = a.gate();
        for (c, &f) in matches.iter().zip(&a.inliers) {
            if f {
                assert!(reprojection_error(&a.best_model, c).unwrap() < gate);
            }
        }
        assert!(a.inliers[60..].iter().all(|&f| !f));
        assert!(a.inlier_count() >= 50);
    }
}
