//! Isotropic Gaussian mixtures: the closed-form parameter block, the E-step
//! posterior and the classical EM fitting / registration baselines.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom3d::{PointCloud, RigidTransform, Vec3};
use crate::mt_solver::{mt_block, objective_double_sum};

/// Lower bound on every component variance.
pub const SIGMA2_FLOOR: f64 = 1e-6;
/// Components whose mass `N π_j` falls below `WEIGHT_FLOOR_FRACTION * N` are
/// collapsed onto the cloud centroid with variance [`SIGMA2_FLOOR`].
pub const WEIGHT_FLOOR_FRACTION: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `J` isotropic components `{π_j, μ_j, σ_j²}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<Vec3>,
    variances: Vec<f64>,
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec3>, variances: Vec<f64>) -> Result<Self> {
        let j = weights.len();
        if j == 0 {
            return Err(Error::EmptyInput("mixture components"));
        }
        if means.len() != j {
            return Err(Error::DimensionMismatch { expected: j, got: means.len() });
        }
        if variances.len() != j {
            return Err(Error::DimensionMismatch { expected: j, got: variances.len() });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("mixture weights sum to {total}, not 1")));
        }
        if means.iter().any(|m| !m.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidParameter("mixture means must be finite".into()));
        }
        if variances.iter().any(|v| !v.is_finite() || *v < SIGMA2_FLOOR) {
            return Err(Error::InvalidParameter(format!("variances must be finite and >= {SIGMA2_FLOOR}")));
        }
        Ok(Self { weights, means, variances })
    }

    pub(crate) fn from_parts_unchecked(weights: Vec<f64>, means: Vec<Vec3>, variances: Vec<f64>) -> Self {
        Self { weights, means, variances }
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec3] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Same mixture with every mean mapped through `t`.
    pub fn transformed(&self, t: &RigidTransform) -> Gmm {
        Gmm {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| t.apply_point(m)).collect(),
            variances: self.variances.clone(),
        }
    }

    /// `ln π_j + ln N(x | μ_j, σ_j² I)` for every component.
    pub fn component_log_densities(&self, x: &Vec3, out: &mut [f64]) {
        for j in 0..self.weights.len() {
            let var = self.variances[j];
            let d2 = (x - self.means[j]).norm_squared();
            out[j] = self.weights[j].ln() - 1.5 * (LN_2PI + var.ln()) - d2 / (2.0 * var);
        }
    }

    /// Ancestral sample: pick a component by weight, then draw from it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.weights.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = j;
                break;
            }
        }
        let sd = self.variances[pick].sqrt();
        let n = rand_distr::StandardNormal;
        let z = Vec3::new(rng.sample::<f64, _>(n), rng.sample::<f64, _>(n), rng.sample::<f64, _>(n));
        self.means[pick] + z * sd
    }
}

/// Row-stochastic `N x J` correspondence matrix, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Gamma {
    n: usize,
    j: usize,
    data: Vec<f64>,
}

impl Gamma {
    /// Validates non-negative finite entries and row sums of 1 within `1e-7`.
    pub fn new(n: usize, j: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || j == 0 {
            return Err(Error::EmptyInput("correspondence matrix"));
        }
        if data.len() != n * j {
            return Err(Error::DimensionMismatch { expected: n * j, got: data.len() });
        }
        for (i, row) in data.chunks_exact(j).enumerate() {
            if row.iter().any(|g| !g.is_finite() || *g < 0.0) {
                return Err(Error::InvalidParameter(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-7 {
                return Err(Error::InvalidParameter(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { n, j, data })
    }

    pub(crate) fn from_raw_unchecked(n: usize, j: usize, data: Vec<f64>) -> Self {
        Self { n, j, data }
    }

    pub fn uniform(n: usize, j: usize) -> Self {
        Self { n, j, data: vec![1.0 / j as f64; n * j] }
    }

    /// Hard assignment of point `i` to component `labels[i]`.
    pub fn one_hot(labels: &[usize], j: usize) -> Result<Self> {
        let mut data = vec![0.0; labels.len() * j];
        for (i, &l) in labels.iter().enumerate() {
            if l >= j {
                return Err(Error::InvalidParameter(format!("label {l} out of range for {j} components")));
            }
            data[i * j + l] = 1.0;
        }
        Self::new(labels.len(), j, data)
    }

    pub fn num_points(&self) -> usize {
        self.n
    }

    pub fn num_components(&self) -> usize {
        self.j
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.j + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.j..(i + 1) * self.j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Rows with indices permuted: output row `k` is input row `perm[k]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Gamma {
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Gamma { n: perm.len(), j: self.j, data }
    }
}

/// Posterior responsibilities `γ_ij ∝ π_j N(p_i | μ_j, σ_j² I)`, normalized
/// per row with a max-shifted log-sum-exp.
pub fn posterior_gamma(cloud: &PointCloud, gmm: &Gmm) -> Result<Gamma> {
    let j = gmm.num_components();
    let mut data = vec![0.0; cloud.len() * j];
    let mut logs = vec![0.0; j];
    for (i, p) in cloud.iter().enumerate() {
        gmm.component_log_densities(p, &mut logs);
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateGmm(format!("point {i} has zero density under every component")));
        }
        let row = &mut data[i * j..(i + 1) * j];
        let mut denom = 0.0;
        for (r, l) in row.iter_mut().zip(&logs) {
            *r = (l - max).exp();
            denom += *r;
        }
        for r in row.iter_mut() {
            *r /= denom;
        }
    }
    Ok(Gamma { n: cloud.len(), j, data })
}

/// Per-component bookkeeping from [`m_theta_traced`], needed to differentiate
/// through the block.
#[derive(Clone, Debug)]
pub struct MThetaTrace {
    /// `S_j = Σ_i γ_ij = N π_j`.
    pub mass: Vec<f64>,
    /// Unfloored variance estimate.
    pub raw_variance: Vec<f64>,
    pub variance_floored: Vec<bool>,
    pub weight_floored: Vec<bool>,
}

/// Closed-form mixture parameters from correspondences (weighted moments):
/// `π_j = S_j / N`, `μ_j = Σ_i γ_ij p_i / S_j` and
/// `σ_j² = Σ_i γ_ij ‖p_i − μ_j‖² / (3 S_j)`.
pub fn m_theta(gamma: &Gamma, cloud: &PointCloud) -> Result<Gmm> {
    m_theta_traced(gamma, cloud).map(|(g, _)| g)
}

pub fn m_theta_traced(gamma: &Gamma, cloud: &PointCloud) -> Result<(Gmm, MThetaTrace)> {
    let n = cloud.len();
    if gamma.num_points() != n {
        return Err(Error::DimensionMismatch { expected: n, got: gamma.num_points() });
    }
    let jn = gamma.num_components();
    let nf = n as f64;
    let pts = cloud.points();

    let mut mass = vec![0.0; jn];
    let mut sums = vec![Vec3::zeros(); jn];
    for (i, p) in pts.iter().enumerate() {
        for (j, &g) in gamma.row(i).iter().enumerate() {
            mass[j] += g;
            sums[j] += p * g;
        }
    }
    let centroid = cloud.centroid();
    let weight_floored: Vec<bool> = mass.iter().map(|&s| s < WEIGHT_FLOOR_FRACTION * nf).collect();
    let means: Vec<Vec3> =
        (0..jn).map(|j| if weight_floored[j] { centroid } else { sums[j] / mass[j] }).collect();

    let mut spread = vec![0.0; jn];
    for (i, p) in pts.iter().enumerate() {
        for (j, &g) in gamma.row(i).iter().enumerate() {
            spread[j] += g * (p - means[j]).norm_squared();
        }
    }
    let mut raw_variance = vec![0.0; jn];
    let mut variance_floored = vec![false; jn];
    let mut variances = vec![0.0; jn];
    for j in 0..jn {
        if weight_floored[j] {
            raw_variance[j] = SIGMA2_FLOOR;
            variance_floored[j] = true;
            variances[j] = SIGMA2_FLOOR;
            continue;
        }
        raw_variance[j] = spread[j] / (3.0 * mass[j]);
        if raw_variance[j] < SIGMA2_FLOOR {
            variance_floored[j] = true;
            variances[j] = SIGMA2_FLOOR;
        } else {
            variances[j] = raw_variance[j];
        }
    }
    let weights: Vec<f64> = mass.iter().map(|s| s / nf).collect();
    Ok((
        Gmm::from_parts_unchecked(weights, means, variances),
        MThetaTrace { mass, raw_variance, variance_floored, weight_floored },
    ))
}

/// `Σ_i ln Σ_j π_j N(p_i | μ_j, σ_j² I)`.
pub fn log_likelihood(cloud: &PointCloud, gmm: &Gmm) -> f64 {
    let mut logs = vec![0.0; gmm.num_components()];
    let mut total = 0.0;
    for p in cloud.iter() {
        gmm.component_log_densities(p, &mut logs);
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return f64::NEG_INFINITY;
        }
        let s: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        total += max + s.ln();
    }
    total
}

#[derive(Clone, Debug)]
pub struct EmFitReport {
    pub gmm: Gmm,
    /// Log-likelihood of the initialization followed by one entry per
    /// completed iteration.
    pub log_likelihoods: Vec<f64>,
}

/// Maximum-likelihood isotropic mixture fitted by EM.
pub fn em_fit<R: Rng + ?Sized>(cloud: &PointCloud, j: usize, iters: usize, rng: &mut R) -> Result<Gmm> {
    em_fit_traced(cloud, j, iters, rng).map(|r| r.gmm)
}

/// Relative log-likelihood improvement below which EM stops.
pub const EM_FIT_TOL: f64 = 1e-7;

pub fn em_fit_traced<R: Rng + ?Sized>(
    cloud: &PointCloud,
    j: usize,
    iters: usize,
    rng: &mut R,
) -> Result<EmFitReport> {
    if j == 0 {
        return Err(Error::InvalidParameter("component count must be positive".into()));
    }
    if cloud.len() < j {
        return Err(Error::InsufficientPoints { have: cloud.len(), need: j });
    }
    let mut gmm = kmeans_pp_init(cloud, j, rng);
    let mut ll = log_likelihood(cloud, &gmm);
    let mut history = vec![ll];
    for _ in 0..iters {
        let gamma = posterior_gamma(cloud, &gmm)?;
        let next = m_theta(&gamma, cloud)?;
        let next_ll = log_likelihood(cloud, &next);
        history.push(next_ll);
        gmm = next;
        let improvement = next_ll - ll;
        ll = next_ll;
        if improvement < EM_FIT_TOL * ll.abs().max(1.0) {
            break;
        }
    }
    Ok(EmFitReport { gmm, log_likelihoods: history })
}

/// k-means++ seeding of the means; uniform weights; variance equal to the mean
/// squared distance to the nearest seed.
fn kmeans_pp_init<R: Rng + ?Sized>(cloud: &PointCloud, j: usize, rng: &mut R) -> Gmm {
    let pts = cloud.points();
    let mut seeds = Vec::with_capacity(j);
    seeds.push(pts[rng.random_range(0..pts.len())]);
    let mut d2: Vec<f64> = pts.iter().map(|p| (p - seeds[0]).norm_squared()).collect();
    while seeds.len() < j {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = pts.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..pts.len())
        };
        let s = pts[pick];
        seeds.push(s);
        for (d, p) in d2.iter_mut().zip(pts) {
            *d = d.min((p - s).norm_squared());
        }
    }
    let var = (d2.iter().sum::<f64>() / pts.len() as f64).max(SIGMA2_FLOOR);
    Gmm::from_parts_unchecked(vec![1.0 / j as f64; j], seeds, vec![var; j])
}

/// Stop when an update rotates by less than this (radians)...
pub const EM_REGISTER_ANGLE_TOL: f64 = 1e-6;
/// ...and translates by less than this.
pub const EM_REGISTER_TRANSLATION_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct EmRegisterStep {
    /// Expected complete-data objective at the previous transform, under the
    /// correspondences of this iteration.
    pub objective_before: f64,
    /// Same objective at the updated transform.
    pub objective_after: f64,
    /// Log-likelihood of the moved source before the update.
    pub log_likelihood: f64,
}

#[derive(Clone, Debug)]
pub struct EmRegisterReport {
    pub transform: RigidTransform,
    pub steps: Vec<EmRegisterStep>,
}

/// Registers `source` to a fixed mixture by alternating posterior
/// correspondences (E) with the closed-form rigid update (M).
pub fn em_register(source: &PointCloud, gmm: &Gmm, init: &RigidTransform, iters: usize) -> Result<RigidTransform> {
    em_register_traced(source, gmm, init, iters).map(|r| r.transform)
}

pub fn em_register_traced(
    source: &PointCloud,
    gmm: &Gmm,
    init: &RigidTransform,
    iters: usize,
) -> Result<EmRegisterReport> {
    let mut t = *init;
    let mut steps = Vec::new();
    for _ in 0..iters {
        let moved = source.transformed(&t);
        let gamma = posterior_gamma(&moved, gmm)?;
        let src_gmm = m_theta(&gamma, source)?;
        let next = mt_block(&gamma, &src_gmm, gmm)?;
        steps.push(EmRegisterStep {
            objective_before: objective_double_sum(&t, &gamma, source, gmm),
            objective_after: objective_double_sum(&next, &gamma, source, gmm),
            log_likelihood: log_likelihood(&moved, gmm),
        });
        let delta = next.compose(&t.inverse());
        t = next;
        if delta.angle() < EM_REGISTER_ANGLE_TOL && delta.translation.norm() < EM_REGISTER_TRANSLATION_TOL {
            break;
        }
    }
    Ok(EmRegisterReport { transform: t, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()).unwrap()
    }

    #[test]
    fn single_component_posterior_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cloud = random_cloud(&mut rng, 20);
        let g = Gmm::new(vec![1.0], vec![Vec3::zeros()], vec![0.3]).unwrap();
        let gamma = posterior_gamma(&cloud, &g).unwrap();
        assert!(gamma.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn equidistant_point_splits_evenly() {
        let g = Gmm::new(vec![0.5, 0.5], vec![Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)], vec![0.7, 0.7])
            .unwrap();
        let cloud = PointCloud::from_arrays(&[[0.0, 2.0, -1.0]]).unwrap();
        let gamma = posterior_gamma(&cloud, &g).unwrap();
        assert!((gamma.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn far_points_still_normalize() {
        // Every density underflows in linear space; log-space stays exact.
        let g = Gmm::new(vec![0.5, 0.5], vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)], vec![1e-6, 1e-6]).unwrap();
        let cloud = PointCloud::from_arrays(&[[300.0, 0.0, 0.0]]).unwrap();
        let gamma = posterior_gamma(&cloud, &g).unwrap();
        assert_eq!(gamma.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn zero_weight_everywhere_is_degenerate() {
        let g = Gmm::from_parts_unchecked(vec![0.0, 0.0], vec![Vec3::zeros(); 2], vec![1.0; 2]);
        let cloud = PointCloud::from_arrays(&[[0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(posterior_gamma(&cloud, &g), Err(Error::DegenerateGmm(_))));
    }

    #[test]
    fn m_theta_one_hot_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 5);
        let gamma = Gamma::one_hot(&[2, 0, 4, 1, 3], 5).unwrap();
        let g = m_theta(&gamma, &cloud).unwrap();
        assert_eq!(g.means()[2], cloud.points()[0]);
        assert!(g.weights().iter().all(|&w| (w - 0.2).abs() < 1e-15));
        assert!(g.variances().iter().all(|&v| v == SIGMA2_FLOOR));

        let g = m_theta(&Gamma::uniform(5, 3), &cloud).unwrap();
        for m in g.means() {
            assert!((m - cloud.centroid()).norm() < 1e-14);
        }
        assert!(g.weights().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn m_theta_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 5);
        assert!(m_theta(&Gamma::uniform(4, 2), &cloud).is_err());
    }

    #[test]
    fn empty_component_collapses_to_centroid() {
        let cloud = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let gamma = Gamma::one_hot(&[0, 0], 2).unwrap();
        let g = m_theta(&gamma, &cloud).unwrap();
        assert_eq!(g.weights()[1], 0.0);
        assert_eq!(g.means()[1], Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(g.variances()[1], SIGMA2_FLOOR);
    }

    #[test]
    fn log_likelihood_at_mean() {
        let g = Gmm::new(vec![1.0], vec![Vec3::new(0.1, 0.2, 0.3)], vec![1.0]).unwrap();
        let cloud = PointCloud::from_arrays(&[[0.1, 0.2, 0.3]]).unwrap();
        let expected = -1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((log_likelihood(&cloud, &g) - expected).abs() < 1e-14);
    }

    #[test]
    fn em_fit_needs_enough_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 3);
        assert!(matches!(em_fit(&cloud, 4, 10, &mut rng), Err(Error::InsufficientPoints { .. })));
    }

    #[test]
    fn em_fit_single_component_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 50);
        let report = em_fit_traced(&cloud, 1, 1, &mut rng).unwrap();
        let c = cloud.centroid();
        let msd = cloud.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / 50.0;
        assert!((report.gmm.means()[0] - c).norm() < 1e-14);
        assert!((report.gmm.variances()[0] - msd / 3.0).abs() < 1e-14);
        assert_eq!(report.log_likelihoods.len(), 2);
    }

    #[test]
    fn em_fit_degenerate_clusters() {
        let centers = [Vec3::new(-3.0, 0.0, 0.0), Vec3::new(3.0, 1.0, 0.0), Vec3::new(0.0, 4.0, 2.0)];
        let counts = [5usize, 10, 25];
        let mut pts = Vec::new();
        for (c, &k) in centers.iter().zip(&counts) {
            pts.extend(std::iter::repeat_n(*c, k));
        }
        let cloud = PointCloud::new(pts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = em_fit(&cloud, 3, 100, &mut rng).unwrap();
        for (c, &k) in centers.iter().zip(&counts) {
            let j = (0..3).min_by(|&a, &b| (g.means()[a] - c).norm().total_cmp(&(g.means()[b] - c).norm())).unwrap();
            assert!((g.means()[j] - c).norm() < 1e-6);
            assert!((g.weights()[j] - k as f64 / 40.0).abs() < 1e-6);
        }
    }
}
