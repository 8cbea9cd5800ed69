//! The rigid-update block: correspondence objectives, the reflection-safe
//! weighted Procrustes solver, and a Monte-Carlo cross-entropy estimate used
//! as a test oracle.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom3d::{Mat3, PointCloud, RigidTransform, Vec3};
use crate::latent_gmm::{Gamma, Gmm};
use crate::linalg::{svd3, Svd3};

/// Relative singular-value ratio under which the rotation is not unique.
pub const DEGENERACY_RATIO: f64 = 1e-12;

/// `Σ_i Σ_j γ_ij ‖T(p_i) − μ_j‖² / σ_j²`.
pub fn objective_double_sum(t: &RigidTransform, gamma: &Gamma, source: &PointCloud, target: &Gmm) -> f64 {
    let mut total = 0.0;
    for (i, p) in source.iter().enumerate() {
        let q = t.apply_point(p);
        for (j, g) in gamma.row(i).iter().enumerate() {
            total += g * (q - target.means()[j]).norm_squared() / target.variances()[j];
        }
    }
    total
}

/// `Σ_j (π̂_j / σ_j²) ‖T(μ̂_j) − μ_j‖²`.
pub fn objective_single_sum(t: &RigidTransform, source: &Gmm, target: &Gmm) -> f64 {
    (0..source.num_components())
        .map(|j| {
            let w = source.weights()[j] / target.variances()[j];
            w * (t.apply_point(&source.means()[j]) - target.means()[j]).norm_squared()
        })
        .sum()
}

/// Weighted point pairs for the Procrustes problem
/// `min_T Σ_j w_j ‖T(source_j) − target_j‖²`.
#[derive(Clone, Debug)]
pub struct WeightedCorrespondences {
    pub source: Vec<Vec3>,
    pub target: Vec<Vec3>,
    pub weights: Vec<f64>,
    /// Weights for the two centroids; `None` uses `weights`.
    pub centroid_weights: Option<Vec<f64>>,
}

impl WeightedCorrespondences {
    pub fn new(source: Vec<Vec3>, target: Vec<Vec3>, weights: Vec<f64>) -> Result<Self> {
        let c = Self { source, target, weights, centroid_weights: None };
        c.validate()?;
        Ok(c)
    }

    pub fn unweighted(source: Vec<Vec3>, target: Vec<Vec3>) -> Result<Self> {
        let w = vec![1.0; source.len()];
        Self::new(source, target, w)
    }

    pub fn with_centroid_weights(mut self, cw: Vec<f64>) -> Result<Self> {
        self.centroid_weights = Some(cw);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.source.len();
        if n == 0 {
            return Err(Error::EmptyInput("correspondences"));
        }
        if self.target.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.target.len() });
        }
        if self.weights.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.weights.len() });
        }
        check_weights(&self.weights, "weights")?;
        if let Some(cw) = &self.centroid_weights {
            if cw.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: cw.len() });
            }
            check_weights(cw, "centroid weights")?;
        }
        Ok(())
    }

    pub fn objective(&self, t: &RigidTransform) -> f64 {
        self.source
            .iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((s, d), w)| w * (t.apply_point(s) - d).norm_squared())
            .sum()
    }
}

fn check_weights(w: &[f64], what: &str) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidParameter(format!("{what} must be finite and non-negative")));
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::DegenerateConfiguration(format!("{what} sum to zero")));
    }
    Ok(())
}

/// Everything the solver computed, kept for differentiation.
#[derive(Clone, Debug)]
pub struct UmeyamaSolution {
    pub transform: RigidTransform,
    pub source_centroid: Vec3,
    pub target_centroid: Vec3,
    pub cross_covariance: Mat3,
    pub svd: Svd3,
    /// `det(U V^T)`, the sign applied to the last singular direction.
    pub reflection_sign: f64,
}

/// Closed-form minimizer of `Σ_j w_j ‖R s_j + t − d_j‖²` over proper rigid
/// motions.
///
/// With normalized centroid weights the centroids are `d_c` and `s_c`, the
/// cross-covariance is `M = Σ_j w_j (d_j − d_c)(s_j − s_c)^T = U S V^T` and
/// `R = U diag(1, 1, det(U V^T)) V^T`, `t = d_c − R s_c`. The sign fix keeps
/// `det R = +1` when the best orthogonal fit would be a reflection.
pub fn weighted_umeyama(corr: &WeightedCorrespondences) -> Result<RigidTransform> {
    weighted_umeyama_detailed(corr).map(|s| s.transform)
}

pub fn weighted_umeyama_detailed(corr: &WeightedCorrespondences) -> Result<UmeyamaSolution> {
    corr.validate()?;
    let cw = corr.centroid_weights.as_deref().unwrap_or(&corr.weights);
    let total: f64 = cw.iter().sum();
    let mut source_centroid = Vec3::zeros();
    let mut target_centroid = Vec3::zeros();
    for ((s, d), w) in corr.source.iter().zip(&corr.target).zip(cw) {
        source_centroid += s * (w / total);
        target_centroid += d * (w / total);
    }
    let mut m = Mat3::zeros();
    for ((s, d), w) in corr.source.iter().zip(&corr.target).zip(&corr.weights) {
        m += (d - target_centroid) * (s - source_centroid).transpose() * *w;
    }
    let svd = svd3(&m);
    let s = svd.s;
    if s[0] <= 0.0 || (s[1] < DEGENERACY_RATIO * s[0] && s[2] < DEGENERACY_RATIO * s[0]) {
        return Err(Error::DegenerateConfiguration(format!(
            "cross-covariance singular values {:.3e}, {:.3e}, {:.3e}",
            s[0], s[1], s[2]
        )));
    }
    let sign = (svd.u * svd.v.transpose()).determinant().signum();
    let rotation = svd.u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, sign)) * svd.v.transpose();
    let translation = target_centroid - rotation * source_centroid;
    Ok(UmeyamaSolution {
        transform: RigidTransform::from_parts_unchecked(rotation, translation),
        source_centroid,
        target_centroid,
        cross_covariance: m,
        svd,
        reflection_sign: sign,
    })
}

/// Which weights define the centroids inside [`mt_block_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CentroidWeighting {
    /// `π̂_j / σ_j²`, the same weights as the objective. The result is then the
    /// exact minimizer of the single-sum objective.
    #[default]
    Objective,
    /// `π̂_j` alone.
    MixtureWeights,
}

/// Builds the Procrustes problem between matched mixture components:
/// source means `μ̂_j`, target means `μ_j`, weights `π̂_j / σ_j²`.
pub fn component_correspondences(
    source: &Gmm,
    target: &Gmm,
    weighting: CentroidWeighting,
) -> Result<WeightedCorrespondences> {
    let j = source.num_components();
    if target.num_components() != j {
        return Err(Error::DimensionMismatch { expected: j, got: target.num_components() });
    }
    let weights: Vec<f64> = (0..j).map(|k| source.weights()[k] / target.variances()[k]).collect();
    let mut corr = WeightedCorrespondences {
        source: source.means().to_vec(),
        target: target.means().to_vec(),
        weights,
        centroid_weights: None,
    };
    if weighting == CentroidWeighting::MixtureWeights {
        corr.centroid_weights = Some(source.weights().to_vec());
    }
    corr.validate()?;
    Ok(corr)
}

/// Optimal transform from the source mixture (fitted with `gamma` on the
/// source cloud) to the target mixture.
pub fn mt_block(gamma: &Gamma, source: &Gmm, target: &Gmm) -> Result<RigidTransform> {
    mt_block_with(gamma, source, target, CentroidWeighting::default())
}

pub fn mt_block_with(
    gamma: &Gamma,
    source: &Gmm,
    target: &Gmm,
    weighting: CentroidWeighting,
) -> Result<RigidTransform> {
    if gamma.num_components() != source.num_components() {
        return Err(Error::DimensionMismatch { expected: source.num_components(), got: gamma.num_components() });
    }
    weighted_umeyama(&component_correspondences(source, target, weighting)?)
}

/// Monte-Carlo estimate of `E_{x ~ src}[ln p(x | tgt)]` with its standard
/// error.
pub fn cross_entropy_mc_with_error<R: Rng + ?Sized>(
    source: &Gmm,
    target: &Gmm,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if samples == 0 {
        return Err(Error::InvalidParameter("sample count must be positive".into()));
    }
    let mut logs = vec![0.0; target.num_components()];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let x = source.sample(rng);
        target.component_log_densities(&x, &mut logs);
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = if samples > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok((mean, (var / n).sqrt()))
}

pub fn cross_entropy_mc<R: Rng + ?Sized>(source: &Gmm, target: &Gmm, samples: usize, rng: &mut R) -> Result<f64> {
    cross_entropy_mc_with_error(source, target, samples, rng).map(|(m, _)| m)
}
