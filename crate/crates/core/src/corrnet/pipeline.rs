//! Network → mixture fit → rigid solve, its loss, and the exact reverse-mode
//! gradient of that composition.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{backward, forward_cached, CorrNetParams, ForwardCache};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::geom3d::{Mat3, Mat4, PointCloud, RigidTransform, Vec3};
use crate::latent_gmm::{m_theta_traced, Gmm, MThetaTrace};
use crate::mt_solver::{component_correspondences, weighted_umeyama_detailed, CentroidWeighting, UmeyamaSolution, WeightedCorrespondences};

/// Pairs of singular values whose sum falls below this fraction of the
/// largest make the rotation derivative unbounded.
pub const SVD_GRAD_GUARD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `‖H(T)H(T_gt)⁻¹ − I‖²_F + ‖H(T̂)H(T_gt) − I‖²_F`.
    #[default]
    Mse,
    /// The evaluation metric on the whole source cloud, forward transform only.
    Rmse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub centroid_weighting: CentroidWeighting,
    pub loss: LossKind,
    /// Drop pairs whose rigid solve is degenerate instead of failing the batch.
    pub skip_degenerate: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { centroid_weighting: CentroidWeighting::default(), loss: LossKind::default(), skip_degenerate: true }
    }
}

/// A training or evaluation pair with its network inputs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub source_features: FeatureMatrix,
    pub target_features: FeatureMatrix,
    pub t_gt: RigidTransform,
}

impl PreparedPair {
    pub fn new(params: &CorrNetParams, source: PointCloud, target: PointCloud, t_gt: RigidTransform) -> Result<Self> {
        let mode = params.input_mode();
        Ok(Self { source_features: mode.compute(&source)?, target_features: mode.compute(&target)?, source, target, t_gt })
    }
}

/// Forward and inverse estimates `(T, T̂)` for a pair of clouds.
pub fn register_pair(
    params: &CorrNetParams,
    source: &PointCloud,
    target: &PointCloud,
    opts: &PipelineOptions,
) -> Result<(RigidTransform, RigidTransform)> {
    let mode = params.input_mode();
    let fs = mode.compute(source)?;
    let ft = mode.compute(target)?;
    let fwd = Forward::run(params, source, &fs, target, &ft, opts.centroid_weighting)?;
    Ok((fwd.t.transform, fwd.t_hat.transform))
}

pub fn register_prepared(
    params: &CorrNetParams,
    pair: &PreparedPair,
    opts: &PipelineOptions,
) -> Result<(RigidTransform, RigidTransform)> {
    let fwd = Forward::run(params, &pair.source, &pair.source_features, &pair.target, &pair.target_features, opts.centroid_weighting)?;
    Ok((fwd.t.transform, fwd.t_hat.transform))
}

pub fn loss(t: &RigidTransform, t_hat: &RigidTransform, t_gt: &RigidTransform) -> f64 {
    let g = t_gt.to_homogeneous();
    let gi = t_gt.inverse().to_homogeneous();
    (t.to_homogeneous() * gi - Mat4::identity()).norm_squared()
        + (t_hat.to_homogeneous() * g - Mat4::identity()).norm_squared()
}

/// `(1/N)·√(Σ_i ‖T(p_i) − T_gt(p_i)‖²)` over every source point.
pub fn rmse_loss(t: &RigidTransform, t_gt: &RigidTransform, source: &PointCloud) -> f64 {
    let s: f64 = source.iter().map(|p| (t.apply_point(p) - t_gt.apply_point(p)).norm_squared()).sum();
    s.sqrt() / source.len() as f64
}

struct Forward {
    cache_s: ForwardCache,
    cache_t: ForwardCache,
    theta_s: Gmm,
    trace_s: MThetaTrace,
    theta_t: Gmm,
    trace_t: MThetaTrace,
    corr: WeightedCorrespondences,
    t: UmeyamaSolution,
    corr_hat: WeightedCorrespondences,
    t_hat: UmeyamaSolution,
}

impl Forward {
    fn run(
        params: &CorrNetParams,
        source: &PointCloud,
        fs: &FeatureMatrix,
        target: &PointCloud,
        ft: &FeatureMatrix,
        weighting: CentroidWeighting,
    ) -> Result<Self> {
        if fs.rows() != source.len() {
            return Err(Error::DimensionMismatch { expected: source.len(), got: fs.rows() });
        }
        if ft.rows() != target.len() {
            return Err(Error::DimensionMismatch { expected: target.len(), got: ft.rows() });
        }
        let cache_s = forward_cached(params, fs)?;
        let cache_t = forward_cached(params, ft)?;
        let (theta_s, trace_s) = m_theta_traced(&cache_s.gamma(), source)?;
        let (theta_t, trace_t) = m_theta_traced(&cache_t.gamma(), target)?;
        let corr = component_correspondences(&theta_s, &theta_t, weighting)?;
        let t = weighted_umeyama_detailed(&corr)?;
        let corr_hat = component_correspondences(&theta_t, &theta_s, weighting)?;
        let t_hat = weighted_umeyama_detailed(&corr_hat)?;
        Ok(Self { cache_s, cache_t, theta_s, trace_s, theta_t, trace_t, corr, t, corr_hat, t_hat })
    }
}

/// Loss of one pair under the network.
pub fn sample_loss(params: &CorrNetParams, pair: &PreparedPair, opts: &PipelineOptions) -> Result<f64> {
    let (t, t_hat) = register_prepared(params, pair, opts)?;
    Ok(match opts.loss {
        LossKind::Mse => loss(&t, &t_hat, &pair.t_gt),
        LossKind::Rmse => rmse_loss(&t, &pair.t_gt, &pair.source),
    })
}

#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// The rotation derivative was unbounded and the gradient was zeroed.
    pub zeroed: bool,
}

#[derive(Clone, Debug, Default)]
struct GmmGrad {
    pi: Vec<f64>,
    mu: Vec<Vec3>,
    var: Vec<f64>,
}

impl GmmGrad {
    fn zeros(j: usize) -> Self {
        Self { pi: vec![0.0; j], mu: vec![Vec3::zeros(); j], var: vec![0.0; j] }
    }
}

/// Gradients of a Procrustes solve with respect to its inputs.
struct UmeyamaGrad {
    source: Vec<Vec3>,
    target: Vec<Vec3>,
    weights: Vec<f64>,
    /// Only populated when separate centroid weights were used.
    centroid_weights: Vec<f64>,
}

/// Reverse pass of [`weighted_umeyama_detailed`]. Returns `None` when two
/// signed singular values nearly cancel.
fn umeyama_backward(corr: &WeightedCorrespondences, sol: &UmeyamaSolution, g_r: &Mat3, g_t: &Vec3) -> Option<UmeyamaGrad> {
    let r = &sol.transform.rotation;
    let j = corr.len();
    let g_r = g_r - g_t * sol.source_centroid.transpose();
    let mut g_tc = *g_t;
    let mut g_sc = -r.transpose() * g_t;

    let d = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, sol.reflection_sign));
    let u = sol.svd.u * d;
    let s = Vec3::new(sol.svd.s[0], sol.svd.s[1], sol.svd.s[2] * sol.reflection_sign);
    let a = u.transpose() * g_r * sol.svd.v;
    let mut k = Mat3::zeros();
    for p in 0..3 {
        for q in 0..3 {
            if p == q {
                continue;
            }
            let denom = s[p] + s[q];
            if denom < SVD_GRAD_GUARD * s[0] {
                return None;
            }
            k[(p, q)] = (a[(p, q)] - a[(q, p)]) / denom;
        }
    }
    let g_m = u * k * sol.svd.v.transpose();

    let mut out = UmeyamaGrad {
        source: vec![Vec3::zeros(); j],
        target: vec![Vec3::zeros(); j],
        weights: vec![0.0; j],
        centroid_weights: vec![0.0; j],
    };
    for idx in 0..j {
        let aj = corr.target[idx] - sol.target_centroid;
        let bj = corr.source[idx] - sol.source_centroid;
        let w = corr.weights[idx];
        out.weights[idx] += aj.dot(&(g_m * bj));
        let ga = g_m * bj * w;
        let gb = g_m.transpose() * aj * w;
        out.target[idx] += ga;
        out.source[idx] += gb;
        g_tc -= ga;
        g_sc -= gb;
    }
    let cw = corr.centroid_weights.as_deref().unwrap_or(&corr.weights);
    let total: f64 = cw.iter().sum();
    for idx in 0..j {
        out.target[idx] += g_tc * (cw[idx] / total);
        out.source[idx] += g_sc * (cw[idx] / total);
        let gc = ((corr.target[idx] - sol.target_centroid).dot(&g_tc) + (corr.source[idx] - sol.source_centroid).dot(&g_sc)) / total;
        if corr.centroid_weights.is_some() {
            out.centroid_weights[idx] += gc;
        } else {
            out.weights[idx] += gc;
        }
    }
    Some(out)
}

/// Routes Procrustes gradients back to the mixtures they were built from:
/// source means and weights, target means and variances.
fn scatter(ug: &UmeyamaGrad, src: &Gmm, tgt: &Gmm, weighting: CentroidWeighting, gs: &mut GmmGrad, gt: &mut GmmGrad) {
    for j in 0..src.num_components() {
        gs.mu[j] += ug.source[j];
        gt.mu[j] += ug.target[j];
        let var = tgt.variances()[j];
        gs.pi[j] += ug.weights[j] / var;
        gt.var[j] -= ug.weights[j] * src.weights()[j] / (var * var);
        if weighting == CentroidWeighting::MixtureWeights {
            gs.pi[j] += ug.centroid_weights[j];
        }
    }
}

/// `∂L/∂Γ` from gradients on the fitted mixture.
fn m_theta_backward(gamma: &[f64], cloud: &PointCloud, gmm: &Gmm, trace: &MThetaTrace, g: &GmmGrad) -> Vec<f64> {
    let jn = gmm.num_components();
    let nf = cloud.len() as f64;
    let mut out = vec![0.0; gamma.len()];
    for (i, p) in cloud.iter().enumerate() {
        let row = &mut out[i * jn..(i + 1) * jn];
        for j in 0..jn {
            let mut v = g.pi[j] / nf;
            if !trace.weight_floored[j] {
                let diff = p - gmm.means()[j];
                let mass = trace.mass[j];
                v += g.mu[j].dot(&diff) / mass;
                if !trace.variance_floored[j] {
                    v += g.var[j] * (diff.norm_squared() - 3.0 * trace.raw_variance[j]) / (3.0 * mass);
                }
            }
            row[j] = v;
        }
    }
    out
}

fn split_homogeneous(h: &Mat4) -> (Mat3, Vec3) {
    (h.fixed_view::<3, 3>(0, 0).into_owned(), h.fixed_view::<3, 1>(0, 3).into_owned())
}

/// Loss of one pair and its gradient with respect to every network parameter.
pub fn sample_grad(params: &CorrNetParams, pair: &PreparedPair, opts: &PipelineOptions) -> Result<SampleGrad> {
    let f = Forward::run(params, &pair.source, &pair.source_features, &pair.target, &pair.target_features, opts.centroid_weighting)?;
    let t = &f.t.transform;
    let t_hat = &f.t_hat.transform;
    let (loss_value, g_t, g_t_hat) = match opts.loss {
        LossKind::Mse => {
            let g = pair.t_gt.to_homogeneous();
            let gi = pair.t_gt.inverse().to_homogeneous();
            let a = t.to_homogeneous() * gi - Mat4::identity();
            let b = t_hat.to_homogeneous() * g - Mat4::identity();
            let value = a.norm_squared() + b.norm_squared();
            let dh = a * gi.transpose() * 2.0;
            let dh_hat = b * g.transpose() * 2.0;
            (value, split_homogeneous(&dh), Some(split_homogeneous(&dh_hat)))
        }
        LossKind::Rmse => {
            let n = pair.source.len() as f64;
            let errs: Vec<(Vec3, Vec3)> =
                pair.source.iter().map(|p| (t.apply_point(p) - pair.t_gt.apply_point(p), *p)).collect();
            let s: f64 = errs.iter().map(|(e, _)| e.norm_squared()).sum();
            let root = s.sqrt();
            let mut gr = Mat3::zeros();
            let mut gt = Vec3::zeros();
            if root > 0.0 {
                for (e, p) in &errs {
                    gr += e * p.transpose();
                    gt += e;
                }
                gr /= n * root;
                gt /= n * root;
            }
            (root / n, (gr, gt), None)
        }
    };

    let jn = params.components();
    let mut gs = GmmGrad::zeros(jn);
    let mut gt = GmmGrad::zeros(jn);
    let mut zeroed = false;
    match umeyama_backward(&f.corr, &f.t, &g_t.0, &g_t.1) {
        Some(ug) => scatter(&ug, &f.theta_s, &f.theta_t, opts.centroid_weighting, &mut gs, &mut gt),
        None => zeroed = true,
    }
    if let Some((gr, gtr)) = g_t_hat {
        match umeyama_backward(&f.corr_hat, &f.t_hat, &gr, &gtr) {
            Some(ug) => scatter(&ug, &f.theta_t, &f.theta_s, opts.centroid_weighting, &mut gt, &mut gs),
            None => zeroed = true,
        }
    }
    let mut grad = vec![0.0; params.len()];
    if zeroed {
        warn!("near-repeated singular values in the rigid solve; gradient of this pair set to zero");
        return Ok(SampleGrad { loss: loss_value, grad, zeroed });
    }
    let g_gamma_s = m_theta_backward(f.cache_s.gamma_slice(), &pair.source, &f.theta_s, &f.trace_s, &gs);
    let g_gamma_t = m_theta_backward(f.cache_t.gamma_slice(), &pair.target, &f.theta_t, &f.trace_t, &gt);
    backward(params, &f.cache_s, &g_gamma_s, &mut grad);
    backward(params, &f.cache_t, &g_gamma_t, &mut grad);
    Ok(SampleGrad { loss: loss_value, grad, zeroed })
}

#[derive(Clone, Debug)]
pub struct BatchGrad {
    /// Mean loss over the pairs that contributed.
    pub loss: f64,
    /// Mean gradient over the pairs that contributed.
    pub grad: Vec<f64>,
    pub used: usize,
    pub skipped: usize,
}

/// Mean loss and gradient over a batch. Per-pair work runs on the current
/// rayon pool; the reduction always runs in batch order.
pub fn batch_grad(params: &CorrNetParams, batch: &[&PreparedPair], opts: &PipelineOptions) -> Result<BatchGrad> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let results: Vec<Result<SampleGrad>> = batch.par_iter().map(|p| sample_grad(params, p, opts)).collect();
    let mut grad = vec![0.0; params.len()];
    let mut loss_sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (idx, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => {
                loss_sum += s.loss;
                for (a, b) in grad.iter_mut().zip(&s.grad) {
                    *a += b;
                }
                used += 1;
            }
            Err(Error::DegenerateConfiguration(msg)) if opts.skip_degenerate => {
                warn!("skipping batch entry {idx}: {msg}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if used > 0 {
        let inv = 1.0 / used as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        loss_sum *= inv;
    }
    Ok(BatchGrad { loss: loss_sum, grad, used, skipped })
}

/// Mean loss over a set of pairs, skipping degenerate ones if allowed.
/// Returns `None` when nothing contributed.
pub fn mean_loss(params: &CorrNetParams, pairs: &[&PreparedPair], opts: &PipelineOptions) -> Result<Option<f64>> {
    let results: Vec<Result<f64>> = pairs.par_iter().map(|p| sample_loss(params, p, opts)).collect();
    let mut sum = 0.0;
    let mut used = 0usize;
    for r in results {
        match r {
            Ok(v) => {
                sum += v;
                used += 1;
            }
            Err(Error::DegenerateConfiguration(_)) if opts.skip_degenerate => {}
            Err(e) => return Err(e),
        }
    }
    Ok((used > 0).then(|| sum / used as f64))
}
