//! Registration metrics, the ICP baseline and the evaluation/benchmark
//! drivers.
//!
//! The error metric is `(1/n)·√(Σ_i ‖T(p_i) − T_gt(p_i)‖²)` over `n` sampled
//! source points, with the `1/n` outside the root. It is smaller than the
//! conventional root-mean-square error by a factor of `√n`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corrnet::{register_pair, CorrNetParams, PipelineOptions};
use crate::datagen::RegistrationPair;
use crate::error::{Error, Result};
use crate::geom3d::{PointCloud, RigidTransform, Vec3};
use crate::kdtree::KdTree;
use crate::latent_gmm::{em_fit, em_register};
use crate::mt_solver::{weighted_umeyama, WeightedCorrespondences};

pub const DEFAULT_RMSE_SAMPLES: usize = 500;
pub const DEFAULT_TAU: f64 = 0.2;
pub const ICP_ANGLE_TOL: f64 = 1e-6;
pub const ICP_TRANSLATION_TOL: f64 = 1e-6;
pub const DEFAULT_ICP_ITERS: usize = 50;

/// Error of `t` against `t_gt` on `n` source points drawn without
/// replacement.
pub fn rmse<R: Rng + ?Sized>(
    t: &RigidTransform,
    t_gt: &RigidTransform,
    source: &PointCloud,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    if n > source.len() {
        return Err(Error::InsufficientPoints { have: source.len(), need: n });
    }
    let idx = index::sample(rng, source.len(), n);
    Ok(rmse_on(t, t_gt, idx.iter().map(|i| &source.points()[i]), n))
}

fn rmse_on<'a>(t: &RigidTransform, t_gt: &RigidTransform, pts: impl Iterator<Item = &'a Vec3>, n: usize) -> f64 {
    let s: f64 = pts.map(|p| (t.apply_point(p) - t_gt.apply_point(p)).norm_squared()).sum();
    s.sqrt() / n as f64
}

/// Fraction of errors strictly below `tau`.
pub fn recall(errors: &[f64], tau: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("error list"));
    }
    Ok(errors.iter().filter(|&&e| e < tau).count() as f64 / errors.len() as f64)
}

/// Empirical CDF points `(e_(k), k/n)` over the sorted errors.
pub fn cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted.into_iter().enumerate().map(|(k, e)| (e, (k + 1) as f64 / n)).collect()
}

#[derive(Clone, Debug)]
pub struct IcpReport {
    pub transform: RigidTransform,
    pub iterations: usize,
    pub converged: bool,
}

/// Point-to-point ICP from `init`: nearest-neighbour matches, then an
/// unweighted Procrustes solve, until the update is below both tolerances.
pub fn icp_point2point(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    iters: usize,
) -> Result<RigidTransform> {
    icp_traced(source, target, init, iters).map(|r| r.transform)
}

pub fn icp_traced(source: &PointCloud, target: &PointCloud, init: &RigidTransform, iters: usize) -> Result<IcpReport> {
    let tree = KdTree::build(target.points());
    let mut t = *init;
    for it in 1..=iters {
        let matched: Vec<Vec3> = source
            .iter()
            .map(|p| target.points()[tree.nearest(&t.apply_point(p)).expect("target is non-empty").0])
            .collect();
        let corr = WeightedCorrespondences::unweighted(source.points().to_vec(), matched)?;
        let next = weighted_umeyama(&corr)?;
        let delta = next.compose(&t.inverse());
        t = next;
        if delta.angle() < ICP_ANGLE_TOL && delta.translation.norm() < ICP_TRANSLATION_TOL {
            return Ok(IcpReport { transform: t, iterations: it, converged: true });
        }
    }
    Ok(IcpReport { transform: t, iterations: iters, converged: false })
}

/// Local refinement of a global estimate.
pub fn refine(global: &RigidTransform, source: &PointCloud, target: &PointCloud, iters: usize) -> Result<RigidTransform> {
    icp_point2point(source, target, global, iters)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Learned correspondences followed by the closed-form solve.
    #[serde(rename = "deepgmr")]
    Learned,
    Em,
    Icp,
}

impl Method {
    pub fn id(self) -> &'static str {
        match self {
            Method::Learned => "deepgmr",
            Method::Em => "em",
            Method::Icp => "icp",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deepgmr" => Ok(Method::Learned),
            "em" => Ok(Method::Em),
            "icp" => Ok(Method::Icp),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

/// A configured registration method.
#[derive(Clone, Debug)]
pub struct Registrar {
    pub method: Method,
    pub params: Option<CorrNetParams>,
    pub pipeline: PipelineOptions,
    pub em_components: usize,
    pub em_iters: usize,
    pub icp_iters: usize,
    pub refine_with_icp: bool,
    pub seed: u64,
}

impl Registrar {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            params: None,
            pipeline: PipelineOptions::default(),
            em_components: 16,
            em_iters: 100,
            icp_iters: DEFAULT_ICP_ITERS,
            refine_with_icp: false,
            seed: 0,
        }
    }

    pub fn learned(params: CorrNetParams) -> Self {
        Self { params: Some(params), ..Self::new(Method::Learned) }
    }

    pub fn label(&self) -> String {
        if self.refine_with_icp {
            format!("{}+icp", self.method.id())
        } else {
            self.method.id().to_string()
        }
    }

    pub fn register(&self, source: &PointCloud, target: &PointCloud) -> Result<RigidTransform> {
        let global = match self.method {
            Method::Learned => {
                let params = self.params.as_ref().ok_or_else(|| Error::Config("learned method needs parameters".into()))?;
                register_pair(params, source, target, &self.pipeline)?.0
            }
            Method::Em => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let gmm = em_fit(target, self.em_components, self.em_iters, &mut rng)?;
                em_register(source, &gmm, &RigidTransform::identity(), self.em_iters)?
            }
            Method::Icp => icp_point2point(source, target, &RigidTransform::identity(), self.icp_iters)?,
        };
        if self.refine_with_icp {
            refine(&global, source, target, self.icp_iters)
        } else {
            Ok(global)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub id: String,
    pub rmse: f64,
    pub ms: f64,
    /// The method returned an error; the identity transform was scored.
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: String,
    pub per_pair: Vec<PairOutcome>,
    pub recall: f64,
    pub mean_rmse: f64,
    pub cdf: Vec<(f64, f64)>,
}

impl EvalResult {
    pub fn from_outcomes(method: String, per_pair: Vec<PairOutcome>, tau: f64) -> Result<Self> {
        let errors: Vec<f64> = per_pair.iter().map(|o| o.rmse).collect();
        let recall = recall(&errors, tau)?;
        let mean_rmse = errors.iter().sum::<f64>() / errors.len() as f64;
        Ok(Self { method, recall, mean_rmse, cdf: cdf(&errors), per_pair })
    }

    pub fn rmse_values(&self) -> Vec<f64> {
        self.per_pair.iter().map(|o| o.rmse).collect()
    }
}

/// Random stream used to pick the scored points of pair `index`; shared by
/// all methods so they are scored on the same points.
pub fn scoring_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Scores `estimate(pair)` on every pair. Runs sequentially so the recorded
/// times are single-threaded.
pub fn evaluate_with<F>(method: &str, pairs: &[RegistrationPair], n: usize, tau: f64, seed: u64, mut estimate: F) -> Result<EvalResult>
where
    F: FnMut(&RegistrationPair) -> Result<RigidTransform>,
{
    if pairs.is_empty() {
        return Err(Error::EmptyInput("evaluation split"));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let start = Instant::now();
        let est = estimate(pair);
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let (t, failed) = match est {
            Ok(t) => (t, false),
            Err(Error::DegenerateConfiguration(_)) | Err(Error::DegenerateGmm(_)) => (RigidTransform::identity(), true),
            Err(e) => return Err(e),
        };
        let n_eff = n.min(pair.source.len());
        let e = rmse(&t, &pair.t_gt, &pair.source, n_eff, &mut scoring_rng(seed, i))?;
        out.push(PairOutcome { id: format!("{i:05}"), rmse: e, ms, failed });
    }
    EvalResult::from_outcomes(method.to_string(), out, tau)
}

pub fn evaluate(registrar: &Registrar, pairs: &[RegistrationPair], n: usize, tau: f64, seed: u64) -> Result<EvalResult> {
    evaluate_with(&registrar.label(), pairs, n, tau, seed, |p| registrar.register(&p.source, &p.target))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub n: usize,
    pub ms: f64,
}

/// Mean wall-clock milliseconds per registration for each cloud size, after
/// one untimed warm-up run. `make_pair(n)` supplies the input.
pub fn bench_runtime<F>(registrar: &Registrar, sizes: &[usize], repeats: usize, mut make_pair: F) -> Result<Vec<BenchRow>>
where
    F: FnMut(usize) -> Result<RegistrationPair>,
{
    if repeats == 0 {
        return Err(Error::InvalidParameter("repeats must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let pair = make_pair(n)?;
        registrar.register(&pair.source, &pair.target)?;
        let start = Instant::now();
        for _ in 0..repeats {
            std::hint::black_box(registrar.register(&pair.source, &pair.target)?);
        }
        let ms = start.elapsed().as_secs_f64() * 1e3 / repeats as f64;
        rows.push(BenchRow { method: registrar.label(), n, ms });
    }
    Ok(rows)
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    let slope = sxy / sxx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    1.0 - ss_res / syy
}

pub fn per_pair_csv(results: &[EvalResult]) -> String {
    let mut s = String::from("pair_id,method,rmse,ms\n");
    for r in results {
        for o in &r.per_pair {
            let _ = writeln!(s, "{},{},{},{}", o.id, r.method, o.rmse, o.ms);
        }
    }
    s
}

pub fn cdf_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("x,y\n");
    for (x, y) in points {
        let _ = writeln!(s, "{x},{y}");
    }
    s
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("method,N,ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.method, r.n, r.ms);
    }
    s
}

pub fn write_csv(path: impl AsRef<Path>, content: &str) -> Result<()> {
    Ok(std::fs::write(path, content)?)
}
