//! Per-point network inputs.
//!
//! [`invariant_features`] describes each point by its `k` nearest neighbours
//! using only norms and relative angles about the cloud centroid, so the
//! result does not change when the cloud is rotated. [`raw_xyz`] passes the
//! centred coordinates through unchanged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{PointCloud, Vec3};
use crate::kdtree::{brute_force_knn, KdTree};

pub const DEFAULT_NEIGHBORS: usize = 8;
pub const AXIS_EPS: f64 = 1e-9;
const TAU: f64 = std::f64::consts::TAU;

/// Row-major `rows × dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch { expected: rows * dim, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("feature entries must be finite".into()));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &i in perm {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: perm.len(), dim: self.dim, data }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Input representation fed to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InputMode {
    InvariantFeatures { k: usize },
    RawXyz,
}

impl Default for InputMode {
    fn default() -> Self {
        InputMode::InvariantFeatures { k: DEFAULT_NEIGHBORS }
    }
}

impl InputMode {
    pub fn dim(&self) -> usize {
        match self {
            InputMode::InvariantFeatures { k } => 4 * k,
            InputMode::RawXyz => 3,
        }
    }

    pub fn compute(&self, cloud: &PointCloud) -> Result<FeatureMatrix> {
        match self {
            InputMode::InvariantFeatures { k } => invariant_features(cloud, *k),
            InputMode::RawXyz => Ok(raw_xyz(cloud)),
        }
    }
}

pub fn raw_xyz(cloud: &PointCloud) -> FeatureMatrix {
    let centered = cloud.centered();
    let data = centered.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    FeatureMatrix { rows: cloud.len(), dim: 3, data }
}

/// Each row holds, for the `k` nearest neighbours `q` of `p` in order of
/// increasing distance, the tuple `(‖p‖, ‖q‖, ∠(p, q), gap)`, where `gap` is
/// the counter-clockwise azimuth from `q` to the next neighbour around the
/// axis through `p`. Coordinates are taken relative to the centroid.
pub fn invariant_features(cloud: &PointCloud, k: usize) -> Result<FeatureMatrix> {
    let pts = cloud.centered().into_points();
    check_sizes(pts.len(), k)?;
    let tree = KdTree::build(&pts);
    build_rows(&pts, k, |i| tree.knn(&pts[i], k, Some(i)))
}

/// Same as [`invariant_features`] with an exhaustive neighbour search.
pub fn invariant_features_brute_force(cloud: &PointCloud, k: usize) -> Result<FeatureMatrix> {
    let pts = cloud.centered().into_points();
    check_sizes(pts.len(), k)?;
    build_rows(&pts, k, |i| brute_force_knn(&pts, &pts[i], k, Some(i)))
}

fn check_sizes(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("neighbour count must be at least 1".into()));
    }
    if n <= k {
        return Err(Error::InsufficientPoints { have: n, need: k + 1 });
    }
    Ok(())
}

fn build_rows<F>(pts: &[Vec3], k: usize, knn: F) -> Result<FeatureMatrix>
where
    F: Fn(usize) -> Vec<(usize, f64)> + Sync,
{
    let dim = 4 * k;
    let mut data = vec![0.0; pts.len() * dim];
    data.par_chunks_mut(dim).enumerate().for_each(|(i, row)| {
        let neighbors: Vec<Vec3> = knn(i).into_iter().map(|(j, _)| pts[j]).collect();
        point_row(&pts[i], &neighbors, row);
    });
    FeatureMatrix::new(pts.len(), dim, data)
}

fn point_row(p: &Vec3, neighbors: &[Vec3], row: &mut [f64]) {
    let pn = p.norm();
    let gaps = if pn < AXIS_EPS { None } else { Some(azimuth_gaps(&(p / pn), neighbors)) };
    for (m, q) in neighbors.iter().enumerate() {
        let out = &mut row[4 * m..4 * m + 4];
        out[0] = pn;
        out[1] = q.norm();
        if let Some(g) = &gaps {
            out[2] = p.cross(q).norm().atan2(p.dot(q));
            out[3] = g[m];
        } else {
            out[2] = 0.0;
            out[3] = 0.0;
        }
    }
}

fn azimuth_gaps(axis: &Vec3, neighbors: &[Vec3]) -> Vec<f64> {
    let seed = Vec3::ith(axis.iamin(), 1.0);
    let e1 = (seed - axis * axis.dot(&seed)).normalize();
    let e2 = axis.cross(&e1);
    let mut azimuths: Vec<(f64, usize)> = Vec::with_capacity(neighbors.len());
    for (m, q) in neighbors.iter().enumerate() {
        let v = q - axis * axis.dot(q);
        if v.norm() >= AXIS_EPS {
            azimuths.push((v.dot(&e2).atan2(v.dot(&e1)).rem_euclid(TAU), m));
        }
    }
    azimuths.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut gaps = vec![0.0; neighbors.len()];
    let count = azimuths.len();
    for (s, &(phi, m)) in azimuths.iter().enumerate() {
        gaps[m] = if count == 1 {
            TAU
        } else {
            let next = azimuths[(s + 1) % count].0;
            (next - phi).rem_euclid(TAU)
        };
    }
    gaps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::random_rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()).unwrap()
    }

    #[test]
    fn two_points_on_sphere() {
        let cloud = PointCloud::from_arrays(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
        let f = invariant_features(&cloud, 1).unwrap();
        for i in 0..2 {
            assert_eq!(&f.row(i)[..2], &[1.0, 1.0]);
        }
    }

    #[test]
    fn too_few_points() {
        let cloud = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(invariant_features(&cloud, 2), Err(Error::InsufficientPoints { .. })));
        assert!(invariant_features(&cloud, 0).is_err());
    }

    #[test]
    fn rotation_leaves_features_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cloud = random_cloud(&mut rng, 128);
        let base = invariant_features(&cloud, 8).unwrap();
        for _ in 0..5 {
            let r = random_rotation(&mut rng);
            let rotated = PointCloud::new(cloud.iter().map(|p| r * p).collect()).unwrap();
            assert!(base.max_abs_diff(&invariant_features(&rotated, 8).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn gaps_cover_full_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 64);
        let f = invariant_features(&cloud, 6).unwrap();
        for i in 0..f.rows() {
            let total: f64 = (0..6).map(|m| f.row(i)[4 * m + 3]).sum();
            assert!((total - TAU).abs() < 1e-9);
        }
    }

    #[test]
    fn point_at_centroid_has_zero_angles() {
        let cloud =
            PointCloud::from_arrays(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, -2.0, 0.0]])
                .unwrap();
        let f = invariant_features(&cloud, 2).unwrap();
        assert_eq!(f.row(2)[2], 0.0);
        assert_eq!(f.row(2)[3], 0.0);
    }

    #[test]
    fn raw_mode_is_centred() {
        let cloud = PointCloud::from_arrays(&[[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]]).unwrap();
        let f = InputMode::RawXyz.compute(&cloud).unwrap();
        assert_eq!(f.as_slice(), &[-1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(InputMode::default().dim(), 32);
    }
}
