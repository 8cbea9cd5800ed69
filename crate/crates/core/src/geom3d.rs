//! Point clouds and rigid transforms.

use nalgebra::{Matrix3, Matrix4, Unit, UnitQuaternion, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::nearest_rotation;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Frobenius defect of `R^T R - I` above which composed rotations are
/// projected back onto SO(3).
pub const REORTHONORMALIZE_THRESHOLD: f64 = 1e-7;

/// An ordered set of 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    /// Validates `N >= 1` and that every coordinate is finite.
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("point cloud"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidParameter(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn from_arrays(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec3> {
        self.points.iter()
    }

    pub fn centroid(&self) -> Vec3 {
        let mut sum = Vec3::zeros();
        for p in &self.points {
            sum += p;
        }
        sum / self.points.len() as f64
    }

    /// Copy translated so that the centroid sits at the origin.
    pub fn centered(&self) -> PointCloud {
        let c = self.centroid();
        PointCloud { points: self.points.iter().map(|p| p - c).collect() }
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        apply_transform(t, self)
    }

    /// Sub-cloud made of the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

/// Proper rigid motion `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    /// Checked constructor: `R^T R = I` and `det R = +1` within `1e-9`.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let t = Self { rotation, translation };
        if !t.is_valid(1e-9) {
            return Err(Error::InvalidParameter(format!(
                "rotation is not in SO(3): orthogonality defect {:.3e}, det {:.12}",
                t.orthogonality_defect(),
                rotation.determinant()
            )));
        }
        Ok(t)
    }

    pub fn from_parts_unchecked(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation: t }
    }

    pub fn from_rotation(r: Mat3) -> Self {
        Self { rotation: r, translation: Vec3::zeros() }
    }

    pub fn orthogonality_defect(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).norm()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
            && self.orthogonality_defect() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut out = RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        if out.orthogonality_defect() > REORTHONORMALIZE_THRESHOLD {
            out.rotation = nearest_rotation(&out.rotation);
        }
        out
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn to_homogeneous(&self) -> Mat4 {
        let mut h = Mat4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }

    /// Accepts a homogeneous matrix whose last row is `0 0 0 1` and whose
    /// rotation block is in SO(3) within `1e-6`. Blocks outside the `1e-9`
    /// invariant are re-projected onto SO(3); others are kept bit for bit.
    pub fn from_homogeneous(h: &Mat4) -> Result<Self> {
        let last = h.row(3);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > 1e-9 {
            return Err(Error::InvalidParameter("last row of a rigid transform must be 0 0 0 1".into()));
        }
        let r: Mat3 = h.fixed_view::<3, 3>(0, 0).into();
        let t: Vec3 = h.fixed_view::<3, 1>(0, 3).into();
        let mut candidate = Self { rotation: r, translation: t };
        if !candidate.is_valid(1e-6) {
            return Err(Error::InvalidParameter("rotation block is not a proper rotation".into()));
        }
        if !candidate.is_valid(1e-9) {
            candidate.rotation = nearest_rotation(&r);
        }
        Ok(candidate)
    }

    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud { points: cloud.points.iter().map(|p| t.apply_point(p)).collect() }
}

pub fn compose(t1: &RigidTransform, t2: &RigidTransform) -> RigidTransform {
    t1.compose(t2)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Uniform rotation on SO(3) from a uniformly distributed unit quaternion
/// (Shoemake's subgroup algorithm).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (s2, c2) = (std::f64::consts::TAU * u2).sin_cos();
    let (s3, c3) = (std::f64::consts::TAU * u3).sin_cos();
    let q = nalgebra::Quaternion::new(b * c3, a * s2, a * c2, b * s3);
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Angle of a rotation in `[0, π]`, from `2 sin θ = ‖vee(R − Rᵀ)‖` and
/// `2 cos θ = tr R − 1`, which stays accurate near 0 and π.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let v = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    v.norm().atan2(r.trace() - 1.0)
}

/// Rodrigues' formula.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let k = Unit::new_normalize(*axis);
    let kx = k.cross_matrix();
    Mat3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// Uniform translation in `[-half, half]^3`.
pub fn random_translation<R: Rng + ?Sized>(rng: &mut R, half: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-half..=half),
        rng.random_range(-half..=half),
        rng.random_range(-half..=half),
    )
}

pub fn random_transform<R: Rng + ?Sized>(rng: &mut R, translation_half: f64) -> RigidTransform {
    RigidTransform { rotation: random_rotation(rng), translation: random_translation(rng, translation_half) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn identity_leaves_points() {
        let p = PointCloud::from_arrays(&[[1.0, -2.0, 3.0], [0.5, 0.25, 0.0]]).unwrap();
        assert_eq!(apply_transform(&RigidTransform::identity(), &p), p);
    }

    #[test]
    fn translation_moves_origin() {
        let p = PointCloud::from_arrays(&[[0.0, 0.0, 0.0]]).unwrap();
        let t = RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(apply_transform(&t, &p).points()[0], Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn rejects_reflection() {
        let r = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(r, Vec3::zeros()).is_err());
    }

    #[test]
    fn compose_and_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_transform(&mut rng, 1.0);
        assert_eq!(t.compose(&RigidTransform::identity()), t);
        let e = t.compose(&t.inverse());
        assert!((e.rotation - Mat3::identity()).norm() < 1e-10);
        assert!(e.translation.norm() < 1e-10);
        assert_eq!(RigidTransform::identity().inverse(), RigidTransform::identity());
        let tr = RigidTransform::from_translation(Vec3::new(0.3, -1.0, 2.0));
        assert_eq!(tr.inverse().translation, Vec3::new(-0.3, 1.0, -2.0));
    }

    #[test]
    fn random_rotation_is_proper_and_reproducible() {
        let a = random_rotation(&mut ChaCha8Rng::seed_from_u64(42));
        let b = random_rotation(&mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
        assert!((a.transpose() * a - Mat3::identity()).norm() < 1e-9);
        assert!((a.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_angle_cases() {
        assert_eq!(rotation_angle(&Mat3::identity()), 0.0);
        let rz = axis_angle(&Vec3::z(), PI);
        assert!((rotation_angle(&rz) - PI).abs() < 1e-12);
        let r = axis_angle(&Vec3::new(0.3, -0.4, 0.5), 1.234);
        assert!((rotation_angle(&r) - 1.234).abs() < 1e-9);
    }

    #[test]
    fn homogeneous_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_transform(&mut rng, 0.5);
        let back = RigidTransform::from_homogeneous(&t.to_homogeneous()).unwrap();
        assert!((back.rotation - t.rotation).norm() < 1e-14);
        assert_eq!(back.translation, t.translation);
        let mut bad = t.to_homogeneous();
        bad[(3, 0)] = 0.5;
        assert!(RigidTransform::from_homogeneous(&bad).is_err());
    }

    #[test]
    fn long_composition_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut acc = RigidTransform::identity();
        for _ in 0..100_000 {
            acc = acc.compose(&RigidTransform::from_rotation(random_rotation(&mut rng)));
        }
        assert!(acc.is_valid(1e-9));
    }
}
