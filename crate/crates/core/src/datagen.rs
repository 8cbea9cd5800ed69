//! Procedural registration datasets.
//!
//! Shapes are triangle meshes from twelve parametric families. Each mesh is
//! centred on its bounding box, scaled into `[-1, 1]³` and sampled uniformly
//! by area. Pairs apply two independent random rigid motions to one sampled
//! cloud and optionally add Gaussian noise or cut partial views.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{random_rotation, random_transform, Mat3, PointCloud, RigidTransform, Vec3};
use crate::io;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_NOISE_VARIANCE: f64 = 0.01;
pub const DEFAULT_TRANSLATION_HALF: f64 = 0.5;
pub const PARTIAL_GRID: usize = 200;
pub const DEFAULT_DENSE_POINTS: usize = 60_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Box,
    Cylinder,
    Cone,
    Torus,
    LBracket,
    Stairs,
    Table,
    Lamp,
    SphereCluster,
    ExtrudedPolygon,
    Helix,
    Composite,
}

impl Family {
    pub const ALL: [Family; 12] = [
        Family::Box,
        Family::Cylinder,
        Family::Cone,
        Family::Torus,
        Family::LBracket,
        Family::Stairs,
        Family::Table,
        Family::Lamp,
        Family::SphereCluster,
        Family::ExtrudedPolygon,
        Family::Helix,
        Family::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Box => "box",
            Family::Cylinder => "cylinder",
            Family::Cone => "cone",
            Family::Torus => "torus",
            Family::LBracket => "l-bracket",
            Family::Stairs => "stairs",
            Family::Table => "table",
            Family::Lamp => "lamp",
            Family::SphereCluster => "sphere-cluster",
            Family::ExtrudedPolygon => "extruded-polygon",
            Family::Helix => "helix",
            Family::Composite => "composite",
        }
    }

    /// Named parameters with their sampling ranges.
    pub fn param_ranges(self) -> &'static [(&'static str, f64, f64)] {
        match self {
            Family::Box => &[("half_x", 0.2, 1.0), ("half_y", 0.2, 1.0), ("half_z", 0.2, 1.0)],
            Family::Cylinder => &[("radius", 0.2, 0.6), ("height", 0.4, 1.6)],
            Family::Cone => &[("radius", 0.3, 0.8), ("height", 0.5, 1.5), ("apex_dx", 0.0, 0.5), ("apex_dy", 0.0, 0.3)],
            Family::Torus => &[("major", 0.5, 0.9), ("minor", 0.1, 0.3), ("sweep", 1.2 * PI, 1.9 * PI)],
            Family::LBracket => &[("arm_a", 0.6, 1.2), ("arm_b", 0.4, 1.0), ("thickness", 0.1, 0.3), ("depth", 0.3, 0.8)],
            Family::Stairs => &[("steps", 2.0, 5.0), ("tread", 0.15, 0.3), ("rise", 0.1, 0.25), ("width", 0.4, 1.0)],
            Family::Table => &[
                ("top_x", 0.5, 1.0),
                ("top_y", 0.3, 0.8),
                ("top_thickness", 0.03, 0.08),
                ("leg_height", 0.4, 0.9),
                ("leg_half_width", 0.03, 0.08),
                ("leg_inset", 0.05, 0.2),
            ],
            Family::Lamp => &[
                ("base_radius", 0.2, 0.4),
                ("base_thickness", 0.03, 0.08),
                ("stem_radius", 0.015, 0.04),
                ("stem_height", 0.6, 1.2),
                ("shade_bottom", 0.2, 0.4),
                ("shade_top", 0.08, 0.2),
                ("shade_height", 0.2, 0.4),
                ("shade_offset", 0.0, 0.3),
            ],
            Family::SphereCluster => &[("count", 3.0, 5.0), ("min_radius", 0.15, 0.25), ("max_radius", 0.25, 0.4)],
            Family::ExtrudedPolygon => &[("vertices", 5.0, 9.0), ("height", 0.2, 1.0), ("min_radius", 0.3, 0.9)],
            Family::Helix => &[("radius", 0.3, 0.6), ("pitch", 0.2, 0.5), ("turns", 1.5, 3.0), ("tube", 0.05, 0.12)],
            Family::Composite => &[
                ("box_x", 0.2, 0.6),
                ("box_y", 0.2, 0.6),
                ("box_z", 0.2, 0.6),
                ("cyl_radius", 0.1, 0.3),
                ("cyl_height", 0.4, 1.0),
                ("cyl_offset", -1.0, 1.0),
            ],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown shape family `{s}`")))
    }
}

/// A concrete shape: family, parameter values in [`Family::param_ranges`]
/// order, and a seed for internal randomization and surface sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: Family,
    pub params: Vec<f64>,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn random<R: Rng + ?Sized>(family: Family, rng: &mut R) -> Self {
        let params = family.param_ranges().iter().map(|&(_, lo, hi)| rng.random_range(lo..=hi)).collect();
        Self { family, params, seed: rng.random() }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = self.family.param_ranges();
        if self.params.len() != ranges.len() {
            return Err(Error::InvalidParameter(format!(
                "{} takes {} parameters, got {}",
                self.family,
                ranges.len(),
                self.params.len()
            )));
        }
        for (&v, &(name, lo, hi)) in self.params.iter().zip(ranges) {
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::InvalidParameter(format!("{}.{name} = {v} outside [{lo}, {hi}]", self.family)));
            }
        }
        Ok(())
    }
}

/// Triangle soup.
#[derive(Clone, Debug, Default)]
pub struct Mesh {
    pub triangles: Vec<[Vec3; 3]>,
}

impl Mesh {
    fn tri(&mut self, a: Vec3, b: Vec3, c: Vec3) {
        self.triangles.push([a, b, c]);
    }

    fn quad(&mut self, a: Vec3, b: Vec3, c: Vec3, d: Vec3) {
        self.tri(a, b, c);
        self.tri(a, c, d);
    }

    fn add_box(&mut self, center: Vec3, half: Vec3) {
        let corner = |sx: f64, sy: f64, sz: f64| center + Vec3::new(sx * half.x, sy * half.y, sz * half.z);
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut c = [[0.0; 3]; 4];
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                for (k, (a, b)) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].into_iter().enumerate() {
                    c[k][axis] = sign;
                    c[k][u] = a;
                    c[k][v] = b;
                }
                let p: Vec<Vec3> = c.iter().map(|s| corner(s[0], s[1], s[2])).collect();
                self.quad(p[0], p[1], p[2], p[3]);
            }
        }
    }

    /// Surface of revolution about the local z axis through `origin`.
    fn add_revolved(&mut self, profile: &[(f64, f64)], segments: usize, origin: Vec3) {
        let ring = |r: f64, z: f64, k: usize| {
            let a = TAU * k as f64 / segments as f64;
            origin + Vec3::new(r * a.cos(), r * a.sin(), z)
        };
        for w in profile.windows(2) {
            let ((r0, z0), (r1, z1)) = (w[0], w[1]);
            for k in 0..segments {
                let (a0, a1) = (ring(r0, z0, k), ring(r0, z0, k + 1));
                let (b0, b1) = (ring(r1, z1, k), ring(r1, z1, k + 1));
                self.quad(a0, a1, b1, b0);
            }
        }
    }

    fn add_cylinder(&mut self, base: Vec3, radius: f64, height: f64, segments: usize) {
        self.add_revolved(&[(0.0, 0.0), (radius, 0.0), (radius, height), (0.0, height)], segments, base);
    }

    fn add_frustum(&mut self, base: Vec3, r_bottom: f64, r_top: f64, height: f64, segments: usize) {
        self.add_revolved(&[(0.0, 0.0), (r_bottom, 0.0), (r_top, height), (0.0, height)], segments, base);
    }

    fn add_sphere(&mut self, center: Vec3, radius: f64, rings: usize, segments: usize) {
        let profile: Vec<(f64, f64)> = (0..=rings)
            .map(|i| {
                let t = PI * i as f64 / rings as f64;
                (radius * t.sin(), -radius * t.cos())
            })
            .collect();
        self.add_revolved(&profile, segments, center);
    }

    /// Tube of radius `r` swept along `path`, with flat end caps.
    fn add_tube(&mut self, path: &[Vec3], r: f64, segments: usize) {
        let n = path.len();
        let rings: Vec<Vec<Vec3>> = (0..n)
            .map(|i| {
                let tangent = (path[(i + 1).min(n - 1)] - path[i.saturating_sub(1)]).normalize();
                let up = if tangent.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
                let normal = tangent.cross(&up).normalize();
                let binormal = tangent.cross(&normal);
                (0..segments)
                    .map(|k| {
                        let a = TAU * k as f64 / segments as f64;
                        path[i] + (normal * a.cos() + binormal * a.sin()) * r
                    })
                    .collect()
            })
            .collect();
        for i in 0..n - 1 {
            for k in 0..segments {
                let k1 = (k + 1) % segments;
                self.quad(rings[i][k], rings[i][k1], rings[i + 1][k1], rings[i + 1][k]);
            }
        }
        for (ring, center) in [(&rings[0], path[0]), (&rings[n - 1], path[n - 1])] {
            for k in 0..segments {
                self.tri(center, ring[k], ring[(k + 1) % segments]);
            }
        }
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(tri_area).sum()
    }
}

fn tri_area(t: &[Vec3; 3]) -> f64 {
    0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
}

fn shape_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds the unnormalized mesh of a shape.
pub fn build_mesh(spec: &ShapeSpec) -> Result<Mesh> {
    spec.validate()?;
    let p = &spec.params;
    let mut rng = shape_rng(spec.seed, 0);
    let mut m = Mesh::default();
    const SEG: usize = 32;
    match spec.family {
        Family::Box => m.add_box(Vec3::zeros(), Vec3::new(p[0], p[1], p[2])),
        Family::Cylinder => m.add_cylinder(Vec3::zeros(), p[0], p[1], SEG),
        Family::Cone => {
            let (r, h) = (p[0], p[1]);
            let apex = Vec3::new(p[2], p[3], h);
            for k in 0..SEG {
                let a0 = TAU * k as f64 / SEG as f64;
                let a1 = TAU * (k + 1) as f64 / SEG as f64;
                let b0 = Vec3::new(r * a0.cos(), r * a0.sin(), 0.0);
                let b1 = Vec3::new(r * a1.cos(), r * a1.sin(), 0.0);
                m.tri(b0, b1, apex);
                m.tri(Vec3::zeros(), b1, b0);
            }
        }
        Family::Torus => {
            let steps = 48;
            let path: Vec<Vec3> = (0..=steps)
                .map(|i| {
                    let a = p[2] * i as f64 / steps as f64;
                    Vec3::new(p[0] * a.cos(), p[0] * a.sin(), 0.0)
                })
                .collect();
            m.add_tube(&path, p[1], 16);
        }
        Family::LBracket => {
            let (a, b, t, d) = (p[0], p[1], p[2], p[3]);
            m.add_box(Vec3::new(a / 2.0, t / 2.0, 0.0), Vec3::new(a / 2.0, t / 2.0, d / 2.0));
            m.add_box(Vec3::new(t / 2.0, t + b / 2.0, 0.0), Vec3::new(t / 2.0, b / 2.0, d / 2.0));
        }
        Family::Stairs => {
            let steps = p[0].round() as usize;
            let (tread, rise, width) = (p[1], p[2], p[3]);
            for s in 0..steps {
                let h = rise * (s + 1) as f64;
                m.add_box(
                    Vec3::new(tread * (s as f64 + 0.5), 0.0, h / 2.0),
                    Vec3::new(tread / 2.0, width / 2.0, h / 2.0),
                );
            }
        }
        Family::Table => {
            let (tx, ty, tt, lh, lw, inset) = (p[0], p[1], p[2], p[3], p[4], p[5]);
            m.add_box(Vec3::new(0.0, 0.0, lh + tt / 2.0), Vec3::new(tx, ty, tt / 2.0));
            for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                let c = Vec3::new(sx * (tx * (1.0 - inset) - lw), sy * (ty * (1.0 - inset) - lw), lh / 2.0);
                m.add_box(c, Vec3::new(lw, lw, lh / 2.0));
            }
        }
        Family::Lamp => {
            let (br, bt, sr, sh, shb, sht, shh, off) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7]);
            m.add_cylinder(Vec3::zeros(), br, bt, SEG);
            m.add_cylinder(Vec3::new(0.0, 0.0, bt), sr, sh, 12);
            m.add_frustum(Vec3::new(off, 0.0, bt + sh - shh * 0.3), shb, sht, shh, SEG);
        }
        Family::SphereCluster => {
            let count = p[0].round() as usize;
            let mut centers: Vec<Vec3> = Vec::with_capacity(count);
            for _ in 0..count {
                let r = rng.random_range(p[1]..=p[2]);
                let c = match centers.last() {
                    None => Vec3::zeros(),
                    Some(prev) => {
                        let dir = Vec3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        );
                        prev + dir.normalize() * (r + rng.random_range(0.1..0.4))
                    }
                };
                centers.push(c);
                m.add_sphere(c, r, 12, 20);
            }
        }
        Family::ExtrudedPolygon => {
            let k = p[0].round() as usize;
            let h = p[1];
            let verts: Vec<Vec3> = (0..k)
                .map(|i| {
                    let a = TAU * (i as f64 + rng.random_range(-0.3..0.3)) / k as f64;
                    let r = rng.random_range(p[2]..=1.0);
                    Vec3::new(r * a.cos(), r * a.sin(), 0.0)
                })
                .collect();
            let up = Vec3::new(0.0, 0.0, h);
            for i in 0..k {
                let (a, b) = (verts[i], verts[(i + 1) % k]);
                m.quad(a, b, b + up, a + up);
                m.tri(Vec3::zeros(), b, a);
                m.tri(up, a + up, b + up);
            }
        }
        Family::Helix => {
            let (r, pitch, turns, tube) = (p[0], p[1], p[2], p[3]);
            let steps = (turns * 40.0).ceil() as usize;
            let path: Vec<Vec3> = (0..=steps)
                .map(|i| {
                    let a = TAU * turns * i as f64 / steps as f64;
                    Vec3::new(r * a.cos(), r * a.sin(), pitch * a / TAU)
                })
                .collect();
            m.add_tube(&path, tube, 12);
        }
        Family::Composite => {
            let half = Vec3::new(p[0], p[1], p[2]);
            m.add_box(Vec3::zeros(), half);
            let base = Vec3::new(p[5] * (half.x - p[3]).max(0.0), 0.0, half.z);
            m.add_cylinder(base, p[3], p[4], SEG);
        }
    }
    Ok(m)
}

/// Maps the mesh bounding box to `[-1, 1]³`: centred, scaled by the largest
/// half-extent.
pub fn normalize_mesh(mesh: &mut Mesh) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for v in mesh.triangles.iter().flatten() {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    let center = (lo + hi) / 2.0;
    let scale = ((hi - lo) / 2.0).max();
    for v in mesh.triangles.iter_mut().flatten() {
        *v = (*v - center) / scale;
    }
}

/// `n` points drawn uniformly by area from a mesh.
pub fn sample_mesh<R: Rng + ?Sized>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<Vec<Vec3>> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        total += tri_area(t);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::InvalidParameter("mesh has zero area".into()));
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let idx = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
            let [a, b, c] = mesh.triangles[idx];
            let r1: f64 = rng.random::<f64>().sqrt();
            let r2: f64 = rng.random();
            let p = a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2);
            p.map(|x| x.clamp(-1.0, 1.0))
        })
        .collect())
}

pub fn sample_shape(spec: &ShapeSpec, n: usize) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidParameter("point count must be at least 1".into()));
    }
    let mut mesh = build_mesh(spec)?;
    normalize_mesh(&mut mesh);
    PointCloud::new(sample_mesh(&mesh, n, &mut shape_rng(spec.seed, 1))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationPair {
    pub source: PointCloud,
    pub target: PointCloud,
    /// Maps source coordinates to target coordinates.
    pub t_gt: RigidTransform,
    pub family: Family,
    pub noise_variance: f64,
    pub partial: bool,
}

fn add_noise<R: Rng + ?Sized>(pts: &mut [Vec3], variance: f64, rng: &mut R) -> Result<()> {
    if !(variance.is_finite() && variance >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise variance {variance} must be non-negative")));
    }
    if variance > 0.0 {
        let normal = Normal::new(0.0, variance.sqrt()).expect("valid standard deviation");
        for p in pts.iter_mut() {
            *p += Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        }
    }
    Ok(())
}

/// Two independent rigid copies of `cloud` with independent per-coordinate
/// Gaussian noise of variance `noise_variance`.
pub fn make_pair<R: Rng + ?Sized>(
    cloud: &PointCloud,
    noise_variance: f64,
    translation_half: f64,
    family: Family,
    rng: &mut R,
) -> Result<RegistrationPair> {
    let t1 = random_transform(rng, translation_half);
    let t2 = random_transform(rng, translation_half);
    let mut src: Vec<Vec3> = cloud.iter().map(|p| t1.apply_point(p)).collect();
    let mut tgt: Vec<Vec3> = cloud.iter().map(|p| t2.apply_point(p)).collect();
    add_noise(&mut src, noise_variance, rng)?;
    add_noise(&mut tgt, noise_variance, rng)?;
    Ok(RegistrationPair {
        source: PointCloud::new(src)?,
        target: PointCloud::new(tgt)?,
        t_gt: t2.compose(&t1.inverse()),
        family,
        noise_variance,
        partial: false,
    })
}

/// A single-viewpoint scan of a cloud: points in the rotated frame and the
/// rotation applied.
#[derive(Clone, Debug)]
pub struct PartialView {
    pub cloud: PointCloud,
    pub rotation: Mat3,
    /// Source indices of the surviving points, ascending.
    pub kept: Vec<usize>,
}

/// Grid cell of a coordinate in `[-1, 1]`; out-of-range values go to the
/// edge cells.
pub fn grid_cell(x: f64) -> usize {
    (((x + 1.0) / 2.0 * PARTIAL_GRID as f64).floor().max(0.0) as usize).min(PARTIAL_GRID - 1)
}

/// Random rotation, then per `200×200` cell over `[-1, 1]²` keep the point
/// with the smallest z (lowest index on ties), then add noise.
pub fn make_partial<R: Rng + ?Sized>(cloud: &PointCloud, noise_variance: f64, rng: &mut R) -> Result<PartialView> {
    let r = random_rotation(rng);
    make_partial_with_rotation(cloud, &r, noise_variance, rng)
}

pub fn make_partial_with_rotation<R: Rng + ?Sized>(
    cloud: &PointCloud,
    rotation: &Mat3,
    noise_variance: f64,
    rng: &mut R,
) -> Result<PartialView> {
    let rotated: Vec<Vec3> = cloud.iter().map(|p| rotation * p).collect();
    let mut best: Vec<Option<usize>> = vec![None; PARTIAL_GRID * PARTIAL_GRID];
    for (i, p) in rotated.iter().enumerate() {
        let cell = grid_cell(p.x) * PARTIAL_GRID + grid_cell(p.y);
        match best[cell] {
            Some(j) if rotated[j].z <= p.z => {}
            _ => best[cell] = Some(i),
        }
    }
    let mut kept: Vec<usize> = best.into_iter().flatten().collect();
    kept.sort_unstable();
    let mut pts: Vec<Vec3> = kept.iter().map(|&i| rotated[i]).collect();
    add_noise(&mut pts, noise_variance, rng)?;
    Ok(PartialView { cloud: PointCloud::new(pts)?, rotation: *rotation, kept })
}

fn subsample<R: Rng + ?Sized>(cloud: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud> {
    if cloud.len() < n {
        return Err(Error::InsufficientPoints { have: cloud.len(), need: n });
    }
    let mut idx = index::sample(rng, cloud.len(), n).into_vec();
    idx.sort_unstable();
    cloud.select(&idx)
}

/// Partial-overlap pair: two independent scans of a dense cloud, each moved
/// by its own translation and reduced to `n` points.
pub fn make_partial_pair<R: Rng + ?Sized>(
    dense: &PointCloud,
    n: usize,
    noise_variance: f64,
    translation_half: f64,
    family: Family,
    rng: &mut R,
) -> Result<RegistrationPair> {
    let a = make_partial(dense, noise_variance, rng)?;
    let b = make_partial(dense, noise_variance, rng)?;
    let ta = RigidTransform::from_parts_unchecked(a.rotation, crate::geom3d::random_translation(rng, translation_half));
    let tb = RigidTransform::from_parts_unchecked(b.rotation, crate::geom3d::random_translation(rng, translation_half));
    let src = subsample(&a.cloud, n, rng)?.transformed(&RigidTransform::from_translation(ta.translation));
    let tgt = subsample(&b.cloud, n, rng)?.transformed(&RigidTransform::from_translation(tb.translation));
    Ok(RegistrationPair {
        source: src,
        target: tgt,
        t_gt: tb.compose(&ta.inverse()),
        family,
        noise_variance,
        partial: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Clean,
    Noisy,
    Unseen,
    Partial,
}

impl Protocol {
    pub fn default_noise_variance(self) -> f64 {
        match self {
            Protocol::Clean => 0.0,
            _ => DEFAULT_NOISE_VARIANCE,
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Protocol::Clean),
            "noisy" => Ok(Protocol::Noisy),
            "unseen" => Ok(Protocol::Unseen),
            "partial" => Ok(Protocol::Partial),
            _ => Err(Error::InvalidParameter(format!("unknown protocol `{s}`"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Clean => "clean",
            Protocol::Noisy => "noisy",
            Protocol::Unseen => "unseen",
            Protocol::Partial => "partial",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub protocol: Protocol,
    pub train: usize,
    pub test: usize,
    pub points: usize,
    pub seed: u64,
    /// Overrides the protocol's noise variance.
    pub noise_variance: Option<f64>,
    pub translation_half: f64,
    /// Size of the dense cloud partial views are cut from.
    pub dense_points: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Clean,
            train: 100,
            test: 20,
            points: 1024,
            seed: 0,
            noise_variance: None,
            translation_half: DEFAULT_TRANSLATION_HALF,
            dense_points: DEFAULT_DENSE_POINTS,
        }
    }
}

impl DatasetConfig {
    pub fn noise_variance(&self) -> f64 {
        self.noise_variance.unwrap_or_else(|| self.protocol.default_noise_variance())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub split: Split,
    pub family: Family,
    pub noise_variance: f64,
    pub partial: bool,
    pub source: String,
    pub target: String,
    pub transform: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub train_families: Vec<Family>,
    pub test_families: Vec<Family>,
    pub pairs: Vec<PairEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<RegistrationPair>,
    pub test: Vec<RegistrationPair>,
}

/// Families used for each split. The unseen protocol shuffles the families by
/// seed and gives the first half to training and the rest to testing.
pub fn split_families(protocol: Protocol, seed: u64) -> (Vec<Family>, Vec<Family>) {
    if protocol != Protocol::Unseen {
        return (Family::ALL.to_vec(), Family::ALL.to_vec());
    }
    let mut all = Family::ALL.to_vec();
    all.shuffle(&mut shape_rng(seed, u64::MAX));
    let (a, b) = all.split_at(Family::ALL.len() / 2);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort();
    b.sort();
    (a, b)
}

/// Random stream for pair `index` of `split`.
pub fn pair_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let tag = match split {
        Split::Train => 1u64 << 40,
        Split::Test => 2u64 << 40,
    };
    shape_rng(seed, tag | index as u64)
}

pub fn generate_pair(cfg: &DatasetConfig, families: &[Family], split: Split, index: usize) -> Result<RegistrationPair> {
    let mut rng = pair_rng(cfg.seed, split, index);
    let family = families[rng.random_range(0..families.len())];
    let spec = ShapeSpec::random(family, &mut rng);
    let noise = cfg.noise_variance();
    if cfg.protocol == Protocol::Partial {
        let dense = sample_shape(&spec, cfg.dense_points)?;
        make_partial_pair(&dense, cfg.points, noise, cfg.translation_half, family, &mut rng)
    } else {
        let cloud = sample_shape(&spec, cfg.points)?;
        make_pair(&cloud, noise, cfg.translation_half, family, &mut rng)
    }
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.points == 0 {
        return Err(Error::InvalidParameter("points per cloud must be at least 1".into()));
    }
    let (train_families, test_families) = split_families(cfg.protocol, cfg.seed);
    let mut pairs = Vec::new();
    let mut build = |split: Split, count: usize, fams: &[Family]| -> Result<Vec<RegistrationPair>> {
        use rayon::prelude::*;
        let out: Vec<RegistrationPair> =
            (0..count).into_par_iter().map(|i| generate_pair(cfg, fams, split, i)).collect::<Result<_>>()?;
        for (i, p) in out.iter().enumerate() {
            let stem = format!("{}/{:05}", split.name(), i);
            pairs.push(PairEntry {
                id: format!("{}-{:05}", split.name(), i),
                split,
                family: p.family,
                noise_variance: p.noise_variance,
                partial: p.partial,
                source: format!("{stem}_source.txt"),
                target: format!("{stem}_target.txt"),
                transform: format!("{stem}_gt.txt"),
            });
        }
        Ok(out)
    };
    let train = build(Split::Train, cfg.train, &train_families)?;
    let test = build(Split::Test, cfg.test, &test_families)?;
    Ok(Dataset {
        manifest: Manifest { format_version: DATASET_FORMAT_VERSION, config: cfg.clone(), train_families, test_families, pairs },
        train,
        test,
    })
}

pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("train"))?;
    std::fs::create_dir_all(dir.join("test"))?;
    let all = ds.train.iter().chain(&ds.test);
    for (entry, pair) in ds.manifest.pairs.iter().zip(all) {
        io::write_point_cloud(dir.join(&entry.source), &pair.source)?;
        io::write_point_cloud(dir.join(&entry.target), &pair.target)?;
        io::write_transform(dir.join(&entry.transform), &pair.t_gt)?;
    }
    let mut json = serde_json::to_string_pretty(&ds.manifest)?;
    json.push('\n');
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.as_ref().join("manifest.json"))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported dataset format version {}", m.format_version)));
    }
    Ok(m)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.pairs {
        let pair = RegistrationPair {
            source: io::read_point_cloud(dir.join(&e.source))?,
            target: io::read_point_cloud(dir.join(&e.target))?,
            t_gt: io::read_transform(dir.join(&e.transform))?,
            family: e.family,
            noise_variance: e.noise_variance,
            partial: e.partial,
        };
        match e.split {
            Split::Train => train.push(pair),
            Split::Test => test.push(pair),
        }
    }
    Ok(Dataset { manifest, train, test })
}
