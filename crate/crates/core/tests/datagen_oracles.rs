use std::collections::HashMap;

use gmmreg_core::datagen::{
    build_dataset, grid_cell, make_pair, make_partial_with_rotation, read_dataset, sample_mesh, sample_shape,
    write_dataset, DatasetConfig, Family, Mesh, Protocol, ShapeSpec, PARTIAL_GRID,
};
use gmmreg_core::geom3d::random_rotation;
use gmmreg_core::{PointCloud, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn box_mesh(half: Vec3) -> Mesh {
    let mut triangles = Vec::new();
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let corner = |a: f64, b: f64| {
                let mut c = Vec3::zeros();
                c[axis] = sign * half[axis];
                c[u] = a * half[u];
                c[v] = b * half[v];
                c
            };
            let (p0, p1, p2, p3) = (corner(-1.0, -1.0), corner(1.0, -1.0), corner(1.0, 1.0), corner(-1.0, 1.0));
            triangles.push([p0, p1, p2]);
            triangles.push([p0, p2, p3]);
        }
    }
    Mesh { triangles }
}

#[test]
fn box_faces_receive_points_in_proportion_to_area() {
    let half = Vec3::new(1.0, 0.5, 0.25);
    let n = 60_000;
    let pts = sample_mesh(&box_mesh(half), n, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let total_area = 8.0 * (half.x * half.y + half.y * half.z + half.x * half.z);
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let face_area = 4.0 * half[u] * half[v];
        for sign in [-1.0, 1.0] {
            let count = pts.iter().filter(|p| (p[axis] - sign * half[axis]).abs() < 1e-12).count() as f64;
            let prob = face_area / total_area;
            let expected = n as f64 * prob;
            let sd = (n as f64 * prob * (1.0 - prob)).sqrt();
            assert!((count - expected).abs() < 3.0 * sd, "axis {axis} sign {sign}: {count} vs {expected}");
        }
    }
}

#[test]
fn shapes_are_deterministic_per_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for family in Family::ALL {
        let spec = ShapeSpec::random(family, &mut rng);
        assert_eq!(sample_shape(&spec, 300).unwrap(), sample_shape(&spec, 300).unwrap());
    }
}

#[test]
fn pair_noise_has_the_requested_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = sample_shape(&ShapeSpec::random(Family::Torus, &mut rng), 20_000).unwrap();
    let pair = make_pair(&cloud, 0.01, 0.5, Family::Torus, &mut rng).unwrap();
    let residuals: Vec<Vec3> =
        pair.source.iter().zip(pair.target.iter()).map(|(s, t)| t - pair.t_gt.apply_point(s)).collect();
    let n = residuals.len() as f64;
    for c in 0..3 {
        let var = residuals.iter().map(|r| r[c] * r[c]).sum::<f64>() / n;
        assert!((var - 0.02).abs() < 0.002, "coordinate {c}: {var}");
    }
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let cov = residuals.iter().map(|r| r[a] * r[b]).sum::<f64>() / n;
        assert!((cov / 0.02).abs() < 0.05, "correlation {a}{b}: {}", cov / 0.02);
    }
}

#[test]
fn clean_pairs_are_exactly_related() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud = sample_shape(&ShapeSpec::random(Family::Stairs, &mut rng), 500).unwrap();
    let pair = make_pair(&cloud, 0.0, 0.5, Family::Stairs, &mut rng).unwrap();
    assert!(pair.t_gt.orthogonality_defect() < 1e-12);
    assert!((pair.t_gt.rotation.determinant() - 1.0).abs() < 1e-12);
    for (s, t) in pair.source.iter().zip(pair.target.iter()) {
        assert!((pair.t_gt.apply_point(s) - t).norm() < 1e-12);
    }
}

#[test]
fn partial_view_keeps_the_lowest_point_of_every_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dense = sample_shape(&ShapeSpec::random(Family::Lamp, &mut rng), 20_000).unwrap();
    let r = random_rotation(&mut rng);
    let view = make_partial_with_rotation(&dense, &r, 0.0, &mut rng).unwrap();

    let cell = |x: f64| (((x + 1.0) * PARTIAL_GRID as f64 / 2.0).floor() as i64).clamp(0, PARTIAL_GRID as i64 - 1);
    let mut lowest: HashMap<(i64, i64), (f64, usize)> = HashMap::new();
    for (i, p) in dense.iter().enumerate() {
        let q = r * p;
        let key = (cell(q.x), cell(q.y));
        let entry = lowest.entry(key).or_insert((q.z, i));
        if q.z < entry.0 {
            *entry = (q.z, i);
        }
    }
    let mut expected: Vec<usize> = lowest.values().map(|&(_, i)| i).collect();
    expected.sort_unstable();
    assert_eq!(view.kept, expected);
    for (k, &i) in view.kept.iter().enumerate() {
        assert!((view.cloud.points()[k] - r * dense.points()[i]).norm() < 1e-15);
    }
    assert!(view.kept.len() < dense.len());
}

#[test]
fn grid_cells_clamp_at_the_edges() {
    assert_eq!(grid_cell(-1.0), 0);
    assert_eq!(grid_cell(-7.0), 0);
    assert_eq!(grid_cell(1.0), PARTIAL_GRID - 1);
    assert_eq!(grid_cell(3.0), PARTIAL_GRID - 1);
    assert_eq!(grid_cell(0.0), PARTIAL_GRID / 2);
}

#[test]
fn unseen_protocol_splits_families() {
    for seed in 0..20 {
        let cfg = DatasetConfig { protocol: Protocol::Unseen, train: 30, test: 30, points: 64, seed, ..Default::default() };
        let ds = build_dataset(&cfg).unwrap();
        let (tr, te) = (&ds.manifest.train_families, &ds.manifest.test_families);
        assert_eq!(tr.len() + te.len(), Family::ALL.len());
        assert!(tr.iter().all(|f| !te.contains(f)));
        assert!(ds.train.iter().all(|p| tr.contains(&p.family)));
        assert!(ds.test.iter().all(|p| te.contains(&p.family)));
        assert!(ds.train.iter().all(|p| p.noise_variance == 0.01));
    }
}

#[test]
fn dataset_files_are_reproducible_and_round_trip() {
    let cfg = DatasetConfig { protocol: Protocol::Noisy, train: 6, test: 3, points: 100, seed: 9, ..Default::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(a.path(), &build_dataset(&cfg).unwrap()).unwrap();
    write_dataset(b.path(), &build_dataset(&cfg).unwrap()).unwrap();
    let manifest = std::fs::read(a.path().join("manifest.json")).unwrap();
    assert_eq!(manifest, std::fs::read(b.path().join("manifest.json")).unwrap());
    let back = read_dataset(a.path()).unwrap();
    assert_eq!((back.train.len(), back.test.len()), (6, 3));
    for entry in &back.manifest.pairs {
        for f in [&entry.source, &entry.target, &entry.transform] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }
    for pair in back.train.iter().chain(&back.test) {
        assert!(pair.t_gt.orthogonality_defect() < 1e-9);
        assert!((pair.t_gt.rotation.determinant() - 1.0).abs() < 1e-9);
        assert_eq!(pair.source.len(), 100);
    }
}

#[test]
fn partial_protocol_produces_partial_pairs() {
    let cfg = DatasetConfig {
        protocol: Protocol::Partial,
        train: 2,
        test: 2,
        points: 256,
        dense_points: 20_000,
        seed: 10,
        ..Default::default()
    };
    let ds = build_dataset(&cfg).unwrap();
    for pair in ds.train.iter().chain(&ds.test) {
        assert!(pair.partial);
        assert_eq!((pair.source.len(), pair.target.len()), (256, 256));
    }
}

/// Relative rotations follow the Haar angle density `(1 − cos θ)/π`.
#[test]
fn ground_truth_rotations_are_haar_distributed() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tiny = PointCloud::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()]).unwrap();
    let bins = 20;
    let samples = 10_000;
    let mut counts = vec![0usize; bins];
    for _ in 0..samples {
        let pair = make_pair(&tiny, 0.0, 0.5, Family::Box, &mut rng).unwrap();
        let theta = pair.t_gt.angle();
        counts[((theta / std::f64::consts::PI * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let cdf = |t: f64| (t - t.sin()) / std::f64::consts::PI;
    let mut chi2 = 0.0;
    for (k, &c) in counts.iter().enumerate() {
        let lo = std::f64::consts::PI * k as f64 / bins as f64;
        let hi = std::f64::consts::PI * (k + 1) as f64 / bins as f64;
        let expected = samples as f64 * (cdf(hi) - cdf(lo));
        chi2 += (c as f64 - expected).powi(2) / expected;
    }
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 1e-3, "chi2 {chi2}, p {p}");
}
