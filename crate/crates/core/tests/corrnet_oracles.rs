use gmmreg_core::corrnet::checkpoint;
use gmmreg_core::corrnet::{
    adam_step, batch_grad, forward, loss, register_pair, sample_grad, sample_loss, train, AdamState, CorrNetParams,
    LossKind, PipelineOptions, PreparedPair, TrainConfig,
};
use gmmreg_core::datagen::{make_pair, sample_shape, Family, ShapeSpec};
use gmmreg_core::features::{FeatureMatrix, InputMode};
use gmmreg_core::geom3d::{random_rotation, random_transform};
use gmmreg_core::latent_gmm::{m_theta, Gamma};
use gmmreg_core::mt_solver::mt_block;
use gmmreg_core::{PointCloud, RigidTransform, Vec3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_params(rng: &mut impl Rng, mode: InputMode, j: usize) -> CorrNetParams {
    CorrNetParams::init(mode, j, rng).unwrap()
}

fn shape(rng: &mut impl Rng, family: Family, n: usize) -> PointCloud {
    sample_shape(&ShapeSpec::random(family, rng), n).unwrap()
}

#[test]
fn permuting_points_permutes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = small_params(&mut rng, InputMode::RawXyz, 8);
    let f = FeatureMatrix::new(50, 3, (0..150).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut perm: Vec<usize> = (0..50).collect();
    perm.shuffle(&mut rng);
    let a = forward(&p, &f).unwrap().permute_rows(&perm);
    let b = forward(&p, &f.permute_rows(&perm)).unwrap();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn duplicate_points_get_identical_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = small_params(&mut rng, InputMode::RawXyz, 5);
    let mut data: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
    let first = data[..3].to_vec();
    data.extend(first);
    let g = forward(&p, &FeatureMatrix::new(11, 3, data).unwrap()).unwrap();
    for (a, b) in g.row(0).iter().zip(g.row(10)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn correspondences_ignore_the_pose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = small_params(&mut rng, InputMode::default(), 16);
    let cloud = shape(&mut rng, Family::Table, 256);
    let base = forward(&p, &InputMode::default().compute(&cloud).unwrap()).unwrap();
    for _ in 0..10 {
        let moved = cloud.transformed(&random_transform(&mut rng, 0.5));
        let g = forward(&p, &InputMode::default().compute(&moved).unwrap()).unwrap();
        let diff = base.as_slice().iter().zip(g.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6);
    }
}

#[test]
fn identical_clouds_register_to_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = small_params(&mut rng, InputMode::default(), 16);
    let cloud = shape(&mut rng, Family::Composite, 256);
    let (t, t_hat) = register_pair(&p, &cloud, &cloud, &PipelineOptions::default()).unwrap();
    assert!(t.angle() < 1e-6 && t.translation.norm() < 1e-6);
    assert!(t_hat.angle() < 1e-6 && t_hat.translation.norm() < 1e-6);
}

#[test]
fn oracle_correspondences_recover_the_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0), Vec3::new(-1.0, -1.0, 0.5)];
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (j, c) in centers.iter().enumerate() {
        for _ in 0..40 {
            pts.push(c + Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
            labels.push(j);
        }
    }
    let source = PointCloud::new(pts).unwrap();
    let q = RigidTransform::from_rotation(random_rotation(&mut rng));
    let target = source.transformed(&q);
    let gamma = Gamma::one_hot(&labels, 4).unwrap();
    let t = mt_block(&gamma, &m_theta(&gamma, &source).unwrap(), &m_theta(&gamma, &target).unwrap()).unwrap();
    assert!(t.compose(&q.inverse()).angle() < 1e-6);
}

#[test]
fn untrained_network_returns_a_proper_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = small_params(&mut rng, InputMode::default(), 16);
    let cloud = shape(&mut rng, Family::Stairs, 256);
    let pair = make_pair(&cloud, 0.01, 0.5, Family::Stairs, &mut rng).unwrap();
    let (t, _) = register_pair(&p, &pair.source, &pair.target, &PipelineOptions::default()).unwrap();
    assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
}

fn naive_loss(t: &RigidTransform, t_hat: &RigidTransform, gt: &RigidTransform) -> f64 {
    let h = |x: &RigidTransform| {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = x.rotation[(r, c)];
            }
            m[r][3] = x.translation[r];
        }
        m[3][3] = 1.0;
        m
    };
    let mul = |a: [[f64; 4]; 4], b: [[f64; 4]; 4]| {
        let mut c = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        c
    };
    let dev = |m: [[f64; 4]; 4]| {
        let mut s = 0.0;
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let e = v - if i == j { 1.0 } else { 0.0 };
                s += e * e;
            }
        }
        s
    };
    dev(mul(h(t), h(&gt.inverse()))) + dev(mul(h(t_hat), h(gt)))
}

#[test]
fn loss_matches_matrix_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (a, b, c) = (random_transform(&mut rng, 1.0), random_transform(&mut rng, 1.0), random_transform(&mut rng, 1.0));
        assert!((loss(&a, &b, &c) - naive_loss(&a, &b, &c)).abs() < 1e-12);
        assert!(loss(&a, &b, &c) >= 0.0);
    }
    let gt = random_transform(&mut rng, 1.0);
    assert!(loss(&gt, &gt.inverse(), &gt) < 1e-24);
    let shifted = RigidTransform::from_translation(Vec3::x()).compose(&gt);
    assert!((loss(&shifted, &gt.inverse(), &gt) - 1.0).abs() < 1e-12);
}

fn prepared(rng: &mut ChaCha8Rng, p: &CorrNetParams, family: Family, n: usize, noise: f64) -> PreparedPair {
    let cloud = shape(rng, family, n);
    let pair = make_pair(&cloud, noise, 0.5, family, rng).unwrap();
    PreparedPair::new(p, pair.source, pair.target, pair.t_gt).unwrap()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mode = InputMode::InvariantFeatures { k: 4 };
    for loss_kind in [LossKind::Mse, LossKind::Rmse] {
        let p = small_params(&mut rng, mode, 4);
        let pair = prepared(&mut rng, &p, Family::Cone, 32, 0.01);
        let opts = PipelineOptions { loss: loss_kind, ..Default::default() };
        let g = sample_grad(&p, &pair, &opts).unwrap();
        assert!(!g.zeroed);
        let h = 1e-5;
        let mut errs = Vec::new();
        for _ in 0..60 {
            let i = rng.random_range(0..p.len());
            let mut plus = p.clone();
            plus.values_mut()[i] += h;
            let mut minus = p.clone();
            minus.values_mut()[i] -= h;
            let fd = (sample_loss(&plus, &pair, &opts).unwrap() - sample_loss(&minus, &pair, &opts).unwrap()) / (2.0 * h);
            errs.push(rel_err(fd, g.grad[i], 1e-4));
        }
        let good = errs.iter().filter(|&&e| e < 1e-4).count();
        assert!(good as f64 >= 0.95 * errs.len() as f64, "{loss_kind:?}: {good}/{}", errs.len());
        assert!(errs.iter().all(|&e| e < 1e-2), "{loss_kind:?}: {errs:?}");
    }
}

#[test]
fn gradient_vanishes_at_a_perfect_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = small_params(&mut rng, InputMode::default(), 8);
    let cloud = shape(&mut rng, Family::Torus, 128);
    let pair = PreparedPair::new(&p, cloud.clone(), cloud, RigidTransform::identity()).unwrap();
    let g = sample_grad(&p, &pair, &PipelineOptions::default()).unwrap();
    assert!(g.loss < 1e-20);
    assert!(g.grad.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
}

#[test]
fn duplicated_batch_keeps_the_mean_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = small_params(&mut rng, InputMode::InvariantFeatures { k: 4 }, 4);
    let pairs: Vec<PreparedPair> = (0..3).map(|i| prepared(&mut rng, &p, Family::ALL[i], 48, 0.01)).collect();
    let once: Vec<&PreparedPair> = pairs.iter().collect();
    let twice: Vec<&PreparedPair> = pairs.iter().chain(&pairs).collect();
    let a = batch_grad(&p, &once, &PipelineOptions::default()).unwrap();
    let b = batch_grad(&p, &twice, &PipelineOptions::default()).unwrap();
    for (x, y) in a.grad.iter().zip(&b.grad) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn adam_first_step_matches_hand_computation() {
    let params = [0.3, -1.2, 5.0];
    let grads = [0.7, -0.01, 3.0];
    let lr = 0.05;
    let mut state = AdamState::new(3);
    let mut p = params;
    adam_step(&mut state, &mut p, &grads, lr).unwrap();
    for k in 0..3 {
        let m = 0.1 * grads[k];
        let v = 0.001 * grads[k] * grads[k];
        let m_hat = m / (1.0 - 0.9);
        let v_hat = v / (1.0 - 0.999);
        let expected = params[k] - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[k] - expected).abs() < 1e-15);
    }
}

fn tiny_training_set(seed: u64, cfg: &TrainConfig) -> Vec<PreparedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dummy = CorrNetParams::init(cfg.input_mode, cfg.components, &mut rng).unwrap();
    (0..10).map(|i| prepared(&mut rng, &dummy, Family::ALL[i % 12], 64, 0.01)).collect()
}

#[test]
fn one_epoch_changes_parameters_and_is_reproducible() {
    let cfg = TrainConfig { epochs: 1, batch_size: 4, components: 8, seed: 11, ..Default::default() };
    let pairs = tiny_training_set(12, &cfg);
    let a = train(&pairs, &cfg).unwrap();
    let b = train(&pairs, &cfg).unwrap();
    assert_eq!(a.history.len(), 1);
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    let init = CorrNetParams::init(cfg.input_mode, cfg.components, &mut gmmreg_core::corrnet::stream_rng(cfg.seed, gmmreg_core::corrnet::train::STREAM_INIT)).unwrap();
    assert_ne!(a.params.values(), init.values());
}

#[test]
fn training_rejects_a_single_pair() {
    let cfg = TrainConfig { epochs: 1, components: 4, ..Default::default() };
    let pairs = tiny_training_set(13, &cfg);
    assert!(train(&pairs[..1], &cfg).is_err());
}

#[test]
fn checkpoint_round_trip_through_a_file() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = small_params(&mut rng, InputMode::RawXyz, 16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &p).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap(), p);
}
