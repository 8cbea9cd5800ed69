//! Point-wise classifier producing the correspondence matrix.
//!
//! ```text
//! x (d) -> 64 -> 128 (shared, ReLU) -> max-pool over points (128)
//! [local 128 | global 128] -> 128 (ReLU) -> J logits -> row softmax
//! ```
//!
//! All parameters live in one flat vector described by a [`Layout`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, InputMode};
use crate::latent_gmm::Gamma;

pub const HIDDEN1: usize = 64;
pub const HIDDEN2: usize = 128;
pub const HEAD_HIDDEN: usize = 128;
const CONCAT: usize = 2 * HIDDEN2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Named, contiguous, non-overlapping slices of the parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn for_dims(input_dim: usize, components: usize) -> Self {
        let shapes = [
            ("shared1.weight", HIDDEN1 * input_dim),
            ("shared1.bias", HIDDEN1),
            ("shared2.weight", HIDDEN2 * HIDDEN1),
            ("shared2.bias", HIDDEN2),
            ("head1.weight", HEAD_HIDDEN * CONCAT),
            ("head1.bias", HEAD_HIDDEN),
            ("head2.weight", components * HEAD_HIDDEN),
            ("head2.bias", components),
        ];
        let mut offset = 0;
        let entries = shapes
            .iter()
            .map(|&(name, len)| {
                let e = LayoutEntry { name: name.to_string(), offset, len };
                offset += len;
                e
            })
            .collect();
        Layout { entries }
    }

    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len)
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let e = &self.entries[idx];
        e.offset..e.offset + e.len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrNetParams {
    input_mode: InputMode,
    components: usize,
    layout: Layout,
    values: Vec<f64>,
}

impl CorrNetParams {
    /// Uniform initialization in `±1/√fan_in` for every weight and bias.
    pub fn init<R: Rng + ?Sized>(input_mode: InputMode, components: usize, rng: &mut R) -> Result<Self> {
        if components == 0 {
            return Err(Error::InvalidParameter("component count must be at least 1".into()));
        }
        let d = input_mode.dim();
        if d == 0 {
            return Err(Error::InvalidParameter("input dimension must be at least 1".into()));
        }
        let layout = Layout::for_dims(d, components);
        let fan_in = [d, d, HIDDEN1, HIDDEN1, CONCAT, CONCAT, HEAD_HIDDEN, HEAD_HIDDEN];
        let mut values = Vec::with_capacity(layout.total());
        for (e, f) in layout.entries.iter().zip(fan_in) {
            let bound = 1.0 / (f as f64).sqrt();
            values.extend((0..e.len).map(|_| rng.random_range(-bound..bound)));
        }
        Ok(Self { input_mode, components, layout, values })
    }

    pub fn from_values(input_mode: InputMode, components: usize, values: Vec<f64>) -> Result<Self> {
        let layout = Layout::for_dims(input_mode.dim(), components);
        if values.len() != layout.total() {
            return Err(Error::DimensionMismatch { expected: layout.total(), got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("parameters must be finite".into()));
        }
        Ok(Self { input_mode, components, layout, values })
    }

    pub fn input_mode(&self) -> InputMode {
        self.input_mode
    }

    pub fn input_dim(&self) -> usize {
        self.input_mode.dim()
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|e| &self.values[e.offset..e.offset + e.len])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.layout.get(name)?.clone();
        Some(&mut self.values[e.offset..e.offset + e.len])
    }

    fn slice(&self, idx: usize) -> &[f64] {
        &self.values[self.layout.range(idx)]
    }
}

/// `c = beta·c + a·b` for strided row/column-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `out (N×o) = x (N×i) · Wᵀ + b` where `W` is `o×i` row-major with row
/// stride `ws`.
#[allow(clippy::too_many_arguments)]
fn dense(x: &[f64], n: usize, i: usize, w: &[f64], ws: usize, b: &[f64], o: usize, out: &mut [f64]) {
    for row in out.chunks_exact_mut(o) {
        row.copy_from_slice(b);
    }
    gemm(n, i, o, x, (i, 1), w, (1, ws), 1.0, out, (o, 1));
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    n: usize,
    x: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    a3: Vec<f64>,
    gamma: Vec<f64>,
}

impl ForwardCache {
    pub fn gamma(&self) -> Gamma {
        Gamma::from_raw_unchecked(self.n, self.gamma.len() / self.n, self.gamma.clone())
    }

    pub fn gamma_slice(&self) -> &[f64] {
        &self.gamma
    }
}

pub fn forward(params: &CorrNetParams, features: &FeatureMatrix) -> Result<Gamma> {
    forward_cached(params, features).map(|c| c.gamma())
}

pub fn forward_cached(params: &CorrNetParams, features: &FeatureMatrix) -> Result<ForwardCache> {
    let d = params.input_dim();
    if features.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: features.dim() });
    }
    let n = features.rows();
    if n == 0 {
        return Err(Error::EmptyInput("feature matrix"));
    }
    let jn = params.components;
    let x = features.as_slice().to_vec();

    let mut a1 = vec![0.0; n * HIDDEN1];
    dense(&x, n, d, params.slice(0), d, params.slice(1), HIDDEN1, &mut a1);
    relu(&mut a1);

    let mut a2 = vec![0.0; n * HIDDEN2];
    dense(&a1, n, HIDDEN1, params.slice(2), HIDDEN1, params.slice(3), HIDDEN2, &mut a2);
    relu(&mut a2);

    let mut pooled = vec![f64::NEG_INFINITY; HIDDEN2];
    let mut argmax = vec![0; HIDDEN2];
    for (i, row) in a2.chunks_exact(HIDDEN2).enumerate() {
        for c in 0..HIDDEN2 {
            if row[c] > pooled[c] {
                pooled[c] = row[c];
                argmax[c] = i;
            }
        }
    }

    let w3 = params.slice(4);
    let mut global_bias = params.slice(5).to_vec();
    for (o, gb) in global_bias.iter_mut().enumerate() {
        let w = &w3[o * CONCAT + HIDDEN2..(o + 1) * CONCAT];
        *gb += w.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut a3 = vec![0.0; n * HEAD_HIDDEN];
    dense(&a2, n, HIDDEN2, w3, CONCAT, &global_bias, HEAD_HIDDEN, &mut a3);
    relu(&mut a3);

    let mut gamma = vec![0.0; n * jn];
    dense(&a3, n, HEAD_HIDDEN, params.slice(6), HEAD_HIDDEN, params.slice(7), jn, &mut gamma);
    for row in gamma.chunks_exact_mut(jn) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(ForwardCache { n, x, a1, a2, pooled, argmax, a3, gamma })
}

fn mask(grad: &mut [f64], act: &[f64]) {
    for (g, a) in grad.iter_mut().zip(act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Column sums of an `n×o` row-major matrix added into `out`.
fn add_column_sums(m: &[f64], o: usize, out: &mut [f64]) {
    for row in m.chunks_exact(o) {
        for (s, v) in out.iter_mut().zip(row) {
            *s += v;
        }
    }
}

/// Accumulates `∂L/∂ψ` into `grad` given `∂L/∂Γ` (row-major `N×J`).
pub fn backward(params: &CorrNetParams, cache: &ForwardCache, g_gamma: &[f64], grad: &mut [f64]) {
    let n = cache.n;
    let jn = params.components;
    let d = params.input_dim();
    assert_eq!(g_gamma.len(), n * jn);
    assert_eq!(grad.len(), params.len());
    let r: Vec<std::ops::Range<usize>> = (0..8).map(|i| params.layout.range(i)).collect();

    // Softmax.
    let mut gz4 = vec![0.0; n * jn];
    for ((gz, g), gg) in gz4.chunks_exact_mut(jn).zip(cache.gamma.chunks_exact(jn)).zip(g_gamma.chunks_exact(jn)) {
        let dot: f64 = g.iter().zip(gg).map(|(a, b)| a * b).sum();
        for k in 0..jn {
            gz[k] = g[k] * (gg[k] - dot);
        }
    }

    // head2
    gemm(jn, n, HEAD_HIDDEN, &gz4, (1, jn), &cache.a3, (HEAD_HIDDEN, 1), 1.0, &mut grad[r[6].clone()], (HEAD_HIDDEN, 1));
    add_column_sums(&gz4, jn, &mut grad[r[7].clone()]);
    let mut ga3 = vec![0.0; n * HEAD_HIDDEN];
    gemm(n, jn, HEAD_HIDDEN, &gz4, (jn, 1), params.slice(6), (HEAD_HIDDEN, 1), 0.0, &mut ga3, (HEAD_HIDDEN, 1));
    mask(&mut ga3, &cache.a3);

    // head1: local columns, global columns, bias.
    let mut colsum = vec![0.0; HEAD_HIDDEN];
    add_column_sums(&ga3, HEAD_HIDDEN, &mut colsum);
    {
        let gw3 = &mut grad[r[4].clone()];
        gemm(HEAD_HIDDEN, n, HIDDEN2, &ga3, (1, HEAD_HIDDEN), &cache.a2, (HIDDEN2, 1), 1.0, gw3, (CONCAT, 1));
        for o in 0..HEAD_HIDDEN {
            for c in 0..HIDDEN2 {
                gw3[o * CONCAT + HIDDEN2 + c] += colsum[o] * cache.pooled[c];
            }
        }
    }
    for (g, s) in grad[r[5].clone()].iter_mut().zip(&colsum) {
        *g += s;
    }
    let w3 = params.slice(4);
    let mut ga2 = vec![0.0; n * HIDDEN2];
    gemm(n, HEAD_HIDDEN, HIDDEN2, &ga3, (HEAD_HIDDEN, 1), w3, (CONCAT, 1), 0.0, &mut ga2, (HIDDEN2, 1));
    for c in 0..HIDDEN2 {
        let g_pool: f64 = (0..HEAD_HIDDEN).map(|o| w3[o * CONCAT + HIDDEN2 + c] * colsum[o]).sum();
        ga2[cache.argmax[c] * HIDDEN2 + c] += g_pool;
    }
    mask(&mut ga2, &cache.a2);

    // shared2
    gemm(HIDDEN2, n, HIDDEN1, &ga2, (1, HIDDEN2), &cache.a1, (HIDDEN1, 1), 1.0, &mut grad[r[2].clone()], (HIDDEN1, 1));
    add_column_sums(&ga2, HIDDEN2, &mut grad[r[3].clone()]);
    let mut ga1 = vec![0.0; n * HIDDEN1];
    gemm(n, HIDDEN2, HIDDEN1, &ga2, (HIDDEN2, 1), params.slice(2), (HIDDEN1, 1), 0.0, &mut ga1, (HIDDEN1, 1));
    mask(&mut ga1, &cache.a1);

    // shared1
    gemm(HIDDEN1, n, d, &ga1, (1, HIDDEN1), &cache.x, (d, 1), 1.0, &mut grad[r[0].clone()], (d, 1));
    add_column_sums(&ga1, HIDDEN1, &mut grad[r[1].clone()]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut impl Rng, n: usize, d: usize) -> FeatureMatrix {
        FeatureMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small() -> (CorrNetParams, FeatureMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = CorrNetParams::init(InputMode::RawXyz, 4, &mut rng).unwrap();
        let f = random_features(&mut rng, 10, 3);
        (p, f)
    }

    #[test]
    fn layout_is_contiguous() {
        let l = Layout::for_dims(32, 16);
        let mut next = 0;
        for e in &l.entries {
            assert_eq!(e.offset, next);
            next += e.len;
        }
        assert_eq!(l.total(), 64 * 32 + 64 + 128 * 64 + 128 + 128 * 256 + 128 + 16 * 128 + 16);
    }

    #[test]
    fn rows_are_distributions() {
        let (p, f) = small();
        let g = forward(&p, &f).unwrap();
        for i in 0..g.num_points() {
            assert!((g.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        let (mut p, f) = small();
        p.block_mut("head2.weight").unwrap().fill(0.0);
        p.block_mut("head2.bias").unwrap().fill(0.0);
        let g = forward(&p, &f).unwrap();
        assert!(g.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn dimension_is_checked() {
        let (p, _) = small();
        let f = FeatureMatrix::new(2, 4, vec![0.0; 8]).unwrap();
        assert!(matches!(forward(&p, &f), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn backward_matches_finite_differences_on_a_linear_probe() {
        let (p, f) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let probe: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective =
            |q: &CorrNetParams| forward(q, &f).unwrap().as_slice().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
        let cache = forward_cached(&p, &f).unwrap();
        let mut grad = vec![0.0; p.len()];
        backward(&p, &cache, &probe, &mut grad);
        let h = 1e-6;
        for idx in (0..p.len()).step_by(97) {
            let mut plus = p.clone();
            plus.values_mut()[idx] += h;
            let mut minus = p.clone();
            minus.values_mut()[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "coordinate {idx}: {fd} vs {}", grad[idx]);
        }
    }
}
