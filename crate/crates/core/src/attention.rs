//! Single-head residual self-attention with SoftMax or Sinkhorn normalization.

use serde::Serialize;

use crate::numerics::DenseMatrix;
use crate::sinkhorn::{self, CostMatrix, StopRule};
use crate::{Error, ParticleCloud, Result};

/// Query, key and value matrices. `w_q` and `w_k` are `m×d`, `w_v` is `d×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    w_q: DenseMatrix,
    w_k: DenseMatrix,
    w_v: DenseMatrix,
}

impl AttentionParams {
    pub fn new(w_q: DenseMatrix, w_k: DenseMatrix, w_v: DenseMatrix) -> Result<Self> {
        let (m, d) = w_q.shape();
        if w_k.shape() != (m, d) {
            return Err(Error::dims("AttentionParams", format!("W_K {m}x{d}"), format!("{:?}", w_k.shape())));
        }
        if w_v.shape() != (d, d) {
            return Err(Error::dims("AttentionParams", format!("W_V {d}x{d}"), format!("{:?}", w_v.shape())));
        }
        Ok(AttentionParams { w_q, w_k, w_v })
    }

    pub fn w_q(&self) -> &DenseMatrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &DenseMatrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &DenseMatrix {
        &self.w_v
    }

    /// Query/key dimension.
    pub fn m(&self) -> usize {
        self.w_q.rows()
    }

    /// Embedding dimension.
    pub fn d(&self) -> usize {
        self.w_q.cols()
    }

    /// Whether `W_Kᵀ W_Q = W_Qᵀ W_K = -W_V` holds to within `tol`.
    pub fn satisfies_symmetry_assumption(&self, tol: f64) -> bool {
        let (Ok(kq), Ok(qk)) = (
            self.w_k.transpose_matmul(&self.w_q),
            self.w_q.transpose_matmul(&self.w_k),
        ) else {
            return false;
        };
        kq.max_abs_diff(&qk) <= tol && qk.max_abs_diff(&self.w_v.scale(-1.0)) <= tol
    }

    fn check_cloud(&self, x: &ParticleCloud) -> Result<()> {
        if x.d() != self.d() {
            return Err(Error::dims("attention", format!("d = {}", self.d()), format!("d = {}", x.d())));
        }
        Ok(())
    }
}

/// Iteration count restricted to odd values, so the output stays row-stochastic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct OddIterations(usize);

impl OddIterations {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "sinkhorn attention needs an odd iteration count, got {k}"
            )));
        }
        Ok(OddIterations(k))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl Default for OddIterations {
    fn default() -> Self {
        OddIterations(3)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormalizationSpec {
    #[default]
    Softmax,
    Sinkhorn(OddIterations),
}

impl NormalizationSpec {
    pub fn sinkhorn(iterations: usize) -> Result<Self> {
        Ok(NormalizationSpec::Sinkhorn(OddIterations::new(iterations)?))
    }

    /// Number of Sinkhorn normalizations; SoftMax counts as one.
    pub fn iterations(&self) -> usize {
        match self {
            NormalizationSpec::Softmax => 1,
            NormalizationSpec::Sinkhorn(k) => k.get(),
        }
    }
}

/// `C[i,j] = (W_Q x_i)ᵀ (W_K y_j)`.
pub fn dot_cost_cross(params: &AttentionParams, x: &ParticleCloud, y: &ParticleCloud) -> Result<CostMatrix> {
    params.check_cloud(x)?;
    params.check_cloud(y)?;
    let q = x.points().matmul_transpose(params.w_q())?;
    let k = y.points().matmul_transpose(params.w_k())?;
    CostMatrix::new(q.matmul_transpose(&k)?)
}

pub fn dot_cost(params: &AttentionParams, x: &ParticleCloud) -> Result<CostMatrix> {
    dot_cost_cross(params, x, x)
}

/// `C̃[i,j] = -½ ‖W_Q x_i - W_K x_j‖²`.
pub fn l2_cost(params: &AttentionParams, x: &ParticleCloud) -> Result<CostMatrix> {
    params.check_cloud(x)?;
    let q = x.points().matmul_transpose(params.w_q())?;
    let k = x.points().matmul_transpose(params.w_k())?;
    let n = x.n();
    let c = DenseMatrix::from_fn(n, n, |i, j| {
        let s: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        -0.5 * s
    });
    CostMatrix::new(c)
}

pub fn attention_kernel(cost: &CostMatrix, norm: NormalizationSpec) -> Result<DenseMatrix> {
    match norm {
        NormalizationSpec::Softmax => Ok(sinkhorn::softmax(cost)),
        NormalizationSpec::Sinkhorn(k) => {
            Ok(sinkhorn::sinkhorn(cost, StopRule::Iterations(k.get()))?.kernel)
        }
    }
}

/// Residual update `x_i + Σ_j K[i,j] W_V x_j` for a given attention matrix.
pub fn apply_attention(x: &ParticleCloud, kernel: &DenseMatrix, w_v: &DenseMatrix) -> Result<ParticleCloud> {
    if kernel.shape() != (x.n(), x.n()) {
        return Err(Error::dims("apply_attention", format!("{n}x{n}", n = x.n()), format!("{:?}", kernel.shape())));
    }
    let values = x.points().matmul_transpose(w_v)?;
    let mixed = kernel.matmul(&values)?;
    ParticleCloud::new(x.points().add(&mixed)?)
}

pub fn attention_forward(x: &ParticleCloud, params: &AttentionParams, norm: NormalizationSpec) -> Result<ParticleCloud> {
    let cost = dot_cost(params, x)?;
    let kernel = attention_kernel(&cost, norm)?;
    apply_attention(x, &kernel, params.w_v())
}

pub const HISTOGRAM_BINS: usize = 60;
pub const HISTOGRAM_MAX: f64 = 3.0;

/// Column sums of an attention matrix, with a fixed 60-bin histogram on
/// `[0, 3]`. Sums of 3 or more land in `overflow`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ColumnSumStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub bin_width: f64,
    pub histogram: Vec<u64>,
    pub overflow: u64,
    pub sums: Vec<f64>,
}

impl ColumnSumStats {
    pub fn from_sums(sums: Vec<f64>) -> Self {
        let bin_width = HISTOGRAM_MAX / HISTOGRAM_BINS as f64;
        let mut histogram = vec![0u64; HISTOGRAM_BINS];
        let mut overflow = 0;
        for &s in &sums {
            let b = (s / bin_width).floor();
            if b < 0.0 {
                histogram[0] += 1;
            } else if b as usize >= HISTOGRAM_BINS {
                overflow += 1;
            } else {
                histogram[b as usize] += 1;
            }
        }
        let min = sums.iter().copied().fold(f64::INFINITY, f64::min);
        let max = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = sums.iter().sum::<f64>() / sums.len().max(1) as f64;
        ColumnSumStats {
            min,
            max,
            mean,
            bin_width,
            histogram,
            overflow,
            sums,
        }
    }

    /// Pools the column sums of several attention matrices.
    pub fn merged<'a>(stats: impl IntoIterator<Item = &'a ColumnSumStats>) -> Self {
        Self::from_sums(stats.into_iter().flat_map(|s| s.sums.iter().copied()).collect())
    }

    pub fn spread(&self) -> f64 {
        self.max - self.min
    }

    /// Largest deviation of any column sum from one.
    pub fn max_deviation(&self) -> f64 {
        self.sums.iter().fold(0.0f64, |m, s| m.max((s - 1.0).abs()))
    }

    pub fn bin_of(value: f64) -> usize {
        ((value / (HISTOGRAM_MAX / HISTOGRAM_BINS as f64)).floor() as usize).min(HISTOGRAM_BINS - 1)
    }
}

pub fn column_sum_stats(kernel: &DenseMatrix) -> ColumnSumStats {
    ColumnSumStats::from_sums(kernel.col_sums())
}

/// Mean over `i` of the residual term `Σ_j K[i,j] W_V x_j`.
pub fn mean_residual(x: &ParticleCloud, kernel: &DenseMatrix, w_v: &DenseMatrix) -> Result<Vec<f64>> {
    let values = x.points().matmul_transpose(w_v)?;
    let mixed = kernel.matmul(&values)?;
    let n = x.n() as f64;
    Ok(mixed.col_sums().into_iter().map(|s| s / n).collect())
}



#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;
    use crate::SeededRng;

    fn random_params(rng: &mut SeededRng, m: usize, d: usize) -> AttentionParams {
        AttentionParams::new(
            rng.normal_matrix(m, d, 0.7),
            rng.normal_matrix(m, d, 0.7),
            rng.normal_matrix(d, d, 0.7),
        )
        .unwrap()
    }

    fn random_cloud(rng: &mut SeededRng, n: usize, d: usize) -> ParticleCloud {
        ParticleCloud::new(rng.normal_matrix(n, d, 1.0)).unwrap()
    }

    #[test]
    fn params_validate_shapes() {
        assert!(AttentionParams::new(DenseMatrix::zeros(2, 3), DenseMatrix::zeros(2, 3), DenseMatrix::zeros(3, 3)).is_ok());
        assert!(AttentionParams::new(DenseMatrix::zeros(2, 3), DenseMatrix::zeros(3, 3), DenseMatrix::zeros(3, 3)).is_err());
        assert!(AttentionParams::new(DenseMatrix::zeros(2, 3), DenseMatrix::zeros(2, 3), DenseMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn odd_iterations_enforced() {
        assert!(NormalizationSpec::sinkhorn(0).is_err());
        assert!(NormalizationSpec::sinkhorn(4).is_err());
        assert_eq!(NormalizationSpec::sinkhorn(5).unwrap().iterations(), 5);
    }

    #[test]
    fn dot_cost_examples() {
        let id = DenseMatrix::identity(2);
        let p = AttentionParams::new(id.clone(), id.clone(), id.clone()).unwrap();
        let x = ParticleCloud::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(dot_cost(&p, &x).unwrap().matrix(), &id);

        let zero = ParticleCloud::new(DenseMatrix::zeros(4, 2)).unwrap();
        assert!(dot_cost(&p, &zero).unwrap().matrix().as_slice().iter().all(|&v| v == 0.0));

        let mut rng = SeededRng::new(1);
        let p = random_params(&mut rng, 3, 2);
        let x = random_cloud(&mut rng, 3, 2);
        let c = dot_cost(&p, &x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for r in 0..3 {
                    let mut qi = 0.0;
                    let mut kj = 0.0;
                    for a in 0..2 {
                        qi += p.w_q()[(r, a)] * x.point(i)[a];
                        kj += p.w_k()[(r, a)] * x.point(j)[a];
                    }
                    s += qi * kj;
                }
                assert!((c.matrix()[(i, j)] - s).abs() < 1e-13);
            }
        }
        let bad = random_cloud(&mut rng, 3, 4);
        assert!(matches!(dot_cost(&p, &bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn l2_cost_decomposition() {
        let mut rng = SeededRng::new(2);
        let p = random_params(&mut rng, 3, 4);
        let x = random_cloud(&mut rng, 6, 4);
        let c = dot_cost(&p, &x).unwrap();
        let l2 = l2_cost(&p, &x).unwrap();
        let q = x.points().matmul_transpose(p.w_q()).unwrap();
        let k = x.points().matmul_transpose(p.w_k()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = c.matrix()[(i, j)] - 0.5 * dot(q.row(i), q.row(i)) - 0.5 * dot(k.row(j), k.row(j));
                assert!((l2.matrix()[(i, j)] - expect).abs() < 1e-12);
            }
        }
        let tied = AttentionParams::new(p.w_q().clone(), p.w_q().clone(), p.w_v().clone()).unwrap();
        let l2 = l2_cost(&tied, &x).unwrap();
        assert!((0..6).all(|i| l2.matrix()[(i, i)] == 0.0));
    }

    #[test]
    fn l2_and_dot_costs_share_sinkhorn_kernel() {
        let mut rng = SeededRng::new(3);
        let p = random_params(&mut rng, 2, 3);
        let x = random_cloud(&mut rng, 8, 3);
        let a = sinkhorn::sinkhorn(&dot_cost(&p, &x).unwrap(), StopRule::tolerance(1e-12)).unwrap();
        let b = sinkhorn::sinkhorn(&l2_cost(&p, &x).unwrap(), StopRule::tolerance(1e-12)).unwrap();
        assert!(a.kernel.max_abs_diff(&b.kernel) <= 1e-9);
    }

    #[test]
    fn forward_trivial_cases() {
        let mut rng = SeededRng::new(4);
        let p = random_params(&mut rng, 2, 3);
        let x = random_cloud(&mut rng, 5, 3);
        let p0 = AttentionParams::new(p.w_q().clone(), p.w_k().clone(), DenseMatrix::zeros(3, 3)).unwrap();
        for norm in [NormalizationSpec::Softmax, NormalizationSpec::sinkhorn(3).unwrap()] {
            assert_eq!(attention_forward(&x, &p0, norm).unwrap(), x);
        }

        let single = random_cloud(&mut rng, 1, 3);
        let expect: Vec<f64> = {
            let wv = p.w_v().apply(single.point(0)).unwrap();
            single.point(0).iter().zip(wv).map(|(a, b)| a + b).collect()
        };
        for norm in [NormalizationSpec::Softmax, NormalizationSpec::sinkhorn(5).unwrap()] {
            let y = attention_forward(&single, &p, norm).unwrap();
            for (a, b) in y.point(0).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn one_iteration_matches_softmax_forward() {
        let mut rng = SeededRng::new(5);
        let p = random_params(&mut rng, 3, 3);
        let x = random_cloud(&mut rng, 7, 3);
        let a = attention_forward(&x, &p, NormalizationSpec::Softmax).unwrap();
        let b = attention_forward(&x, &p, NormalizationSpec::sinkhorn(1).unwrap()).unwrap();
        assert!(a.points().max_abs_diff(b.points()) <= 1e-14);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = SeededRng::new(6);
        let p = random_params(&mut rng, 3, 2);
        let x = random_cloud(&mut rng, 9, 2);
        let perm = rng.permutation(9);
        for norm in [NormalizationSpec::Softmax, NormalizationSpec::sinkhorn(3).unwrap(), NormalizationSpec::sinkhorn(21).unwrap()] {
            let y = attention_forward(&x, &p, norm).unwrap();
            let yp = attention_forward(&x.permuted(&perm).unwrap(), &p, norm).unwrap();
            assert!(yp.points().max_abs_diff(y.permuted(&perm).unwrap().points()) <= 1e-12);
        }
    }

    #[test]
    fn converged_kernel_balances_mass() {
        let mut rng = SeededRng::new(7);
        let p = random_params(&mut rng, 2, 3);
        let x = random_cloud(&mut rng, 10, 3);
        let k = sinkhorn::sinkhorn(&dot_cost(&p, &x).unwrap(), StopRule::tolerance(1e-12)).unwrap().kernel;
        let lhs = mean_residual(&x, &k, p.w_v()).unwrap();
        let rhs = p.w_v().apply(&x.mean()).unwrap();
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn column_sum_examples() {
        let uniform = DenseMatrix::filled(4, 4, 0.25);
        let s = column_sum_stats(&uniform);
        assert!(s.sums.iter().all(|&v| v == 1.0));
        assert_eq!(s.histogram[ColumnSumStats::bin_of(1.0)], 4);
        assert_eq!(s.histogram.len(), 60);

        let concentrated = DenseMatrix::from_fn(4, 4, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let s = column_sum_stats(&concentrated);
        assert_eq!(s.sums, vec![4.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.overflow, 1);
        assert_eq!(s.histogram[0], 3);

        let mut rng = SeededRng::new(8);
        let c = CostMatrix::new(rng.normal_matrix(12, 12, 1.0)).unwrap();
        let k = sinkhorn::softmax(&c);
        let s = column_sum_stats(&k);
        for j in 0..12 {
            let direct: f64 = (0..12).map(|i| k[(i, j)]).sum();
            assert!((s.sums[j] - direct).abs() < 1e-13);
        }
        assert!(s.min <= s.mean && s.mean <= s.max);
    }
}
