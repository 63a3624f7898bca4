//! Row/column normalization, SoftMax and log-domain Sinkhorn scaling.
//!
//! For a cost matrix `C` Sinkhorn alternates row and column normalizations of
//! `K⁰ = exp(C)`, starting with the rows. One iteration is exactly the
//! row-wise SoftMax. The iterations are carried out on dual potentials
//! `(f, g)` so that the kernel is always `K = exp(C + f 1ᵀ + 1 gᵀ)` and is
//! never formed from unshifted exponentials.
//!
//! The returned kernel has rows and columns summing to one. Against the
//! empirical measure the corresponding kernel is `n K`, whose potentials are
//! `(f + log n, g)`; see [`SinkhornResult::symmetric_potential`] and
//! [`extend_potential`].

use serde::Serialize;

use crate::numerics::{logsumexp, DenseMatrix};
use crate::{Error, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_MAX_ITERATIONS: usize = 5000;

/// Pairwise log-affinities `C[i, j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    matrix: DenseMatrix,
}

impl CostMatrix {
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        if !matrix.is_finite() {
            return Err(Error::NonFinite("CostMatrix::new"));
        }
        Ok(CostMatrix { matrix })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(DenseMatrix::from_rows(rows)?)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.matrix
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    /// `C + f 1ᵀ + 1 gᵀ`.
    pub fn with_potentials(&self, f: &[f64], g: &[f64]) -> Result<Self> {
        if f.len() != self.rows() || g.len() != self.cols() {
            return Err(Error::dims(
                "CostMatrix::with_potentials",
                format!("{}+{}", self.rows(), self.cols()),
                format!("{}+{}", f.len(), g.len()),
            ));
        }
        let m = DenseMatrix::from_fn(self.rows(), self.cols(), |i, j| {
            self.matrix[(i, j)] + f[i] + g[j]
        });
        Self::new(m)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.matrix.scale(s))
    }
}

/// When to stop Sinkhorn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopRule {
    /// Exactly this many normalizations (odd counts end on a row step).
    Iterations(usize),
    /// Until both marginal violations are at most `tolerance`.
    Tolerance { tolerance: f64, max_iterations: usize },
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule::Tolerance {
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

impl StopRule {
    pub fn tolerance(tolerance: f64) -> Self {
        StopRule::Tolerance {
            tolerance,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

/// Largest deviation of row and column sums from one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MarginalViolation {
    pub row: f64,
    pub col: f64,
}

impl MarginalViolation {
    pub fn max(&self) -> f64 {
        self.row.max(self.col)
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    /// `exp(C[i,j] + f[i] + g[j])`.
    pub kernel: DenseMatrix,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iterations: usize,
    pub marginal_violation: MarginalViolation,
}

impl SinkhornResult {
    pub fn n(&self) -> usize {
        self.f.len()
    }

    /// Kernel against the empirical measure, `n K`.
    pub fn measure_kernel(&self) -> DenseMatrix {
        self.kernel.scale(self.n() as f64)
    }

    /// Potential `φ` with `n K[i,j] = exp(C[i,j] + φ[i] + φ[j])`.
    ///
    /// Only meaningful for a symmetric cost, where `f - g` is constant at
    /// convergence.
    pub fn symmetric_potential(&self) -> Vec<f64> {
        let log_n = (self.n() as f64).ln();
        self.f
            .iter()
            .zip(&self.g)
            .map(|(f, g)| 0.5 * (f + g + log_n))
            .collect()
    }
}

pub fn marginal_violation(k: &DenseMatrix) -> MarginalViolation {
    let dev = |sums: Vec<f64>| sums.into_iter().fold(0.0f64, |m, s| m.max((s - 1.0).abs()));
    MarginalViolation {
        row: dev(k.row_sums()),
        col: dev(k.col_sums()),
    }
}

fn check_positive(k: &DenseMatrix) -> Result<()> {
    for i in 0..k.rows() {
        for (j, &v) in k.row(i).iter().enumerate() {
            if !(v > 0.0) {
                return Err(Error::NonPositiveEntry { row: i, col: j, value: v });
            }
        }
    }
    Ok(())
}

pub fn row_normalize(k: &DenseMatrix) -> Result<DenseMatrix> {
    check_positive(k)?;
    let sums = k.row_sums();
    Ok(DenseMatrix::from_fn(k.rows(), k.cols(), |i, j| k[(i, j)] / sums[i]))
}

pub fn col_normalize(k: &DenseMatrix) -> Result<DenseMatrix> {
    check_positive(k)?;
    let sums = k.col_sums();
    Ok(DenseMatrix::from_fn(k.rows(), k.cols(), |i, j| k[(i, j)] / sums[j]))
}

/// Row-wise SoftMax of `C`, i.e. the first Sinkhorn iterate.
pub fn softmax(cost: &CostMatrix) -> DenseMatrix {
    let c = cost.matrix();
    let mut out = DenseMatrix::zeros(c.rows(), c.cols());
    for i in 0..c.rows() {
        let f = -logsumexp(c.row(i));
        for (o, &v) in out.row_mut(i).iter_mut().zip(c.row(i)) {
            *o = (v + f).exp();
        }
    }
    out
}

/// `-log Σ_j exp(C[i,j] + g[j])` for every row.
fn row_update(c: &DenseMatrix, g: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
    for (i, o) in out.iter_mut().enumerate() {
        scratch.clear();
        scratch.extend(c.row(i).iter().zip(g).map(|(a, b)| a + b));
        *o = -logsumexp(scratch);
    }
}

/// `-log Σ_i exp(C[i,j] + f[i])` for every column.
fn col_update(c: &DenseMatrix, f: &[f64], out: &mut [f64]) {
    let (rows, cols) = c.shape();
    let mut max = vec![f64::NEG_INFINITY; cols];
    for i in 0..rows {
        for (m, &v) in max.iter_mut().zip(c.row(i)) {
            *m = m.max(v + f[i]);
        }
    }
    let mut acc = vec![0.0; cols];
    for i in 0..rows {
        for ((a, &v), &m) in acc.iter_mut().zip(c.row(i)).zip(&max) {
            *a += (v + f[i] - m).exp();
        }
    }
    for ((o, a), m) in out.iter_mut().zip(acc).zip(max) {
        *o = -(m + a.ln());
    }
}

/// Log-domain Sinkhorn starting from `f = g = 0`.
///
/// Iteration `l` (counting from zero) updates `f` when `l` is even and `g`
/// when it is odd. Under [`StopRule::Tolerance`] the violation of the
/// marginal that was not just normalized is read off the next update for
/// free; the reported violation is recomputed from the final kernel.
pub fn sinkhorn(cost: &CostMatrix, stop: StopRule) -> Result<SinkhornResult> {
    let c = cost.matrix();
    let (rows, cols) = c.shape();
    let mut f = vec![0.0; rows];
    let mut g = vec![0.0; cols];
    let mut scratch = Vec::with_capacity(cols);

    let iterations = match stop {
        StopRule::Iterations(count) => {
            for l in 0..count {
                if l % 2 == 0 {
                    row_update(c, &g, &mut f, &mut scratch);
                } else {
                    col_update(c, &f, &mut g);
                }
            }
            count
        }
        StopRule::Tolerance {
            tolerance,
            max_iterations,
        } => {
            if !(tolerance > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "tolerance must be positive, got {tolerance}"
                )));
            }
            let mut next_f = vec![0.0; rows];
            let mut next_g = vec![0.0; cols];
            let mut l = 0;
            let mut violation = f64::INFINITY;
            loop {
                // Row sums of exp(C + f + g) are exp(f - f_next) and column
                // sums exp(g - g_next).
                if l % 2 == 0 {
                    row_update(c, &g, &mut next_f, &mut scratch);
                    if l > 0 {
                        violation = max_deviation(&f, &next_f);
                    }
                } else {
                    col_update(c, &f, &mut next_g);
                    violation = max_deviation(&g, &next_g);
                }
                if violation <= tolerance {
                    break;
                }
                if l == max_iterations {
                    return Err(Error::NonConvergence {
                        iterations: l,
                        violation,
                    });
                }
                if l % 2 == 0 {
                    std::mem::swap(&mut f, &mut next_f);
                } else {
                    std::mem::swap(&mut g, &mut next_g);
                }
                l += 1;
            }
            l
        }
    };

    let kernel = DenseMatrix::from_fn(rows, cols, |i, j| (c[(i, j)] + f[i] + g[j]).exp());
    if !kernel.is_finite() {
        return Err(Error::NonFinite("sinkhorn"));
    }
    let marginal_violation = marginal_violation(&kernel);
    Ok(SinkhornResult {
        kernel,
        f,
        g,
        iterations,
        marginal_violation,
    })
}

fn max_deviation(current: &[f64], next: &[f64]) -> f64 {
    current
        .iter()
        .zip(next)
        .fold(0.0f64, |m, (a, b)| m.max(((a - b).exp() - 1.0).abs()))
}

/// Soft c-transform of `g` at a query point, against the uniform empirical
/// measure: `f(x) = -log((1/n) Σ_j exp(g[j] + cost_row[j]))`.
///
/// `cost_row[j]` is the (already bandwidth-scaled) cost between the query and
/// sample `j`, and `g` must be in the measure-weighted gauge, e.g.
/// [`SinkhornResult::symmetric_potential`].
pub fn extend_potential(cost_row: &[f64], g: &[f64]) -> Result<f64> {
    if cost_row.len() != g.len() || g.is_empty() {
        return Err(Error::dims("extend_potential", g.len(), cost_row.len()));
    }
    let terms: Vec<f64> = cost_row.iter().zip(g).map(|(c, g)| c + g).collect();
    Ok((g.len() as f64).ln() - logsumexp(&terms))
}
