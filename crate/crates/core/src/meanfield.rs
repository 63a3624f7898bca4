//! Bandwidth-rescaled attention fields, their small-bandwidth limits and a
//! particle simulation of the resulting diffusion.
//!
//! With `M = W_Qᵀ W_K` positive semi-definite the Sinkhorn kernel for the
//! cost `c/ε` coincides (cost invariance) with the one for
//! `-½ (x - y)ᵀ M (x - y) / ε`. Writing `M = Lᵀ L`, that is a Gaussian kernel
//! on the transformed points `L x`, which is what the solver below works on.
//!
//! The in-sample problem is symmetric, so a single potential `φ` with
//! `k(x_i, x_j) = exp(c_ij / ε + φ_i + φ_j)` and `(1/n) Σ_j k(x_i, x_j) = 1`
//! is solved for without materializing the `n × n` kernel, which keeps
//! `n = 10⁴` samples within memory.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::flows::{SymmetricAttentionParams, DIVERGENCE_BOUND};
use crate::numerics::{logsumexp, DenseMatrix};
use crate::sinkhorn::extend_potential;
use crate::{Error, ParticleCloud, Result, SeededRng};

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 5000;
/// Largest acceptable condition number of `W_K`.
pub const CONDITION_LIMIT: f64 = 1e12;

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

#[derive(Clone, Debug)]
struct Component {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    /// Lower Cholesky factor of the covariance, for sampling.
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Component {
    fn new(mean: &[f64], cov: &DenseMatrix) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::dims("DensityModel", format!("{d}x{d} covariance"), format!("{:?}", cov.shape())));
        }
        let sym = to_na(cov);
        if (&sym - sym.transpose()).amax() > 1e-12 * sym.amax().max(1.0) {
            return Err(Error::InvalidParameter("covariance must be symmetric".into()));
        }
        let chol = sym
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("covariance must be positive definite".into()))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Component {
            mean: DVector::from_column_slice(mean),
            precision: chol.inverse(),
            chol: chol.l(),
            log_norm,
        })
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.mean;
        self.log_norm - 0.5 * r.dot(&(&self.precision * &r))
    }

    fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.precision * (x - &self.mean))
    }
}

/// Analytic density with closed-form score `∇ρ/ρ`.
#[derive(Clone, Debug)]
pub struct DensityModel {
    weights: Vec<f64>,
    components: Vec<Component>,
}

impl DensityModel {
    pub fn gaussian(mean: &[f64], cov: &DenseMatrix) -> Result<Self> {
        Self::mixture(&[(1.0, mean.to_vec(), cov.clone())])
    }

    pub fn standard(d: usize) -> Self {
        Self::gaussian(&vec![0.0; d], &DenseMatrix::identity(d)).expect("identity covariance is valid")
    }

    /// Weights need not be normalized but must be positive.
    pub fn mixture(parts: &[(f64, Vec<f64>, DenseMatrix)]) -> Result<Self> {
        let Some(d) = parts.first().map(|p| p.1.len()) else {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        };
        if d == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        let total: f64 = parts.iter().map(|p| p.0).sum();
        let mut weights = Vec::with_capacity(parts.len());
        let mut components = Vec::with_capacity(parts.len());
        for (w, mean, cov) in parts {
            if !(*w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidParameter(format!("mixture weight must be positive, got {w}")));
            }
            if mean.len() != d {
                return Err(Error::dims("DensityModel::mixture", d, mean.len()));
            }
            weights.push(w / total);
            components.push(Component::new(mean, cov)?);
        }
        Ok(DensityModel { weights, components })
    }

    pub fn d(&self) -> usize {
        self.components[0].mean.len()
    }

    fn point(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.d() {
            return Err(Error::dims("DensityModel", self.d(), x.len()));
        }
        Ok(DVector::from_column_slice(x))
    }

    fn log_terms(&self, x: &DVector<f64>) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_density(x))
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(logsumexp(&self.log_terms(&self.point(x)?)))
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    /// `∇ρ / ρ`, via component responsibilities so it stays finite in the tails.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = self.point(x)?;
        let terms = self.log_terms(&v);
        let lse = logsumexp(&terms);
        let mut out = DVector::zeros(self.d());
        for (t, c) in terms.iter().zip(&self.components) {
            out += c.score(&v) * (t - lse).exp();
        }
        Ok(out.iter().copied().collect())
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let rho = self.density(x)?;
        Ok(self.score(x)?.into_iter().map(|s| s * rho).collect())
    }

    pub fn sample(&self, rng: &mut SeededRng, n: usize) -> Result<ParticleCloud> {
        if n == 0 {
            return Err(Error::InvalidParameter("sample size must be at least 1".into()));
        }
        let d = self.d();
        let mut points = DenseMatrix::zeros(n, d);
        for i in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (idx, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = idx;
                    break;
                }
            }
            let c = &self.components[k];
            let z = DVector::from_fn(d, |_, _| rng.standard_normal());
            let x = &c.mean + &c.chol * z;
            points.row_mut(i).copy_from_slice(x.as_slice());
        }
        ParticleCloud::new(points)
    }
}

/// `-∇ρ/ρ (x)`.
pub fn analytic_limit_sink(rho: &DensityModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(rho.score(x)?.into_iter().map(|s| -s).collect())
}

fn checked_inverse(m: &DenseMatrix) -> Result<DMatrix<f64>> {
    let a = to_na(m);
    let sv = a.clone().singular_values();
    let (max, min) = (sv.max(), sv.min());
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if condition > CONDITION_LIMIT {
        return Err(Error::IllConditioned { condition });
    }
    a.try_inverse().ok_or(Error::IllConditioned { condition })
}

/// `-W_Qᵀ W_K⁻¹ (∇ρ/ρ)(W_K⁻¹ W_Q x)`.
pub fn analytic_limit_softmax(rho: &DensityModel, p: &SymmetricAttentionParams, x: &[f64]) -> Result<Vec<f64>> {
    let k_inv = checked_inverse(p.w_k())?;
    let w_q = to_na(p.w_q());
    let y = &k_inv * (&w_q * DVector::from_column_slice(x));
    let s = DVector::from_vec(rho.score(y.as_slice())?);
    let out = -(w_q.transpose() * (k_inv * s));
    Ok(out.iter().copied().collect())
}

/// `L` with `Lᵀ L = M` for positive semi-definite `M`.
fn psd_factor(m: &DenseMatrix) -> Result<DMatrix<f64>> {
    let eig = to_na(m).symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1e-300);
    if eig.eigenvalues.min() < -1e-12 * scale {
        return Err(Error::InvalidParameter(format!(
            "W_Qᵀ W_K must be positive semi-definite (smallest eigenvalue {:e})",
            eig.eigenvalues.min()
        )));
    }
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(sqrt * eig.eigenvectors.transpose())
}

/// Points `L x / √ε`, flattened row-major, so the cost is `-½ ‖z_i - z_j‖²`.
fn transformed(x: &ParticleCloud, factor: &DMatrix<f64>, eps: f64) -> Vec<f64> {
    let s = 1.0 / eps.sqrt();
    let mut out = Vec::with_capacity(x.n() * factor.nrows());
    for i in 0..x.n() {
        let z = factor * DVector::from_column_slice(x.point(i));
        out.extend(z.iter().map(|v| v * s));
    }
    out
}

fn half_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct SymmetricSolution {
    pub potential: Vec<f64>,
    pub iterations: usize,
    /// `max_i |(1/n) Σ_j k_ij - 1|` at the returned potential.
    pub violation: f64,
}

/// Row sums `(1/n) Σ_j exp(-½‖z_i - z_j‖² + φ_i + φ_j)`, visiting each pair once.
fn row_sums(z: &[f64], dim: usize, phi: &[f64], out: &mut [f64]) {
    let n = phi.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = (2.0 * phi[i]).exp();
    }
    for i in 0..n {
        let zi = &z[i * dim..(i + 1) * dim];
        let pi = phi[i];
        let mut acc = 0.0;
        for j in i + 1..n {
            let e = (pi + phi[j] - half_sq_dist(zi, &z[j * dim..(j + 1) * dim])).exp();
            acc += e;
            out[j] += e;
        }
        out[i] += acc;
    }
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// Symmetric Sinkhorn `φ ← φ - ½ log r` on transformed points, until every
/// row sum is within `tol` of one.
fn solve_symmetric(z: &[f64], dim: usize, n: usize, tol: f64, warm: Option<&[f64]>) -> Result<SymmetricSolution> {
    let mut phi = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        _ => vec![0.0; n],
    };
    let mut r = vec![0.0; n];
    for iterations in 0..=MAX_ITERATIONS {
        row_sums(z, dim, &phi, &mut r);
        let violation = r.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
        if !violation.is_finite() {
            return Err(Error::NonFinite("symmetric sinkhorn"));
        }
        if violation <= tol {
            return Ok(SymmetricSolution { potential: phi, iterations, violation });
        }
        if iterations == MAX_ITERATIONS {
            return Err(Error::NonConvergence { iterations, violation });
        }
        for (p, v) in phi.iter_mut().zip(&r) {
            *p -= 0.5 * v.ln();
        }
    }
    unreachable!("loop returns on its last iteration")
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {eps}")));
    }
    Ok(())
}

/// Sinkhorn kernel for `c/ε` on a fixed sample, ready for out-of-sample
/// evaluation.
#[derive(Clone, Debug)]
pub struct BandwidthKernel {
    eps: f64,
    factor: DMatrix<f64>,
    dim: usize,
    z: Vec<f64>,
    /// Rows `W_V x_j`.
    values: DenseMatrix,
    w_v: DenseMatrix,
    pub solution: SymmetricSolution,
}

impl BandwidthKernel {
    pub fn fit(samples: &ParticleCloud, p: &SymmetricAttentionParams, eps: f64, tol: f64) -> Result<Self> {
        Self::fit_warm(samples, p, eps, tol, None)
    }

    pub fn fit_warm(
        samples: &ParticleCloud,
        p: &SymmetricAttentionParams,
        eps: f64,
        tol: f64,
        warm: Option<&[f64]>,
    ) -> Result<Self> {
        check_eps(eps)?;
        if samples.d() != p.d() {
            return Err(Error::dims("BandwidthKernel", p.d(), samples.d()));
        }
        let factor = psd_factor(p.interaction())?;
        let dim = factor.nrows();
        let z = transformed(samples, &factor, eps);
        let solution = solve_symmetric(&z, dim, samples.n(), tol, warm)?;
        let w_v = p.w_v();
        Ok(BandwidthKernel {
            eps,
            factor,
            dim,
            z,
            values: samples.points().matmul_transpose(&w_v)?,
            w_v,
            solution,
        })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    /// Weights `(1/n) k(x, x_j)` of a query, with `f(x)` from the soft
    /// c-transform of the in-sample potential.
    pub fn query_weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        let q: Vec<f64> = (&self.factor * DVector::from_column_slice(x))
            .iter()
            .map(|v| v / self.eps.sqrt())
            .collect();
        let costs: Vec<f64> = (0..self.n())
            .map(|j| -half_sq_dist(&q, &self.z[j * self.dim..(j + 1) * self.dim]))
            .collect();
        let phi = &self.solution.potential;
        let f = extend_potential(&costs, phi)?;
        let inv_n = 1.0 / self.n() as f64;
        Ok(costs.iter().zip(phi).map(|(c, g)| (c + f + g).exp() * inv_n).collect())
    }

    /// `(1/ε) [(1/n) Σ_j k(x, x_j) W_V x_j - W_V x]`.
    pub fn rescaled_field(&self, x: &[f64]) -> Result<Vec<f64>> {
        let w = self.query_weights(x)?;
        let mut acc = vec![0.0; self.values.cols()];
        for (j, wj) in w.iter().enumerate() {
            for (a, v) in acc.iter_mut().zip(self.values.row(j)) {
                *a += wj * v;
            }
        }
        let wx = self.w_v.apply(x)?;
        Ok(acc.iter().zip(wx).map(|(a, b)| (a - b) / self.eps).collect())
    }

    /// The rescaled field at every sample, using in-sample potentials.
    pub fn in_sample_field(&self) -> DenseMatrix {
        let n = self.n();
        let d = self.values.cols();
        let phi = &self.solution.potential;
        let dim = self.dim;
        let mut acc = DenseMatrix::zeros(n, d);
        for i in 0..n {
            let e = (2.0 * phi[i]).exp();
            for a in 0..d {
                acc[(i, a)] += e * self.values[(i, a)];
            }
        }
        for i in 0..n {
            let zi = &self.z[i * dim..(i + 1) * dim];
            for j in i + 1..n {
                let e = (phi[i] + phi[j] - half_sq_dist(zi, &self.z[j * dim..(j + 1) * dim])).exp();
                for a in 0..d {
                    let (vi, vj) = (self.values[(i, a)], self.values[(j, a)]);
                    acc[(i, a)] += e * vj;
                    acc[(j, a)] += e * vi;
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        DenseMatrix::from_fn(n, d, |i, a| (acc[(i, a)] * inv_n - self.values[(i, a)]) / self.eps)
    }
}

fn stack(rows: Vec<Vec<f64>>, d: usize) -> Result<DenseMatrix> {
    let n = rows.len();
    DenseMatrix::from_vec(n, d, rows.into_iter().flatten().collect())
}

/// Rescaled Sinkhorn field `T̄^∞_ε` at every query.
pub fn rescaled_sink_field(
    samples: &ParticleCloud,
    p: &SymmetricAttentionParams,
    eps: f64,
    queries: &ParticleCloud,
    tol: f64,
) -> Result<DenseMatrix> {
    let kernel = BandwidthKernel::fit(samples, p, eps, tol)?;
    let rows = (0..queries.n()).map(|i| kernel.rescaled_field(queries.point(i))).collect::<Result<_>>()?;
    stack(rows, p.d())
}

/// Rescaled SoftMax field `T̄¹_ε` with the L2 cost:
/// `(1/ε) [Σ_j w_j W_V x_j + W_Qᵀ W_Q x]`, `w = softmax_j(-‖W_Q x - W_K x_j‖² / 2ε)`.
pub fn rescaled_softmax_field(
    samples: &ParticleCloud,
    p: &SymmetricAttentionParams,
    eps: f64,
    queries: &ParticleCloud,
) -> Result<DenseMatrix> {
    check_eps(eps)?;
    if samples.d() != p.d() || queries.d() != p.d() {
        return Err(Error::dims("rescaled_softmax_field", p.d(), samples.d()));
    }
    checked_inverse(p.w_k())?;
    let keys = samples.points().matmul_transpose(p.w_k())?;
    let values = samples.points().matmul_transpose(&p.w_v())?;
    let qq = p.w_q().transpose_matmul(p.w_q())?;
    let n = samples.n();
    let mut rows = Vec::with_capacity(queries.n());
    for i in 0..queries.n() {
        let x = queries.point(i);
        let q = p.w_q().apply(x)?;
        let logits: Vec<f64> = (0..n).map(|j| -half_sq_dist(&q, keys.row(j)) / eps).collect();
        let lse = logsumexp(&logits);
        let mut acc = qq.apply(x)?;
        for (j, l) in logits.iter().enumerate() {
            let w = (l - lse).exp();
            for (a, v) in acc.iter_mut().zip(values.row(j)) {
                *a += w * v;
            }
        }
        rows.push(acc.into_iter().map(|a| a / eps).collect());
    }
    stack(rows, p.d())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimitKind {
    Sink,
    Softmax,
}

impl std::str::FromStr for LimitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sink" => Ok(LimitKind::Sink),
            "softmax" => Ok(LimitKind::Softmax),
            other => Err(Error::Parse(format!("unknown field `{other}` (expected sink or softmax)"))),
        }
    }
}

/// Empirical rescaled field of the given kind.
pub fn rescaled_field(
    which: LimitKind,
    samples: &ParticleCloud,
    p: &SymmetricAttentionParams,
    eps: f64,
    queries: &ParticleCloud,
    tol: f64,
) -> Result<DenseMatrix> {
    match which {
        LimitKind::Sink => rescaled_sink_field(samples, p, eps, queries, tol),
        LimitKind::Softmax => rescaled_softmax_field(samples, p, eps, queries),
    }
}

/// The `ε → 0` limit of [`rescaled_field`].
pub fn analytic_limit(which: LimitKind, rho: &DensityModel, p: &SymmetricAttentionParams, queries: &ParticleCloud) -> Result<DenseMatrix> {
    let rows = (0..queries.n())
        .map(|i| match which {
            LimitKind::Sink => analytic_limit_sink(rho, queries.point(i)),
            LimitKind::Softmax => analytic_limit_softmax(rho, p, queries.point(i)),
        })
        .collect::<Result<_>>()?;
    stack(rows, queries.d())
}

#[derive(Clone, Debug)]
pub struct EpsilonSweep {
    pub epsilons: Vec<f64>,
    pub n: usize,
    pub grid: ParticleCloud,
}

impl EpsilonSweep {
    pub fn new(epsilons: Vec<f64>, n: usize, grid: ParticleCloud) -> Result<Self> {
        if epsilons.is_empty() || n == 0 {
            return Err(Error::InvalidParameter("sweep needs at least one bandwidth and one sample".into()));
        }
        if epsilons.iter().any(|e| !(*e > 0.0)) || epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidParameter(format!(
                "bandwidths must be positive and strictly decreasing: {epsilons:?}"
            )));
        }
        Ok(EpsilonSweep { epsilons, n, grid })
    }
}

/// `k` evenly spaced points on `[a, b]` as a one-dimensional cloud.
pub fn linspace_grid(a: f64, b: f64, k: usize) -> Result<ParticleCloud> {
    if k == 0 {
        return Err(Error::InvalidParameter("grid needs at least one point".into()));
    }
    let pts: Vec<[f64; 1]> = if k == 1 {
        vec![[a]]
    } else {
        (0..k).map(|i| [a + (b - a) * i as f64 / (k - 1) as f64]).collect()
    };
    ParticleCloud::from_rows(&pts)
}

/// Root mean squared Euclidean norm of the rows of `a - b`.
pub fn rms_difference(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    let diff = a.sub(b)?;
    Ok(rms(&diff))
}

pub fn rms(a: &DenseMatrix) -> f64 {
    (a.as_slice().iter().map(|v| v * v).sum::<f64>() / a.rows().max(1) as f64).sqrt()
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub rms_error: f64,
    /// RMS norm of the limit field on the grid.
    pub rms_reference: f64,
    /// `rms_error / rms_reference`, NaN when the limit vanishes on the grid.
    pub relative_rms: f64,
}

/// RMS distance between the empirical rescaled field and its analytic limit
/// for every bandwidth. Every bandwidth sees the same sample, drawn from
/// `rho` with `seed`, so differences across rows are not Monte-Carlo noise.
pub fn epsilon_convergence_experiment(
    rho: &DensityModel,
    p: &SymmetricAttentionParams,
    sweep: &EpsilonSweep,
    which: LimitKind,
    seed: u64,
) -> Result<Vec<ConvergenceRow>> {
    let limit = analytic_limit(which, rho, p, &sweep.grid)?;
    let rms_reference = rms(&limit);
    let mut rows = Vec::with_capacity(sweep.epsilons.len());
    for &eps in &sweep.epsilons {
        let samples = rho.sample(&mut SeededRng::new(seed), sweep.n)?;
        let field = rescaled_field(which, &samples, p, eps, &sweep.grid, DEFAULT_TOLERANCE)?;
        let rms_error = rms_difference(&field, &limit)?;
        let relative_rms = if rms_reference > 0.0 { rms_error / rms_reference } else { f64::NAN };
        rows.push(ConvergenceRow {
            eps,
            rms_error,
            rms_reference,
            relative_rms,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HeatConfig {
    pub eps: f64,
    pub step: f64,
    pub steps: usize,
    pub sinkhorn_tolerance: f64,
    /// Keep every this-many steps as a snapshot (0 keeps none).
    pub snapshot_every: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct HeatRecord {
    pub step: usize,
    pub time: f64,
    /// Mean over coordinates of the per-coordinate sample variance.
    pub variance: f64,
    pub mean: Vec<f64>,
    pub sinkhorn_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct HeatSimulation {
    pub records: Vec<HeatRecord>,
    pub snapshots: Vec<(usize, ParticleCloud)>,
    pub final_cloud: ParticleCloud,
}

/// Evolves `X ← X + h T̄^∞_ε(X)` with `W_Q = W_K = I`, re-solving the
/// in-sample Sinkhorn problem (warm-started) every step.
pub fn heat_simulation(x0: &ParticleCloud, cfg: &HeatConfig) -> Result<HeatSimulation> {
    check_eps(cfg.eps)?;
    if !(cfg.step > 0.0) || cfg.step > cfg.eps / 4.0 {
        return Err(Error::InvalidParameter(format!(
            "step must lie in (0, ε/4] = (0, {}], got {}",
            cfg.eps / 4.0,
            cfg.step
        )));
    }
    let p = SymmetricAttentionParams::scalar(x0.d(), 1.0, 1.0)?;
    let mut x = x0.clone();
    let mut warm: Option<Vec<f64>> = None;
    let mut records = Vec::with_capacity(cfg.steps + 1);
    let mut snapshots = Vec::new();
    let record = |x: &ParticleCloud, step: usize, iterations: usize| HeatRecord {
        step,
        time: step as f64 * cfg.step,
        variance: x.variance().iter().sum::<f64>() / x.d() as f64,
        mean: x.mean(),
        sinkhorn_iterations: iterations,
    };
    for step in 0..=cfg.steps {
        let magnitude = x.max_abs();
        if magnitude > DIVERGENCE_BOUND {
            return Err(Error::Divergence { step, magnitude });
        }
        if cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0 {
            snapshots.push((step, x.clone()));
        }
        if step == cfg.steps {
            records.push(record(&x, step, 0));
            break;
        }
        let kernel = BandwidthKernel::fit_warm(&x, &p, cfg.eps, cfg.sinkhorn_tolerance, warm.as_deref())?;
        records.push(record(&x, step, kernel.solution.iterations));
        let v = kernel.in_sample_field();
        warm = Some(kernel.solution.potential);
        x = x.displaced(&v, cfg.step)?;
    }
    Ok(HeatSimulation {
        records,
        snapshots,
        final_cloud: x,
    })
}

/// Least-squares `(slope, intercept)` of `y` against `t`.
pub fn linear_fit(t: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if t.len() != y.len() || t.len() < 2 {
        return Err(Error::InvalidParameter("linear fit needs at least two paired points".into()));
    }
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = t.iter().map(|a| (a - mt) * (a - mt)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("linear fit needs distinct abscissae".into()));
    }
    let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - mt) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::relative_max_error;
    use crate::numerics::finite_diff_gradient;
    use crate::sinkhorn::{self, StopRule};

    fn identity_params() -> SymmetricAttentionParams {
        SymmetricAttentionParams::scalar(1, 1.0, 1.0).unwrap()
    }

    fn mixture() -> DensityModel {
        DensityModel::mixture(&[
            (0.3, vec![-1.0], DenseMatrix::filled(1, 1, 0.5)),
            (0.7, vec![1.5], DenseMatrix::filled(1, 1, 0.8)),
        ])
        .unwrap()
    }

    #[test]
    fn gaussian_density_closed_form() {
        let rho = DensityModel::standard(1);
        let expect = (-0.5f64 * 0.49).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((rho.density(&[0.7]).unwrap() - expect).abs() <= 1e-15);
        assert_eq!(analytic_limit_sink(&rho, &[0.7]).unwrap(), vec![0.7]);
        assert_eq!(analytic_limit_sink(&rho, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn mixture_score_matches_log_density_differences() {
        let rho = mixture();
        for x in [-2.0, -0.3, 0.4, 1.1, 2.5] {
            let fd = finite_diff_gradient(|v: &[f64]| rho.log_density(v), &[x], 1e-5).unwrap();
            let s = rho.score(&[x]).unwrap();
            assert!((s[0] - fd[0]).abs() <= 1e-8 * (1.0 + fd[0].abs()), "{x}: {} vs {}", s[0], fd[0]);
            let grad = rho.gradient(&[x]).unwrap();
            assert!((grad[0] - s[0] * rho.density(&[x]).unwrap()).abs() <= 1e-15);
        }
    }

    #[test]
    fn two_dimensional_score() {
        let cov = DenseMatrix::from_rows(&[[2.0, 0.5], [0.5, 1.0]]).unwrap();
        let rho = DensityModel::gaussian(&[1.0, -1.0], &cov).unwrap();
        let fd = finite_diff_gradient(|v: &[f64]| rho.log_density(v), &[0.3, 0.2], 1e-5).unwrap();
        assert!(relative_max_error(&rho.score(&[0.3, 0.2]).unwrap(), &fd) <= 1e-8);
        let bad = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(DensityModel::gaussian(&[0.0, 0.0], &bad).is_err());
    }

    #[test]
    fn sampling_moments() {
        let rho = DensityModel::gaussian(&[2.0], &DenseMatrix::filled(1, 1, 4.0)).unwrap();
        let x = rho.sample(&mut SeededRng::new(0), 100_000).unwrap();
        assert!((x.mean()[0] - 2.0).abs() < 0.03);
        assert!((x.variance()[0] - 4.0).abs() < 0.1);
    }

    #[test]
    fn softmax_limit_examples() {
        let rho = DensityModel::standard(1);
        let p = SymmetricAttentionParams::scalar(1, 2.0, 1.0).unwrap();
        for x in [-1.0, 0.3, 1.2] {
            assert!((analytic_limit_softmax(&rho, &p, &[x]).unwrap()[0] - 4.0 * x).abs() <= 1e-14);
        }
        let same = SymmetricAttentionParams::scalar(1, 1.5, 1.5).unwrap();
        let m = mixture();
        for x in [-1.0, 0.3, 1.2] {
            let a = analytic_limit_softmax(&m, &same, &[x]).unwrap()[0];
            let b = analytic_limit_sink(&m, &[x]).unwrap()[0];
            assert!((a - b).abs() <= 1e-14);
        }
        let singular = SymmetricAttentionParams::scalar(1, 1.0, 0.0).unwrap();
        assert!(matches!(
            analytic_limit_softmax(&rho, &singular, &[1.0]),
            Err(Error::IllConditioned { .. })
        ));
    }

    #[test]
    fn symmetric_solver_matches_general_sinkhorn() {
        let mut rng = SeededRng::new(3);
        let x = ParticleCloud::new(rng.normal_matrix(12, 2, 1.0)).unwrap();
        let p = SymmetricAttentionParams::random(&mut rng, 2, 0.8).unwrap();
        let p = if psd_factor(p.interaction()).is_ok() {
            p
        } else {
            SymmetricAttentionParams::scalar(2, 1.3, 0.7).unwrap()
        };
        let eps = 0.4;
        let kernel = BandwidthKernel::fit(&x, &p, eps, 1e-13).unwrap();
        let cost = p.cost(&x).unwrap().scaled(1.0 / eps).unwrap();
        let general = sinkhorn::sinkhorn(&cost, StopRule::tolerance(1e-13)).unwrap();
        let n = 12;
        for i in 0..n {
            let w = kernel.query_weights(x.point(i)).unwrap();
            for j in 0..n {
                assert!((w[j] - general.kernel[(i, j)]).abs() <= 1e-11, "{i},{j}");
            }
        }
    }

    #[test]
    fn single_sample_at_origin() {
        let x = ParticleCloud::from_rows(&[[0.0]]).unwrap();
        let q = ParticleCloud::from_rows(&[[0.0]]).unwrap();
        for eps in [1.0, 0.1] {
            let v = rescaled_sink_field(&x, &identity_params(), eps, &q, 1e-12).unwrap();
            assert_eq!(v[(0, 0)], 0.0);
        }
    }

    #[test]
    fn softmax_single_atom_closed_form() {
        let x0 = 0.7;
        let samples = ParticleCloud::from_rows(&[[x0]; 3]).unwrap();
        let q = ParticleCloud::from_rows(&[[-0.4], [1.2]]).unwrap();
        let eps = 0.3;
        let v = rescaled_softmax_field(&samples, &identity_params(), eps, &q).unwrap();
        for i in 0..2 {
            let x = q.point(i)[0];
            assert!((v[(i, 0)] - (x - x0) / eps).abs() <= 1e-13);
        }
    }

    #[test]
    fn fields_vanish_at_mode_of_symmetric_sample() {
        // Antithetic sample: symmetric about 0.
        let mut rng = SeededRng::new(5);
        let half: Vec<f64> = (0..400).map(|_| rng.standard_normal()).collect();
        let pts: Vec<[f64; 1]> = half.iter().flat_map(|&v| [[v], [-v]]).collect();
        let x = ParticleCloud::from_rows(&pts).unwrap();
        let q = ParticleCloud::from_rows(&[[0.0]]).unwrap();
        for which in [LimitKind::Sink, LimitKind::Softmax] {
            let v = rescaled_field(which, &x, &identity_params(), 0.1, &q, 1e-12).unwrap();
            assert!(v[(0, 0)].abs() <= 1e-9, "{which:?}: {}", v[(0, 0)]);
        }
    }

    #[test]
    fn sweep_validation() {
        let g = linspace_grid(-1.0, 1.0, 3).unwrap();
        assert!(EpsilonSweep::new(vec![0.5, 0.5], 10, g.clone()).is_err());
        assert!(EpsilonSweep::new(vec![0.5, -0.1], 10, g.clone()).is_err());
        assert!(EpsilonSweep::new(vec![0.5, 0.1], 10, g).is_ok());
        let g = linspace_grid(-1.5, 1.5, 21).unwrap();
        assert_eq!(g.n(), 21);
        assert!((g.point(20)[0] - 1.5).abs() <= 1e-15);
    }

    #[test]
    fn softmax_sweep_decreases() {
        let rho = DensityModel::standard(1);
        let sweep = EpsilonSweep::new(vec![0.5, 0.2, 0.1], 4000, linspace_grid(-1.5, 1.5, 11).unwrap()).unwrap();
        let rows = epsilon_convergence_experiment(&rho, &identity_params(), &sweep, LimitKind::Softmax, 0).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].rms_error < w[0].rms_error, "{rows:?}");
        }
    }

    #[test]
    fn heat_simulation_bookkeeping() {
        let x0 = gaussian_cloud(200, 1);
        let cfg = HeatConfig { eps: 0.1, step: 0.02, steps: 0, sinkhorn_tolerance: 1e-10, snapshot_every: 1 };
        let sim = heat_simulation(&x0, &cfg).unwrap();
        assert_eq!(sim.records.len(), 1);
        assert_eq!(sim.records[0].variance, x0.variance()[0]);
        assert_eq!(sim.snapshots.len(), 1);

        let bad = HeatConfig { step: 0.05, ..cfg };
        assert!(heat_simulation(&x0, &bad).is_err());

        let cfg = HeatConfig { steps: 5, snapshot_every: 2, ..cfg };
        let sim = heat_simulation(&x0, &cfg).unwrap();
        assert_eq!(sim.records.len(), 6);
        assert_eq!(sim.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 2, 4]);
        // Diffusion spreads the cloud.
        assert!(sim.records[5].variance > sim.records[0].variance);
    }

    fn gaussian_cloud(n: usize, seed: u64) -> ParticleCloud {
        crate::numerics::gaussian_sample(&mut SeededRng::new(seed), n, 1, &[0.0], 1.0).unwrap()
    }

    #[test]
    fn linear_fit_recovers_line() {
        let t = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = t.iter().map(|v| 2.0 * v + 1.0).collect();
        let (s, c) = linear_fit(&t, &y).unwrap();
        assert!((s - 2.0).abs() <= 1e-14 && (c - 1.0).abs() <= 1e-14);
        assert!(linear_fit(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn cost_matrix_is_used_consistently() {
        // The dot-product cost and the distance form give the same kernel.
        let x = gaussian_cloud(6, 9);
        let p = SymmetricAttentionParams::scalar(1, 0.8, 0.8).unwrap();
        let c = p.cost(&x).unwrap().scaled(1.0 / 0.2).unwrap();
        let k = sinkhorn::sinkhorn(&c, StopRule::tolerance(1e-13)).unwrap().kernel;
        let bw = BandwidthKernel::fit(&x, &p, 0.2, 1e-13).unwrap();
        let w = bw.query_weights(x.point(2)).unwrap();
        for j in 0..6 {
            assert!((w[j] - k[(2, j)]).abs() <= 1e-11);
        }
    }
}
