//! Particle dynamics driven by the three attention kernels.
//!
//! Under the symmetry assumption `W_Kᵀ W_Q = W_Qᵀ W_K = -W_V` the cost
//! `C[i,j] = x_iᵀ M x_j` with `M = W_Qᵀ W_K` is symmetric and
//!
//! - `k0` (unnormalized): `v_i = (1/n) Σ_j exp(C[i,j]) W_V x_j = -∇_{x_i} n F⁰`,
//! - `k1` (SoftMax): `v_i = Σ_j softmax(C)[i,j] W_V x_j`, the negative
//!   gradient of the log-partition with the cloud held fixed, which is *not*
//!   a gradient field over the whole configuration,
//! - `kinf` (Sinkhorn): `v_i = Σ_j K^∞[i,j] W_V x_j = -∇_{x_i} n F^∞`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::{finite_diff_gradient, DenseMatrix};
use crate::sinkhorn::{self, CostMatrix, SinkhornResult, StopRule};
use crate::{AttentionParams, Error, ParticleCloud, Result, SeededRng};

/// Any particle farther than this from the origin aborts a simulation.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Query/key pair with `W_Kᵀ W_Q` symmetric; the value matrix is derived.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricAttentionParams {
    w_q: DenseMatrix,
    w_k: DenseMatrix,
    /// `W_Qᵀ W_K`, symmetrized to remove rounding asymmetry.
    interaction: DenseMatrix,
}

impl SymmetricAttentionParams {
    pub fn new(w_q: DenseMatrix, w_k: DenseMatrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return Err(Error::dims("SymmetricAttentionParams", format!("{:?}", w_q.shape()), format!("{:?}", w_k.shape())));
        }
        let qk = w_q.transpose_matmul(&w_k)?;
        let kq = qk.transpose();
        let scale = qk.max_abs().max(1.0);
        if qk.max_abs_diff(&kq) > 1e-12 * scale {
            return Err(Error::InvalidParameter(format!(
                "W_Kᵀ W_Q is not symmetric (defect {:e})",
                qk.max_abs_diff(&kq)
            )));
        }
        let interaction = qk.add(&kq)?.scale(0.5);
        Ok(SymmetricAttentionParams { w_q, w_k, interaction })
    }

    /// `W_Q = a I`, `W_K = b I` in dimension `d`.
    pub fn scalar(d: usize, a: f64, b: f64) -> Result<Self> {
        Self::new(DenseMatrix::identity(d).scale(a), DenseMatrix::identity(d).scale(b))
    }

    /// `W_K` Gaussian with entries of standard deviation `stddev`, `W_Q = P W_K`
    /// with `P` a random symmetric matrix, which makes `W_Kᵀ W_Q` symmetric.
    pub fn random(rng: &mut SeededRng, d: usize, stddev: f64) -> Result<Self> {
        let w_k = rng.normal_matrix(d, d, stddev);
        let a = rng.normal_matrix(d, d, 1.0);
        let p = a.add(&a.transpose())?.scale(0.5);
        Self::new(p.matmul(&w_k)?, w_k)
    }

    /// Rescales `W_Q` so that `‖W_Kᵀ W_Q‖_F = 1`. Field structure such as the
    /// Jacobian asymmetry of `k1` fades as the interaction shrinks, so random
    /// instances compared against fixed thresholds should share one scale.
    pub fn unit_interaction(&self) -> Result<Self> {
        let norm = self.interaction.frobenius_norm();
        if !(norm > 0.0) {
            return Err(Error::InvalidParameter("interaction matrix is zero".into()));
        }
        Self::new(self.w_q.scale(1.0 / norm), self.w_k.clone())
    }

    pub fn w_q(&self) -> &DenseMatrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &DenseMatrix {
        &self.w_k
    }

    /// `M = W_Qᵀ W_K`.
    pub fn interaction(&self) -> &DenseMatrix {
        &self.interaction
    }

    /// `W_V = -M`.
    pub fn w_v(&self) -> DenseMatrix {
        self.interaction.scale(-1.0)
    }

    pub fn d(&self) -> usize {
        self.interaction.rows()
    }

    pub fn to_attention_params(&self) -> AttentionParams {
        AttentionParams::new(self.w_q.clone(), self.w_k.clone(), self.w_v()).expect("shapes checked at construction")
    }

    fn check(&self, x: &ParticleCloud) -> Result<()> {
        if x.d() != self.d() {
            return Err(Error::dims("flow field", format!("d = {}", self.d()), format!("d = {}", x.d())));
        }
        Ok(())
    }

    /// `C = X M Xᵀ`.
    pub fn cost(&self, x: &ParticleCloud) -> Result<CostMatrix> {
        self.check(x)?;
        let xm = x.points().matmul(&self.interaction)?;
        let c = xm.matmul_transpose(x.points())?;
        // Symmetric up to rounding; make it exact so K^∞ is too.
        let n = c.rows();
        CostMatrix::new(DenseMatrix::from_fn(n, n, |i, j| 0.5 * (c[(i, j)] + c[(j, i)])))
    }

    /// Rows `W_V x_j`.
    fn values(&self, x: &ParticleCloud) -> Result<DenseMatrix> {
        Ok(x.points().matmul(&self.interaction)?.scale(-1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    K0,
    K1,
    Kinf,
}

impl FieldKind {
    /// Whether the kind is a gradient flow with a tracked energy.
    pub fn has_energy(self) -> bool {
        !matches!(self, FieldKind::K1)
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldKind::K0 => "k0",
            FieldKind::K1 => "k1",
            FieldKind::Kinf => "kinf",
        })
    }
}

impl FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k0" => Ok(FieldKind::K0),
            "k1" => Ok(FieldKind::K1),
            "kinf" => Ok(FieldKind::Kinf),
            other => Err(Error::Parse(format!("unknown field kind `{other}` (expected k0, k1 or kinf)"))),
        }
    }
}

pub fn field_k0(x: &ParticleCloud, p: &SymmetricAttentionParams) -> Result<DenseMatrix> {
    let n = x.n() as f64;
    let k0 = p.cost(x)?.matrix().map(|c| c.exp() / n);
    if !k0.is_finite() {
        return Err(Error::NonFinite("field_k0"));
    }
    k0.matmul(&p.values(x)?)
}

pub fn field_k1(x: &ParticleCloud, p: &SymmetricAttentionParams) -> Result<DenseMatrix> {
    sinkhorn::softmax(&p.cost(x)?).matmul(&p.values(x)?)
}

fn solve(x: &ParticleCloud, p: &SymmetricAttentionParams, tol: f64) -> Result<SinkhornResult> {
    sinkhorn::sinkhorn(&p.cost(x)?, StopRule::tolerance(tol))
}

pub fn field_kinf(x: &ParticleCloud, p: &SymmetricAttentionParams, tol: f64) -> Result<DenseMatrix> {
    solve(x, p, tol)?.kernel.matmul(&p.values(x)?)
}

pub fn field(kind: FieldKind, x: &ParticleCloud, p: &SymmetricAttentionParams, tol: f64) -> Result<DenseMatrix> {
    match kind {
        FieldKind::K0 => field_k0(x, p),
        FieldKind::K1 => field_k1(x, p),
        FieldKind::Kinf => field_kinf(x, p, tol),
    }
}

/// `F⁰ = (1/2n²) Σ_{i,j} exp(C[i,j])`.
pub fn energy_f0(x: &ParticleCloud, p: &SymmetricAttentionParams) -> Result<f64> {
    let n = x.n() as f64;
    let total: f64 = p.cost(x)?.matrix().as_slice().iter().map(|c| c.exp()).sum();
    let e = total / (2.0 * n * n);
    if !e.is_finite() {
        return Err(Error::NonFinite("energy_f0"));
    }
    Ok(e)
}

/// `-(1/2n²) Σ k log(k / k⁰)` with `k = n K`, i.e.
/// `-(1/2n) Σ K[i,j] (log n + f_i + g_j)` from the scaling potentials.
pub fn entropic_energy(result: &SinkhornResult) -> f64 {
    let n = result.n() as f64;
    let log_n = n.ln();
    let mut total = 0.0;
    for (i, fi) in result.f.iter().enumerate() {
        for (kij, gj) in result.kernel.row(i).iter().zip(&result.g) {
            total += kij * (log_n + fi + gj);
        }
    }
    -total / (2.0 * n)
}

/// Dual value `-(1/n) Σ φ_i` with the symmetric potential `φ`.
pub fn entropic_energy_dual(result: &SinkhornResult) -> f64 {
    let phi = result.symmetric_potential();
    -phi.iter().sum::<f64>() / phi.len() as f64
}

pub fn energy_finf(x: &ParticleCloud, p: &SymmetricAttentionParams, tol: f64) -> Result<f64> {
    Ok(entropic_energy(&solve(x, p, tol)?))
}

pub fn energy_finf_dual(x: &ParticleCloud, p: &SymmetricAttentionParams, tol: f64) -> Result<f64> {
    Ok(entropic_energy_dual(&solve(x, p, tol)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub step: f64,
    pub steps: usize,
    pub kind: FieldKind,
    pub sinkhorn_tolerance: f64,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidParameter(format!("step must be positive, got {}", self.step)));
        }
        if !(self.sinkhorn_tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sinkhorn tolerance must be positive, got {}",
                self.sinkhorn_tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `steps + 1` clouds, starting with the initial one.
    pub clouds: Vec<ParticleCloud>,
    /// Energy at every cloud; empty for `k1`.
    pub energy: Vec<f64>,
}

fn energy_of(kind: FieldKind, x: &ParticleCloud, p: &SymmetricAttentionParams, tol: f64) -> Result<Option<f64>> {
    Ok(match kind {
        FieldKind::K0 => Some(energy_f0(x, p)?),
        FieldKind::K1 => None,
        FieldKind::Kinf => Some(energy_finf(x, p, tol)?),
    })
}

/// Explicit Euler: `X ← X + h v(X)`.
pub fn euler_flow(x0: &ParticleCloud, cfg: &FlowConfig, p: &SymmetricAttentionParams) -> Result<Trajectory> {
    cfg.validate()?;
    let tol = cfg.sinkhorn_tolerance;
    let mut clouds = Vec::with_capacity(cfg.steps + 1);
    let mut energy = Vec::new();
    let mut x = x0.clone();
    for step in 0..=cfg.steps {
        let magnitude = x.max_abs();
        if magnitude > DIVERGENCE_BOUND {
            return Err(Error::Divergence { step, magnitude });
        }
        energy.extend(energy_of(cfg.kind, &x, p, tol)?);
        if step < cfg.steps {
            let v = field(cfg.kind, &x, p, tol)?;
            let next = x.displaced(&v, cfg.step)?;
            clouds.push(std::mem::replace(&mut x, next));
        }
    }
    clouds.push(x);
    Ok(Trajectory { clouds, energy })
}

/// Central-difference Jacobian of a particle field, flattened row-major:
/// entry `(i d + a, k d + b)` is `∂v_{i,a} / ∂x_{k,b}`.
pub fn stacked_jacobian<F>(mut field: F, x: &ParticleCloud, step: f64) -> Result<DenseMatrix>
where
    F: FnMut(&ParticleCloud) -> Result<DenseMatrix>,
{
    let (n, d) = (x.n(), x.d());
    let nd = n * d;
    let mut jac = DenseMatrix::zeros(nd, nd);
    let mut probe = x.points().clone();
    for col in 0..nd {
        let orig = probe.as_slice()[col];
        probe.as_mut_slice()[col] = orig + step;
        let plus = field(&ParticleCloud::new(probe.clone())?)?;
        probe.as_mut_slice()[col] = orig - step;
        let minus = field(&ParticleCloud::new(probe.clone())?)?;
        probe.as_mut_slice()[col] = orig;
        if plus.shape() != (n, d) {
            return Err(Error::dims("stacked_jacobian", format!("{n}x{d}"), format!("{:?}", plus.shape())));
        }
        for row in 0..nd {
            jac[(row, col)] = (plus.as_slice()[row] - minus.as_slice()[row]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// `‖J - Jᵀ‖_F / ‖J‖_F`.
pub fn symmetry_defect(j: &DenseMatrix) -> Result<f64> {
    if !j.is_square() {
        return Err(Error::NotSquare { rows: j.rows(), cols: j.cols() });
    }
    let skew = j.sub(&j.transpose())?.frobenius_norm();
    Ok(skew / j.frobenius_norm().max(1e-300))
}

/// `max |a - b| / max |b|`, the error measure for field-versus-oracle checks.
pub fn relative_max_error(actual: &[f64], reference: &[f64]) -> f64 {
    let diff = actual.iter().zip(reference).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = reference.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    diff / scale.max(1e-300)
}

/// `-∇_X (n E(X))` by central differences.
pub fn energy_gradient_field<E>(mut energy: E, x: &ParticleCloud, step: f64) -> Result<DenseMatrix>
where
    E: FnMut(&ParticleCloud) -> Result<f64>,
{
    let n = x.n() as f64;
    let (rows, cols) = x.points().shape();
    let grad = finite_diff_gradient(
        |z: &[f64]| energy(&ParticleCloud::new(DenseMatrix::from_vec(rows, cols, z.to_vec())?)?),
        x.points().as_slice(),
        step,
    )?;
    DenseMatrix::from_vec(rows, cols, grad.into_iter().map(|g| -n * g).collect())
}

/// `-∇_x log((1/n) Σ_j exp(xᵀ M x_j))` at every `x = x_i`, with the cloud
/// inside the sum held fixed.
pub fn log_partition_field(x: &ParticleCloud, p: &SymmetricAttentionParams, step: f64) -> Result<DenseMatrix> {
    let n = x.n();
    let keys = x.points().matmul(p.interaction())?;
    let mut out = DenseMatrix::zeros(n, x.d());
    for i in 0..n {
        let grad = finite_diff_gradient(
            |q: &[f64]| {
                let logits: Vec<f64> = (0..n).map(|j| crate::numerics::dot(q, keys.row(j))).collect();
                Ok::<_, Error>(crate::numerics::logsumexp(&logits) - (n as f64).ln())
            },
            x.point(i),
            step,
        )?;
        for (o, g) in out.row_mut(i).iter_mut().zip(grad) {
            *o = -g;
        }
    }
    Ok(out)
}
