use crate::{DenseMatrix, Error, Result};

/// `n` points in `ℝ^d`, stored one point per row. Represents the empirical
/// measure `(1/n) Σ δ_{x_i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    points: DenseMatrix,
}

impl ParticleCloud {
    pub fn new(points: DenseMatrix) -> Result<Self> {
        if !points.is_finite() {
            return Err(Error::NonFinite("ParticleCloud::new"));
        }
        Ok(ParticleCloud { points })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(DenseMatrix::from_rows(rows)?)
    }

    pub fn n(&self) -> usize {
        self.points.rows()
    }

    pub fn d(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &DenseMatrix {
        &self.points
    }

    pub fn into_points(self) -> DenseMatrix {
        self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.points.col_sums().into_iter().map(|s| s / n).collect()
    }

    /// Per-coordinate population variance.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let n = self.n() as f64;
        let mut var = vec![0.0; self.d()];
        for i in 0..self.n() {
            for ((v, &x), &m) in var.iter_mut().zip(self.point(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        var
    }

    /// Largest coordinate magnitude.
    pub fn max_abs(&self) -> f64 {
        self.points.max_abs()
    }

    /// Cloud whose `i`-th point is `self.point(perm[i])`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(Error::dims("ParticleCloud::permuted", self.n(), perm.len()));
        }
        Ok(ParticleCloud {
            points: DenseMatrix::from_fn(self.n(), self.d(), |i, j| self.points[(perm[i], j)]),
        })
    }

    /// `x_i + scale * v_i` for every point.
    pub fn displaced(&self, velocities: &DenseMatrix, scale: f64) -> Result<Self> {
        let mut points = self.points.clone();
        points.add_assign_scaled(velocities, scale)?;
        Self::new(points)
    }
}
