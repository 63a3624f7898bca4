//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is built once with shapes fixed at construction, then
//! evaluated with [`Graph::forward`] against a [`Bindings`] map that supplies
//! every input and parameter by name. [`Graph::backward`] propagates a
//! cotangent of the output back to the parameters.
//!
//! Log-sum-exp is a primitive, so unrolled log-domain Sinkhorn iterations
//! ([`Graph::sinkhorn_log`]) differentiate without exp/log round trips.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::numerics::{finite_diff_gradient, logsumexp, DenseMatrix};
use crate::{Error, Result, SeededRng};

/// Named matrices: graph inputs, parameter values or gradients.
pub type Bindings = BTreeMap<String, DenseMatrix>;

/// Gradient of a scalar output with respect to every parameter.
pub type GradientSet = BTreeMap<String, DenseMatrix>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Square,
}

impl Nonlinearity {
    fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Square => v * v,
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => 1.0 - y * y,
            Nonlinearity::Square => 2.0 * x,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// `a + 1 bᵀ` with `b` a `1×c` row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    /// `n×1` column of row-wise log-sum-exp.
    LseRows(NodeId),
    /// `1×c` row of column-wise log-sum-exp.
    LseCols(NodeId),
    /// `a - v 1ᵀ` with `v` an `n×1` column.
    SubColVec(NodeId, NodeId),
    /// `a - 1 v` with `v` a `1×c` row.
    SubRowVec(NodeId, NodeId),
    Map(NodeId, Nonlinearity),
    /// `1×c` mean over rows.
    MeanRows(NodeId),
    SumAll(NodeId),
    /// `-Σ_k t_k log softmax(z)_k` for `1×k` logits `z` and targets `t`.
    SoftmaxCrossEntropy(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: (usize, usize),
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    cache: Option<Vec<DenseMatrix>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    /// The output is the most recently added node.
    pub fn output(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    /// Parameter names and shapes, in insertion order.
    pub fn parameters(&self) -> Vec<(&str, (usize, usize))> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some((name.as_str(), n.shape)),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> NodeId {
        self.cache = None;
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf_name_taken(&self, name: &str) -> bool {
        self.nodes.iter().any(|n| matches!(&n.op, Op::Input(s) | Op::Param(s) if s == name))
    }

    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> Result<NodeId> {
        if self.leaf_name_taken(name) {
            return Err(Error::Shape(format!("duplicate leaf name `{name}`")));
        }
        Ok(self.push(Op::Input(name.to_owned()), (rows, cols)))
    }

    pub fn param(&mut self, name: &str, rows: usize, cols: usize) -> Result<NodeId> {
        if self.leaf_name_taken(name) {
            return Err(Error::Shape(format!("duplicate leaf name `{name}`")));
        }
        Ok(self.push(Op::Param(name.to_owned()), (rows, cols)))
    }

    fn mismatch(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
        Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Self::mismatch("matmul", sa, sb));
        }
        Ok(self.push(Op::MatMul(a, b), (sa.0, sb.1)))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(Self::mismatch("matmul_t", sa, sb));
        }
        Ok(self.push(Op::MatMulT(a, b), (sa.0, sb.0)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Transpose(a), (c, r))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Self::mismatch("add", sa, sb));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(row));
        if sb != (1, sa.1) {
            return Err(Self::mismatch("add_row", sa, sb));
        }
        Ok(self.push(Op::AddRow(a, row), sa))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::Scale(a, s), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::Exp(a), shape)
    }

    pub fn lse_rows(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.shape(a);
        self.push(Op::LseRows(a), (r, 1))
    }

    pub fn lse_cols(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.shape(a);
        self.push(Op::LseCols(a), (1, c))
    }

    pub fn sub_col_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (sa, sv) = (self.shape(a), self.shape(v));
        if sv != (sa.0, 1) {
            return Err(Self::mismatch("sub_col_vec", sa, sv));
        }
        Ok(self.push(Op::SubColVec(a, v), sa))
    }

    pub fn sub_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (sa, sv) = (self.shape(a), self.shape(v));
        if sv != (1, sa.1) {
            return Err(Self::mismatch("sub_row_vec", sa, sv));
        }
        Ok(self.push(Op::SubRowVec(a, v), sa))
    }

    pub fn map(&mut self, a: NodeId, f: Nonlinearity) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::Map(a, f), shape)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.shape(a);
        self.push(Op::MeanRows(a), (1, c))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), (1, 1))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let (sl, st) = (self.shape(logits), self.shape(target));
        if sl.0 != 1 || sl != st {
            return Err(Self::mismatch("softmax_cross_entropy", sl, st));
        }
        Ok(self.push(Op::SoftmaxCrossEntropy(logits, target), (1, 1)))
    }

    /// Log of the kernel after `iterations` alternating normalizations of
    /// `exp(cost)`, rows first.
    pub fn sinkhorn_log(&mut self, cost: NodeId, iterations: usize) -> Result<NodeId> {
        let mut log_k = cost;
        for l in 0..iterations {
            log_k = if l % 2 == 0 {
                let lse = self.lse_rows(log_k);
                self.sub_col_vec(log_k, lse)?
            } else {
                let lse = self.lse_cols(log_k);
                self.sub_row_vec(log_k, lse)?
            };
        }
        Ok(log_k)
    }

    /// Evaluates every node without touching the cache.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<DenseMatrix> {
        let mut values = self.compute(bindings)?;
        values.pop().ok_or_else(|| Error::Shape("empty graph".into()))
    }

    /// Evaluates the graph and retains intermediates for [`Graph::backward`].
    pub fn forward(&mut self, bindings: &Bindings) -> Result<&DenseMatrix> {
        let values = self.compute(bindings)?;
        if values.is_empty() {
            return Err(Error::Shape("empty graph".into()));
        }
        Ok(self.cache.insert(values).last().expect("non-empty"))
    }

    /// Value of a node from the last [`Graph::forward`].
    pub fn value(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.cache.as_ref().and_then(|c| c.get(id.0))
    }

    fn compute(&self, bindings: &Bindings) -> Result<Vec<DenseMatrix>> {
        let mut v: Vec<DenseMatrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let out = match &node.op {
                Op::Input(name) | Op::Param(name) => {
                    let m = bindings.get(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                    if m.shape() != node.shape {
                        return Err(Error::Shape(format!(
                            "`{name}` bound to {:?}, graph expects {:?}",
                            m.shape(),
                            node.shape
                        )));
                    }
                    m.clone()
                }
                Op::MatMul(a, b) => v[a.0].matmul(&v[b.0])?,
                Op::MatMulT(a, b) => v[a.0].matmul_transpose(&v[b.0])?,
                Op::Transpose(a) => v[a.0].transpose(),
                Op::Add(a, b) => v[a.0].add(&v[b.0])?,
                Op::AddRow(a, b) => {
                    let (x, row) = (&v[a.0], &v[b.0]);
                    DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] + row[(0, j)])
                }
                Op::Scale(a, s) => v[a.0].scale(*s),
                Op::Exp(a) => v[a.0].map(f64::exp),
                Op::LseRows(a) => {
                    let x = &v[a.0];
                    DenseMatrix::column_vector(&(0..x.rows()).map(|i| logsumexp(x.row(i))).collect::<Vec<_>>())
                }
                Op::LseCols(a) => {
                    let x = &v[a.0];
                    DenseMatrix::row_vector(&(0..x.cols()).map(|j| logsumexp(&x.column(j))).collect::<Vec<_>>())
                }
                Op::SubColVec(a, b) => {
                    let (x, c) = (&v[a.0], &v[b.0]);
                    DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] - c[(i, 0)])
                }
                Op::SubRowVec(a, b) => {
                    let (x, r) = (&v[a.0], &v[b.0]);
                    DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] - r[(0, j)])
                }
                Op::Map(a, f) => v[a.0].map(|x| f.apply(x)),
                Op::MeanRows(a) => {
                    let x = &v[a.0];
                    let n = x.rows() as f64;
                    DenseMatrix::row_vector(&x.col_sums().into_iter().map(|s| s / n).collect::<Vec<_>>())
                }
                Op::SumAll(a) => DenseMatrix::filled(1, 1, v[a.0].as_slice().iter().sum()),
                Op::SoftmaxCrossEntropy(z, t) => {
                    let (z, t) = (v[z.0].as_slice(), v[t.0].as_slice());
                    let lse = logsumexp(z);
                    let loss: f64 = z.iter().zip(t).map(|(zk, tk)| -tk * (zk - lse)).sum();
                    DenseMatrix::filled(1, 1, loss)
                }
            };
            if !out.is_finite() {
                return Err(Error::NonFinite("autodiff forward"));
            }
            v.push(out);
        }
        Ok(v)
    }

    /// Reverse-mode sweep from `cotangent` (same shape as the output).
    /// Parameters the output does not depend on get zero gradients.
    pub fn backward(&self, cotangent: &DenseMatrix) -> Result<GradientSet> {
        let values = self.cache.as_ref().ok_or(Error::NotEvaluated)?;
        let out = self.nodes.len() - 1;
        if cotangent.shape() != self.nodes[out].shape {
            return Err(Error::Shape(format!(
                "cotangent {:?} for output {:?}",
                cotangent.shape(),
                self.nodes[out].shape
            )));
        }
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        adj[out] = Some(cotangent.clone());

        fn acc(adj: &mut [Option<DenseMatrix>], id: NodeId, g: DenseMatrix) {
            match &mut adj[id.0] {
                Some(existing) => existing.add_assign_scaled(&g, 1.0).expect("adjoint shapes are fixed at construction"),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(d) = adj[idx].take() else { continue };
            let y = &values[idx];
            match &self.nodes[idx].op {
                Op::Input(_) | Op::Param(_) => {
                    adj[idx] = Some(d);
                }
                Op::MatMul(a, b) => {
                    let ga = d.matmul_transpose(&values[b.0])?;
                    let gb = values[a.0].transpose_matmul(&d)?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = d.matmul(&values[b.0])?;
                    let gb = d.transpose_matmul(&values[a.0])?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Transpose(a) => acc(&mut adj, *a, d.transpose()),
                Op::Add(a, b) => {
                    acc(&mut adj, *a, d.clone());
                    acc(&mut adj, *b, d);
                }
                Op::AddRow(a, b) => {
                    let gb = DenseMatrix::row_vector(&d.col_sums());
                    acc(&mut adj, *a, d);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut adj, *a, d.scale(*s)),
                Op::Exp(a) => acc(&mut adj, *a, d.zip_with(y, |g, e| g * e)?),
                Op::LseRows(a) => {
                    let x = &values[a.0];
                    let g = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| d[(i, 0)] * (x[(i, j)] - y[(i, 0)]).exp());
                    acc(&mut adj, *a, g);
                }
                Op::LseCols(a) => {
                    let x = &values[a.0];
                    let g = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| d[(0, j)] * (x[(i, j)] - y[(0, j)]).exp());
                    acc(&mut adj, *a, g);
                }
                Op::SubColVec(a, b) => {
                    let gv: Vec<f64> = d.row_sums().into_iter().map(|s| -s).collect();
                    acc(&mut adj, *b, DenseMatrix::column_vector(&gv));
                    acc(&mut adj, *a, d);
                }
                Op::SubRowVec(a, b) => {
                    let gv: Vec<f64> = d.col_sums().into_iter().map(|s| -s).collect();
                    acc(&mut adj, *b, DenseMatrix::row_vector(&gv));
                    acc(&mut adj, *a, d);
                }
                Op::Map(a, f) => {
                    let x = &values[a.0];
                    let g = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
                        d[(i, j)] * f.derivative(x[(i, j)], y[(i, j)])
                    });
                    acc(&mut adj, *a, g);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.nodes[a.0].shape;
                    let g = DenseMatrix::from_fn(r, c, |_, j| d[(0, j)] / r as f64);
                    acc(&mut adj, *a, g);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.nodes[a.0].shape;
                    acc(&mut adj, *a, DenseMatrix::filled(r, c, d[(0, 0)]));
                }
                Op::SoftmaxCrossEntropy(z, t) => {
                    let (zv, tv) = (values[z.0].as_slice(), values[t.0].as_slice());
                    let lse = logsumexp(zv);
                    let total: f64 = tv.iter().sum();
                    let s = d[(0, 0)];
                    let gz: Vec<f64> = zv.iter().zip(tv).map(|(zk, tk)| s * ((zk - lse).exp() * total - tk)).collect();
                    let gt: Vec<f64> = zv.iter().map(|zk| -s * (zk - lse)).collect();
                    acc(&mut adj, *z, DenseMatrix::row_vector(&gz));
                    acc(&mut adj, *t, DenseMatrix::row_vector(&gt));
                }
            }
        }

        let mut grads = GradientSet::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = adj[idx].take().unwrap_or_else(|| DenseMatrix::zeros(node.shape.0, node.shape.1));
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }

    /// Forward then backward with unit cotangent on a scalar output.
    pub fn value_and_grad(&mut self, bindings: &Bindings) -> Result<(f64, GradientSet)> {
        let value = self.forward(bindings)?;
        if value.shape() != (1, 1) {
            return Err(Error::Shape(format!("expected scalar output, got {:?}", value.shape())));
        }
        let loss = value[(0, 0)];
        let grads = self.backward(&DenseMatrix::filled(1, 1, 1.0))?;
        Ok((loss, grads))
    }
}

/// Default central-difference step for [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-6;
/// Coordinates checked per parameter (all of them when fewer).
pub const GRAD_CHECK_COORDINATES: usize = 50;
/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct ParameterCheck {
    pub coordinates: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub step: f64,
    pub passed: bool,
    pub per_parameter: BTreeMap<String, ParameterCheck>,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares [`Graph::backward`] against central finite differences on a
/// random subset of coordinates of every parameter.
pub fn grad_check(graph: &mut Graph, bindings: &Bindings, tolerance: f64, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let (_, analytic) = graph.value_and_grad(bindings)?;
    compare_gradients(graph, bindings, &analytic, tolerance, rng)
}

/// The comparison half of [`grad_check`], for externally supplied gradients.
pub fn compare_gradients(
    graph: &Graph,
    bindings: &Bindings,
    analytic: &GradientSet,
    tolerance: f64,
    rng: &mut SeededRng,
) -> Result<GradCheckReport> {
    let mut per_parameter = BTreeMap::new();
    let mut worst = 0.0f64;
    for (name, (rows, cols)) in graph.parameters() {
        let grad = analytic.get(name).ok_or_else(|| Error::Unbound(name.to_owned()))?;
        let size = rows * cols;
        let mut coords = rng.sample_indices(size, GRAD_CHECK_COORDINATES);
        coords.sort_unstable();
        let base = bindings.get(name).ok_or_else(|| Error::Unbound(name.to_owned()))?;
        let start: Vec<f64> = coords.iter().map(|&k| base.as_slice()[k]).collect();

        let mut probe = bindings.clone();
        let numeric = finite_diff_gradient(
            |z: &[f64]| {
                let m = probe.get_mut(name).expect("bound above");
                for (&k, &val) in coords.iter().zip(z) {
                    m.as_mut_slice()[k] = val;
                }
                Ok::<_, Error>(graph.evaluate(&probe)?[(0, 0)])
            },
            &start,
            GRAD_CHECK_STEP,
        )?;

        let max_rel = coords
            .iter()
            .zip(&numeric)
            .map(|(&k, &num)| relative_error(grad.as_slice()[k], num))
            .fold(0.0f64, f64::max);
        worst = worst.max(max_rel);
        per_parameter.insert(
            name.to_owned(),
            ParameterCheck {
                coordinates: coords.len(),
                max_rel_error: max_rel,
            },
        );
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        tolerance,
        step: GRAD_CHECK_STEP,
        passed: worst <= tolerance,
        per_parameter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sinkhorn::{self, marginal_violation, CostMatrix};

    fn bind(pairs: &[(&str, DenseMatrix)]) -> Bindings {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn softmax_graph_matches_sinkhorn_module() {
        let mut rng = SeededRng::new(1);
        let c = rng.normal_matrix(6, 6, 1.5);
        let mut g = Graph::new();
        let cost = g.input("C", 6, 6).unwrap();
        let lk = g.sinkhorn_log(cost, 1).unwrap();
        g.exp(lk);
        let out = g.forward(&bind(&[("C", c.clone())])).unwrap();
        let expect = sinkhorn::softmax(&CostMatrix::new(c).unwrap());
        assert!(out.max_abs_diff(&expect) <= 1e-14);
    }

    #[test]
    fn unrolled_sinkhorn_is_row_stochastic() {
        let mut rng = SeededRng::new(2);
        let c = rng.normal_matrix(8, 8, 2.0);
        let mut g = Graph::new();
        let cost = g.input("C", 8, 8).unwrap();
        let lk = g.sinkhorn_log(cost, 3).unwrap();
        g.exp(lk);
        let out = g.forward(&bind(&[("C", c)])).unwrap();
        assert!(marginal_violation(out).row <= 1e-12);
    }

    #[test]
    fn constant_graph_has_no_gradients() {
        let mut g = Graph::new();
        let x = g.input("x", 2, 2).unwrap();
        g.sum_all(x);
        let (v, grads) = g.value_and_grad(&bind(&[("x", DenseMatrix::filled(2, 2, 1.5))])).unwrap();
        assert_eq!(v, 6.0);
        assert!(grads.is_empty());
    }

    fn half_norm_graph() -> Graph {
        let mut g = Graph::new();
        let x = g.input("x", 3, 1).unwrap();
        let w = g.param("W_V", 3, 3).unwrap();
        let wx = g.matmul(w, x).unwrap();
        let sq = g.map(wx, Nonlinearity::Square);
        let s = g.sum_all(sq);
        g.scale(s, 0.5);
        g
    }

    #[test]
    fn linear_layer_gradient_is_exact() {
        let mut rng = SeededRng::new(3);
        let w = rng.normal_matrix(3, 3, 1.0);
        let x = rng.normal_matrix(3, 1, 1.0);
        let mut g = half_norm_graph();
        let (_, grads) = g.value_and_grad(&bind(&[("x", x.clone()), ("W_V", w.clone())])).unwrap();
        let expect = w.matmul(&x).unwrap().matmul_transpose(&x).unwrap();
        assert!(grads["W_V"].max_abs_diff(&expect) <= 1e-12);

        let zero = g.backward(&DenseMatrix::zeros(1, 1)).unwrap();
        assert!(zero["W_V"].as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_before_forward_fails() {
        let g = half_norm_graph();
        assert!(matches!(g.backward(&DenseMatrix::filled(1, 1, 1.0)), Err(Error::NotEvaluated)));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.input("a", 2, 3).unwrap();
        let b = g.input("b", 2, 3).unwrap();
        assert!(g.matmul(a, b).is_err());
        assert!(g.matmul_t(a, b).is_ok());
        assert!(g.input("a", 1, 1).is_err());
        let mut g2 = half_norm_graph();
        let bad = bind(&[("x", DenseMatrix::zeros(2, 1)), ("W_V", DenseMatrix::zeros(3, 3))]);
        assert!(matches!(g2.forward(&bad), Err(Error::Shape(_))));
        let missing = bind(&[("x", DenseMatrix::zeros(3, 1))]);
        assert!(matches!(g2.forward(&missing), Err(Error::Unbound(_))));
    }

    /// Exercises every primitive in one scalar graph.
    fn kitchen_sink() -> (Graph, Bindings) {
        let mut rng = SeededRng::new(4);
        let mut g = Graph::new();
        let x = g.input("x", 4, 3).unwrap();
        let a = g.param("A", 3, 3).unwrap();
        let b = g.param("b", 1, 3).unwrap();
        let t = g.input("t", 1, 3).unwrap();
        let xa = g.matmul(x, a).unwrap();
        let xx = g.matmul_t(xa, x).unwrap();
        let xxt = g.transpose(xx);
        let sym = g.add(xx, xxt).unwrap();
        let c = g.scale(sym, 0.3);
        let lk = g.sinkhorn_log(c, 4).unwrap();
        let k = g.exp(lk);
        let kx = g.matmul(k, x).unwrap();
        let th = g.map(kx, Nonlinearity::Tanh);
        let biased = g.add_row(th, b).unwrap();
        let pooled = g.mean_rows(biased);
        let z = g.matmul(pooled, a).unwrap();
        g.softmax_cross_entropy(z, t).unwrap();
        let bindings = bind(&[
            ("x", rng.normal_matrix(4, 3, 1.0)),
            ("A", rng.normal_matrix(3, 3, 0.8)),
            ("b", rng.normal_matrix(1, 3, 0.5)),
            ("t", DenseMatrix::row_vector(&[0.0, 1.0, 0.0])),
        ]);
        (g, bindings)
    }

    #[test]
    fn all_primitives_pass_grad_check() {
        let (mut g, b) = kitchen_sink();
        let report = grad_check(&mut g, &b, 1e-5, &mut SeededRng::new(0)).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.per_parameter["A"].coordinates, 9);
    }

    #[test]
    fn corrupted_adjoint_is_flagged() {
        let (mut g, b) = kitchen_sink();
        let (_, mut grads) = g.value_and_grad(&b).unwrap();
        let flipped = grads["A"].scale(-1.0);
        grads.insert("A".into(), flipped);
        let report = compare_gradients(&g, &b, &grads, 1e-5, &mut SeededRng::new(0)).unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 0.1);
    }
}
