//! Toy set classification with one attention layer, trained by plain SGD.
//!
//! Model: `X ↦ X + K X W_Vᵀ` (SoftMax or Sinkhorn `K`), elementwise square,
//! mean over the set, linear head, cross-entropy. The square matters: with a
//! doubly stochastic `K`, mean pooling of the residual output alone is
//! `(I + W_V) x̄` and the attention pattern would be invisible to the head.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{self, ColumnSumStats};
use crate::autodiff::{self, Bindings, GradCheckReport, Graph, NodeId, Nonlinearity};
use crate::{AttentionParams, DenseMatrix, Error, NormalizationSpec, ParticleCloud, Result, SeededRng};

pub const CLASSES: usize = 2;
/// Point dimension of the synthetic datasets.
pub const DIM: usize = 2;
pub const RING_RADIUS: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Sets drawn from `N(-3·1, I)` or `N(3·1, I)`.
    TwoGaussians,
    /// Evenly spaced points on a circle versus two tight antipodal arcs at a
    /// random angle. Every individual point is uniform on the circle and every
    /// set mean is near zero in both classes.
    RingVsBlob,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::TwoGaussians => "two_gaussians",
            DatasetKind::RingVsBlob => "ring_vs_blob",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_gaussians" => Ok(DatasetKind::TwoGaussians),
            "ring_vs_blob" => Ok(DatasetKind::RingVsBlob),
            other => Err(Error::Parse(format!("unknown dataset `{other}` (expected two_gaussians or ring_vs_blob)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub points: ParticleCloud,
    pub label: usize,
}

fn two_gaussians_set(rng: &mut SeededRng, label: usize, size: usize) -> Result<ParticleCloud> {
    let mean = if label == 0 { -3.0 } else { 3.0 };
    crate::numerics::gaussian_sample(rng, size, DIM, &[mean; DIM], 1.0)
}

fn ring_vs_blob_set(rng: &mut SeededRng, label: usize, size: usize) -> Result<ParticleCloud> {
    let tau = std::f64::consts::TAU;
    let phase = rng.uniform() * tau;
    let pts: Vec<[f64; DIM]> = (0..size)
        .map(|k| {
            let angle = if label == 0 {
                phase + tau * k as f64 / size as f64 + 0.05 * rng.standard_normal()
            } else {
                phase + std::f64::consts::PI * (k % 2) as f64 + 0.15 * rng.standard_normal()
            };
            let r = RING_RADIUS + 0.05 * rng.standard_normal();
            [r * angle.cos(), r * angle.sin()]
        })
        .collect();
    ParticleCloud::from_rows(&pts)
}

/// `n_per_class` sets of each label, interleaved by class.
pub fn synth_dataset(kind: DatasetKind, n_per_class: usize, points_per_set: usize, seed: u64) -> Result<Vec<Example>> {
    if n_per_class == 0 || points_per_set == 0 {
        return Err(Error::InvalidParameter(
            "need at least one set per class and one point per set".into(),
        ));
    }
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for label in 0..CLASSES {
            let points = match kind {
                DatasetKind::TwoGaussians => two_gaussians_set(&mut rng, label, points_per_set)?,
                DatasetKind::RingVsBlob => ring_vs_blob_set(&mut rng, label, points_per_set)?,
            };
            out.push(Example { points, label });
        }
    }
    Ok(out)
}

fn accuracy(predictions: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for p in predictions {
        hit += p as usize;
        total += 1;
    }
    hit as f64 / total.max(1) as f64
}

/// Test accuracy of logistic regression on set means (full-batch gradient
/// descent), the baseline that ignores interactions between points.
pub fn cloud_mean_baseline(train: &[Example], test: &[Example]) -> Result<f64> {
    let d = train.first().ok_or_else(|| Error::InvalidParameter("empty training set".into()))?.points.d();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let feats: Vec<(Vec<f64>, f64)> = train.iter().map(|e| (e.points.mean(), e.label as f64)).collect();
    let lr = 0.1;
    for _ in 0..2000 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &feats {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let r = 1.0 / (1.0 + (-z).exp()) - y;
            gb += r;
            for (g, xa) in gw.iter_mut().zip(x) {
                *g += r * xa;
            }
        }
        let inv = 1.0 / feats.len() as f64;
        b -= lr * gb * inv;
        for (wa, g) in w.iter_mut().zip(gw) {
            *wa -= lr * g * inv;
        }
    }
    Ok(accuracy(test.iter().map(|e| {
        let z: f64 = b + e.points.mean().iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
        (z > 0.0) == (e.label == 1)
    })))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub n_per_class: usize,
    pub test_per_class: usize,
    pub points_per_set: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub normalization: NormalizationSpec,
    /// Test sets whose attention column sums are tracked every epoch.
    pub probe_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetKind::RingVsBlob,
            n_per_class: 100,
            test_per_class: 100,
            points_per_set: 16,
            epochs: 30,
            learning_rate: 0.05,
            normalization: NormalizationSpec::Softmax,
            probe_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainingRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub column_sums: ColumnSumStats,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    /// Epoch 0 is the initialization, before any update.
    pub records: Vec<TrainingRecord>,
    pub params: Bindings,
    /// Wall-clock time of each training epoch.
    pub epoch_times: Vec<Duration>,
}

struct Model {
    graph: Graph,
    logits: NodeId,
}

const PARAMS: [&str; 5] = ["W_Q", "W_K", "W_V", "W_head", "b_head"];

impl Model {
    fn build(points: usize, norm: NormalizationSpec) -> Result<Self> {
        let mut g = Graph::new();
        let x = g.input("X", points, DIM)?;
        let w_q = g.param("W_Q", DIM, DIM)?;
        let w_k = g.param("W_K", DIM, DIM)?;
        let w_v = g.param("W_V", DIM, DIM)?;
        let w_h = g.param("W_head", DIM, CLASSES)?;
        let b_h = g.param("b_head", 1, CLASSES)?;
        let target = g.input("target", 1, CLASSES)?;

        let q = g.matmul_t(x, w_q)?;
        let k = g.matmul_t(x, w_k)?;
        let cost = g.matmul_t(q, k)?;
        let log_kernel = g.sinkhorn_log(cost, norm.iterations())?;
        let kernel = g.exp(log_kernel);
        let values = g.matmul_t(x, w_v)?;
        let mixed = g.matmul(kernel, values)?;
        let out = g.add(x, mixed)?;
        let feats = g.map(out, Nonlinearity::Square);
        let pooled = g.mean_rows(feats);
        let z = g.matmul(pooled, w_h)?;
        let logits = g.add_row(z, b_h)?;
        g.softmax_cross_entropy(logits, target)?;
        Ok(Model { graph: g, logits })
    }

    fn bind(params: &mut Bindings, e: &Example) {
        params.insert("X".into(), e.points.points().clone());
        let mut t = DenseMatrix::zeros(1, CLASSES);
        t[(0, e.label)] = 1.0;
        params.insert("target".into(), t);
    }

    /// Loss and whether the prediction was right.
    fn evaluate(&mut self, params: &mut Bindings, e: &Example) -> Result<(f64, bool)> {
        Self::bind(params, e);
        let loss = self.graph.forward(params)?[(0, 0)];
        let z = self.graph.value(self.logits).expect("forward ran");
        let predicted = if z[(0, 1)] > z[(0, 0)] { 1 } else { 0 };
        Ok((loss, predicted == e.label))
    }
}

fn init_params(rng: &mut SeededRng) -> Bindings {
    let mut p = Bindings::new();
    p.insert("W_Q".into(), rng.normal_matrix(DIM, DIM, 0.5));
    p.insert("W_K".into(), rng.normal_matrix(DIM, DIM, 0.5));
    p.insert("W_V".into(), rng.normal_matrix(DIM, DIM, 0.5));
    p.insert("W_head".into(), rng.normal_matrix(DIM, CLASSES, 0.5));
    p.insert("b_head".into(), DenseMatrix::zeros(1, CLASSES));
    p
}

pub fn attention_params(params: &Bindings) -> Result<AttentionParams> {
    let get = |k: &str| params.get(k).cloned().ok_or_else(|| Error::Unbound(k.into()));
    AttentionParams::new(get("W_Q")?, get("W_K")?, get("W_V")?)
}

fn probe_stats(probe: &[Example], params: &Bindings, norm: NormalizationSpec) -> Result<ColumnSumStats> {
    let ap = attention_params(params)?;
    let stats = probe
        .iter()
        .map(|e| {
            let cost = attention::dot_cost(&ap, &e.points)?;
            Ok(attention::column_sum_stats(&attention::attention_kernel(&cost, norm)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ColumnSumStats::merged(&stats))
}

fn diverged(epoch: usize, loss: f64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::TrainingDiverged { epoch, loss },
        other => other,
    }
}

/// Trains on a fresh dataset. Deterministic given `cfg.seed`.
pub fn train_toy(cfg: &TrainConfig) -> Result<TrainingOutcome> {
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate must be non-negative, got {}", cfg.learning_rate)));
    }
    if cfg.test_per_class == 0 {
        return Err(Error::InvalidParameter("need at least one test set per class".into()));
    }
    let root = SeededRng::new(cfg.seed);
    let train = synth_dataset(cfg.dataset, cfg.n_per_class, cfg.points_per_set, root.split(0).seed())?;
    let test = synth_dataset(cfg.dataset, cfg.test_per_class, cfg.points_per_set, root.split(1).seed())?;
    let probe = &test[..cfg.probe_size.min(test.len())];
    let mut params = init_params(&mut root.split(2));
    let mut order_rng = root.split(3);
    let mut model = Model::build(cfg.points_per_set, cfg.normalization)?;

    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let mut epoch_times = Vec::with_capacity(cfg.epochs);

    let record = |epoch: usize, params: &mut Bindings, model: &mut Model, train_loss: Option<(f64, f64)>| -> Result<TrainingRecord> {
        let (train_loss, train_accuracy) = match train_loss {
            Some(v) => v,
            None => {
                let mut total = 0.0;
                let mut hits = Vec::with_capacity(train.len());
                for e in &train {
                    let (l, ok) = model.evaluate(params, e).map_err(diverged(epoch, f64::NAN))?;
                    total += l;
                    hits.push(ok);
                }
                (total / train.len() as f64, accuracy(hits.into_iter()))
            }
        };
        let mut hits = Vec::with_capacity(test.len());
        for e in &test {
            hits.push(model.evaluate(params, e).map_err(diverged(epoch, train_loss))?.1);
        }
        Ok(TrainingRecord {
            epoch,
            train_loss,
            train_accuracy,
            test_accuracy: accuracy(hits.into_iter()),
            column_sums: probe_stats(probe, params, cfg.normalization)?,
        })
    };

    records.push(record(0, &mut params, &mut model, None)?);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let order = order_rng.permutation(train.len());
        let mut total = 0.0;
        let mut hits = Vec::with_capacity(train.len());
        for &idx in &order {
            let e = &train[idx];
            Model::bind(&mut params, e);
            let (loss, grads) = model.graph.value_and_grad(&params).map_err(diverged(epoch, f64::NAN))?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            let z = model.graph.value(model.logits).expect("forward ran");
            hits.push((z[(0, 1)] > z[(0, 0)]) == (e.label == 1));
            total += loss;
            for name in PARAMS {
                let g = &grads[name];
                params.get_mut(name).expect("initialized").add_assign_scaled(g, -cfg.learning_rate)?;
            }
        }
        epoch_times.push(start.elapsed());
        let mean_loss = total / train.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: mean_loss });
        }
        let acc = accuracy(hits.into_iter());
        records.push(record(epoch, &mut params, &mut model, Some((mean_loss, acc)))?);
    }
    params.remove("X");
    params.remove("target");
    Ok(TrainingOutcome {
        records,
        params,
        epoch_times,
    })
}

/// Finite-difference check of the classifier's gradients at a random
/// initialization, on one ring-versus-blob set.
pub fn classifier_grad_check(points_per_set: usize, norm: NormalizationSpec, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let root = SeededRng::new(seed);
    let data = synth_dataset(DatasetKind::RingVsBlob, 1, points_per_set, root.split(0).seed())?;
    let mut model = Model::build(points_per_set, norm)?;
    let mut params = init_params(&mut root.split(2));
    Model::bind(&mut params, &data[1]);
    autodiff::grad_check(&mut model.graph, &params, tolerance, &mut root.split(4))
}
