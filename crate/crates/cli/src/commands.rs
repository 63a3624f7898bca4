use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sinkformers::attention::{column_sum_stats, ColumnSumStats, HISTOGRAM_BINS};
use sinkformers::flows::{self, FieldKind, FlowConfig, SymmetricAttentionParams};
use sinkformers::meanfield::{self, DensityModel, EpsilonSweep, HeatConfig, LimitKind};
use sinkformers::numerics::gaussian_sample;
use sinkformers::numerics::io::{read_matrix, read_matrix_file, write_matrix};
use sinkformers::sinkhorn::{self, marginal_violation, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE};
use sinkformers::training::{self, DatasetKind, TrainConfig};
use sinkformers::{CostMatrix, NormalizationSpec, SeededRng, StopRule};

use crate::config;
use crate::output::{write_atomic, write_json, OutDir, Table};

/// Everything a command needs besides its own flags.
pub struct RunContext {
    pub file: Option<Map<String, Value>>,
    pub seed: Option<u64>,
    pub out: OutDir,
}

impl RunContext {
    fn resolve<C, F>(&self, name: &str, flags: &F) -> Result<C>
    where
        C: Default + Serialize + for<'de> Deserialize<'de>,
        F: Serialize,
    {
        let cfg: C = config::resolve(self.file.as_ref(), flags, self.seed)?;
        write_json(&self.out.path(format!("{name}.config.json").as_ref()), &cfg)?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Softmax,
    Sinkhorn,
}

fn normalization(kind: Normalization, iterations: usize) -> Result<NormalizationSpec> {
    Ok(match kind {
        Normalization::Softmax => NormalizationSpec::Softmax,
        Normalization::Sinkhorn => NormalizationSpec::sinkhorn(iterations)?,
    })
}

// ---------------------------------------------------------------- sinkhorn

#[derive(Args, Serialize)]
pub struct SinkhornArgs {
    /// Cost matrix as headerless CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    cost: Option<PathBuf>,
    /// Run exactly this many normalizations (1 is SoftMax) instead of stopping on tolerance.
    #[arg(long, conflicts_with = "tol")]
    #[serde(skip_serializing_if = "Option::is_none")]
    iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iterations: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    potentials: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SinkhornConfig {
    seed: u64,
    cost: PathBuf,
    iters: Option<usize>,
    tol: Option<f64>,
    max_iterations: usize,
    out: PathBuf,
    potentials: PathBuf,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            seed: 0,
            cost: PathBuf::new(),
            iters: None,
            tol: None,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            out: "kernel.csv".into(),
            potentials: "potentials.csv".into(),
        }
    }
}

pub fn sinkhorn(ctx: &RunContext, args: &SinkhornArgs) -> Result<()> {
    let cfg: SinkhornConfig = ctx.resolve("sinkhorn", args)?;
    ensure!(!cfg.cost.as_os_str().is_empty(), "--cost is required");
    let stop = match (cfg.iters, cfg.tol) {
        (Some(_), Some(_)) => bail!("iters and tol are mutually exclusive"),
        (Some(k), None) => StopRule::Iterations(k),
        (None, tol) => StopRule::Tolerance {
            tolerance: tol.unwrap_or(DEFAULT_TOLERANCE),
            max_iterations: cfg.max_iterations,
        },
    };
    let cost = CostMatrix::new(read_matrix_file(&cfg.cost).with_context(|| format!("reading {}", cfg.cost.display()))?)?;
    let result = sinkhorn::sinkhorn(&cost, stop)?;
    write_atomic(&ctx.out.path(&cfg.out), |w| Ok(write_matrix(w, &result.kernel)?))?;
    let mut pot = Table::new(["f", "g"]);
    for (f, g) in result.f.iter().zip(&result.g) {
        pot.push(vec![(*f).into(), (*g).into()]);
    }
    pot.write(&ctx.out.path(&cfg.potentials))?;
    let v = marginal_violation(&result.kernel);
    println!("iterations {}  row violation {:.3e}  column violation {:.3e}", result.iterations, v.row, v.col);
    Ok(())
}

// ----------------------------------------------------------------- colsums

#[derive(Args, Serialize)]
pub struct ColsumsArgs {
    /// Attention matrix as CSV; a leading header row is skipped.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ColsumsConfig {
    seed: u64,
    kernel: PathBuf,
    out: PathBuf,
}

impl Default for ColsumsConfig {
    fn default() -> Self {
        ColsumsConfig {
            seed: 0,
            kernel: PathBuf::new(),
            out: "colsums.json".into(),
        }
    }
}

#[derive(Serialize)]
struct ColsumsReport {
    rows: usize,
    cols: usize,
    max_deviation: f64,
    spread: f64,
    #[serde(flatten)]
    stats: ColumnSumStats,
}

/// Reads a matrix whose first line may be a header of non-numeric labels.
fn read_kernel(path: &PathBuf) -> Result<sinkformers::DenseMatrix> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let body = match text.lines().next() {
        Some(first) if first.split(',').any(|f| f.trim().parse::<f64>().is_err()) => {
            text.split_once('\n').map(|(_, rest)| rest).unwrap_or("")
        }
        _ => text.as_str(),
    };
    Ok(read_matrix(body.as_bytes())?)
}

pub fn colsums(ctx: &RunContext, args: &ColsumsArgs) -> Result<()> {
    let cfg: ColsumsConfig = ctx.resolve("colsums", args)?;
    ensure!(!cfg.kernel.as_os_str().is_empty(), "--kernel is required");
    let k = read_kernel(&cfg.kernel)?;
    let stats = column_sum_stats(&k);
    let report = ColsumsReport {
        rows: k.rows(),
        cols: k.cols(),
        max_deviation: stats.max_deviation(),
        spread: stats.spread(),
        stats,
    };
    write_json(&ctx.out.path(&cfg.out), &report)?;
    println!("column sums in [{:.6}, {:.6}], max |s - 1| = {:.3e}", report.stats.min, report.stats.max, report.max_deviation);
    Ok(())
}

// -------------------------------------------------------------------- flow

#[derive(Args, Serialize)]
pub struct FlowArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<FieldKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    /// Euler step size.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    h: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    /// Standard deviation of the random key matrix.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    param_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sinkhorn_tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    energy: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowCmdConfig {
    seed: u64,
    kind: FieldKind,
    n: usize,
    d: usize,
    h: f64,
    steps: usize,
    param_scale: f64,
    sinkhorn_tol: f64,
    out: PathBuf,
    energy: PathBuf,
}

impl Default for FlowCmdConfig {
    fn default() -> Self {
        FlowCmdConfig {
            seed: 0,
            kind: FieldKind::Kinf,
            n: 8,
            d: 2,
            h: 1e-3,
            steps: 200,
            param_scale: 0.3,
            sinkhorn_tol: 1e-12,
            out: "traj.csv".into(),
            energy: "energy.csv".into(),
        }
    }
}

fn random_instance(seed: u64, n: usize, d: usize, scale: f64) -> Result<(sinkformers::ParticleCloud, SymmetricAttentionParams)> {
    ensure!(n >= 1 && d >= 1, "n and d must be at least 1");
    let root = SeededRng::new(seed);
    let x = gaussian_sample(&mut root.split(0), n, d, &vec![0.0; d], 1.0)?;
    let p = SymmetricAttentionParams::random(&mut root.split(1), d, scale)?;
    Ok((x, p))
}

pub fn flow(ctx: &RunContext, args: &FlowArgs) -> Result<()> {
    let cfg: FlowCmdConfig = ctx.resolve("flow", args)?;
    let (x0, p) = random_instance(cfg.seed, cfg.n, cfg.d, cfg.param_scale)?;
    let flow_cfg = FlowConfig {
        step: cfg.h,
        steps: cfg.steps,
        kind: cfg.kind,
        sinkhorn_tolerance: cfg.sinkhorn_tol,
    };
    let traj = flows::euler_flow(&x0, &flow_cfg, &p)?;

    let mut header = vec!["step".to_string(), "time".into(), "particle".into()];
    header.extend((0..cfg.d).map(|a| format!("x{a}")));
    let mut t = Table::new(header);
    for (step, cloud) in traj.clouds.iter().enumerate() {
        for i in 0..cloud.n() {
            let mut row = vec![step.into(), (step as f64 * cfg.h).into(), i.into()];
            row.extend(cloud.point(i).iter().map(|&v| v.into()));
            t.push(row);
        }
    }
    t.write(&ctx.out.path(&cfg.out))?;

    let mut e = Table::new(["step", "time", "energy"]);
    for (step, value) in traj.energy.iter().enumerate() {
        e.push(vec![step.into(), (step as f64 * cfg.h).into(), (*value).into()]);
    }
    e.write(&ctx.out.path(&cfg.energy))?;
    match (traj.energy.first(), traj.energy.last()) {
        (Some(a), Some(b)) => println!("{} flow: energy {a:.10} -> {b:.10}", cfg.kind),
        _ => println!("{} flow: no energy (not a gradient flow)", cfg.kind),
    }
    Ok(())
}

// --------------------------------------------------------- diffusion-limit

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    /// One-dimensional standard Gaussian.
    Gaussian,
}

#[derive(Args, Serialize)]
pub struct DiffusionArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    which: Option<LimitKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    density: Option<Density>,
    /// Sample size.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    /// Strictly decreasing bandwidths, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<Vec<f64>>,
    /// Query grid as `a:b:k`.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    wq: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    wk: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiffusionConfig {
    seed: u64,
    which: LimitKind,
    density: Density,
    n: usize,
    eps: Vec<f64>,
    grid: String,
    wq: f64,
    wk: f64,
    out: PathBuf,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            seed: 0,
            which: LimitKind::Sink,
            density: Density::Gaussian,
            n: 10_000,
            eps: vec![0.5, 0.2, 0.1, 0.05],
            grid: "-1.5:1.5:21".into(),
            wq: 1.0,
            wk: 1.0,
            out: "table.csv".into(),
        }
    }
}

pub fn parse_grid(spec: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = spec.split(':').collect();
    ensure!(parts.len() == 3, "grid must look like a:b:k, got `{spec}`");
    let a = parts[0].trim().parse().with_context(|| format!("grid start `{}`", parts[0]))?;
    let b = parts[1].trim().parse().with_context(|| format!("grid end `{}`", parts[1]))?;
    let k = parts[2].trim().parse().with_context(|| format!("grid size `{}`", parts[2]))?;
    Ok((a, b, k))
}

pub fn diffusion_limit(ctx: &RunContext, args: &DiffusionArgs) -> Result<()> {
    let cfg: DiffusionConfig = ctx.resolve("diffusion-limit", args)?;
    let (a, b, k) = parse_grid(&cfg.grid)?;
    let rho = match cfg.density {
        Density::Gaussian => DensityModel::standard(1),
    };
    let p = SymmetricAttentionParams::scalar(1, cfg.wq, cfg.wk)?;
    let sweep = EpsilonSweep::new(cfg.eps.clone(), cfg.n, meanfield::linspace_grid(a, b, k)?)?;
    let rows = meanfield::epsilon_convergence_experiment(&rho, &p, &sweep, cfg.which, cfg.seed)?;
    let mut t = Table::new(["eps", "rms_error", "rms_reference", "relative_rms"]);
    for r in &rows {
        t.push(vec![r.eps.into(), r.rms_error.into(), r.rms_reference.into(), r.relative_rms.into()]);
        println!("eps {:<8} rms {:.6}  relative {:.4}", r.eps, r.rms_error, r.relative_rms);
    }
    t.write(&ctx.out.path(&cfg.out))
}

// ---------------------------------------------------------------- heat-sim

#[derive(Args, Serialize)]
pub struct HeatArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    h: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    /// Standard deviation of the initial Gaussian cloud.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma0: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sinkhorn_tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeatCmdConfig {
    seed: u64,
    n: usize,
    d: usize,
    eps: f64,
    h: f64,
    steps: usize,
    sigma0: f64,
    sinkhorn_tol: f64,
    out: PathBuf,
}

impl Default for HeatCmdConfig {
    fn default() -> Self {
        HeatCmdConfig {
            seed: 0,
            n: 2000,
            d: 1,
            eps: 0.05,
            h: 0.01,
            steps: 50,
            sigma0: 1.0,
            sinkhorn_tol: meanfield::DEFAULT_TOLERANCE,
            out: "variance.csv".into(),
        }
    }
}

pub fn heat_sim(ctx: &RunContext, args: &HeatArgs) -> Result<()> {
    let cfg: HeatCmdConfig = ctx.resolve("heat-sim", args)?;
    ensure!(cfg.d >= 1, "d must be at least 1");
    let x0 = gaussian_sample(&mut SeededRng::new(cfg.seed), cfg.n, cfg.d, &vec![0.0; cfg.d], cfg.sigma0)?;
    let sim = meanfield::heat_simulation(
        &x0,
        &HeatConfig {
            eps: cfg.eps,
            step: cfg.h,
            steps: cfg.steps,
            sinkhorn_tolerance: cfg.sinkhorn_tol,
            snapshot_every: 0,
        },
    )?;
    let mut header = vec!["step".to_string(), "time".into(), "variance".into()];
    header.extend((0..cfg.d).map(|a| format!("mean{a}")));
    header.push("sinkhorn_iterations".into());
    let mut t = Table::new(header);
    for r in &sim.records {
        let mut row = vec![r.step.into(), r.time.into(), r.variance.into()];
        row.extend(r.mean.iter().map(|&m| m.into()));
        row.push(r.sinkhorn_iterations.into());
        t.push(row);
    }
    t.write(&ctx.out.path(&cfg.out))?;
    let times: Vec<f64> = sim.records.iter().map(|r| r.time).collect();
    let vars: Vec<f64> = sim.records.iter().map(|r| r.variance).collect();
    if let Ok((slope, _)) = meanfield::linear_fit(&times, &vars) {
        println!("variance {:.6} -> {:.6}, fitted slope {slope:.4}", vars[0], vars[vars.len() - 1]);
    }
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    normalization: Option<Normalization>,
    /// Sinkhorn iterations (odd); ignored for softmax.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test_per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<usize>,
    /// Test sets whose column sums are recorded each epoch.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    probe: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    colsums: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCmdConfig {
    seed: u64,
    dataset: DatasetKind,
    normalization: Normalization,
    iters: usize,
    epochs: usize,
    lr: f64,
    n_per_class: usize,
    test_per_class: usize,
    points: usize,
    probe: usize,
    out: PathBuf,
    colsums: PathBuf,
    params: PathBuf,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainCmdConfig {
            seed: base.seed,
            dataset: base.dataset,
            normalization: Normalization::Softmax,
            iters: 3,
            epochs: base.epochs,
            lr: base.learning_rate,
            n_per_class: base.n_per_class,
            test_per_class: base.test_per_class,
            points: base.points_per_set,
            probe: base.probe_size,
            out: "train.csv".into(),
            colsums: "colsums.csv".into(),
            params: "params.json".into(),
        }
    }
}

pub fn train(ctx: &RunContext, args: &TrainArgs) -> Result<()> {
    let cfg: TrainCmdConfig = ctx.resolve("train", args)?;
    let outcome = training::train_toy(&TrainConfig {
        dataset: cfg.dataset,
        n_per_class: cfg.n_per_class,
        test_per_class: cfg.test_per_class,
        points_per_set: cfg.points,
        epochs: cfg.epochs,
        learning_rate: cfg.lr,
        normalization: normalization(cfg.normalization, cfg.iters)?,
        probe_size: cfg.probe,
        seed: cfg.seed,
    })?;

    let mut records = Table::new([
        "epoch",
        "train_loss",
        "train_accuracy",
        "test_accuracy",
        "colsum_min",
        "colsum_max",
        "colsum_mean",
        "colsum_max_deviation",
    ]);
    let mut hist = Table::new(["epoch", "bin", "lower", "upper", "count"]);
    for r in &outcome.records {
        let s = &r.column_sums;
        records.push(vec![
            r.epoch.into(),
            r.train_loss.into(),
            r.train_accuracy.into(),
            r.test_accuracy.into(),
            s.min.into(),
            s.max.into(),
            s.mean.into(),
            s.max_deviation().into(),
        ]);
        for (b, &count) in s.histogram.iter().enumerate() {
            let lower = b as f64 * s.bin_width;
            hist.push(vec![r.epoch.into(), b.into(), lower.into(), (lower + s.bin_width).into(), count.into()]);
        }
        let top = HISTOGRAM_BINS as f64 * s.bin_width;
        hist.push(vec![r.epoch.into(), HISTOGRAM_BINS.into(), top.into(), f64::INFINITY.into(), s.overflow.into()]);
    }
    records.write(&ctx.out.path(&cfg.out))?;
    hist.write(&ctx.out.path(&cfg.colsums))?;
    let params: std::collections::BTreeMap<&str, Vec<Vec<f64>>> = outcome
        .params
        .iter()
        .map(|(k, m)| (k.as_str(), (0..m.rows()).map(|i| m.row(i).to_vec()).collect()))
        .collect();
    write_json(&ctx.out.path(&cfg.params), &params)?;

    // Timings are machine dependent, so they go to stdout and never to files.
    for (e, t) in outcome.epoch_times.iter().enumerate() {
        println!("epoch {:>3}  {:>9.3} ms", e + 1, t.as_secs_f64() * 1e3);
    }
    let total: Duration = outcome.epoch_times.iter().sum();
    if let Some(last) = outcome.records.last() {
        println!(
            "mean epoch {:.3} ms  final loss {:.4}  train acc {:.3}  test acc {:.3}",
            total.as_secs_f64() * 1e3 / outcome.epoch_times.len().max(1) as f64,
            last.train_loss,
            last.train_accuracy,
            last.test_accuracy
        );
    }
    Ok(())
}

// --------------------------------------------------------------- gradcheck

#[derive(Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    normalization: Option<Normalization>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tolerance: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckConfig {
    seed: u64,
    normalization: Normalization,
    iters: usize,
    points: usize,
    tolerance: f64,
    out: PathBuf,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            normalization: Normalization::Sinkhorn,
            iters: 3,
            points: 8,
            tolerance: 1e-5,
            out: "gradcheck.json".into(),
        }
    }
}

pub fn gradcheck(ctx: &RunContext, args: &GradcheckArgs) -> Result<()> {
    let cfg: GradcheckConfig = ctx.resolve("gradcheck", args)?;
    let norm = normalization(cfg.normalization, cfg.iters)?;
    let report = training::classifier_grad_check(cfg.points, norm, cfg.seed, cfg.tolerance)?;
    write_json(&ctx.out.path(&cfg.out), &report)?;
    println!("max relative error {:.3e} (tolerance {:.0e})", report.max_rel_error, report.tolerance);
    ensure!(report.passed, "gradient check failed: {:.3e} > {:.0e}", report.max_rel_error, report.tolerance);
    Ok(())
}

// ---------------------------------------------------------------- jacobian

#[derive(Args, Serialize)]
pub struct JacobianArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<FieldKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    /// Central-difference step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    step: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    param_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sinkhorn_tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JacobianConfig {
    seed: u64,
    kind: FieldKind,
    n: usize,
    d: usize,
    step: f64,
    param_scale: f64,
    sinkhorn_tol: f64,
    out: PathBuf,
}

impl Default for JacobianConfig {
    fn default() -> Self {
        JacobianConfig {
            seed: 0,
            kind: FieldKind::K1,
            n: 5,
            d: 2,
            step: 1e-6,
            param_scale: 0.3,
            sinkhorn_tol: 1e-12,
            out: "jacobian.json".into(),
        }
    }
}

#[derive(Serialize)]
struct JacobianReport {
    kind: FieldKind,
    n: usize,
    d: usize,
    step: f64,
    symmetry_defect: f64,
    frobenius_norm: f64,
}

pub fn jacobian(ctx: &RunContext, args: &JacobianArgs) -> Result<()> {
    let cfg: JacobianConfig = ctx.resolve("jacobian", args)?;
    let (x, p) = random_instance(cfg.seed, cfg.n, cfg.d, cfg.param_scale)?;
    let j = flows::stacked_jacobian(|y| flows::field(cfg.kind, y, &p, cfg.sinkhorn_tol), &x, cfg.step)?;
    let report = JacobianReport {
        kind: cfg.kind,
        n: cfg.n,
        d: cfg.d,
        step: cfg.step,
        symmetry_defect: flows::symmetry_defect(&j)?,
        frobenius_norm: j.frobenius_norm(),
    };
    write_json(&ctx.out.path(&cfg.out), &report)?;
    println!("{} field: symmetry defect {:.3e}", cfg.kind, report.symmetry_defect);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_specs() {
        assert_eq!(parse_grid("-1.5:1.5:21").unwrap(), (-1.5, 1.5, 21));
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:x:3").is_err());
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let v = serde_json::to_value(TrainCmdConfig::default()).unwrap();
        let back: TrainCmdConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(serde_json::to_value(back).unwrap(), v);
        let v = serde_json::to_value(DiffusionConfig::default()).unwrap();
        assert_eq!(v["which"], "sink");
        assert_eq!(v["grid"], "-1.5:1.5:21");
    }

    #[test]
    fn kernel_header_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(&a, "k0,k1\n0.25,0.75\n0.75,0.25\n").unwrap();
        std::fs::write(&b, "0.25,0.75\n0.75,0.25\n").unwrap();
        assert_eq!(read_kernel(&a).unwrap(), read_kernel(&b).unwrap());
    }
}
