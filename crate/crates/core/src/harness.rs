//! Experiment orchestration: repeated training runs, the accuracy grid,
//! per-epoch learning curves and the per-epoch timing benchmark.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{random_graph, sample_split, Split, SplitSpec, Validation};
use crate::error::{contract, Error, Result};
use crate::graph::{khop_stack, normalize_features, Graph, HopCache};
use crate::model::{accuracy, backward, forward, nll_loss, ModelKind, ModelParams, Propagation};
use crate::optim::{adam_step, l2_augment, AdamState, EarlyStopper};
use crate::rng::{Prng, Purpose};
use crate::sparse::CsrMatrix;

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "HOPCONV_THREADS";

/// Optimization hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub dropout: f64,
    pub l2: f64,
    pub hidden: usize,
    /// Stop on `patience` epochs without validation improvement.
    pub early_stopping: bool,
    /// Restore the best-validation parameters before testing.
    pub rollback: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            patience: 20,
            lr: 0.01,
            dropout: 0.5,
            l2: 5e-4,
            hidden: 16,
            early_stopping: true,
            rollback: true,
        }
    }
}

/// One cell of the experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub model: ModelKind,
    pub n_per_class: usize,
    pub repetitions: usize,
    pub base_seed: u64,
    pub validation: Validation,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn new(dataset: &str, model: ModelKind, n_per_class: usize) -> Self {
        ExperimentConfig {
            dataset: dataset.to_string(),
            model,
            n_per_class,
            repetitions: 500,
            base_seed: 42,
            validation: Validation::PerClass(30),
            train: TrainConfig::default(),
        }
    }

    pub fn with_reps(mut self, repetitions: usize) -> Self {
        self.repetitions = repetitions;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.base_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if self.n_per_class == 0 || self.repetitions == 0 || t.max_epochs == 0 || t.hidden == 0 {
            return Err(contract("counts in an experiment config must be positive"));
        }
        if t.patience == 0 && t.early_stopping {
            return Err(contract("patience must be positive"));
        }
        if !(t.lr > 0.0) || !(t.l2 >= 0.0) || !(0.0..1.0).contains(&t.dropout) {
            return Err(contract("learning rate, L2 or dropout out of range"));
        }
        Ok(())
    }

    fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            n_per_class: self.n_per_class,
            validation: self.validation,
        }
    }
}

/// A dataset with normalized features and the propagation operators of each
/// requested model, shared read-only by all repetitions.
#[derive(Debug)]
pub struct PreparedDataset {
    name: String,
    graph: Graph,
    props: BTreeMap<ModelKind, Propagation>,
}

impl PreparedDataset {
    /// Normalizes features and builds operators for `models`. Hop stacks are
    /// taken from `cache` when given.
    pub fn new(name: &str, graph: Graph, models: &[ModelKind], cache: Option<&HopCache>) -> Result<Self> {
        let features = normalize_features(graph.features())?;
        let graph = graph.with_features(features)?;
        let mut props = BTreeMap::new();
        let max_order = models.iter().filter_map(|m| m.hop_order()).max();
        let stack = match (max_order, cache) {
            (Some(order), Some(cache)) => Some(cache.get_or_build(name, &graph, order)?),
            (Some(order), None) => Some(khop_stack(&graph, order)?),
            (None, _) => None,
        };
        for &model in models {
            let prop = match (model.hop_order(), &stack) {
                (Some(order), Some(stack)) => Propagation::hops(&stack.truncated(order)?),
                _ => Propagation::baseline(&graph.adjacency())?,
            };
            props.insert(model, prop);
        }
        Ok(PreparedDataset {
            name: name.to_string(),
            graph,
            props,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn propagation(&self, model: ModelKind) -> Result<&Propagation> {
        self.props
            .get(&model)
            .ok_or_else(|| contract(format!("{model} operators not prepared for {}", self.name)))
    }
}

/// Per-epoch accuracies (evaluation mode) when curves are recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPoint {
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Outcome of one repetition.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub repetition: usize,
    pub test_accuracy: f64,
    pub epochs_run: usize,
    /// Epoch whose parameters were tested (the best-validation epoch under
    /// rollback, otherwise the last one).
    pub tested_epoch: usize,
    pub mean_epoch_seconds: f64,
    /// Entry 0 is before any update; entry `e` follows epoch `e`.
    pub curve: Option<Vec<EpochPoint>>,
}

impl RunResult {
    /// Everything except wall-clock timing, which is the only field allowed to
    /// differ between two runs of the same configuration.
    pub fn outcome(&self) -> (usize, u64, usize, usize, Option<&Vec<EpochPoint>>) {
        (
            self.repetition,
            self.test_accuracy.to_bits(),
            self.epochs_run,
            self.tested_epoch,
            self.curve.as_ref(),
        )
    }
}

struct TrainOutcome {
    params: ModelParams,
    epochs_run: usize,
    tested_epoch: usize,
    mean_epoch_seconds: f64,
    curve: Option<Vec<EpochPoint>>,
}

fn evaluate(prop: &Propagation, x: &CsrMatrix, params: &ModelParams, rng: &mut Prng) -> Result<crate::sparse::DenseMatrix> {
    Ok(forward(prop, x, params, 0.0, rng, false)?.0)
}

/// One full training step: dropout forward, loss, backward, L2, Adam.
/// Returns the training loss before the update.
pub fn train_epoch(
    prop: &Propagation,
    x: &CsrMatrix,
    labels: &[Option<usize>],
    train_nodes: &[usize],
    cfg: &TrainConfig,
    params: &mut ModelParams,
    adam: &mut AdamState,
    rng: &mut Prng,
) -> Result<f64> {
    let (logprobs, trace) = forward(prop, x, params, cfg.dropout, rng, true)?;
    let loss = nll_loss(&logprobs, labels, train_nodes)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    let mut grads = backward(prop, params, &trace, labels, train_nodes)?;
    l2_augment(&mut grads, params, cfg.l2);
    adam_step(params, &grads, adam)?;
    Ok(loss)
}

fn train(
    prop: &Propagation,
    graph: &Graph,
    split: &Split,
    cfg: &TrainConfig,
    mut params: ModelParams,
    rng: &mut Prng,
    record_curve: bool,
) -> Result<TrainOutcome> {
    let x = graph.features();
    let labels = graph.labels();
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best: Option<(usize, ModelParams)> = None;
    let mut curve = record_curve.then(Vec::new);
    if let Some(curve) = &mut curve {
        let lp = evaluate(prop, x, &params, rng)?;
        curve.push(EpochPoint {
            train_acc: accuracy(&lp, labels, &split.train)?,
            val_acc: accuracy(&lp, labels, &split.val)?,
        });
    }
    let mut epochs_run = 0;
    let mut seconds = 0.0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        train_epoch(prop, x, labels, &split.train, cfg, &mut params, &mut adam, rng)?;
        let lp = evaluate(prop, x, &params, rng)?;
        let val_acc = accuracy(&lp, labels, &split.val)?;
        seconds += start.elapsed().as_secs_f64();
        epochs_run = epoch;
        if let Some(curve) = &mut curve {
            curve.push(EpochPoint {
                train_acc: accuracy(&lp, labels, &split.train)?,
                val_acc,
            });
        }
        if cfg.early_stopping {
            let stop = stopper.should_stop(val_acc);
            if stopper.improved() && cfg.rollback {
                best = Some((epoch, params.clone()));
            }
            if stop {
                break;
            }
        }
    }
    let (tested_epoch, params) = match best {
        Some((epoch, best_params)) => (epoch, best_params),
        None => (epochs_run, params),
    };
    Ok(TrainOutcome {
        params,
        epochs_run,
        tested_epoch,
        mean_epoch_seconds: seconds / epochs_run.max(1) as f64,
        curve,
    })
}

fn run_with(ds: &PreparedDataset, cfg: &ExperimentConfig, rep: usize, record_curve: bool) -> Result<RunResult> {
    cfg.validate()?;
    if cfg.dataset != ds.name {
        return Err(contract(format!("config for {} run on {}", cfg.dataset, ds.name)));
    }
    let prop = ds.propagation(cfg.model)?;
    let graph = &ds.graph;
    let split = sample_split(
        graph,
        cfg.split_spec(),
        &mut Prng::stream(cfg.base_seed, rep as u64, Purpose::Split),
    )?;
    if !split.is_disjoint() {
        return Err(contract("split parts overlap"));
    }
    let params = ModelParams::init(
        prop,
        graph.n_features(),
        cfg.train.hidden,
        graph.n_classes(),
        &mut Prng::stream(cfg.base_seed, rep as u64, Purpose::Init),
    );
    let mut rng = Prng::stream(cfg.base_seed, rep as u64, Purpose::Dropout);
    let out = train(prop, graph, &split, &cfg.train, params, &mut rng, record_curve)?;
    let lp = evaluate(prop, graph.features(), &out.params, &mut rng)?;
    Ok(RunResult {
        repetition: rep,
        test_accuracy: accuracy(&lp, graph.labels(), &split.test)?,
        epochs_run: out.epochs_run,
        tested_epoch: out.tested_epoch,
        mean_epoch_seconds: out.mean_epoch_seconds,
        curve: out.curve,
    })
}

/// Repetition `rep` of `cfg`: a fresh split and initialization drawn from
/// streams derived from `(cfg.base_seed, rep)`, trained to completion, then
/// scored on the balanced test set.
pub fn run_single(ds: &PreparedDataset, cfg: &ExperimentConfig, rep: usize) -> Result<RunResult> {
    run_with(ds, cfg, rep, false)
}

/// Mean ± standard error over successful repetitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation over `√n`; 0 when fewer than two runs.
    pub stderr: f64,
    pub stderr_defined: bool,
    pub count: usize,
    pub failed: usize,
    pub mean_epochs: f64,
}

impl Aggregate {
    pub fn from_runs(runs: &[RunResult], failed: usize) -> Self {
        let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
        let (mean, std) = mean_std(&accs);
        let n = accs.len();
        Aggregate {
            mean,
            stderr: if n > 1 { std / (n as f64).sqrt() } else { 0.0 },
            stderr_defined: n > 1,
            count: n,
            failed,
            mean_epochs: if n > 0 {
                runs.iter().map(|r| r.epochs_run as f64).sum::<f64>() / n as f64
            } else {
                f64::NAN
            },
        }
    }
}

/// Mean and sample (n-1) standard deviation; the deviation is 0 for n < 2.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Result of one grid cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub config: ExperimentConfig,
    pub aggregate: Aggregate,
    pub runs: Vec<RunResult>,
    pub failures: Vec<(usize, String)>,
}

/// Worker pool sized by `$HOPCONV_THREADS` (default: all cores).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| contract(format!("{THREADS_ENV}={v} is not a thread count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| contract(format!("thread pool: {e}")))
}

fn run_reps(
    ds: &PreparedDataset,
    cfg: &ExperimentConfig,
    record_curve: bool,
) -> Result<(Vec<RunResult>, Vec<(usize, String)>)> {
    cfg.validate()?;
    let results: Vec<Result<RunResult>> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| run_with(ds, cfg, rep, record_curve))
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(run) => runs.push(run),
            Err(Error::NonFinite(msg)) => {
                log::warn!("{} {} n={} rep {rep} diverged: {msg}", cfg.dataset, cfg.model, cfg.n_per_class);
                failures.push((rep, msg));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((runs, failures))
}

/// Run one cell: `cfg.repetitions` independent repetitions, gathered in
/// repetition order whatever the completion order.
pub fn run_cell(ds: &PreparedDataset, cfg: &ExperimentConfig) -> Result<CellResult> {
    let (runs, failures) = run_reps(ds, cfg, false)?;
    Ok(CellResult {
        aggregate: Aggregate::from_runs(&runs, failures.len()),
        config: cfg.clone(),
        runs,
        failures,
    })
}

/// Run every cell in order. `datasets` must hold a prepared dataset for each
/// cell's `dataset` name.
pub fn run_grid(datasets: &[PreparedDataset], cfgs: &[ExperimentConfig]) -> Result<Vec<CellResult>> {
    cfgs.iter()
        .map(|cfg| {
            let ds = datasets
                .iter()
                .find(|d| d.name == cfg.dataset)
                .ok_or_else(|| contract(format!("dataset {} not prepared", cfg.dataset)))?;
            let cell = run_cell(ds, cfg)?;
            log::info!(
                "{} {} n={}: {:.2} ± {:.2} ({} runs, {} failed)",
                cfg.dataset,
                cfg.model,
                cfg.n_per_class,
                100.0 * cell.aggregate.mean,
                100.0 * cell.aggregate.stderr,
                cell.aggregate.count,
                cell.aggregate.failed
            );
            Ok(cell)
        })
        .collect()
}

/// Grid results as CSV with columns
/// `dataset,model,n_per_class,reps,mean_acc,stderr,failed,mean_epochs`.
/// Accuracies are percentages.
pub fn write_grid_csv<W: Write>(out: W, cells: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| contract(format!("csv: {e}"));
    w.write_record([
        "dataset",
        "model",
        "n_per_class",
        "reps",
        "mean_acc",
        "stderr",
        "failed",
        "mean_epochs",
    ])
    .map_err(csv_err)?;
    for c in cells {
        let a = &c.aggregate;
        w.write_record([
            c.config.dataset.clone(),
            c.config.model.to_string(),
            c.config.n_per_class.to_string(),
            c.config.repetitions.to_string(),
            format!("{:.4}", 100.0 * a.mean),
            format!("{:.4}", 100.0 * a.stderr),
            a.failed.to_string(),
            format!("{:.2}", a.mean_epochs),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| contract(format!("csv: {e}")))
}

/// Per-run test accuracies as CSV: `dataset,model,n_per_class,rep,test_acc,epochs_run,tested_epoch`.
pub fn write_runs_csv<W: Write>(out: W, cells: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| contract(format!("csv: {e}"));
    w.write_record(["dataset", "model", "n_per_class", "rep", "test_acc", "epochs_run", "tested_epoch"])
        .map_err(csv_err)?;
    for c in cells {
        for r in &c.runs {
            w.write_record([
                c.config.dataset.clone(),
                c.config.model.to_string(),
                c.config.n_per_class.to_string(),
                r.repetition.to_string(),
                format!("{:.6}", r.test_accuracy),
                r.epochs_run.to_string(),
                r.tested_epoch.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| contract(format!("csv: {e}")))
}

/// Mean and standard deviation of one accuracy series at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveStat {
    pub mean: f64,
    pub std: f64,
}

/// Epoch-wise learning curve of one model, averaged over repetitions.
#[derive(Debug, Clone)]
pub struct LearningCurve {
    pub model: ModelKind,
    pub train: Vec<CurveStat>,
    pub val: Vec<CurveStat>,
    pub runs: Vec<RunResult>,
}

impl LearningCurve {
    /// First epoch at which the mean validation accuracy reaches `level`.
    pub fn first_epoch_reaching(&self, level: f64) -> Option<usize> {
        self.val.iter().position(|s| s.mean >= level)
    }
}

/// Average per-epoch accuracy of `cfg.repetitions` runs with early stopping
/// disabled, so every run covers epochs `0..=max_epochs`.
pub fn learning_curves(ds: &PreparedDataset, cfg: &ExperimentConfig) -> Result<LearningCurve> {
    let mut cfg = cfg.clone();
    cfg.train.early_stopping = false;
    let (runs, failures) = run_reps(ds, &cfg, true)?;
    if runs.is_empty() {
        return Err(Error::NonFinite(format!("all {} curve runs diverged", failures.len())));
    }
    let horizon = cfg.train.max_epochs + 1;
    let series = |pick: fn(&EpochPoint) -> f64| -> Vec<CurveStat> {
        (0..horizon)
            .map(|e| {
                let xs: Vec<f64> = runs
                    .iter()
                    .map(|r| pick(&r.curve.as_ref().expect("curve recorded")[e]))
                    .collect();
                let (mean, std) = mean_std(&xs);
                CurveStat { mean, std }
            })
            .collect()
    };
    Ok(LearningCurve {
        model: cfg.model,
        train: series(|p| p.train_acc),
        val: series(|p| p.val_acc),
        runs,
    })
}

/// `model,epoch,train_mean,train_std,val_mean,val_std`.
pub fn write_curves_csv<W: Write>(out: W, curves: &[LearningCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| contract(format!("csv: {e}"));
    w.write_record(["model", "epoch", "train_mean", "train_std", "val_mean", "val_std"])
        .map_err(csv_err)?;
    for c in curves {
        for (e, (t, v)) in c.train.iter().zip(&c.val).enumerate() {
            w.write_record([
                c.model.to_string(),
                e.to_string(),
                format!("{:.6}", t.mean),
                format!("{:.6}", t.std),
                format!("{:.6}", v.mean),
                format!("{:.6}", v.std),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| contract(format!("csv: {e}")))
}

/// Raw per-run curves: `model,rep,epoch,train_acc,val_acc`. Accuracies are
/// written with round-trip precision.
pub fn write_curve_runs_csv<W: Write>(out: W, curves: &[LearningCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| contract(format!("csv: {e}"));
    w.write_record(["model", "rep", "epoch", "train_acc", "val_acc"])
        .map_err(csv_err)?;
    for c in curves {
        for r in &c.runs {
            for (e, p) in r.curve.iter().flatten().enumerate() {
                w.write_record([
                    c.model.to_string(),
                    r.repetition.to_string(),
                    e.to_string(),
                    format!("{:?}", p.train_acc),
                    format!("{:?}", p.val_acc),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| contract(format!("csv: {e}")))
}

/// Ask glibc to keep freed memory instead of returning it to the kernel.
/// Training allocates and frees the same few large matrices every epoch; by
/// default each of them is a fresh `mmap`, and zero-filling its pages
/// dominates the epoch once the matrices outgrow the cache. No-op elsewhere.
pub fn retain_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables; it is safe to call at
    // any time and from any thread.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}

/// Settings of the per-epoch timing benchmark.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub models: Vec<ModelKind>,
    pub warmup: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Skip a size (and all larger ones) when its operators would exceed this.
    pub max_operator_bytes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![1_000, 10_000, 100_000],
            models: ModelKind::ALL.to_vec(),
            warmup: 3,
            epochs: 20,
            seed: 42,
            max_operator_bytes: 2 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BenchStatus {
    Ok,
    /// Operators would not fit the memory budget; later sizes were skipped.
    OutOfMemory,
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n: usize,
    pub model: ModelKind,
    pub median_seconds: f64,
    pub mean_seconds: f64,
    pub epochs: usize,
    pub operator_nnz: usize,
    pub status: BenchStatus,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time full training epochs on uniform `G(N, 2N)` graphs. Operator
/// construction is done before the clock starts.
pub fn bench_timing(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(contract("benchmark sizes must be strictly ascending"));
    }
    if cfg.epochs == 0 {
        return Err(contract("benchmark needs at least one timed epoch"));
    }
    retain_heap();
    let train_cfg = TrainConfig::default();
    let mut rows = Vec::new();
    let mut exhausted = false;
    for &n in &cfg.sizes {
        if exhausted {
            rows.extend(cfg.models.iter().map(|&model| BenchRow {
                n,
                model,
                median_seconds: f64::NAN,
                mean_seconds: f64::NAN,
                epochs: 0,
                operator_nnz: 0,
                status: BenchStatus::OutOfMemory,
            }));
            continue;
        }
        let graph = random_graph(n, &mut Prng::stream(cfg.seed, n as u64, Purpose::Graph))?;
        let ds = PreparedDataset::new("bench", graph, &cfg.models, None)?;
        let bytes: usize = cfg
            .models
            .iter()
            .map(|&m| ds.propagation(m).map(|p| 2 * p.nnz() * 16))
            .sum::<Result<usize>>()?;
        if bytes > cfg.max_operator_bytes {
            log::warn!("G({n}, {}) operators need {bytes} bytes; skipping", 2 * n);
            exhausted = true;
            rows.extend(cfg.models.iter().map(|&model| BenchRow {
                n,
                model,
                median_seconds: f64::NAN,
                mean_seconds: f64::NAN,
                epochs: 0,
                operator_nnz: 0,
                status: BenchStatus::OutOfMemory,
            }));
            continue;
        }
        // Every node is a training node: the loss and its gradient then cost
        // the same at every N regardless of how labels fall into classes.
        let train_nodes: Vec<usize> = (0..n).collect();
        for &model in &cfg.models {
            let prop = ds.propagation(model)?;
            let graph = ds.graph();
            let mut params = ModelParams::init(
                prop,
                graph.n_features(),
                train_cfg.hidden,
                graph.n_classes(),
                &mut Prng::stream(cfg.seed, n as u64, Purpose::Init),
            );
            let mut adam = AdamState::new(&params, train_cfg.lr);
            let mut rng = Prng::stream(cfg.seed, n as u64, Purpose::Dropout);
            let mut times = Vec::with_capacity(cfg.epochs);
            for e in 0..cfg.warmup + cfg.epochs {
                let start = Instant::now();
                train_epoch(
                    prop,
                    graph.features(),
                    graph.labels(),
                    &train_nodes,
                    &train_cfg,
                    &mut params,
                    &mut adam,
                    &mut rng,
                )?;
                let dt = start.elapsed().as_secs_f64();
                if e >= cfg.warmup {
                    times.push(dt);
                }
            }
            rows.push(BenchRow {
                n,
                model,
                median_seconds: median(&times),
                mean_seconds: times.iter().sum::<f64>() / times.len() as f64,
                epochs: times.len(),
                operator_nnz: prop.nnz(),
                status: BenchStatus::Ok,
            });
        }
    }
    Ok(rows)
}

/// `n,edges,model,median_s,mean_s,epochs,operator_nnz,status`.
pub fn write_bench_csv<W: Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| contract(format!("csv: {e}"));
    w.write_record(["n", "edges", "model", "median_s", "mean_s", "epochs", "operator_nnz", "status"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            (2 * r.n).to_string(),
            r.model.to_string(),
            format!("{:.6e}", r.median_seconds),
            format!("{:.6e}", r.mean_seconds),
            r.epochs.to_string(),
            r.operator_nnz.to_string(),
            match r.status {
                BenchStatus::Ok => "ok".to_string(),
                BenchStatus::OutOfMemory => "oom".to_string(),
            },
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| contract(format!("csv: {e}")))
}
