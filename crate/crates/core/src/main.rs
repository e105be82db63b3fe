use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use hopconv::data::{convert_linqs, default_data_dir, load_dataset, Validation};
use hopconv::harness::{
    bench_timing, learning_curves, run_grid, thread_pool, write_bench_csv, write_curve_runs_csv,
    write_curves_csv, write_grid_csv, write_runs_csv, BenchConfig, ExperimentConfig, PreparedDataset,
    TrainConfig,
};
use hopconv::{HopCache, ModelKind};

#[derive(Parser)]
#[command(name = "hopconv", version, about = "Hop-mixing graph convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Repeated train/test runs over a grid of datasets, models and label counts.
    Run(RunArgs),
    /// Per-epoch train/validation accuracy averaged over repetitions.
    Curves(CurveArgs),
    /// Per-epoch training time on random G(N, 2N) graphs.
    Bench(BenchArgs),
    /// Convert a LINQS-style .content/.cites pair into the dataset format.
    Convert(ConvertArgs),
    /// Print dataset statistics.
    Stats(StatsArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root (default: $HOPCONV_DATA or ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Directory for cached hop operators.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl DataArgs {
    fn root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(default_data_dir)
    }

    fn cache(&self) -> HopCache {
        HopCache::new(self.cache_dir.clone().unwrap_or_else(|| self.root().join(".cache")))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 5e-4)]
    l2: f64,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    /// Test the parameters of the halting epoch instead of the best one.
    #[arg(long)]
    no_rollback: bool,
    /// Draw this many validation nodes in total instead of 30 per class.
    #[arg(long)]
    val_total: Option<usize>,
    /// Validation nodes per class.
    #[arg(long, default_value_t = 30)]
    val_per_class: usize,
}

impl TrainArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            lr: self.lr,
            dropout: self.dropout,
            l2: self.l2,
            hidden: self.hidden,
            early_stopping: true,
            rollback: !self.no_rollback,
        }
    }

    fn validation(&self) -> Validation {
        match self.val_total {
            Some(total) => Validation::Total(total),
            None => Validation::PerClass(self.val_per_class),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Comma-separated dataset names.
    #[arg(long, value_delimiter = ',', default_value = "cora")]
    dataset: Vec<String>,
    /// Comma-separated models: gcn, gcn2, gcn3.
    #[arg(long, value_delimiter = ',', default_value = "gcn,gcn2,gcn3")]
    model: Vec<ModelKind>,
    /// Comma-separated training labels per class.
    #[arg(long, value_delimiter = ',', default_value = "20")]
    n_per_class: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Aggregate CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-repetition CSV.
    #[arg(long)]
    runs_out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long, default_value = "cora")]
    dataset: String,
    #[arg(long, value_delimiter = ',', default_value = "gcn,gcn2,gcn3")]
    model: Vec<ModelKind>,
    #[arg(long, default_value_t = 20)]
    n_per_class: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional raw per-run curves.
    #[arg(long)]
    raw_out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated ascending node counts.
    #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "gcn,gcn2,gcn3")]
    model: Vec<ModelKind>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Operator memory budget in GiB.
    #[arg(long, default_value_t = 2.0)]
    max_mem_gb: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    /// LINQS .content file.
    #[arg(long)]
    content: PathBuf,
    /// LINQS .cites file.
    #[arg(long)]
    cites: PathBuf,
    /// Output dataset directory (e.g. data/cora).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, value_delimiter = ',', default_value = "cora,citeseer,pubmed")]
    dataset: Vec<String>,
    #[command(flatten)]
    data: DataArgs,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn prepare(name: &str, models: &[ModelKind], data: &DataArgs) -> Result<PreparedDataset> {
    let (graph, stats) = load_dataset(name, &data.root())
        .with_context(|| format!("loading dataset {name} from {}", data.root().display()))?;
    log::info!("{name}: {stats:?}");
    Ok(PreparedDataset::new(name, graph, models, Some(&data.cache()))?)
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let pool = thread_pool()?;
    let mut datasets = Vec::new();
    for name in &args.dataset {
        datasets.push(prepare(name, &args.model, &args.data)?);
    }
    let mut cfgs = Vec::new();
    for name in &args.dataset {
        for &model in &args.model {
            for &n in &args.n_per_class {
                let mut cfg = ExperimentConfig::new(name, model, n)
                    .with_reps(args.reps)
                    .with_seed(args.seed);
                cfg.train = args.train.train_config();
                cfg.validation = args.train.validation();
                cfgs.push(cfg);
            }
        }
    }
    let cells = pool.install(|| run_grid(&datasets, &cfgs))?;
    for c in cells.iter().filter(|c| !c.aggregate.stderr_defined) {
        log::warn!(
            "{} {} n={}: fewer than two successful runs, stderr reported as 0",
            c.config.dataset,
            c.config.model,
            c.config.n_per_class
        );
    }
    write_grid_csv(output(&args.out)?, &cells)?;
    if let Some(path) = &args.runs_out {
        write_runs_csv(output(&Some(path.clone()))?, &cells)?;
    }
    let fully_failed = cells.iter().any(|c| c.aggregate.count == 0);
    Ok(if fully_failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn cmd_curves(args: CurveArgs) -> Result<ExitCode> {
    let pool = thread_pool()?;
    let ds = prepare(&args.dataset, &args.model, &args.data)?;
    let mut curves = Vec::new();
    for &model in &args.model {
        let mut cfg = ExperimentConfig::new(&args.dataset, model, args.n_per_class)
            .with_reps(args.reps)
            .with_seed(args.seed);
        cfg.train = args.train.train_config();
        cfg.validation = args.train.validation();
        curves.push(pool.install(|| learning_curves(&ds, &cfg))?);
    }
    write_curves_csv(output(&args.out)?, &curves)?;
    if let Some(path) = &args.raw_out {
        write_curve_runs_csv(output(&Some(path.clone()))?, &curves)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let cfg = BenchConfig {
        sizes: args.sizes,
        models: args.model,
        warmup: args.warmup,
        epochs: args.epochs,
        seed: args.seed,
        max_operator_bytes: (args.max_mem_gb * (1u64 << 30) as f64) as usize,
    };
    let rows = bench_timing(&cfg)?;
    write_bench_csv(output(&args.out)?, &rows)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_convert(args: ConvertArgs) -> Result<ExitCode> {
    let report = convert_linqs(&args.content, &args.cites, &args.out)?;
    eprintln!(
        "{}: {} nodes, {} features, {} classes, {} edges written, {} skipped",
        args.out.display(),
        report.nodes,
        report.features,
        report.classes.len(),
        report.edges_written,
        report.edges_skipped
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_stats(args: StatsArgs) -> Result<ExitCode> {
    let mut out = io::stdout().lock();
    writeln!(out, "dataset\tnodes\tedges\traw_edge_lines\tself_loops\tclasses\tfeatures\tlabeled")?;
    for name in &args.dataset {
        let (_, s) = load_dataset(name, &args.data.root())?;
        writeln!(
            out,
            "{name}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.nodes, s.edges, s.raw_edge_lines, s.self_loops_dropped, s.classes, s.features, s.labeled_nodes
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    hopconv::harness::retain_heap();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Curves(a) => cmd_curves(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Convert(a) => cmd_convert(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
