use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use graphae::bench::{auto_epochs, emit_report, load_dataset, load_report, run, DatasetPaths, ReportFormat, RunSpec, Task};
use graphae::model::{KlScale, ModelKind};
use graphae::trainer::{NodeSampling, TrainConfig};

#[derive(Parser)]
#[command(name = "graphae", version, about = "Linear and GCN graph autoencoder benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate a model over repeated runs and write a report.
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy)]
enum Epochs {
    Auto,
    Fixed(usize),
}

fn parse_epochs(s: &str) -> Result<Epochs, String> {
    match s {
        "auto" => Ok(Epochs::Auto),
        _ => match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("expected `auto` or a positive integer, got {s:?}")),
            Ok(e) => Ok(Epochs::Fixed(e)),
        },
    }
}

fn parse_sampling(s: &str) -> Result<NodeSampling, String> {
    match s {
        "auto" => Ok(NodeSampling::Auto),
        "off" => Ok(NodeSampling::Off),
        _ => s
            .parse()
            .map(NodeSampling::Nodes)
            .map_err(|_| format!("expected `auto`, `off` or a node count, got {s:?}")),
    }
}

#[derive(Args)]
struct RunArgs {
    /// Whitespace-separated edge list.
    #[arg(long)]
    edges: PathBuf,
    /// Node features: dense rows for `.csv`, `node feature value` triplets otherwise.
    #[arg(long)]
    features: Option<PathBuf>,
    /// `node label` lines; required for node clustering.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: ModelKind,
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// `auto` is 200 below 100000 nodes and 300 otherwise.
    #[arg(long, default_value = "auto", value_parser = parse_epochs)]
    epochs: Epochs,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// `auto`, `off`, or the number of nodes reconstructed per epoch.
    #[arg(long, default_value = "auto", value_parser = parse_sampling)]
    sample_nodes: NodeSampling,
    /// Encode with `A + alpha * A^2`.
    #[arg(long)]
    khop_alpha: Option<f64>,
    #[arg(long)]
    no_reweight: bool,
    #[arg(long)]
    row_normalize_features: bool,
    #[arg(long, value_enum, default_value_t = KlScale::PerEntry)]
    kl_scale: KlScale,
    /// GCN-VAE: give the log-sigma head its own hidden layers.
    #[arg(long)]
    separate_sigma_trunk: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
    /// Concurrent runs; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory for per-run `epoch,loss,val_auc` histories.
    #[arg(long)]
    history_dir: Option<PathBuf>,
    /// JSON report of a baseline; the headline metric is checked for competitiveness.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

fn run_command(args: RunArgs) -> graphae::Result<()> {
    let paths = DatasetPaths {
        edges: args.edges,
        features: args.features,
        labels: args.labels,
    };
    let g = load_dataset(&paths, args.row_normalize_features)?;
    log::info!("loaded {} nodes, {} edges", g.n(), g.m());
    let config = TrainConfig {
        kind: args.model,
        dim: args.dim,
        hidden: args.hidden,
        layers: args.layers,
        lr: args.lr,
        epochs: match args.epochs {
            Epochs::Auto => auto_epochs(g.n()),
            Epochs::Fixed(e) => e,
        },
        sample_nodes: args.sample_nodes,
        seed: args.seed,
        reweight: !args.no_reweight,
        khop_alpha: args.khop_alpha,
        use_features: paths.features.is_some(),
        kl_scale: args.kl_scale,
        separate_sigma_trunk: args.separate_sigma_trunk,
        ..TrainConfig::default()
    };
    let spec = RunSpec {
        runs: args.runs,
        jobs: args.jobs,
        history_dir: args.history_dir,
        ..RunSpec::new(paths.name(), args.task, config)
    };
    let mut report = run(&g, &spec)?;
    if let Some(path) = args.baseline {
        let baseline = load_report(path)?;
        if report.compare_with(&baseline).is_none() {
            log::warn!("baseline report has no comparable headline metric");
        }
    }
    emit_report(&report, args.format, &args.out)?;
    let fmt = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{:.2} +/- {:.2}", 100.0 * m, 100.0 * s),
        _ => "-".into(),
    };
    match spec.task {
        Task::LinkPrediction => println!(
            "{} {}: AUC {}  AP {}  ({} runs, {:.1}s)",
            spec.dataset,
            report.model,
            fmt(report.mean_auc, report.std_auc),
            fmt(report.mean_ap, report.std_ap),
            report.runs.len(),
            report.wallclock_s
        ),
        Task::NodeClustering => println!(
            "{} {}: AMI {}  ({} runs, {:.1}s)",
            spec.dataset,
            report.model,
            fmt(report.mean_ami, report.std_ami),
            report.runs.len(),
            report.wallclock_s
        ),
    }
    if let Some(rule) = &report.rule_fired {
        println!("competitive with baseline: {rule}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run_command(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
