//! End-to-end experiment harness: load, split, train, evaluate, aggregate, report.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{load_edge_list, load_features, load_labels, row_normalize, FeatureFormat, Graph};
use crate::metrics::{ami, average_precision, competitive, kmeans, roc_auc, summarize, Competitive, KMeansOptions, Summary};
use crate::model::{decode_pairs, ModelKind};
use crate::rng::{derive_seed, Stream};
use crate::split::{split_edges, EdgeSplit};
use crate::trainer::{train, train_with_validation, TrainConfig, Validation, LARGE_GRAPH_NODES};

pub const VAL_FRACTION: f64 = 0.05;
pub const TEST_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Task {
    LinkPrediction,
    NodeClustering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

/// 200 epochs below [`LARGE_GRAPH_NODES`] nodes, 300 from there on.
pub fn auto_epochs(n: usize) -> usize {
    if n < LARGE_GRAPH_NODES {
        200
    } else {
        300
    }
}

/// Seed of run `index` under master seed `master`.
pub fn run_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, Stream::Run, index as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub edges: PathBuf,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl DatasetPaths {
    pub fn name(&self) -> String {
        self.edges
            .file_stem()
            .map_or_else(|| "graph".into(), |s| s.to_string_lossy().into_owned())
    }
}

/// `.csv` files hold dense rows; anything else is read as `node feature value` triplets.
pub fn feature_format_for(path: &Path) -> FeatureFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::DenseCsv,
        _ => FeatureFormat::SparseTriplet,
    }
}

/// Loads the edge list plus optional features and labels into one graph.
pub fn load_dataset(paths: &DatasetPaths, row_normalize_features: bool) -> Result<Graph> {
    let mut g = load_edge_list(&paths.edges, false)?;
    if let Some(fp) = &paths.features {
        let mut x = load_features(fp, feature_format_for(fp), Some(&g))?;
        if row_normalize_features {
            row_normalize(&mut x);
        }
        g = g.with_features(x)?;
    }
    if let Some(lp) = &paths.labels {
        let labels = load_labels(lp, &g)?;
        g = g.with_labels(labels)?;
    }
    Ok(g)
}

/// One experiment: a task, a model configuration and a number of repetitions.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub dataset: String,
    pub task: Task,
    /// `seed` is the master seed; each run trains with [`run_seed`].
    pub config: TrainConfig,
    pub runs: usize,
    /// Concurrent runs; 0 uses all cores.
    pub jobs: usize,
    /// Per-run `epoch,loss,val_auc` CSVs are written here when set.
    pub history_dir: Option<PathBuf>,
}

impl RunSpec {
    pub fn new(dataset: impl Into<String>, task: Task, config: TrainConfig) -> Self {
        Self {
            dataset: dataset.into(),
            task,
            config,
            runs: 100,
            jobs: 1,
            history_dir: None,
        }
    }

    fn validate(&self, g: &Graph) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidArgument("runs must be at least 1".into()));
        }
        if self.task == Task::NodeClustering && g.labels().is_none() {
            return Err(Error::InvalidArgument("node clustering needs ground-truth labels".into()));
        }
        self.config.validate(g.n())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ami: Option<f64>,
    pub wallclock_s: f64,
}

/// Per-run metrics plus their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub model: ModelKind,
    pub task: Task,
    pub config: TrainConfig,
    pub runs: Vec<RunResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_ap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_ap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_ami: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_ami: Option<f64>,
    /// Set when a single run was aggregated and the deviations are reported as 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub single_run: bool,
    pub wallclock_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_fired: Option<String>,
}

fn summarize_metric(runs: &[RunResult], get: impl Fn(&RunResult) -> Option<f64>) -> Result<Option<Summary>> {
    let values: Vec<f64> = runs.iter().filter_map(&get).collect();
    if values.is_empty() {
        return Ok(None);
    }
    if values.len() != runs.len() {
        return Err(Error::InvalidArgument("metric missing from some runs".into()));
    }
    summarize(&values).map(Some)
}

impl EvalReport {
    /// Aggregates `runs`, which must be nonempty.
    pub fn aggregate(
        dataset: impl Into<String>,
        task: Task,
        config: TrainConfig,
        runs: Vec<RunResult>,
        wallclock_s: f64,
    ) -> Result<Self> {
        let auc = summarize_metric(&runs, |r| r.auc)?;
        let ap = summarize_metric(&runs, |r| r.ap)?;
        let ami = summarize_metric(&runs, |r| r.ami)?;
        if runs.is_empty() {
            return Err(Error::InvalidArgument("no runs to aggregate".into()));
        }
        Ok(Self {
            dataset: dataset.into(),
            model: config.kind,
            task,
            config,
            mean_auc: auc.map(|s| s.mean),
            std_auc: auc.map(|s| s.std),
            mean_ap: ap.map(|s| s.mean),
            std_ap: ap.map(|s| s.std),
            mean_ami: ami.map(|s| s.mean),
            std_ami: ami.map(|s| s.std),
            single_run: runs.len() == 1,
            runs,
            wallclock_s,
            rule_fired: None,
        })
    }

    /// Mean and standard deviation of the task's headline metric (AUC or AMI).
    pub fn headline(&self) -> Option<(f64, f64)> {
        match self.task {
            Task::LinkPrediction => self.mean_auc.zip(self.std_auc),
            Task::NodeClustering => self.mean_ami.zip(self.std_ami),
        }
    }

    /// Compares the headline metric against `baseline` and records the rule that fired.
    pub fn compare_with(&mut self, baseline: &EvalReport) -> Option<Competitive> {
        let (ma, sa) = self.headline()?;
        let (mb, sb) = baseline.headline()?;
        let c = competitive(ma, sa, mb, sb);
        self.rule_fired = Some(c.rule_fired().unwrap_or("none").to_string());
        Some(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per run, then a `mean` row whose `*_std` columns hold the deviations.
    pub fn to_csv(&self) -> String {
        let cols: Vec<(&str, fn(&RunResult) -> Option<f64>, Option<f64>, Option<f64>)> = vec![
            ("auc", |r| r.auc, self.mean_auc, self.std_auc),
            ("ap", |r| r.ap, self.mean_ap, self.std_ap),
            ("ami", |r| r.ami, self.mean_ami, self.std_ami),
        ];
        let cols: Vec<_> = cols.into_iter().filter(|c| c.2.is_some()).collect();
        let mut out = String::from("run,seed");
        for c in &cols {
            write!(out, ",{0},{0}_std", c.0).unwrap();
        }
        out.push_str(",wallclock_s\n");
        for (i, r) in self.runs.iter().enumerate() {
            write!(out, "{i},{}", r.seed).unwrap();
            for c in &cols {
                write!(out, ",{},", c.1(r).unwrap()).unwrap();
            }
            writeln!(out, ",{}", r.wallclock_s).unwrap();
        }
        out.push_str("mean,");
        for c in &cols {
            write!(out, ",{},{}", c.2.unwrap(), c.3.unwrap()).unwrap();
        }
        writeln!(out, ",{}", self.wallclock_s).unwrap();
        out
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => report.to_csv(),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EvalReport::from_json(&text)
}

fn check_split_is_clean(split: &EdgeSplit) -> Result<()> {
    let g = &split.train_graph;
    for &(u, v) in split.val_pos.iter().chain(&split.test_pos) {
        if g.has_edge(u, v) {
            return Err(Error::InvalidArgument(format!("held-out edge ({u}, {v}) leaked into the training graph")));
        }
    }
    Ok(())
}

fn execute<F>(spec: &RunSpec, one: F) -> Result<Vec<RunResult>>
where
    F: Fn(usize, u64) -> Result<RunResult> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let master = spec.config.seed;
    pool.install(|| {
        (0..spec.runs)
            .into_par_iter()
            .map(|i| {
                let seed = run_seed(master, i);
                one(i, seed).map_err(|e| Error::Run {
                    run: i,
                    source: Box::new(e),
                })
            })
            .collect()
    })
}

fn write_history(spec: &RunSpec, run: usize, record: &crate::trainer::TrainRecord) -> Result<()> {
    if let Some(dir) = &spec.history_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        record.write_history(dir.join(format!("run_{run}.csv")))?;
    }
    Ok(())
}

/// Link prediction over `spec.runs` independent splits of `g`.
pub fn run_link_prediction(g: &Graph, spec: &RunSpec) -> Result<EvalReport> {
    spec.validate(g)?;
    let start = Instant::now();
    let runs = execute(spec, |i, seed| {
        let t = Instant::now();
        let split = split_edges(g, VAL_FRACTION, TEST_FRACTION, seed)?;
        check_split_is_clean(&split)?;
        let config = TrainConfig {
            seed,
            ..spec.config.clone()
        };
        let val = Validation {
            pos: &split.val_pos,
            neg: &split.val_neg,
        };
        let record = train_with_validation(&split.train_graph, &config, Some(val))?;
        write_history(spec, i, &record)?;
        let z = record.embedding();
        let pos = decode_pairs(z, &split.test_pos)?;
        let neg = decode_pairs(z, &split.test_neg)?;
        let auc = roc_auc(&pos, &neg)?;
        let ap = average_precision(&pos, &neg)?;
        log::info!("run {i}: AUC {auc:.4} AP {ap:.4}");
        Ok(RunResult {
            seed,
            auc: Some(auc),
            ap: Some(ap),
            ami: None,
            wallclock_s: t.elapsed().as_secs_f64(),
        })
    })?;
    EvalReport::aggregate(
        spec.dataset.clone(),
        Task::LinkPrediction,
        spec.config.clone(),
        runs,
        start.elapsed().as_secs_f64(),
    )
}

/// k-means on `embedding` with `k` = number of distinct labels, scored by AMI.
pub fn clustering_ami(embedding: &Array2<f64>, labels: &[usize], seed: u64) -> Result<f64> {
    let k = labels.iter().collect::<HashSet<_>>().len();
    let clusters = kmeans(embedding, k, &KMeansOptions::default(), seed)?;
    ami(&clusters.labels, labels)
}

/// Node clustering: train on the complete graph, cluster the embedding.
pub fn run_node_clustering(g: &Graph, spec: &RunSpec) -> Result<EvalReport> {
    spec.validate(g)?;
    let labels = g.labels().unwrap();
    let start = Instant::now();
    let runs = execute(spec, |i, seed| {
        let t = Instant::now();
        let config = TrainConfig {
            seed,
            ..spec.config.clone()
        };
        let record = train(g, &config)?;
        write_history(spec, i, &record)?;
        let score = clustering_ami(record.embedding(), labels, seed)?;
        log::info!("run {i}: AMI {score:.4}");
        Ok(RunResult {
            seed,
            auc: None,
            ap: None,
            ami: Some(score),
            wallclock_s: t.elapsed().as_secs_f64(),
        })
    })?;
    EvalReport::aggregate(
        spec.dataset.clone(),
        Task::NodeClustering,
        spec.config.clone(),
        runs,
        start.elapsed().as_secs_f64(),
    )
}

pub fn run(g: &Graph, spec: &RunSpec) -> Result<EvalReport> {
    match spec.task {
        Task::LinkPrediction => run_link_prediction(g, spec),
        Task::NodeClustering => run_node_clustering(g, spec),
    }
}
