//! Training loop, node subsampling for large graphs, and the SBM fixture generator.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, normalized_khop, Graph};
use crate::metrics::roc_auc;
use crate::model::{decode_pairs, encode, gaussian_noise, Activation, EncoderInput, Encoding, KlScale, ModelKind, ParamSet, ReconOptions};
use crate::optim::{adam_step, init_params, loss_and_grad, AdamState, LossContext, LossOptions, ModelDims};
use crate::rng::{rng_for, Stream};
use crate::split::Pair;

/// Graphs with at least this many nodes train on sampled subgraphs by default.
pub const LARGE_GRAPH_NODES: usize = 100_000;
/// Subgraph size used when sampling is engaged automatically.
pub const DEFAULT_SAMPLE_NODES: usize = 10_000;

/// Per-epoch node subsampling of the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeSampling {
    /// [`DEFAULT_SAMPLE_NODES`] nodes once `n >= LARGE_GRAPH_NODES`, otherwise none.
    #[default]
    Auto,
    /// Always reconstruct the full graph.
    Off,
    Nodes(usize),
}

impl NodeSampling {
    /// Subgraph size for a graph with `n` nodes, or `None` for the full graph.
    pub fn resolve(self, n: usize) -> Option<usize> {
        match self {
            NodeSampling::Auto => (n >= LARGE_GRAPH_NODES).then_some(DEFAULT_SAMPLE_NODES.min(n)),
            NodeSampling::Off => None,
            NodeSampling::Nodes(k) => Some(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    /// Embedding dimension.
    pub dim: usize,
    /// Hidden width of GCN encoders.
    pub hidden: usize,
    /// Propagation layers of GCN encoders.
    pub layers: usize,
    pub lr: f64,
    pub epochs: usize,
    pub sample_nodes: NodeSampling,
    pub seed: u64,
    pub reweight: bool,
    /// Encode with `A + alpha * A²` instead of `A`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub khop_alpha: Option<f64>,
    /// Encode `Ã X` using the graph's node features.
    pub use_features: bool,
    pub kl_scale: KlScale,
    /// GCN-VAE only: separate trunk for the log-sigma head.
    pub separate_sigma_trunk: bool,
    /// Logit rows materialized at a time by the reconstruction loss.
    pub block_rows: usize,
    /// Validation AUC is logged every this many epochs when validation pairs are given.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::LinearAe,
            dim: 16,
            hidden: 32,
            layers: 2,
            lr: 0.01,
            epochs: 200,
            sample_nodes: NodeSampling::Auto,
            seed: 42,
            reweight: true,
            khop_alpha: None,
            use_features: false,
            kl_scale: KlScale::default(),
            separate_sigma_trunk: false,
            block_rows: ReconOptions::default().block_rows,
            val_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.dim == 0 {
            return bad("embedding dimension must be positive".into());
        }
        if self.kind.is_gcn() && (self.hidden == 0 || self.layers < 2) {
            return bad(format!(
                "GCN encoders need hidden >= 1 and layers >= 2, got {} and {}",
                self.hidden, self.layers
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if let Some(a) = self.khop_alpha {
            if !(a.is_finite() && a >= 0.0) {
                return bad(format!("khop alpha must be nonnegative, got {a}"));
            }
        }
        if let Some(k) = self.sample_nodes.resolve(n) {
            if k == 0 || k > n {
                return bad(format!("sample_nodes = {k} must be in 1..={n}"));
            }
        }
        if self.val_every == 0 {
            return bad("val_every must be positive".into());
        }
        Ok(())
    }

    fn loss_options(&self) -> LossOptions {
        LossOptions {
            recon: ReconOptions {
                reweight: self.reweight,
                block_rows: self.block_rows,
            },
            kl_scale: self.kl_scale,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    /// Total loss before each epoch's update.
    pub losses: Vec<f64>,
    /// Weighted KL part of each entry of `losses`; zeros for AE kinds.
    pub kl: Vec<f64>,
    /// `(epoch, auc)` pairs, epochs counted from 1.
    pub val_auc: Vec<(usize, f64)>,
    pub params: ParamSet,
    pub encoding: Encoding,
    pub wallclock_s: f64,
}

impl TrainRecord {
    /// Embedding used for evaluation: `Z` for AE kinds, `μ` for VAE kinds.
    pub fn embedding(&self) -> &Array2<f64> {
        self.encoding.embedding()
    }

    /// `epoch,loss,val_auc` rows; `val_auc` is empty on epochs without validation.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_auc\n");
        let mut val = self.val_auc.iter().peekable();
        for (i, loss) in self.losses.iter().enumerate() {
            let epoch = i + 1;
            write!(out, "{epoch},{loss},").unwrap();
            if let Some(&&(e, auc)) = val.peek() {
                if e == epoch {
                    write!(out, "{auc}").unwrap();
                    val.next();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_history(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.history_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Uniform `k`-subset of `0..n` without replacement, sorted, determined by `(seed, epoch)`.
pub fn subsample_nodes(n: usize, k: usize, seed: u64, epoch: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::InvalidArgument(format!("cannot sample {k} of {n} nodes")));
    }
    let mut rng = rng_for(seed, Stream::Subsample, epoch);
    let mut nodes = rand::seq::index::sample(&mut rng, n, k).into_vec();
    nodes.sort_unstable();
    Ok(nodes)
}

/// Validation pairs scored during training.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub pos: &'a [Pair],
    pub neg: &'a [Pair],
}

pub fn train(g: &Graph, config: &TrainConfig) -> Result<TrainRecord> {
    train_with_validation(g, config, None)
}

/// Full-batch Adam training on `g`, optionally logging validation AUC.
pub fn train_with_validation(g: &Graph, config: &TrainConfig, validation: Option<Validation<'_>>) -> Result<TrainRecord> {
    let start = Instant::now();
    let n = g.n();
    config.validate(n)?;
    let features = if config.use_features {
        Some(g.features().ok_or_else(|| {
            Error::InvalidArgument("configuration asks for node features but the graph has none".into())
        })?)
    } else {
        None
    };
    let adj = match config.khop_alpha {
        Some(alpha) => normalized_khop(g, alpha)?,
        None => normalized_adjacency(g),
    };
    let input = EncoderInput::new(&adj, features)?;
    let target = g.adjacency_with_self_loops();
    let dims = ModelDims {
        input: input.input_dim(),
        hidden: config.hidden,
        embedding: config.dim,
        layers: config.layers,
        separate_sigma_trunk: config.separate_sigma_trunk,
    };
    let mut params = init_params(config.kind, dims, config.seed)?;
    let mut adam = AdamState::new(&params);
    let sample = config.sample_nodes.resolve(n);
    let noise_for = |epoch: usize| {
        config
            .kind
            .is_variational()
            .then(|| gaussian_noise(n, config.dim, &mut rng_for(config.seed, Stream::Noise, epoch as u64)))
    };

    let mut losses = Vec::with_capacity(config.epochs);
    let mut kl = Vec::with_capacity(config.epochs);
    let mut val_auc = Vec::new();
    for epoch in 0..config.epochs {
        let subset = sample
            .map(|k| subsample_nodes(n, k, config.seed, epoch as u64))
            .transpose()?;
        let noise = noise_for(epoch);
        let ctx = LossContext {
            input: &input,
            target: &target,
            row_subset: subset.as_deref(),
            noise: noise.as_ref(),
            opts: config.loss_options(),
        };
        let (loss, grads) = loss_and_grad(&ctx, &params)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: epoch + 1 });
        }
        adam_step(&mut params, &grads, &mut adam, config.lr)?;
        losses.push(loss.total);
        kl.push(loss.kl);
        log::trace!("epoch {} loss {:.6}", epoch + 1, loss.total);

        if let Some(val) = validation {
            if (epoch + 1) % config.val_every == 0 || epoch + 1 == config.epochs {
                let enc = encode(&input, &params, noise_for(config.epochs).as_ref(), Activation::Relu)?;
                let auc = validation_auc(enc.embedding(), val)?;
                log::debug!("epoch {} validation AUC {:.4}", epoch + 1, auc);
                val_auc.push((epoch + 1, auc));
            }
        }
    }

    let encoding = encode(&input, &params, noise_for(config.epochs).as_ref(), Activation::Relu)?;
    if encoding.embedding().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("final embedding".into()));
    }
    Ok(TrainRecord {
        losses,
        kl,
        val_auc,
        params,
        encoding,
        wallclock_s: start.elapsed().as_secs_f64(),
    })
}

fn validation_auc(z: &Array2<f64>, val: Validation<'_>) -> Result<f64> {
    roc_auc(&decode_pairs(z, val.pos)?, &decode_pairs(z, val.neg)?)
}

/// Stochastic block model with `blocks` contiguous, near-equal blocks. Node
/// labels are the block indices.
///
/// Pairs are visited with geometric skips, so the cost is `O(n + m)`.
pub fn make_sbm(n: usize, blocks: usize, p_in: f64, p_out: f64, seed: u64) -> Result<Graph> {
    for p in [p_in, p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
    }
    if blocks == 0 || blocks > n.max(1) {
        return Err(Error::InvalidArgument(format!("{blocks} blocks for {n} nodes")));
    }
    let block_of = |i: usize| i * blocks / n;
    let block_end = |b: usize| (b + 1) * n / blocks;
    let mut rng = rng_for(seed, Stream::Run, 0);
    let mut edges = Vec::new();
    for u in 0..n {
        let end = block_end(block_of(u)).max(u + 1);
        sample_segment(u, u + 1, end, p_in, &mut rng, &mut edges);
        sample_segment(u, end, n, p_out, &mut rng, &mut edges);
    }
    let labels = (0..n).map(block_of).collect();
    Graph::from_edges(n, edges)?.with_labels(labels)
}

fn sample_segment<R: Rng + ?Sized>(u: usize, from: usize, to: usize, p: f64, rng: &mut R, out: &mut Vec<Pair>) {
    if p <= 0.0 || from >= to {
        return;
    }
    if p >= 1.0 {
        out.extend((from..to).map(|v| (u, v)));
        return;
    }
    let skip = Geometric::new(p).expect("p in (0, 1)");
    let mut v = from as u64;
    loop {
        v = v.saturating_add(skip.sample(rng));
        if v >= to as u64 {
            break;
        }
        out.push((u, v as usize));
        v += 1;
    }
}
