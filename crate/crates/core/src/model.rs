//! Encoders, inner-product decoder and the reconstruction / KL objectives.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::rng::{rng_for, Stream};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModelKind {
    LinearAe,
    LinearVae,
    GcnAe,
    GcnVae,
}

impl ModelKind {
    pub fn is_variational(self) -> bool {
        matches!(self, ModelKind::LinearVae | ModelKind::GcnVae)
    }

    pub fn is_gcn(self) -> bool {
        matches!(self, ModelKind::GcnAe | ModelKind::GcnVae)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::LinearAe => "linear_ae",
            ModelKind::LinearVae => "linear_vae",
            ModelKind::GcnAe => "gcn_ae",
            ModelKind::GcnVae => "gcn_vae",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_ae" => Ok(ModelKind::LinearAe),
            "linear_vae" => Ok(ModelKind::LinearVae),
            "gcn_ae" => Ok(ModelKind::GcnAe),
            "gcn_vae" => Ok(ModelKind::GcnVae),
            other => Err(Error::InvalidArgument(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Trainable weights of one model.
///
/// GCN stacks list their matrices input-first. For `GcnVae` the `trunk`
/// produces the hidden representation fed to both heads; when
/// `sigma_trunk` is set the log-sigma head reads its own trunk instead.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSet {
    LinearAe {
        w: Array2<f64>,
    },
    LinearVae {
        w_mu: Array2<f64>,
        w_sigma: Array2<f64>,
    },
    GcnAe {
        layers: Vec<Array2<f64>>,
    },
    GcnVae {
        trunk: Vec<Array2<f64>>,
        sigma_trunk: Option<Vec<Array2<f64>>>,
        head_mu: Array2<f64>,
        head_sigma: Array2<f64>,
    },
}

impl ParamSet {
    pub fn kind(&self) -> ModelKind {
        match self {
            ParamSet::LinearAe { .. } => ModelKind::LinearAe,
            ParamSet::LinearVae { .. } => ModelKind::LinearVae,
            ParamSet::GcnAe { .. } => ModelKind::GcnAe,
            ParamSet::GcnVae { .. } => ModelKind::GcnVae,
        }
    }

    /// All weight matrices in a fixed canonical order.
    pub fn matrices(&self) -> Vec<&Array2<f64>> {
        match self {
            ParamSet::LinearAe { w } => vec![w],
            ParamSet::LinearVae { w_mu, w_sigma } => vec![w_mu, w_sigma],
            ParamSet::GcnAe { layers } => layers.iter().collect(),
            ParamSet::GcnVae {
                trunk,
                sigma_trunk,
                head_mu,
                head_sigma,
            } => trunk
                .iter()
                .chain(sigma_trunk.iter().flatten())
                .chain([head_mu, head_sigma])
                .collect(),
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Array2<f64>> {
        match self {
            ParamSet::LinearAe { w } => vec![w],
            ParamSet::LinearVae { w_mu, w_sigma } => vec![w_mu, w_sigma],
            ParamSet::GcnAe { layers } => layers.iter_mut().collect(),
            ParamSet::GcnVae {
                trunk,
                sigma_trunk,
                head_mu,
                head_sigma,
            } => trunk
                .iter_mut()
                .chain(sigma_trunk.iter_mut().flatten())
                .chain([head_mu, head_sigma])
                .collect(),
        }
    }

    /// Same structure with every entry set to zero.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = self.clone();
        for m in out.matrices_mut() {
            m.fill(0.0);
        }
        out
    }

    pub fn input_dim(&self) -> usize {
        self.matrices()[0].nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.matrices().last().unwrap().ncols()
    }

    pub fn num_parameters(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    /// Number of propagation layers; 1 for the linear models.
    pub fn depth(&self) -> usize {
        match self {
            ParamSet::LinearAe { .. } | ParamSet::LinearVae { .. } => 1,
            ParamSet::GcnAe { layers } => layers.len(),
            ParamSet::GcnVae { trunk, .. } => trunk.len() + 1,
        }
    }

    /// Checks finiteness, layer count and that shapes chain `input -> hidden* -> d`.
    pub fn validate(&self) -> Result<()> {
        if self.matrices().iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("parameters".into()));
        }
        let chain = |stack: &[&Array2<f64>]| -> Result<()> {
            for pair in stack.windows(2) {
                if pair[0].ncols() != pair[1].nrows() {
                    return Err(Error::Shape(format!(
                        "layer output width {} does not match next input width {}",
                        pair[0].ncols(),
                        pair[1].nrows()
                    )));
                }
            }
            Ok(())
        };
        match self {
            ParamSet::LinearAe { .. } => Ok(()),
            ParamSet::LinearVae { w_mu, w_sigma } => {
                if w_mu.dim() != w_sigma.dim() {
                    return Err(Error::Shape("W_mu and W_sigma differ in shape".into()));
                }
                Ok(())
            }
            ParamSet::GcnAe { layers } => {
                if layers.len() < 2 {
                    return Err(Error::InvalidArgument("GCN encoders need at least 2 layers".into()));
                }
                chain(&layers.iter().collect::<Vec<_>>())
            }
            ParamSet::GcnVae {
                trunk,
                sigma_trunk,
                head_mu,
                head_sigma,
            } => {
                if trunk.is_empty() {
                    return Err(Error::InvalidArgument("GCN encoders need at least 2 layers".into()));
                }
                if head_mu.dim() != head_sigma.dim() {
                    return Err(Error::Shape("mu and sigma heads differ in shape".into()));
                }
                chain(&trunk.iter().chain([head_mu]).collect::<Vec<_>>())?;
                if let Some(st) = sigma_trunk {
                    if st.len() != trunk.len() || st[0].nrows() != trunk[0].nrows() {
                        return Err(Error::Shape("sigma trunk does not mirror the mu trunk".into()));
                    }
                    chain(&st.iter().chain([head_sigma]).collect::<Vec<_>>())?;
                }
                Ok(())
            }
        }
    }
}

/// Encoder output. For VAE kinds `z = mu + exp(log_sigma) * noise`.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    Ae {
        z: Array2<f64>,
    },
    Vae {
        mu: Array2<f64>,
        log_sigma: Array2<f64>,
        noise: Array2<f64>,
        z: Array2<f64>,
    },
}

impl Encoding {
    /// Sampled (VAE) or deterministic (AE) latent matrix fed to the decoder.
    pub fn z(&self) -> &Array2<f64> {
        match self {
            Encoding::Ae { z } | Encoding::Vae { z, .. } => z,
        }
    }

    /// Embedding used for evaluation: `z` for AE, `mu` for VAE.
    pub fn embedding(&self) -> &Array2<f64> {
        match self {
            Encoding::Ae { z } => z,
            Encoding::Vae { mu, .. } => mu,
        }
    }

    pub fn into_embedding(self) -> Array2<f64> {
        match self {
            Encoding::Ae { z } => z,
            Encoding::Vae { mu, .. } => mu,
        }
    }
}

/// Normalized adjacency plus the precomputed first-layer propagation `Ã X`
/// when node features are used.
#[derive(Debug, Clone)]
pub struct EncoderInput<'a> {
    adj: &'a NormalizedAdjacency,
    propagated: Option<Array2<f64>>,
}

impl<'a> EncoderInput<'a> {
    pub fn new(adj: &'a NormalizedAdjacency, features: Option<&Array2<f64>>) -> Result<Self> {
        let propagated = match features {
            Some(x) => {
                if x.nrows() != adj.n() {
                    return Err(Error::Shape(format!(
                        "feature matrix has {} rows, adjacency has {}",
                        x.nrows(),
                        adj.n()
                    )));
                }
                Some(adj.dot(&x.view()))
            }
            None => None,
        };
        Ok(Self { adj, propagated })
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        self.adj
    }

    pub fn n(&self) -> usize {
        self.adj.n()
    }

    /// Rows of the first weight matrix: `n` featureless, `f` with features.
    pub fn input_dim(&self) -> usize {
        self.propagated.as_ref().map_or(self.adj.n(), Array2::ncols)
    }

    fn check_first(&self, w: &Array2<f64>) -> Result<()> {
        if w.nrows() != self.input_dim() {
            return Err(Error::Shape(format!(
                "first weight matrix has {} rows, input dimension is {}",
                w.nrows(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `Ã W` or `Ã X W`.
    pub(crate) fn first_layer(&self, w: &Array2<f64>) -> Array2<f64> {
        match &self.propagated {
            None => self.adj.dot(&w.view()),
            Some(ax) => ax.dot(w),
        }
    }

    /// Adjoint of [`Self::first_layer`]: `Ãᵀ G` or `(Ã X)ᵀ G`.
    pub(crate) fn first_layer_adjoint(&self, g: &Array2<f64>) -> Array2<f64> {
        match &self.propagated {
            // Ã is symmetric.
            None => self.adj.dot(&g.view()),
            Some(ax) => ax.t().dot(g),
        }
    }

    /// `Ã H W`, multiplying `H W` first.
    pub(crate) fn propagate(&self, h: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
        self.adj.dot(&h.dot(w).view())
    }

    pub(crate) fn smooth(&self, g: &Array2<f64>) -> Array2<f64> {
        self.adj.dot(&g.view())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    /// Test hook that turns a GCN into a product of linear maps.
    Identity,
}

impl Activation {
    pub(crate) fn apply(self, mut x: Array2<f64>) -> Array2<f64> {
        if self == Activation::Relu {
            x.mapv_inplace(|v| v.max(0.0));
        }
        x
    }
}

/// Hidden activations of a GCN trunk, `H^(1) .. H^(T)`.
pub(crate) fn trunk_forward(
    input: &EncoderInput<'_>,
    layers: &[Array2<f64>],
    act: Activation,
) -> Vec<Array2<f64>> {
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    for (l, w) in layers.iter().enumerate() {
        let pre = if l == 0 {
            input.first_layer(w)
        } else {
            input.propagate(&hidden[l - 1], w)
        };
        hidden.push(act.apply(pre));
    }
    hidden
}

pub fn gaussian_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// Standard-normal noise for seed `seed`.
pub fn noise_for_seed(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    gaussian_noise(rows, cols, &mut rng_for(seed, Stream::Noise, 0))
}

fn reparameterize(mu: Array2<f64>, log_sigma: Array2<f64>, noise: Array2<f64>) -> Result<Encoding> {
    if noise.dim() != mu.dim() {
        return Err(Error::Shape(format!(
            "noise is {:?}, latent mean is {:?}",
            noise.dim(),
            mu.dim()
        )));
    }
    let mut z = mu.clone();
    Zip::from(&mut z)
        .and(&log_sigma)
        .and(&noise)
        .for_each(|z, &ls, &e| *z += ls.exp() * e);
    Ok(Encoding::Vae {
        mu,
        log_sigma,
        noise,
        z,
    })
}

/// Forward pass of any model kind. `noise` is required for VAE kinds.
pub fn encode(
    input: &EncoderInput<'_>,
    params: &ParamSet,
    noise: Option<&Array2<f64>>,
    act: Activation,
) -> Result<Encoding> {
    params.validate()?;
    input.check_first(params.matrices()[0])?;
    let need_noise = || {
        noise
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("variational encoders need a noise matrix".into()))
    };
    match params {
        ParamSet::LinearAe { w } => Ok(Encoding::Ae {
            z: input.first_layer(w),
        }),
        ParamSet::LinearVae { w_mu, w_sigma } => {
            let mu = input.first_layer(w_mu);
            let log_sigma = input.first_layer(w_sigma);
            reparameterize(mu, log_sigma, need_noise()?)
        }
        ParamSet::GcnAe { layers } => {
            let (head, trunk) = layers.split_last().unwrap();
            let hidden = trunk_forward(input, trunk, act);
            Ok(Encoding::Ae {
                z: input.propagate(hidden.last().unwrap(), head),
            })
        }
        ParamSet::GcnVae {
            trunk,
            sigma_trunk,
            head_mu,
            head_sigma,
        } => {
            let hidden = trunk_forward(input, trunk, act);
            let h = hidden.last().unwrap();
            let mu = input.propagate(h, head_mu);
            let log_sigma = match sigma_trunk {
                None => input.propagate(h, head_sigma),
                Some(st) => {
                    let hs = trunk_forward(input, st, act);
                    input.propagate(hs.last().unwrap(), head_sigma)
                }
            };
            reparameterize(mu, log_sigma, need_noise()?)
        }
    }
}

fn expect_kind(params: &ParamSet, kinds: &[ModelKind]) -> Result<()> {
    if kinds.contains(&params.kind()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{} parameters passed to a {} encoder",
            params.kind(),
            kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("/")
        )))
    }
}

/// `Z = Ã W` (featureless) or `Z = Ã X W`.
pub fn linear_encode(
    a_norm: &NormalizedAdjacency,
    params: &ParamSet,
    x: Option<&Array2<f64>>,
) -> Result<Encoding> {
    expect_kind(params, &[ModelKind::LinearAe])?;
    encode(&EncoderInput::new(a_norm, x)?, params, None, Activation::Relu)
}

/// `mu = Ã W_mu`, `log_sigma = Ã W_sigma` (times `X` with features), then one
/// reparameterized sample drawn from `noise_seed`.
pub fn linear_vae_encode(
    a_norm: &NormalizedAdjacency,
    params: &ParamSet,
    x: Option<&Array2<f64>>,
    noise_seed: u64,
) -> Result<Encoding> {
    expect_kind(params, &[ModelKind::LinearVae])?;
    let noise = noise_for_seed(a_norm.n(), params.embedding_dim(), noise_seed);
    encode(&EncoderInput::new(a_norm, x)?, params, Some(&noise), Activation::Relu)
}

/// Multi-layer GCN encoder: ReLU hidden layers, linear output layer(s).
/// `noise_seed` is only used by `GcnVae`.
pub fn gcn_encode(
    a_norm: &NormalizedAdjacency,
    params: &ParamSet,
    x: Option<&Array2<f64>>,
    noise_seed: u64,
) -> Result<Encoding> {
    gcn_encode_with(a_norm, params, x, noise_seed, Activation::Relu)
}

pub fn gcn_encode_with(
    a_norm: &NormalizedAdjacency,
    params: &ParamSet,
    x: Option<&Array2<f64>>,
    noise_seed: u64,
    act: Activation,
) -> Result<Encoding> {
    expect_kind(params, &[ModelKind::GcnAe, ModelKind::GcnVae])?;
    let input = EncoderInput::new(a_norm, x)?;
    let noise = params
        .kind()
        .is_variational()
        .then(|| noise_for_seed(a_norm.n(), params.embedding_dim(), noise_seed));
    encode(&input, params, noise.as_ref(), act)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inner-product decoder scores `sigmoid(z_i · z_j)`.
pub fn decode_pairs(z: &Array2<f64>, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let n = z.nrows();
    pairs
        .iter()
        .map(|&(i, j)| {
            for index in [i, j] {
                if index >= n {
                    return Err(Error::IndexOutOfRange { index, n });
                }
            }
            Ok(sigmoid(z.row(i).dot(&z.row(j))))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconOptions {
    /// Weight positives by `#zeros / #ones` of the (restricted) target.
    pub reweight: bool,
    /// Rows of the logit matrix materialized at once.
    pub block_rows: usize,
}

impl Default for ReconOptions {
    fn default() -> Self {
        Self {
            reweight: true,
            block_rows: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconLoss {
    pub loss: f64,
    /// Gradient with respect to `Z`, full `n × d` shape; rows outside the subset are zero.
    pub grad_z: Array2<f64>,
    pub pos_weight: f64,
    /// Target restricted to the subset was all ones or all zeros; `pos_weight` fell back to 1.
    pub degenerate: bool,
}

/// Validated row subset plus the inverse position map.
struct Subset {
    rows: Vec<usize>,
    position: Vec<usize>,
}

impl Subset {
    fn new(n: usize, rows: Option<&[usize]>) -> Result<Self> {
        let rows: Vec<usize> = match rows {
            Some(r) => r.to_vec(),
            None => (0..n).collect(),
        };
        let mut position = vec![usize::MAX; n];
        for (p, &i) in rows.iter().enumerate() {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, n });
            }
            if position[i] != usize::MAX {
                return Err(Error::InvalidArgument(format!("node {i} repeated in row subset")));
            }
            position[i] = p;
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("empty row subset".into()));
        }
        Ok(Self { rows, position })
    }

    /// Positions (within the subset) of the target's nonzeros on subset row `a`.
    fn positives<'t>(&'t self, target: &'t CsrMatrix, a: usize) -> impl Iterator<Item = usize> + 't {
        target.row(self.rows[a]).0.iter().filter_map(|&j| {
            let p = self.position[j];
            (p != usize::MAX).then_some(p)
        })
    }
}

fn check_target(z: &ArrayView2<f64>, target: &CsrMatrix) -> Result<()> {
    if target.n_rows() != z.nrows() || target.n_cols() != z.nrows() {
        return Err(Error::Shape(format!(
            "target is {}x{}, embedding has {} rows",
            target.n_rows(),
            target.n_cols(),
            z.nrows()
        )));
    }
    Ok(())
}

fn positive_weight(s: usize, ones: usize, reweight: bool) -> (f64, bool) {
    let total = s * s;
    let degenerate = ones == 0 || ones == total;
    if degenerate {
        log::warn!("degenerate reconstruction target ({ones} of {total} entries positive); using unit weight");
    }
    let w = if reweight && !degenerate {
        (total - ones) as f64 / ones as f64
    } else {
        1.0
    };
    (w, degenerate)
}

/// Weighted binary cross-entropy between `sigmoid(Z Zᵀ)` and a binary target,
/// averaged over all pairs of the row subset.
///
/// The target must be symmetric. Only the upper block triangle of the logit
/// matrix is formed, `block_rows` rows at a time: each off-diagonal block
/// stands for itself and its mirror image, in the loss and in
/// `∂L/∂Z = (G + Gᵀ) Z = 2 G Z`. Blocks are summed in a fixed order, so the
/// result does not depend on the number of threads.
pub fn recon_loss(
    z: &ArrayView2<f64>,
    target: &CsrMatrix,
    row_subset: Option<&[usize]>,
    opts: &ReconOptions,
) -> Result<ReconLoss> {
    check_target(z, target)?;
    let subset = Subset::new(z.nrows(), row_subset)?;
    let s = subset.rows.len();
    let ones: usize = (0..s).map(|a| subset.positives(target, a).count()).sum();
    let (w, degenerate) = positive_weight(s, ones, opts.reweight);

    let zs = z.select(Axis(0), &subset.rows);
    let block = opts.block_rows.max(1);
    let starts: Vec<usize> = (0..s).step_by(block).collect();
    let run_block = |r0: usize| -> BlockPart {
        let r1 = (r0 + block).min(s);
        let rows = zs.slice(s![r0..r1, ..]);
        let cols = zs.slice(s![r0.., ..]);
        let mut g = rows.dot(&cols.t());
        let (mut diag_loss, mut off_loss) = (0.0, 0.0);
        // Every entry first as a negative: loss softplus(x), gradient sigmoid(x).
        for a in 0..r1 - r0 {
            for (c, x) in g.row_mut(a).iter_mut().enumerate() {
                let e = (-x.abs()).exp();
                let l = x.max(0.0) + e.ln_1p();
                if c < r1 - r0 {
                    diag_loss += l;
                } else {
                    off_loss += l;
                }
                *x = if *x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            }
            // Then swap in the weighted positive terms.
            for b in subset.positives(target, r0 + a).filter(|&b| b >= r0) {
                let x = rows.row(a).dot(&zs.row(b));
                let l = w * softplus(-x) - softplus(x);
                if b < r1 {
                    diag_loss += l;
                } else {
                    off_loss += l;
                }
                g[[a, b - r0]] = w * (sigmoid(x) - 1.0);
            }
        }
        let own = g.dot(&cols);
        let mirror = g.slice(s![.., r1 - r0..]).t().dot(&rows);
        BlockPart {
            loss: diag_loss + 2.0 * off_loss,
            own,
            mirror,
        }
    };

    let norm = (s * s) as f64;
    let mut loss = 0.0;
    let mut acc = Array2::<f64>::zeros(zs.dim());
    // Bounded batches keep the mirror buffers small on large subsets.
    let batch = 2 * rayon::current_num_threads().max(1);
    for chunk in starts.chunks(batch) {
        let parts: Vec<BlockPart> = chunk.par_iter().map(|&r0| run_block(r0)).collect();
        for (&r0, part) in chunk.iter().zip(parts) {
            let r1 = (r0 + block).min(s);
            loss += part.loss;
            acc.slice_mut(s![r0..r1, ..]).scaled_add(1.0, &part.own);
            acc.slice_mut(s![r1.., ..]).scaled_add(1.0, &part.mirror);
        }
    }
    let mut grad_z = Array2::zeros(z.dim());
    for (a, row) in acc.rows().into_iter().enumerate() {
        grad_z.row_mut(subset.rows[a]).assign(&row.mapv(|g| 2.0 * g / norm));
    }
    Ok(ReconLoss {
        loss: loss / norm,
        grad_z,
        pos_weight: w,
        degenerate,
    })
}

struct BlockPart {
    loss: f64,
    /// `G Z` for the block's own rows, over columns from the block start on.
    own: Array2<f64>,
    /// Mirrored contribution to the rows after the block.
    mirror: Array2<f64>,
}

/// Dense reference version of [`recon_loss`]: the loss and the full
/// `|S| × |S|` gradient with respect to the logits. Intended for small graphs.
pub fn recon_logit_grad(
    z: &ArrayView2<f64>,
    target: &CsrMatrix,
    row_subset: Option<&[usize]>,
    reweight: bool,
) -> Result<(f64, Array2<f64>)> {
    check_target(z, target)?;
    let subset = Subset::new(z.nrows(), row_subset)?;
    let s = subset.rows.len();
    let mut t = Array2::<f64>::zeros((s, s));
    for a in 0..s {
        for b in subset.positives(target, a) {
            t[[a, b]] = 1.0;
        }
    }
    let ones = t.iter().filter(|&&v| v == 1.0).count();
    let (w, _) = positive_weight(s, ones, reweight);
    let zs = z.select(Axis(0), &subset.rows);
    let logits = zs.dot(&zs.t());
    let norm = (s * s) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((s, s));
    Zip::from(&mut grad)
        .and(&logits)
        .and(&t)
        .for_each(|g, &x, &y| {
            loss += w * y * softplus(-x) + (1.0 - y) * softplus(x);
            *g = (w * y * (sigmoid(x) - 1.0) + (1.0 - y) * sigmoid(x)) / norm;
        });
    Ok((loss / norm, grad))
}

#[derive(Debug, Clone)]
pub struct KlLoss {
    pub value: f64,
    pub grad_mu: Array2<f64>,
    pub grad_log_sigma: Array2<f64>,
}

/// KL divergence of `N(mu, diag(sigma^2))` from `N(0, I)`, summed over latent
/// dimensions and averaged over nodes.
pub fn kl_loss(mu: &Array2<f64>, log_sigma: &Array2<f64>) -> Result<KlLoss> {
    kl_loss_rows(mu, log_sigma, None)
}

/// [`kl_loss`] restricted to the rows in `row_subset`, averaged over that subset.
pub fn kl_loss_rows(
    mu: &Array2<f64>,
    log_sigma: &Array2<f64>,
    row_subset: Option<&[usize]>,
) -> Result<KlLoss> {
    if mu.dim() != log_sigma.dim() {
        return Err(Error::Shape(format!(
            "mu is {:?}, log_sigma is {:?}",
            mu.dim(),
            log_sigma.dim()
        )));
    }
    if mu.iter().chain(log_sigma.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("KL inputs".into()));
    }
    let subset = Subset::new(mu.nrows(), row_subset)?;
    let count = subset.rows.len() as f64;
    let mut value = 0.0;
    let mut grad_mu = Array2::zeros(mu.dim());
    let mut grad_log_sigma = Array2::zeros(mu.dim());
    for &i in &subset.rows {
        for ((&m, &ls), (gm, gs)) in mu
            .row(i)
            .iter()
            .zip(log_sigma.row(i))
            .zip(grad_mu.row_mut(i).iter_mut().zip(grad_log_sigma.row_mut(i).iter_mut()))
        {
            let var = (2.0 * ls).exp();
            value += -0.5 * (1.0 + 2.0 * ls - m * m - var);
            *gm = m / count;
            *gs = (var - 1.0) / count;
        }
    }
    Ok(KlLoss {
        value: value / count,
        grad_mu,
        grad_log_sigma,
    })
}

/// How the KL term is weighted against the reconstruction term in the VAE objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum KlScale {
    /// `recon + kl / |S|`: both terms are per-entry averages over the `|S|²` pairs.
    #[default]
    PerEntry,
    /// `recon + kl`: node-averaged KL added as is.
    PerNode,
}

impl KlScale {
    pub fn weight(self, subset_size: usize) -> f64 {
        match self {
            KlScale::PerEntry => 1.0 / subset_size as f64,
            KlScale::PerNode => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ElboLoss {
    pub total: f64,
    pub recon: ReconLoss,
    pub kl: KlLoss,
    /// Multiplier applied to `kl.value` (and its gradients) inside `total`.
    pub kl_weight: f64,
}

/// Single-sample negative ELBO: reconstruction of the sampled `Z` plus the weighted KL term.
pub fn elbo_loss(
    encoding: &Encoding,
    target: &CsrMatrix,
    row_subset: Option<&[usize]>,
    opts: &ReconOptions,
    kl_scale: KlScale,
) -> Result<ElboLoss> {
    let Encoding::Vae { mu, log_sigma, z, .. } = encoding else {
        return Err(Error::InvalidArgument("ELBO needs a variational encoding".into()));
    };
    let recon = recon_loss(&z.view(), target, row_subset, opts)?;
    let kl = kl_loss_rows(mu, log_sigma, row_subset)?;
    let size = row_subset.map_or(z.nrows(), <[usize]>::len);
    let kl_weight = kl_scale.weight(size);
    Ok(ElboLoss {
        total: recon.loss + kl_weight * kl.value,
        recon,
        kl,
        kl_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalized_adjacency, Graph};
    use ndarray::array;

    fn single_edge() -> NormalizedAdjacency {
        normalized_adjacency(&Graph::from_edges(2, [(0, 1)]).unwrap())
    }

    #[test]
    fn kind_round_trips_through_strings() {
        for k in [ModelKind::LinearAe, ModelKind::LinearVae, ModelKind::GcnAe, ModelKind::GcnVae] {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
        assert!("mlp".parse::<ModelKind>().is_err());
    }

    #[test]
    fn linear_encode_single_edge() {
        let p = ParamSet::LinearAe { w: array![[1.0], [0.0]] };
        let enc = linear_encode(&single_edge(), &p, None).unwrap();
        assert_eq!(enc.z(), &array![[0.5], [0.5]]);
    }

    #[test]
    fn linear_encode_selector_weights() {
        let g = Graph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let a = normalized_adjacency(&g);
        let w = Array2::from_shape_fn((4, 2), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let z = linear_encode(&a, &ParamSet::LinearAe { w }, None).unwrap();
        let dense = a.matrix().to_dense();
        assert_eq!(z.z(), &dense.slice(s![.., 0..2]).to_owned());
    }

    #[test]
    fn identity_features_match_featureless() {
        let g = Graph::from_edges(4, [(0, 1), (1, 2), (0, 3)]).unwrap();
        let a = normalized_adjacency(&g);
        let w = array![[0.1, -0.2], [0.3, 0.4], [-0.5, 0.6], [0.7, 0.8]];
        let p = ParamSet::LinearAe { w };
        let plain = linear_encode(&a, &p, None).unwrap();
        let eye = Array2::eye(4);
        let with_x = linear_encode(&a, &p, Some(&eye)).unwrap();
        assert!(plain.z().abs_diff_eq(with_x.z(), 1e-15));
    }

    #[test]
    fn encoders_reject_shape_and_kind_mismatch() {
        let a = single_edge();
        let p = ParamSet::LinearAe { w: Array2::zeros((3, 2)) };
        assert!(matches!(linear_encode(&a, &p, None), Err(Error::Shape(_))));
        let vae = ParamSet::LinearVae {
            w_mu: Array2::zeros((2, 2)),
            w_sigma: Array2::zeros((2, 2)),
        };
        assert!(linear_encode(&a, &vae, None).is_err());
        let one_layer = ParamSet::GcnAe { layers: vec![Array2::zeros((2, 2))] };
        assert!(gcn_encode(&a, &one_layer, None, 0).is_err());
    }

    #[test]
    fn vae_zero_sigma_weights_and_zero_noise() {
        let a = single_edge();
        let p = ParamSet::LinearVae {
            w_mu: array![[1.0], [2.0]],
            w_sigma: Array2::zeros((2, 1)),
        };
        let input = EncoderInput::new(&a, None).unwrap();
        let enc = encode(&input, &p, Some(&Array2::zeros((2, 1))), Activation::Relu).unwrap();
        let Encoding::Vae { mu, log_sigma, z, .. } = &enc else { unreachable!() };
        assert_eq!(log_sigma, &Array2::<f64>::zeros((2, 1)));
        assert_eq!(z, mu);
    }

    #[test]
    fn vae_mean_matches_ae_output() {
        let a = single_edge();
        let w = array![[0.3, -1.0], [2.0, 0.5]];
        let ae = linear_encode(&a, &ParamSet::LinearAe { w: w.clone() }, None).unwrap();
        let vae = linear_vae_encode(
            &a,
            &ParamSet::LinearVae {
                w_mu: w,
                w_sigma: array![[0.1, 0.2], [0.3, 0.4]],
            },
            None,
            11,
        )
        .unwrap();
        assert_eq!(vae.embedding(), ae.z());
    }

    #[test]
    fn gcn_edgeless_graph_multiplies_weights() {
        let a = normalized_adjacency(&Graph::from_edges(2, []).unwrap());
        let w0 = array![[1.0, 2.0], [0.5, 0.0]];
        let w1 = array![[3.0], [1.0]];
        let p = ParamSet::GcnAe { layers: vec![w0.clone(), w1.clone()] };
        let z = gcn_encode(&a, &p, None, 0).unwrap();
        assert_eq!(z.z(), &w0.dot(&w1));
    }

    #[test]
    fn gcn_zero_weights_give_zero() {
        let a = single_edge();
        let p = ParamSet::GcnAe {
            layers: vec![Array2::zeros((2, 3)), Array2::zeros((3, 2))],
        };
        assert_eq!(gcn_encode(&a, &p, None, 0).unwrap().z(), &Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn gcn_two_layer_hand_computation() {
        // Ã = [[.5,.5],[.5,.5]], W0 = [[1],[-3]], W1 = [[2]].
        // Ã W0 = [[-1],[-1]] -> ReLU -> 0, so Z = 0.
        let a = single_edge();
        let p = ParamSet::GcnAe { layers: vec![array![[1.0], [-3.0]], array![[2.0]]] };
        assert_eq!(gcn_encode(&a, &p, None, 0).unwrap().z(), &array![[0.0], [0.0]]);
        // W0 = [[1],[3]]: Ã W0 = [[2],[2]]; Ã (H W1) = [[4],[4]].
        let p = ParamSet::GcnAe { layers: vec![array![[1.0], [3.0]], array![[2.0]]] };
        let z = gcn_encode(&a, &p, None, 0).unwrap();
        assert!(z.z().abs_diff_eq(&array![[4.0], [4.0]], 1e-12));
    }

    #[test]
    fn decoder_values() {
        let z = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        assert_eq!(decode_pairs(&z, &[(0, 1)]).unwrap(), vec![0.5]);
        let r = 3f64.ln().sqrt();
        let z = array![[r], [r]];
        let s = decode_pairs(&z, &[(0, 1), (1, 0)]).unwrap();
        assert!((s[0] - 0.75).abs() < 1e-15);
        assert_eq!(s[0], s[1]);
        assert!(matches!(decode_pairs(&z, &[(0, 2)]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn stable_logistic_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
        assert!((softplus(500.0) - 500.0).abs() < 1e-12);
        assert!(softplus(-500.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn recon_identity_target_zero_embedding() {
        let target = CsrMatrix::identity(2);
        let z = Array2::zeros((2, 3));
        let r = recon_loss(&z.view(), &target, None, &ReconOptions::default()).unwrap();
        assert_eq!(r.pos_weight, 1.0);
        assert!((r.loss - 2f64.ln()).abs() < 1e-15);
        assert!((r.loss - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn recon_degenerate_target_uses_unit_weight() {
        let target = CsrMatrix::identity(1);
        let r = recon_loss(&array![[0.0]].view(), &target, None, &ReconOptions::default()).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.pos_weight, 1.0);
        assert!((r.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn recon_loss_survives_large_logits() {
        let target = CsrMatrix::identity(2);
        let z = array![[22.0, 0.0], [-22.0, 0.0]]; // logits ±484
        let r = recon_loss(&z.view(), &target, None, &ReconOptions::default()).unwrap();
        assert!(r.loss.is_finite());
        assert!(r.grad_z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn recon_perfect_logits_approach_zero() {
        // Two isolated nodes; orthogonal embeddings grow so self-logits dominate.
        let target = CsrMatrix::identity(2);
        let mut last = f64::INFINITY;
        for scale in [1.0, 3.0, 10.0] {
            let z = array![[scale, -scale], [-scale, scale]];
            let r = recon_loss(&z.view(), &target, None, &ReconOptions::default()).unwrap();
            assert!(r.loss < last);
            last = r.loss;
        }
        assert!(last < 1e-40);
    }

    #[test]
    fn doubling_positive_weight_doubles_positive_term() {
        let target = CsrMatrix::from_triplets(3, 3, [(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (0, 1, 1.0), (1, 0, 1.0)]);
        let z = array![[0.3, -0.1], [0.2, 0.4], [-0.5, 0.1]];
        let logits = z.dot(&z.t());
        let dense = target.to_dense();
        let ones = 5.0;
        let w = 4.0 / ones;
        let pos: f64 = Zip::from(&logits).and(&dense).fold(0.0, |acc, &x, &t| acc + t * softplus(-x));
        let neg: f64 = Zip::from(&logits).and(&dense).fold(0.0, |acc, &x, &t| acc + (1.0 - t) * softplus(x));
        let r = recon_loss(&z.view(), &target, None, &ReconOptions::default()).unwrap();
        assert!((r.loss * 9.0 - (w * pos + neg)).abs() < 1e-12);
        // The same loss with 2w differs by exactly w * pos / 9.
        let doubled = (2.0 * w * pos + neg) / 9.0;
        assert!((doubled - r.loss - w * pos / 9.0).abs() < 1e-12);
    }

    #[test]
    fn kl_values() {
        let k = kl_loss(&Array2::zeros((3, 2)), &Array2::zeros((3, 2))).unwrap();
        assert_eq!(k.value, 0.0);
        let k = kl_loss(&array![[1.0]], &array![[0.0]]).unwrap();
        assert_eq!(k.value, 0.5);
        assert_eq!(k.grad_mu, array![[1.0]]);
        assert_eq!(k.grad_log_sigma, array![[0.0]]);
        assert!(kl_loss(&array![[f64::NAN]], &array![[0.0]]).is_err());
        assert!(kl_loss(&array![[1.0, 2.0]], &array![[0.0]]).is_err());
    }

    #[test]
    fn elbo_requires_vae_encoding() {
        let enc = Encoding::Ae { z: array![[0.0]] };
        assert!(elbo_loss(&enc, &CsrMatrix::identity(1), None, &ReconOptions::default(), KlScale::PerEntry).is_err());
    }

    #[test]
    fn elbo_with_prior_posterior_is_recon() {
        let noise = array![[0.7, -0.2]];
        let enc = reparameterize(Array2::zeros((1, 2)), Array2::zeros((1, 2)), noise).unwrap();
        let target = CsrMatrix::identity(1);
        let e = elbo_loss(&enc, &target, None, &ReconOptions::default(), KlScale::PerNode).unwrap();
        assert_eq!(e.kl.value, 0.0);
        assert_eq!(e.total, e.recon.loss);
    }

    #[test]
    fn param_validation() {
        let bad = ParamSet::GcnAe {
            layers: vec![Array2::zeros((4, 3)), Array2::zeros((2, 2))],
        };
        assert!(matches!(bad.validate(), Err(Error::Shape(_))));
        let nan = ParamSet::LinearAe { w: array![[f64::NAN]] };
        assert!(matches!(nan.validate(), Err(Error::NonFinite(_))));
        let vae = ParamSet::GcnVae {
            trunk: vec![Array2::zeros((4, 3))],
            sigma_trunk: None,
            head_mu: Array2::zeros((3, 2)),
            head_sigma: Array2::zeros((3, 2)),
        };
        vae.validate().unwrap();
        assert_eq!(vae.depth(), 2);
        assert_eq!(vae.num_parameters(), 12 + 12);
    }
}
