//! Analytic gradients for the four encoder families, Glorot initialization and Adam.

use std::ops::{Deref, DerefMut};

use ndarray::{Array2, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    kl_loss_rows, recon_loss, trunk_forward, Activation, EncoderInput, KlScale, ModelKind,
    ParamSet, ReconOptions,
};
use crate::rng::{rng_for, Stream};
use crate::sparse::CsrMatrix;

/// Gradient of the loss with respect to every matrix of a [`ParamSet`], same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub ParamSet);

impl Deref for GradientSet {
    type Target = ParamSet;

    fn deref(&self) -> &ParamSet {
        &self.0
    }
}

impl DerefMut for GradientSet {
    fn deref_mut(&mut self) -> &mut ParamSet {
        &mut self.0
    }
}

/// Options shared by every loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossOptions {
    pub recon: ReconOptions,
    pub kl_scale: KlScale,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    /// Weighted KL contribution included in `total`; zero for AE kinds.
    pub kl: f64,
    pub degenerate_target: bool,
}

/// Everything one loss/gradient evaluation needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a, 'i> {
    pub input: &'a EncoderInput<'i>,
    pub target: &'a CsrMatrix,
    pub row_subset: Option<&'a [usize]>,
    /// Fixed reparameterization noise, `n × d`; required for VAE kinds.
    pub noise: Option<&'a Array2<f64>>,
    pub opts: LossOptions,
}

/// Gradient of the VAE objective with respect to `mu` and `log_sigma`.
struct LatentGrads {
    mu: Array2<f64>,
    log_sigma: Array2<f64>,
}

fn ae_head(ctx: &LossContext<'_, '_>, z: &Array2<f64>) -> Result<(LossBreakdown, Array2<f64>)> {
    let r = recon_loss(&z.view(), ctx.target, ctx.row_subset, &ctx.opts.recon)?;
    Ok((
        LossBreakdown {
            total: r.loss,
            recon: r.loss,
            kl: 0.0,
            degenerate_target: r.degenerate,
        },
        r.grad_z,
    ))
}

fn vae_head(
    ctx: &LossContext<'_, '_>,
    mu: &Array2<f64>,
    log_sigma: &Array2<f64>,
) -> Result<(LossBreakdown, LatentGrads)> {
    let noise = ctx
        .noise
        .ok_or_else(|| Error::InvalidArgument("variational loss needs a noise matrix".into()))?;
    if noise.dim() != mu.dim() {
        return Err(Error::Shape(format!("noise is {:?}, mu is {:?}", noise.dim(), mu.dim())));
    }
    let sigma = log_sigma.mapv(f64::exp);
    let z = mu + &(&sigma * noise);
    let r = recon_loss(&z.view(), ctx.target, ctx.row_subset, &ctx.opts.recon)?;
    let kl = kl_loss_rows(mu, log_sigma, ctx.row_subset)?;
    let size = ctx.row_subset.map_or(mu.nrows(), <[usize]>::len);
    let kw = ctx.opts.kl_scale.weight(size);

    let mut d_mu = r.grad_z.clone();
    d_mu.scaled_add(kw, &kl.grad_mu);
    let mut d_ls = r.grad_z;
    Zip::from(&mut d_ls)
        .and(&sigma)
        .and(noise)
        .for_each(|g, &s, &e| *g *= s * e);
    d_ls.scaled_add(kw, &kl.grad_log_sigma);

    Ok((
        LossBreakdown {
            total: r.loss + kw * kl.value,
            recon: r.loss,
            kl: kw * kl.value,
            degenerate_target: r.degenerate,
        },
        LatentGrads {
            mu: d_mu,
            log_sigma: d_ls,
        },
    ))
}

fn relu_mask(grad: &mut Array2<f64>, activation: &Array2<f64>) {
    Zip::from(grad).and(activation).for_each(|g, &h| {
        if h <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Backpropagates `d_out = ∂L/∂(Ã H W)` through one propagation layer.
/// Returns `(∂L/∂W, ∂L/∂H)`.
fn layer_backward(
    input: &EncoderInput<'_>,
    h: &Array2<f64>,
    w: &Array2<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let smoothed = input.smooth(d_out);
    (h.t().dot(&smoothed), smoothed.dot(&w.t()))
}

/// Backpropagates `∂L/∂H^(T)` through a ReLU trunk.
fn trunk_backward(
    input: &EncoderInput<'_>,
    layers: &[Array2<f64>],
    hidden: &[Array2<f64>],
    mut d_h: Array2<f64>,
) -> Vec<Array2<f64>> {
    let mut grads = vec![Array2::zeros((0, 0)); layers.len()];
    for l in (0..layers.len()).rev() {
        relu_mask(&mut d_h, &hidden[l]);
        if l == 0 {
            grads[0] = input.first_layer_adjoint(&d_h);
        } else {
            let (dw, dh) = layer_backward(input, &hidden[l - 1], &layers[l], &d_h);
            grads[l] = dw;
            d_h = dh;
        }
    }
    grads
}

/// Loss and its gradient for any model kind.
pub fn loss_and_grad(ctx: &LossContext<'_, '_>, params: &ParamSet) -> Result<(LossBreakdown, GradientSet)> {
    params.validate()?;
    if params.input_dim() != ctx.input.input_dim() {
        return Err(Error::Shape(format!(
            "first weight matrix has {} rows, input dimension is {}",
            params.input_dim(),
            ctx.input.input_dim()
        )));
    }
    let input = ctx.input;
    match params {
        ParamSet::LinearAe { w } => {
            let z = input.first_layer(w);
            let (loss, d_z) = ae_head(ctx, &z)?;
            Ok((
                loss,
                GradientSet(ParamSet::LinearAe {
                    w: input.first_layer_adjoint(&d_z),
                }),
            ))
        }
        ParamSet::LinearVae { w_mu, w_sigma } => {
            let mu = input.first_layer(w_mu);
            let log_sigma = input.first_layer(w_sigma);
            let (loss, d) = vae_head(ctx, &mu, &log_sigma)?;
            Ok((
                loss,
                GradientSet(ParamSet::LinearVae {
                    w_mu: input.first_layer_adjoint(&d.mu),
                    w_sigma: input.first_layer_adjoint(&d.log_sigma),
                }),
            ))
        }
        ParamSet::GcnAe { layers } => {
            let (head, trunk) = layers.split_last().unwrap();
            let hidden = trunk_forward(input, trunk, Activation::Relu);
            let h = hidden.last().unwrap();
            let z = input.propagate(h, head);
            let (loss, d_z) = ae_head(ctx, &z)?;
            let (d_head, d_h) = layer_backward(input, h, head, &d_z);
            let mut grads = trunk_backward(input, trunk, &hidden, d_h);
            grads.push(d_head);
            Ok((loss, GradientSet(ParamSet::GcnAe { layers: grads })))
        }
        ParamSet::GcnVae {
            trunk,
            sigma_trunk,
            head_mu,
            head_sigma,
        } => {
            let hidden = trunk_forward(input, trunk, Activation::Relu);
            let h = hidden.last().unwrap();
            let sigma_hidden = sigma_trunk
                .as_ref()
                .map(|st| trunk_forward(input, st, Activation::Relu));
            let h_sigma = sigma_hidden.as_ref().map_or(h, |hs| hs.last().unwrap());
            let mu = input.propagate(h, head_mu);
            let log_sigma = input.propagate(h_sigma, head_sigma);
            let (loss, d) = vae_head(ctx, &mu, &log_sigma)?;

            let (d_head_mu, d_h_mu) = layer_backward(input, h, head_mu, &d.mu);
            let (d_head_sigma, d_h_sigma) = layer_backward(input, h_sigma, head_sigma, &d.log_sigma);
            let (d_trunk, d_sigma_trunk) = match (sigma_trunk, &sigma_hidden) {
                (Some(st), Some(hs)) => (
                    trunk_backward(input, trunk, &hidden, d_h_mu),
                    Some(trunk_backward(input, st, hs, d_h_sigma)),
                ),
                _ => (trunk_backward(input, trunk, &hidden, d_h_mu + &d_h_sigma), None),
            };
            Ok((
                loss,
                GradientSet(ParamSet::GcnVae {
                    trunk: d_trunk,
                    sigma_trunk: d_sigma_trunk,
                    head_mu: d_head_mu,
                    head_sigma: d_head_sigma,
                }),
            ))
        }
    }
}

fn grad_for(ctx: &LossContext<'_, '_>, params: &ParamSet, kind: ModelKind) -> Result<GradientSet> {
    if params.kind() != kind {
        return Err(Error::InvalidArgument(format!(
            "expected {kind} parameters, got {}",
            params.kind()
        )));
    }
    loss_and_grad(ctx, params).map(|(_, g)| g)
}

pub fn grad_linear_ae(ctx: &LossContext<'_, '_>, params: &ParamSet) -> Result<GradientSet> {
    grad_for(ctx, params, ModelKind::LinearAe)
}

pub fn grad_linear_vae(ctx: &LossContext<'_, '_>, params: &ParamSet) -> Result<GradientSet> {
    grad_for(ctx, params, ModelKind::LinearVae)
}

pub fn grad_gcn_ae(ctx: &LossContext<'_, '_>, params: &ParamSet) -> Result<GradientSet> {
    grad_for(ctx, params, ModelKind::GcnAe)
}

pub fn grad_gcn_vae(ctx: &LossContext<'_, '_>, params: &ParamSet) -> Result<GradientSet> {
    grad_for(ctx, params, ModelKind::GcnVae)
}

/// Layer sizes for [`init_params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// `n` featureless, `f` with features.
    pub input: usize,
    pub hidden: usize,
    pub embedding: usize,
    /// Total propagation layers for GCN kinds (ignored by linear kinds).
    pub layers: usize,
    /// GCN-VAE only: give the log-sigma head its own trunk.
    pub separate_sigma_trunk: bool,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

/// Glorot-uniform weights, deterministic in `seed`.
pub fn init_params(kind: ModelKind, dims: ModelDims, seed: u64) -> Result<ParamSet> {
    if dims.input == 0 || dims.embedding == 0 || (kind.is_gcn() && dims.hidden == 0) {
        return Err(Error::InvalidArgument(format!("zero dimension in {dims:?}")));
    }
    if kind.is_gcn() && dims.layers < 2 {
        return Err(Error::InvalidArgument(format!(
            "GCN encoders need at least 2 layers, got {}",
            dims.layers
        )));
    }
    let mut rng = rng_for(seed, Stream::Init, 0);
    let trunk = |rng: &mut _| -> Vec<Array2<f64>> {
        (0..dims.layers - 1)
            .map(|l| {
                let rows = if l == 0 { dims.input } else { dims.hidden };
                glorot(rows, dims.hidden, rng)
            })
            .collect()
    };
    Ok(match kind {
        ModelKind::LinearAe => ParamSet::LinearAe {
            w: glorot(dims.input, dims.embedding, &mut rng),
        },
        ModelKind::LinearVae => ParamSet::LinearVae {
            w_mu: glorot(dims.input, dims.embedding, &mut rng),
            w_sigma: glorot(dims.input, dims.embedding, &mut rng),
        },
        ModelKind::GcnAe => {
            let mut layers = trunk(&mut rng);
            layers.push(glorot(dims.hidden, dims.embedding, &mut rng));
            ParamSet::GcnAe { layers }
        }
        ModelKind::GcnVae => {
            let trunk_mu = trunk(&mut rng);
            let sigma_trunk = dims.separate_sigma_trunk.then(|| trunk(&mut rng));
            ParamSet::GcnVae {
                trunk: trunk_mu,
                sigma_trunk,
                head_mu: glorot(dims.hidden, dims.embedding, &mut rng),
                head_sigma: glorot(dims.hidden, dims.embedding, &mut rng),
            }
        }
    })
}

/// Adam moment estimates for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .matrices()
            .iter()
            .map(|m| Array2::zeros(m.dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ParamSet, grads: &GradientSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    let gs = grads.matrices();
    let shapes_match = gs.len() == state.m.len()
        && params.matrices().len() == gs.len()
        && params
            .matrices()
            .iter()
            .zip(&gs)
            .zip(&state.m)
            .all(|((p, g), m)| p.dim() == g.dim() && g.dim() == m.dim());
    if !shapes_match {
        return Err(Error::Shape("parameters, gradients and Adam state differ in layout".into()));
    }
    if gs.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("gradient".into()));
    }

    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .matrices_mut()
        .into_iter()
        .zip(gs)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar(v: f64) -> ParamSet {
        ParamSet::LinearAe { w: array![[v]] }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &GradientSet(scalar(1.0)), &mut st, 0.01).unwrap();
        let ParamSet::LinearAe { w } = &p else { unreachable!() };
        assert!((w[[0, 0]] + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_sign_opposes_gradient() {
        for g in [-3.0, -1e-6, 2e-9, 5.0] {
            let mut p = scalar(1.0);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &GradientSet(scalar(g)), &mut st, 0.01).unwrap();
            let ParamSet::LinearAe { w } = &p else { unreachable!() };
            assert_eq!((w[[0, 0]] - 1.0).signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut p = scalar(0.5);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &GradientSet(scalar(1.0)), &mut st, 0.01).unwrap();
        let before = p.clone();
        let (m0, v0) = (st.m[0][[0, 0]], st.v[0][[0, 0]]);
        let mut p2 = p.clone();
        let mut st2 = st.clone();
        // A zero gradient still applies the decayed first moment; compare with
        // the case of a fresh state where nothing moves.
        let mut fresh = scalar(0.5);
        let mut fresh_state = AdamState::new(&fresh);
        adam_step(&mut fresh, &GradientSet(scalar(0.0)), &mut fresh_state, 0.01).unwrap();
        assert_eq!(fresh, scalar(0.5));
        adam_step(&mut p2, &GradientSet(scalar(0.0)), &mut st2, 0.01).unwrap();
        assert!((st2.m[0][[0, 0]] - 0.9 * m0).abs() < 1e-15);
        assert!((st2.v[0][[0, 0]] - 0.999 * v0).abs() < 1e-15);
        assert_ne!(p2, before);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &GradientSet(scalar(f64::NAN)), &mut st, 0.01).is_err());
        assert!(adam_step(&mut p, &GradientSet(scalar(1.0)), &mut st, 0.0).is_err());
        let wide = ParamSet::LinearAe { w: array![[1.0, 2.0]] };
        assert!(adam_step(&mut p, &GradientSet(wide), &mut st, 0.01).is_err());
        assert_eq!(st.t, 0);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let dims = ModelDims {
            input: 50,
            hidden: 8,
            embedding: 4,
            layers: 3,
            separate_sigma_trunk: false,
        };
        for kind in [ModelKind::LinearAe, ModelKind::LinearVae, ModelKind::GcnAe, ModelKind::GcnVae] {
            let a = init_params(kind, dims, 3).unwrap();
            assert_eq!(a, init_params(kind, dims, 3).unwrap());
            assert_ne!(a, init_params(kind, dims, 4).unwrap());
            a.validate().unwrap();
            for m in a.matrices() {
                let limit = (6.0 / (m.nrows() + m.ncols()) as f64).sqrt();
                assert!(m.iter().all(|v| v.abs() <= limit));
            }
        }
        let gcn = init_params(ModelKind::GcnAe, dims, 0).unwrap();
        let shapes: Vec<_> = gcn.matrices().iter().map(|m| m.dim()).collect();
        assert_eq!(shapes, vec![(50, 8), (8, 8), (8, 4)]);
    }

    #[test]
    fn init_rejects_bad_dims() {
        let dims = ModelDims {
            input: 5,
            hidden: 4,
            embedding: 0,
            layers: 2,
            separate_sigma_trunk: false,
        };
        assert!(init_params(ModelKind::LinearAe, dims, 0).is_err());
        let shallow = ModelDims { embedding: 2, layers: 1, ..dims };
        assert!(init_params(ModelKind::GcnAe, shallow, 0).is_err());
        assert!(init_params(ModelKind::LinearAe, shallow, 0).is_ok());
    }
}
