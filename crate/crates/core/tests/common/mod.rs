#![allow(dead_code)]

use graphae::graph::{normalized_adjacency, Graph, NormalizedAdjacency};
use graphae::model::{EncoderInput, ModelKind, ParamSet, ReconOptions};
use graphae::optim::{init_params, loss_and_grad, LossContext, LossOptions, ModelDims};
use graphae::model::{gaussian_noise, KlScale};
use graphae::sparse::CsrMatrix;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KINDS: [ModelKind; 4] = [ModelKind::LinearAe, ModelKind::LinearVae, ModelKind::GcnAe, ModelKind::GcnVae];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Erdos-Renyi graph with edge probability `p`.
pub fn random_graph(n: usize, p: f64, seed: u64) -> Graph {
    let mut r = rng(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if r.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::from_edges(n, edges).unwrap()
}

pub fn dense_adjacency(g: &Graph) -> Array2<f64> {
    let mut a = Array2::zeros((g.n(), g.n()));
    for &(u, v) in g.edges() {
        a[[u, v]] = 1.0;
        a[[v, u]] = 1.0;
    }
    a
}

/// One randomly drawn gradient-check problem.
pub struct Instance {
    pub graph: Graph,
    pub adj: NormalizedAdjacency,
    pub features: Option<Array2<f64>>,
    pub target: CsrMatrix,
    pub subset: Option<Vec<usize>>,
    pub noise: Array2<f64>,
    pub params: ParamSet,
    pub opts: LossOptions,
}

impl Instance {
    pub fn draw(kind: ModelKind, seed: u64) -> Instance {
        let mut r = rng(seed);
        let n = r.random_range(3..=30);
        let d = r.random_range(1..=4);
        let p = r.random_range(0.05..0.5);
        let graph = random_graph(n, p, r.random());
        let adj = normalized_adjacency(&graph);
        let features = r.random_bool(0.5).then(|| {
            let f = r.random_range(1..=6);
            Array2::from_shape_simple_fn((n, f), || r.random_range(-1.0..1.0))
        });
        let subset = r.random_bool(0.4).then(|| {
            let k = r.random_range(2..=n);
            let mut nodes: Vec<usize> = (0..n).collect();
            nodes.shuffle(&mut r);
            nodes.truncate(k);
            nodes
        });
        let dims = ModelDims {
            input: features.as_ref().map_or(n, |x| x.ncols()),
            hidden: r.random_range(1..=6),
            embedding: d,
            layers: r.random_range(2..=3),
            separate_sigma_trunk: r.random_bool(0.5),
        };
        let mut params = init_params(kind, dims, r.random()).unwrap();
        let scale = r.random_range(0.5..3.0);
        for m in params.matrices_mut() {
            m.mapv_inplace(|v| v * scale);
        }
        let noise = gaussian_noise(n, d, &mut r);
        let opts = LossOptions {
            recon: ReconOptions {
                reweight: r.random_bool(0.7),
                block_rows: r.random_range(1..=8),
            },
            kl_scale: if r.random_bool(0.5) { KlScale::PerEntry } else { KlScale::PerNode },
        };
        Instance {
            target: graph.adjacency_with_self_loops(),
            graph,
            adj,
            features,
            subset,
            noise,
            params,
            opts,
        }
    }

    pub fn loss(&self, params: &ParamSet) -> f64 {
        let input = EncoderInput::new(&self.adj, self.features.as_ref()).unwrap();
        let ctx = self.context(&input);
        loss_and_grad(&ctx, params).unwrap().0.total
    }

    pub fn gradient(&self) -> ParamSet {
        let input = EncoderInput::new(&self.adj, self.features.as_ref()).unwrap();
        let ctx = self.context(&input);
        loss_and_grad(&ctx, &self.params).unwrap().1 .0
    }

    fn context<'a, 'i>(&'a self, input: &'a EncoderInput<'i>) -> LossContext<'a, 'i> {
        LossContext {
            input,
            target: &self.target,
            row_subset: self.subset.as_deref(),
            noise: Some(&self.noise),
            opts: self.opts,
        }
    }

    /// Whether any ReLU pre-activation changes sign between `params ± h·dir`.
    pub fn crosses_kink(&self, dir: &ParamSet, h: f64) -> bool {
        let trunks: Vec<Vec<&Array2<f64>>> = match (&self.params, dir) {
            (ParamSet::GcnAe { layers }, ParamSet::GcnAe { layers: dl }) => {
                let k = layers.len() - 1;
                vec![layers[..k].iter().collect(), dl[..k].iter().collect()]
            }
            (
                ParamSet::GcnVae { trunk, sigma_trunk, .. },
                ParamSet::GcnVae {
                    trunk: dt,
                    sigma_trunk: ds,
                    ..
                },
            ) => {
                let mut out = vec![trunk.iter().collect(), dt.iter().collect()];
                if let (Some(s), Some(d)) = (sigma_trunk, ds) {
                    out.push(s.iter().collect());
                    out.push(d.iter().collect());
                }
                out
            }
            _ => return false,
        };
        trunks.chunks(2).any(|pair| {
            let lo = self.pre_activations(&pair[0], &pair[1], -h);
            let hi = self.pre_activations(&pair[0], &pair[1], h);
            lo.iter()
                .zip(&hi)
                .any(|(a, b)| a.iter().zip(b).any(|(x, y)| (*x > 0.0) != (*y > 0.0)))
        })
    }

    fn pre_activations(&self, trunk: &[&Array2<f64>], dir: &[&Array2<f64>], h: f64) -> Vec<Array2<f64>> {
        let a = self.adj.matrix().to_dense();
        let mut out = Vec::new();
        let mut hidden: Option<Array2<f64>> = None;
        for (w, dw) in trunk.iter().zip(dir) {
            let w = *w + &(*dw * h);
            let pre = match (&hidden, &self.features) {
                (Some(hm), _) => a.dot(&hm.dot(&w)),
                (None, Some(x)) => a.dot(&x.dot(&w)),
                (None, None) => a.dot(&w),
            };
            hidden = Some(pre.mapv(|v| v.max(0.0)));
            out.push(pre);
        }
        out
    }
}

pub fn random_direction(like: &ParamSet, seed: u64) -> ParamSet {
    let mut r = rng(seed);
    let mut dir = like.zeros_like();
    for m in dir.matrices_mut() {
        m.mapv_inplace(|_| r.random_range(-1.0..1.0));
    }
    dir
}

pub fn axpy(a: f64, x: &ParamSet, y: &ParamSet) -> ParamSet {
    let mut out = y.clone();
    for (o, xm) in out.matrices_mut().into_iter().zip(x.matrices()) {
        o.scaled_add(a, xm);
    }
    out
}

pub fn inner(a: &ParamSet, b: &ParamSet) -> f64 {
    a.matrices().iter().zip(b.matrices()).map(|(x, y)| (*x * y).sum()).sum()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

pub const FD_STEP: f64 = 1e-4;

/// Largest relative error between analytic and central-difference
/// derivatives along a random direction and along single coordinates.
/// `None` when the perturbation would cross a ReLU kink.
pub fn fd_error(inst: &Instance, seed: u64) -> Option<f64> {
    let h = FD_STEP;
    let grad = inst.gradient();
    let mut dirs = vec![random_direction(&inst.params, seed)];
    let mut r = rng(seed ^ 0x5eed);
    for _ in 0..3 {
        let mut unit = inst.params.zeros_like();
        let mats = unit.matrices_mut();
        let k = r.random_range(0..mats.len());
        let m = mats.into_iter().nth(k).unwrap();
        let (i, j) = (r.random_range(0..m.nrows()), r.random_range(0..m.ncols()));
        m[[i, j]] = 1.0;
        dirs.push(unit);
    }
    let mut worst = 0.0f64;
    for dir in &dirs {
        if inst.crosses_kink(dir, h) {
            return None;
        }
        let fd = (inst.loss(&axpy(h, dir, &inst.params)) - inst.loss(&axpy(-h, dir, &inst.params))) / (2.0 * h);
        worst = worst.max(rel_err(fd, inner(&grad, dir)));
    }
    Some(worst)
}

/// Straightforward dense weighted BCE over the subset and its gradient w.r.t. `Z`.
pub fn dense_recon(z: &Array2<f64>, target: &Array2<f64>, subset: &[usize], reweight: bool) -> (f64, Array2<f64>) {
    let s = subset.len();
    let zs = z.select(Axis(0), subset);
    let t = target.select(Axis(0), subset).select(Axis(1), subset);
    let ones = t.sum();
    let total = (s * s) as f64;
    let w = if reweight && ones > 0.0 && ones < total {
        (total - ones) / ones
    } else {
        1.0
    };
    let logits = zs.dot(&zs.t());
    let mut loss = 0.0;
    let mut g = Array2::zeros((s, s));
    for i in 0..s {
        for j in 0..s {
            let x = logits[[i, j]];
            let p = 1.0 / (1.0 + (-x).exp());
            let tij = t[[i, j]];
            loss -= w * tij * p.ln() + (1.0 - tij) * (1.0 - p).ln();
            g[[i, j]] = (-w * tij * (1.0 - p) + (1.0 - tij) * p) / total;
        }
    }
    let gs = (&g + &g.t()).dot(&zs);
    let mut grad = Array2::zeros(z.dim());
    for (a, &i) in subset.iter().enumerate() {
        grad.row_mut(i).assign(&gs.row(a));
    }
    (loss / total, grad)
}

pub fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for &p in pos {
        for &n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// Precision at each positive when negatives precede positives at equal scores.
pub fn brute_ap(pos: &[f64], neg: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (i, &s) in pos.iter().enumerate() {
        let tied_before = pos[..i].iter().filter(|&&x| x == s).count();
        let hits = pos.iter().filter(|&&x| x > s).count() + tied_before + 1;
        let rank = hits + neg.iter().filter(|&&x| x >= s).count();
        sum += hits as f64 / rank as f64;
    }
    sum / pos.len() as f64
}
