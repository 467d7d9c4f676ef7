//! Link-prediction and clustering metrics, and aggregation over repeated runs.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} scores are empty")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("{name} scores")));
    }
    Ok(())
}

/// Area under the ROC curve, i.e. the Mann-Whitney statistic with ties counted as one half.
///
/// Computed from midranks in `O((p + q) log(p + q))`.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores("positive", pos)?;
    check_scores("negative", neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of ranks of positives, doubled to stay in integers for midranks.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share the midrank (i + 1 + j) / 2.
        let positives = all[i..j].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += positives * (i + 1 + j) as u128;
        i = j;
    }
    let p = pos.len() as u128;
    let q = neg.len() as u128;
    // U = R - p(p+1)/2; doubled: 2R - p(p+1).
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * q) as f64)
}

/// Average precision: the mean, over positives, of the precision at each
/// positive's rank in the descending score order.
///
/// Ties are broken pessimistically: at equal scores, negatives rank ahead of positives.
pub fn average_precision(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores("positive", pos)?;
    if neg.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("negative scores".into()));
    }
    let mut all: Vec<(f64, bool)> = neg
        .iter()
        .map(|&s| (s, false))
        .chain(pos.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &(_, is_pos)) in all.iter().enumerate() {
        if is_pos {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
    /// Lloyd iterations stop once the largest centroid move is at most this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
    /// Inertia reached by each restart, in restart order.
    pub restart_inertia: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus<R: Rng + ?Sized>(x: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let mut dist: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, x.row(first))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, row) in x.rows().into_iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(row, centers.row(c)));
        }
    }
    centers
}

fn lloyd<R: Rng + ?Sized>(x: &Array2<f64>, k: usize, opts: &KMeansOptions, rng: &mut R) -> (Vec<usize>, Array2<f64>, f64) {
    let n = x.nrows();
    let mut centers = kmeans_plus_plus(x, k, rng);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    for _ in 0..opts.max_iter {
        for (i, row) in x.rows().into_iter().enumerate() {
            let (c, d) = nearest(row, &centers);
            labels[i] = c;
            dists[i] = d;
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, row) in x.rows().into_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(1.0, &row);
            counts[labels[i]] += 1;
        }
        // Empty clusters take the point farthest from its current center.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a cluster with at least two points");
                counts[labels[far]] -= 1;
                sums.row_mut(labels[far]).scaled_add(-1.0, &x.row(far));
                labels[far] = c;
                dists[far] = 0.0;
                counts[c] = 1;
                sums.row_mut(c).assign(&x.row(far));
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let new = sums.row(c).mapv(|v| v / counts[c] as f64);
            shift = shift.max(sq_dist(new.view(), centers.row(c)).sqrt());
            centers.row_mut(c).assign(&new);
        }
        if shift <= opts.tol {
            break;
        }
    }
    // Final assignment against the final centers.
    let mut inertia = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let (c, d) = nearest(row, &centers);
        labels[i] = c;
        inertia += d;
    }
    if labels_cover(&labels, k) {
        return (labels, centers, inertia);
    }
    // Reassignment emptied a cluster; keep the last non-empty partition instead.
    repair_empty(x, &mut labels, &mut centers, k);
    let inertia = labels
        .iter()
        .zip(x.rows())
        .map(|(&c, row)| sq_dist(row, centers.row(c)))
        .sum();
    (labels, centers, inertia)
}

fn labels_cover(labels: &[usize], k: usize) -> bool {
    let mut seen = vec![false; k];
    for &l in labels {
        seen[l] = true;
    }
    seen.into_iter().all(|s| s)
}

fn repair_empty(x: &Array2<f64>, labels: &mut [usize], centers: &mut Array2<f64>, k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        let far = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(x.row(a), centers.row(labels[a]))
                    .total_cmp(&sq_dist(x.row(b), centers.row(labels[b])))
                    .then(b.cmp(&a))
            })
            .unwrap();
        labels[far] = empty;
        centers.row_mut(empty).assign(&x.row(far));
    }
    for c in 0..k {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let mean = x.select(Axis(0), &members).mean_axis(Axis(0)).unwrap();
        centers.row_mut(c).assign(&mean);
    }
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// inertia wins. Restart `r` uses a seed derived from `(seed, r)`.
pub fn kmeans(x: &Array2<f64>, k: usize, opts: &KMeansOptions, seed: u64) -> Result<KMeansResult> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={n}")));
    }
    if opts.restarts == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one restart".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let mut best: Option<(Vec<usize>, Array2<f64>, f64)> = None;
    let mut restart_inertia = Vec::with_capacity(opts.restarts);
    for r in 0..opts.restarts {
        let mut rng = rng_for(seed, Stream::KMeans, r as u64);
        let candidate = lloyd(x, k, opts, &mut rng);
        restart_inertia.push(candidate.2);
        if best.as_ref().is_none_or(|b| candidate.2 < b.2) {
            best = Some(candidate);
        }
    }
    let (labels, centers, inertia) = best.unwrap();
    Ok(KMeansResult {
        labels,
        centers,
        inertia,
        restart_inertia,
    })
}

/// Table of `ln(i!)` for `i` in `0..=n`.
fn log_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Expected mutual information of two partitions with the given marginals
/// under the hypergeometric (permutation) model.
pub fn expected_mutual_information(a: &[usize], b: &[usize], n: usize) -> f64 {
    let lf = log_factorials(n);
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (ai as f64 * bj as f64)).ln();
                let log_p = lf[ai] + lf[bj] + lf[n - ai] + lf[n - bj]
                    - lf[n]
                    - lf[nij]
                    - lf[ai - nij]
                    - lf[bj - nij]
                    - lf[n + nij - ai - bj];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information with arithmetic-mean normalization and natural logarithms.
pub fn ami(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::Shape(format!(
            "label vectors have lengths {} and {}",
            labels_a.len(),
            labels_b.len()
        )));
    }
    let n = labels_a.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty labelings".into()));
    }
    let index = |labels: &[usize]| -> (Vec<usize>, Vec<usize>) {
        let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in labels {
            let next = ids.len();
            ids.entry(l).or_insert(next);
        }
        let mapped: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
        let mut counts = vec![0usize; ids.len()];
        for &m in &mapped {
            counts[m] += 1;
        }
        (mapped, counts)
    };
    let (ma, ca) = index(labels_a);
    let (mb, cb) = index(labels_b);
    if (ca.len() == 1 && cb.len() == 1) || (ca.len() == n && cb.len() == n) {
        // Identical trivial partitions.
        return Ok(1.0);
    }
    let mut contingency: HashMap<(usize, usize), usize> = HashMap::new();
    for (&x, &y) in ma.iter().zip(&mb) {
        *contingency.entry((x, y)).or_insert(0) += 1;
    }
    let nf = n as f64;
    let mi: f64 = contingency
        .iter()
        .map(|(&(i, j), &nij)| {
            let x = nij as f64;
            x / nf * (nf * x / (ca[i] as f64 * cb[j] as f64)).ln()
        })
        .sum();
    let emi = expected_mutual_information(&ca, &cb, n);
    let mean_h = 0.5 * (entropy(&ca, n) + entropy(&cb, n));
    let mut denom = mean_h - emi;
    let eps = f64::EPSILON;
    denom = if denom < 0.0 { denom.min(-eps) } else { denom.max(eps) };
    Ok((mi - emi) / denom)
}

/// Mean and sample standard deviation of one metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    /// Set when only one run was available, so `std` is reported as 0.
    pub single_run: bool,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no runs to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok(Summary {
            mean,
            std: 0.0,
            single_run: true,
        });
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(Summary {
        mean,
        std: var.sqrt(),
        single_run: false,
    })
}

/// Outcome of comparing a model against a baseline under both readings of
/// "at least as good, plus or minus one standard deviation".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Competitive {
    /// `mean_a >= mean_b - std_b`.
    pub strict: bool,
    /// `mean_a + std_a >= mean_b - std_b`.
    pub lax: bool,
}

impl Competitive {
    /// Name of the tightest rule that holds, if any.
    pub fn rule_fired(&self) -> Option<&'static str> {
        if self.strict {
            Some("strict")
        } else if self.lax {
            Some("lax")
        } else {
            None
        }
    }
}

/// Whether model `a` is competitive with baseline `b`.
///
/// The primary rule is `strict`: `a`'s mean reaches `b`'s mean minus one of
/// `b`'s standard deviations. `lax` also grants `a` its own deviation.
pub fn competitive(mean_a: f64, std_a: f64, mean_b: f64, std_b: f64) -> Competitive {
    let floor = mean_b - std_b;
    Competitive {
        strict: mean_a >= floor,
        lax: mean_a + std_a >= floor,
    }
}
