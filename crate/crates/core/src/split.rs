//! Held-out edge split for link prediction, with negative sampling.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{rng_for, Stream};

pub type Pair = (usize, usize);

/// Train graph plus validation and test positive/negative pair sets.
#[derive(Debug, Clone)]
pub struct EdgeSplit {
    pub train_graph: Graph,
    pub val_pos: Vec<Pair>,
    pub val_neg: Vec<Pair>,
    pub test_pos: Vec<Pair>,
    pub test_neg: Vec<Pair>,
    pub seed: u64,
}

impl PartialEq for EdgeSplit {
    fn eq(&self, other: &Self) -> bool {
        self.train_graph.n() == other.train_graph.n()
            && self.train_graph.edges() == other.train_graph.edges()
            && self.val_pos == other.val_pos
            && self.val_neg == other.val_neg
            && self.test_pos == other.test_pos
            && self.test_neg == other.test_neg
            && self.seed == other.seed
    }
}

/// `round(m * frac)` with halves rounded up.
pub fn held_out_count(m: usize, frac: f64) -> usize {
    (m as f64 * frac + 0.5).floor() as usize
}

fn canonical((u, v): Pair) -> Pair {
    (u.min(v), u.max(v))
}

/// Removes `round(val_frac * m)` validation and `round(test_frac * m)` test
/// edges uniformly at random and pairs each set with as many non-edges of the
/// original graph. Test negatives are drawn first; validation negatives
/// exclude them.
pub fn split_edges(g: &Graph, val_frac: f64, test_frac: f64, seed: u64) -> Result<EdgeSplit> {
    let valid = |f: f64| f.is_finite() && f > 0.0 && f < 1.0;
    if !valid(val_frac) || !valid(test_frac) || val_frac + test_frac >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be in (0, 1) with sum < 1, got {val_frac} and {test_frac}"
        )));
    }
    let m = g.m();
    let n_val = held_out_count(m, val_frac);
    let n_test = held_out_count(m, test_frac);
    if n_val == 0 || n_test == 0 || n_val + n_test > m {
        return Err(Error::InvalidArgument(format!(
            "graph with {m} edges is too small for a {val_frac}/{test_frac} split"
        )));
    }

    let mut rng = rng_for(seed, Stream::Split, 0);
    let mut edges = g.edges().to_vec();
    edges.shuffle(&mut rng);
    let test_pos = edges[..n_test].to_vec();
    let val_pos = edges[n_test..n_test + n_val].to_vec();
    let train_graph = g.with_edges(edges[n_test + n_val..].iter().copied())?;

    let test_neg = sample_negatives_with(g, n_test, &HashSet::new(), &mut rng)?;
    let exclude: HashSet<Pair> = test_neg.iter().copied().collect();
    let val_neg = sample_negatives_with(g, n_val, &exclude, &mut rng)?;

    Ok(EdgeSplit {
        train_graph,
        val_pos,
        val_neg,
        test_pos,
        test_neg,
        seed,
    })
}

/// Uniform sample of `count` distinct unordered non-edges `(u, v)`, `u < v`,
/// avoiding every pair in `exclude`.
pub fn sample_negatives(g: &Graph, count: usize, exclude: &HashSet<Pair>, seed: u64) -> Result<Vec<Pair>> {
    let mut rng = rng_for(seed, Stream::Split, 1);
    sample_negatives_with(g, count, exclude, &mut rng)
}

pub fn sample_negatives_with<R: Rng + ?Sized>(
    g: &Graph,
    count: usize,
    exclude: &HashSet<Pair>,
    rng: &mut R,
) -> Result<Vec<Pair>> {
    let n = g.n();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let non_edges = total_pairs - g.m();
    let excluded_non_edges = exclude
        .iter()
        .map(|&p| canonical(p))
        .filter(|&(u, v)| u != v && v < n && !g.has_edge(u, v))
        .collect::<HashSet<_>>()
        .len();
    let available = non_edges - excluded_non_edges;
    if count > available {
        return Err(Error::InsufficientNonEdges {
            requested: count,
            available,
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }

    let eligible = |p: Pair| !g.has_edge(p.0, p.1) && !exclude.contains(&p) && !exclude.contains(&(p.1, p.0));

    // Rejection sampling stays fast while at least half of all pairs are eligible.
    if 2 * available >= total_pairs {
        let mut chosen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            if u == v {
                continue;
            }
            let p = canonical((u, v));
            if eligible(p) && chosen.insert(p) {
                out.push(p);
            }
        }
        Ok(out)
    } else {
        let mut pool: Vec<Pair> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter(|&p| eligible(p))
            .collect();
        let (picked, _) = pool.partial_shuffle(rng, count);
        Ok(picked.to_vec())
    }
}

const SECTIONS: [&str; 5] = ["train", "val_pos", "val_neg", "test_pos", "test_neg"];

impl EdgeSplit {
    /// Writes `section u v` lines preceded by a `# n=<n> seed=<seed>` header.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        writeln!(out, "# n={} seed={}", self.train_graph.n(), self.seed).unwrap();
        let sections: [&[Pair]; 5] = [
            self.train_graph.edges(),
            &self.val_pos,
            &self.val_neg,
            &self.test_pos,
            &self.test_neg,
        ];
        for (name, pairs) in SECTIONS.iter().zip(sections) {
            for &(u, v) in pairs {
                writeln!(out, "{name} {u} {v}").unwrap();
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a file written by [`EdgeSplit::save`]. Node ids, features and
    /// labels are taken from `original`.
    pub fn load(path: impl AsRef<Path>, original: &Graph) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seed = 0u64;
        let mut sections: [Vec<Pair>; 5] = Default::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(header) = line.strip_prefix('#') {
                for field in header.split_whitespace() {
                    if let Some(s) = field.strip_prefix("seed=") {
                        seed = s
                            .parse()
                            .map_err(|_| Error::parse(path, lineno + 1, "bad seed"))?;
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::parse(path, lineno + 1, "expected `section u v`");
            if toks.len() != 3 {
                return Err(bad());
            }
            let section = SECTIONS.iter().position(|s| *s == toks[0]).ok_or_else(bad)?;
            let u: usize = toks[1].parse().map_err(|_| bad())?;
            let v: usize = toks[2].parse().map_err(|_| bad())?;
            for index in [u, v] {
                if index >= original.n() {
                    return Err(Error::IndexOutOfRange { index, n: original.n() });
                }
            }
            sections[section].push((u, v));
        }
        let [train, val_pos, val_neg, test_pos, test_neg] = sections;
        Ok(EdgeSplit {
            train_graph: original.with_edges(train)?,
            val_pos,
            val_neg,
            test_pos,
            test_neg,
            seed,
        })
    }
}
