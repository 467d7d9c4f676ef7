//! Graph loading, validation and symmetric adjacency normalization.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Undirected, unweighted graph without self-loops.
///
/// Nodes are dense indices `0..n`; `node_ids` keeps the tokens they were read from.
#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adjacency: CsrMatrix,
    node_ids: Vec<String>,
    index_of: HashMap<String, usize>,
    features: Option<Array2<f64>>,
    labels: Option<Vec<usize>>,
}

impl Graph {
    /// Builds a graph over `n` nodes. Self-loops and duplicate pairs (in either
    /// orientation) are dropped. An edgeless graph is allowed here.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut canonical = Vec::new();
        for (u, v) in edges {
            for index in [u, v] {
                if index >= n {
                    return Err(Error::IndexOutOfRange { index, n });
                }
            }
            if u != v {
                canonical.push((u.min(v), u.max(v)));
            }
        }
        canonical.sort_unstable();
        canonical.dedup();

        let adjacency = CsrMatrix::from_triplets(
            n,
            n,
            canonical
                .iter()
                .flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)]),
        );
        let node_ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let index_of = node_ids.iter().cloned().zip(0..).collect();
        Ok(Self {
            n,
            edges: canonical,
            adjacency,
            node_ids,
            index_of,
            features: None,
            labels: None,
        })
    }

    /// Replaces the identifier table. `ids.len()` must equal `n` and ids must be unique.
    pub fn with_node_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n {
            return Err(Error::Shape(format!(
                "{} node ids for {} nodes",
                ids.len(),
                self.n
            )));
        }
        let index_of: HashMap<String, usize> = ids.iter().cloned().zip(0..).collect();
        if index_of.len() != ids.len() {
            return Err(Error::InvalidArgument("duplicate node ids".into()));
        }
        self.node_ids = ids;
        self.index_of = index_of;
        Ok(self)
    }

    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.n {
            return Err(Error::Shape(format!(
                "feature matrix has {} rows, graph has {} nodes",
                features.nrows(),
                self.n
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::Shape(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.n
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_features(mut self) -> Self {
        self.features = None;
        self
    }

    /// Same node set, ids, features and labels over a different edge list.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut g = Graph::from_edges(self.n, edges)?;
        g.node_ids = self.node_ids.clone();
        g.index_of = self.index_of.clone();
        g.features = self.features.clone();
        g.labels = self.labels.clone();
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_index(&self, token: &str) -> Option<usize> {
        self.index_of.get(token).copied()
    }

    pub fn features(&self) -> Option<&Array2<f64>> {
        self.features.as_ref()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency.contains(u, v)
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adjacency.row(u).0.len()
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        self.adjacency.row(u).0
    }

    /// Edge set keyed by original node tokens, each pair ordered lexicographically.
    pub fn token_edge_set(&self) -> HashSet<(String, String)> {
        self.edges
            .iter()
            .map(|&(u, v)| {
                let (a, b) = (&self.node_ids[u], &self.node_ids[v]);
                if a <= b {
                    (a.clone(), b.clone())
                } else {
                    (b.clone(), a.clone())
                }
            })
            .collect()
    }

    /// Binary pattern of `A + I`, the reconstruction target.
    pub fn adjacency_with_self_loops(&self) -> CsrMatrix {
        self.adjacency.add_scaled(&CsrMatrix::identity(self.n), 1.0)
    }
}

/// Reads a whitespace-separated edge list.
///
/// Tokens are mapped to dense indices in first-seen order. Lines starting with
/// `#` and blank lines are skipped. Edges are always stored undirected; with
/// `directed_input` the number of collapsed reciprocal arcs is logged.
pub fn load_edge_list(path: impl AsRef<Path>, directed_input: bool) -> Result<Graph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(BufReader::new(file), path, directed_input)
}

pub fn parse_edge_list(reader: impl BufRead, path: &Path, directed_input: bool) -> Result<Graph> {
    let mut ids: Vec<String> = Vec::new();
    let mut index_of: HashMap<String, usize> = HashMap::new();
    let mut arcs = Vec::new();
    let mut intern = |tok: &str| -> usize {
        if let Some(&i) = index_of.get(tok) {
            return i;
        }
        let i = ids.len();
        ids.push(tok.to_owned());
        index_of.insert(tok.to_owned(), i);
        i
    };

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut toks = trimmed.split_whitespace();
        let (Some(a), Some(b)) = (toks.next(), toks.next()) else {
            return Err(Error::parse(path, lineno + 1, "expected two node tokens"));
        };
        if toks.next().is_some() {
            return Err(Error::parse(path, lineno + 1, "expected exactly two node tokens"));
        }
        let (u, v) = (intern(a), intern(b));
        arcs.push((u, v));
    }

    let n = ids.len();
    if directed_input {
        let arc_set: HashSet<(usize, usize)> = arcs.iter().copied().collect();
        let reciprocal = arc_set
            .iter()
            .filter(|&&(u, v)| u < v && arc_set.contains(&(v, u)))
            .count();
        log::info!("{}: collapsed {reciprocal} reciprocal arc pairs", path.display());
    }
    let g = Graph::from_edges(n, arcs)?.with_node_ids(ids)?;
    if g.m() == 0 {
        return Err(Error::EmptyGraph);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    /// One row per node in dense-index order, comma- or whitespace-separated.
    DenseCsv,
    /// `node feature value` lines.
    SparseTriplet,
}

/// Loads a node feature matrix.
///
/// For triplet files the node column is resolved through `graph`'s identifier
/// table when a graph is given, otherwise parsed as a dense index; the feature
/// count is the largest feature index plus one.
pub fn load_features(
    path: impl AsRef<Path>,
    format: FeatureFormat,
    graph: Option<&Graph>,
) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        FeatureFormat::DenseCsv => parse_dense_features(reader, path, graph.map(Graph::n)),
        FeatureFormat::SparseTriplet => parse_triplet_features(reader, path, graph),
    }
}

fn parse_number(tok: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(path, line, format!("non-numeric value {tok:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite value {tok:?}")));
    }
    Ok(v)
}

fn parse_dense_features(
    reader: impl BufRead,
    path: &Path,
    expected_rows: Option<usize>,
) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let row = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| parse_number(t, path, lineno + 1))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if let Some(n) = expected_rows {
        if rows.len() != n {
            return Err(Error::Shape(format!(
                "{}: {} feature rows for {} nodes",
                path.display(),
                rows.len(),
                n
            )));
        }
    }
    let f = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / f.max(1), f), flat)
        .map_err(|e| Error::Shape(e.to_string()))
}

fn parse_triplet_features(
    reader: impl BufRead,
    path: &Path,
    graph: Option<&Graph>,
) -> Result<Array2<f64>> {
    let mut triplets = Vec::new();
    let mut max_node = 0usize;
    let mut max_feature = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::parse(path, lineno, "expected `node feature value`"));
        }
        let node = resolve_node(toks[0], graph, path, lineno)?;
        let feature: usize = toks[1]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad feature index {:?}", toks[1])))?;
        let value = parse_number(toks[2], path, lineno)?;
        max_node = max_node.max(node);
        max_feature = max_feature.max(feature);
        triplets.push((node, feature, value));
    }
    let n = match graph {
        Some(g) => g.n(),
        None => max_node + 1,
    };
    let f = if triplets.is_empty() { 0 } else { max_feature + 1 };
    let mut x = Array2::zeros((n, f));
    for (i, j, v) in triplets {
        x[[i, j]] += v;
    }
    Ok(x)
}

fn resolve_node(tok: &str, graph: Option<&Graph>, path: &Path, line: usize) -> Result<usize> {
    match graph {
        Some(g) => g
            .node_index(tok)
            .ok_or_else(|| Error::parse(path, line, format!("unknown node {tok:?}"))),
        None => tok
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad node index {tok:?}"))),
    }
}

/// Reads `node label` pairs; every node of `graph` must receive exactly one label.
/// Label tokens are mapped to `0..k` in first-seen order.
pub fn load_labels(path: impl AsRef<Path>, graph: &Graph) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels: Vec<Option<usize>> = vec![None; graph.n()];
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(Error::parse(path, lineno, "expected `node label`"));
        }
        let node = resolve_node(toks[0], Some(graph), path, lineno)?;
        let next = label_ids.len();
        let label = *label_ids.entry(toks[1].to_owned()).or_insert(next);
        if labels[node].replace(label).is_some() {
            return Err(Error::parse(path, lineno, format!("node {:?} labelled twice", toks[0])));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.ok_or_else(|| {
                Error::Shape(format!("node {:?} has no label", graph.node_ids()[i]))
            })
        })
        .collect()
}

/// Scales each nonzero row to unit L1 norm.
pub fn row_normalize(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
}

/// `D^{-1/2} (M + I) D^{-1/2}` with `D` the row sums of `M + I`.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    matrix: CsrMatrix,
    degrees: Vec<f64>,
}

impl NormalizedAdjacency {
    fn from_structure(structure: &CsrMatrix) -> Self {
        let with_loops = structure.add_scaled(&CsrMatrix::identity(structure.n_rows()), 1.0);
        let degrees = with_loops.row_sums();
        let matrix = with_loops.map_values(|i, j, v| v / (degrees[i] * degrees[j]).sqrt());
        Self { matrix, degrees }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// Row sums of the self-looped structure matrix.
    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn n(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn dot(&self, rhs: &ArrayView2<f64>) -> Array2<f64> {
        self.matrix.dot_dense(rhs)
    }
}

pub fn normalized_adjacency(g: &Graph) -> NormalizedAdjacency {
    NormalizedAdjacency::from_structure(g.adjacency())
}

/// Normalization of `A + alpha * A^2`. The diagonal of `A^2` is kept.
pub fn normalized_khop(g: &Graph, alpha: f64) -> Result<NormalizedAdjacency> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "k-hop alpha must be a finite non-negative number, got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Ok(normalized_adjacency(g));
    }
    let a = g.adjacency();
    let m = a.add_scaled(&a.dot_sparse(a), alpha);
    Ok(NormalizedAdjacency::from_structure(&m))
}
