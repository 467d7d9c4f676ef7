mod common;

use std::io::Cursor;
use std::path::Path;

use common::{dense_adjacency, random_graph};
use graphae::graph::{normalized_adjacency, normalized_khop, parse_edge_list};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn dense_normalized(a_plus: &Array2<f64>) -> Array2<f64> {
    let n = a_plus.nrows();
    let deg: Vec<f64> = (0..n).map(|i| a_plus.row(i).sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| a_plus[[i, j]] / (deg[i] * deg[j]).sqrt())
}

fn spectral_radius(m: &Array2<f64>, seed: u64) -> f64 {
    // Power iteration on M², whose top eigenvalue is the squared spectral radius.
    let mut r = common::rng(seed);
    let n = m.nrows();
    let mut x = ndarray::Array1::from_shape_simple_fn(n, || r.random_range(-1.0..1.0));
    let mut lambda = 0.0;
    for _ in 0..3000 {
        let y = m.dot(&m.dot(&x));
        let norm = y.dot(&y).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = x.dot(&y) / x.dot(&x);
        x = y / norm;
    }
    lambda.sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalized_adjacency_matches_dense_formula(seed in any::<u64>(), n in 1usize..=200, p in 0.0f64..0.3) {
        let g = random_graph(n, p, seed);
        let got = normalized_adjacency(&g).matrix().to_dense();
        let expected = dense_normalized(&(dense_adjacency(&g) + Array2::<f64>::eye(n)));
        for i in 0..n {
            for j in 0..n {
                prop_assert!((got[[i, j]] - expected[[i, j]]).abs() <= 1e-15);
                prop_assert_eq!(got[[i, j]], got[[j, i]]);
            }
        }
    }

    #[test]
    fn khop_matches_dense_formula(seed in any::<u64>(), n in 1usize..=60, alpha in 0.0f64..2.0) {
        let g = random_graph(n, 0.15, seed);
        let a = dense_adjacency(&g);
        let expected = dense_normalized(&(&a + &(a.dot(&a) * alpha) + Array2::<f64>::eye(n)));
        let got = normalized_khop(&g, alpha).unwrap().matrix().to_dense();
        let diff = (&got - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(diff <= 1e-14, "{diff:e}");
    }

    #[test]
    fn spectral_radius_is_at_most_one(seed in any::<u64>(), n in 1usize..=100, p in 0.0f64..0.5) {
        let g = random_graph(n, p, seed);
        let rho = spectral_radius(&normalized_adjacency(&g).matrix().to_dense(), seed);
        prop_assert!(rho <= 1.0 + 1e-9, "spectral radius {rho}");
    }

    #[test]
    fn edge_list_is_invariant_to_line_order(seed in any::<u64>(), n in 2usize..40) {
        let mut r = common::rng(seed);
        let tokens: Vec<String> = (0..n).map(|i| format!("node{}_{}", r.random_range(0..1000), i)).collect();
        let mut lines: Vec<String> = (0..3 * n)
            .map(|_| {
                let (u, v) = (r.random_range(0..n), r.random_range(0..n));
                format!("{} {}", tokens[u], tokens[v])
            })
            .filter(|l| { let t: Vec<&str> = l.split(' ').collect(); t[0] != t[1] })
            .collect();
        prop_assume!(!lines.is_empty());
        let parse = |lines: &[String]| parse_edge_list(Cursor::new(lines.join("\n")), Path::new("mem"), false).unwrap();
        let first = parse(&lines);
        lines.shuffle(&mut r);
        let second = parse(&lines);
        prop_assert_eq!(first.token_edge_set(), second.token_edge_set());
        prop_assert_eq!(first.m(), second.m());
    }
}

#[test]
fn isolated_nodes_keep_unit_self_loop() {
    let g = graphae::Graph::from_edges(3, [(0, 1)]).unwrap();
    let a = normalized_adjacency(&g);
    assert_eq!(a.matrix().get(2, 2), 1.0);
    assert_eq!(a.degrees()[2], 1.0);
}
