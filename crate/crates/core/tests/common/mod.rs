#![allow(dead_code)]

use moenav::envgraph::{NavGraph, NodeId};
use rand::seq::SliceRandom;
use rand::Rng;

/// All-pairs shortest distances by Floyd-Warshall over the edge list.
pub fn floyd(g: &NavGraph) -> Vec<Vec<f64>> {
    let n = g.len();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for [a, b] in g.edges() {
        let l = g.edge_length(a, b).unwrap();
        d[a][b] = l;
        d[b][a] = l;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// Minimum over every monotone alignment path, enumerated without memoisation.
pub fn brute_force_dtw(pred: &[NodeId], reference: &[NodeId], d: &[Vec<f64>]) -> f64 {
    fn go(i: usize, j: usize, pred: &[NodeId], r: &[NodeId], d: &[Vec<f64>]) -> f64 {
        let here = d[pred[i]][r[j]];
        if i + 1 == pred.len() && j + 1 == r.len() {
            return here;
        }
        let mut best = f64::INFINITY;
        if i + 1 < pred.len() {
            best = best.min(go(i + 1, j, pred, r, d));
        }
        if j + 1 < r.len() {
            best = best.min(go(i, j + 1, pred, r, d));
        }
        if i + 1 < pred.len() && j + 1 < r.len() {
            best = best.min(go(i + 1, j + 1, pred, r, d));
        }
        here + best
    }
    go(0, 0, pred, reference, d)
}

/// A random walk of exactly `len` nodes (revisits allowed).
pub fn random_walk<R: Rng>(g: &NavGraph, len: usize, rng: &mut R) -> Vec<NodeId> {
    let mut cur = rng.gen_range(0..g.len());
    let mut p = vec![cur];
    while p.len() < len {
        let nbs = g.neighbors(cur).unwrap();
        cur = nbs.choose(rng).unwrap().0;
        p.push(cur);
    }
    p
}
