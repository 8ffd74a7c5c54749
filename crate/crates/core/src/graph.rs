//! Directed k-nearest-neighbor graphs over patch-token features.

use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Cosine,
}

impl DistanceMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Cosine => "cosine",
        }
    }

    /// Default neighbor count for this metric.
    pub fn default_k(self) -> usize {
        match self {
            DistanceMetric::Euclidean => 20,
            DistanceMetric::Cosine => 3,
        }
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "cosine" => Ok(DistanceMetric::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

/// Pairwise euclidean distances or cosine similarities, `(N, N)`, exactly symmetric.
///
/// A zero-norm row has cosine similarity -1 with every node, itself included.
pub fn pairwise_scores(features: ArrayView2<'_, f64>, metric: DistanceMetric) -> Array2<f64> {
    let n = features.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    match metric {
        DistanceMetric::Euclidean => {
            for i in 0..n {
                let a = features.row(i);
                for j in (i + 1)..n {
                    let b = features.row(j);
                    let d = a
                        .iter()
                        .zip(b.iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    out[[i, j]] = d;
                    out[[j, i]] = d;
                }
            }
        }
        DistanceMetric::Cosine => {
            let norms: Vec<f64> = features
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            for i in 0..n {
                out[[i, i]] = if norms[i] > 0.0 { 1.0 } else { -1.0 };
                for j in (i + 1)..n {
                    let s = if norms[i] > 0.0 && norms[j] > 0.0 {
                        let dot: f64 = features.row(i).dot(&features.row(j));
                        (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                    } else {
                        -1.0
                    };
                    out[[i, j]] = s;
                    out[[j, i]] = s;
                }
            }
        }
    }
    out
}

/// Directed graph where edge `(i, j)` means "j is a neighbor of i".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    num_nodes: usize,
    /// Neighbors per node for graphs built by [`knn_graph`]; `None` otherwise.
    k: Option<usize>,
    /// Grouped by source; within a group ordered nearest first.
    edges: Vec<(usize, usize)>,
}

impl KnnGraph {
    /// Graph from an explicit edge list; rejects self-loops and out-of-range nodes.
    pub fn from_edges(num_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        for &(i, j) in &edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::InvalidArgument(format!(
                    "edge ({i}, {j}) out of range for {num_nodes} nodes"
                )));
            }
            if i == j {
                return Err(Error::InvalidArgument(format!("self-loop on node {i}")));
            }
        }
        Ok(Self {
            num_nodes,
            k: None,
            edges,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn k(&self) -> Option<usize> {
        self.k
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbor lists `N(i)` for every node.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_nodes];
        for &(i, j) in &self.edges {
            out[i].push(j);
        }
        out
    }

    /// Adds every missing reverse edge. The result is no longer k-regular.
    pub fn symmetrized(&self) -> KnnGraph {
        let mut adj = vec![vec![false; self.num_nodes]; self.num_nodes];
        for &(i, j) in &self.edges {
            adj[i][j] = true;
        }
        let mut edges = self.edges.clone();
        for &(i, j) in &self.edges {
            if !adj[j][i] {
                adj[j][i] = true;
                edges.push((j, i));
            }
        }
        edges.sort_by_key(|&(i, _)| i);
        KnnGraph {
            num_nodes: self.num_nodes,
            k: None,
            edges,
        }
    }

    /// Debug export: one `i j` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for (i, j) in &self.edges {
            let _ = writeln!(s, "{i} {j}");
        }
        s
    }

    pub fn from_edge_list(num_nodes: usize, text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(i)), Some(Ok(j)), None) => edges.push((i, j)),
                _ => {
                    return Err(Error::format(
                        "edge list",
                        format!("line {}: expected `i j`", lineno + 1),
                    ))
                }
            }
        }
        Self::from_edges(num_nodes, edges)
    }
}

/// Ranking key: smaller is nearer. `-0.0` is folded into `0.0` and NaN ranks last.
fn rank_key(score: f64, metric: DistanceMetric) -> f64 {
    let key = match metric {
        DistanceMetric::Euclidean => score,
        DistanceMetric::Cosine => -score,
    };
    if key.is_nan() {
        f64::INFINITY
    } else {
        key + 0.0
    }
}

fn nearer(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Builds the directed KNN graph: for each node its `k` nearest other nodes
/// (smallest distance or largest similarity), ties broken by lower index.
pub fn knn_graph(features: ArrayView2<'_, f64>, k: usize, metric: DistanceMetric) -> Result<KnnGraph> {
    let n = features.nrows();
    if k < 1 || k + 1 > n {
        return Err(Error::InvalidK {
            k,
            min: 1,
            max: n.saturating_sub(1),
        });
    }
    let scores = pairwise_scores(features, metric);
    let mut edges = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (rank_key(scores[[i, j]], metric), j)),
        );
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, nearer);
            cand.truncate(k);
        }
        cand.sort_unstable_by(nearer);
        edges.extend(cand.iter().map(|&(_, j)| (i, j)));
    }
    Ok(KnnGraph {
        num_nodes: n,
        k: Some(k),
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn edge_set(g: &KnnGraph) -> Vec<(usize, usize)> {
        let mut e = g.edges().to_vec();
        e.sort();
        e
    }

    #[test]
    fn euclidean_three_four_five() {
        let f = array![[0.0, 0.0], [3.0, 4.0]];
        let s = pairwise_scores(f.view(), DistanceMetric::Euclidean);
        assert_eq!(s[[0, 1]], 5.0);
        assert_eq!(s[[1, 0]], 5.0);
        assert_eq!(s[[0, 0]], 0.0);
    }

    #[test]
    fn cosine_parallel_and_orthogonal() {
        let s = pairwise_scores(array![[1.0, 0.0], [2.0, 0.0]].view(), DistanceMetric::Cosine);
        assert!((s[[0, 1]] - 1.0).abs() < 1e-15);
        let s = pairwise_scores(array![[1.0, 0.0], [0.0, 1.0]].view(), DistanceMetric::Cosine);
        assert_eq!(s[[0, 1]], 0.0);
        assert_eq!(s[[0, 0]], 1.0);
    }

    #[test]
    fn cosine_zero_row_ranks_last() {
        let f = array![[0.0, 0.0], [1.0, 0.0], [-1.0, 0.1]];
        let s = pairwise_scores(f.view(), DistanceMetric::Cosine);
        assert_eq!(s[[0, 1]], -1.0);
        assert_eq!(s[[2, 0]], -1.0);
        // -1 < sim(1, 2) ~ -0.995, so even a nearly opposite row beats the zero row.
        let g = knn_graph(f.view(), 1, DistanceMetric::Cosine).unwrap();
        assert_eq!(g.neighbor_lists(), vec![vec![1], vec![2], vec![1]]);
    }

    #[test]
    fn one_dimensional_example() {
        let f = array![[0.0], [1.0], [3.0]];
        let g = knn_graph(f.view(), 1, DistanceMetric::Euclidean).unwrap();
        assert_eq!(edge_set(&g), vec![(0, 1), (1, 0), (2, 1)]);
    }

    #[test]
    fn two_nodes_link_each_other() {
        let f = array![[1.0, 2.0], [3.0, -1.0]];
        for m in [DistanceMetric::Euclidean, DistanceMetric::Cosine] {
            let g = knn_graph(f.view(), 1, m).unwrap();
            assert_eq!(edge_set(&g), vec![(0, 1), (1, 0)]);
        }
    }

    #[test]
    fn identical_rows_use_lowest_index() {
        let f = array![[2.0, 2.0], [2.0, 2.0], [2.0, 2.0]];
        let g = knn_graph(f.view(), 1, DistanceMetric::Euclidean).unwrap();
        assert_eq!(edge_set(&g), vec![(0, 1), (1, 0), (2, 0)]);
    }

    #[test]
    fn k_out_of_range() {
        let f = Array2::<f64>::zeros((4, 2));
        assert!(matches!(
            knn_graph(f.view(), 4, DistanceMetric::Euclidean),
            Err(Error::InvalidK { .. })
        ));
        assert!(matches!(
            knn_graph(f.view(), 0, DistanceMetric::Euclidean),
            Err(Error::InvalidK { .. })
        ));
    }

    #[test]
    fn symmetrize_adds_reverse_edges() {
        let f = array![[0.0], [1.0], [3.0]];
        let g = knn_graph(f.view(), 1, DistanceMetric::Euclidean).unwrap().symmetrized();
        assert_eq!(edge_set(&g), vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        assert_eq!(g.k(), None);
    }

    #[test]
    fn edge_list_roundtrip() {
        let f = array![[0.0], [1.0], [3.0], [7.0]];
        let g = knn_graph(f.view(), 2, DistanceMetric::Euclidean).unwrap();
        let text = g.to_edge_list();
        assert!(text.starts_with("0 1\n0 2\n"));
        let back = KnnGraph::from_edge_list(4, &text).unwrap();
        assert_eq!(back.edges(), g.edges());
        assert!(KnnGraph::from_edge_list(4, "0 0\n").is_err());
        assert!(KnnGraph::from_edge_list(4, "0 x\n").is_err());
    }
}
