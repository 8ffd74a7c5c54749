//! Independent reference implementations shared by the integration tests and
//! the acceptance suite. Nothing here calls into the library's graph, GNN or
//! loss code; only plain `Vec`/`f64` arithmetic.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patchgraph::gnn::{Activation, GnnLayerKind};
use patchgraph::graph::{DistanceMetric, KnnGraph};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Features with a deliberate share of duplicated rows and rounded values so
/// that ties actually occur.
pub fn random_features(r: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut x = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        if i > 0 && r.random_bool(0.15) {
            let src = r.random_range(0..i);
            let row = x.row(src).to_owned();
            x.row_mut(i).assign(&row);
            continue;
        }
        for j in 0..d {
            let v: f64 = r.random_range(-2.0..2.0);
            x[[i, j]] = if r.random_bool(0.3) { v.round() } else { v };
        }
    }
    x
}

/// Brute force: every pairwise score computed from scratch, each row fully
/// sorted by (rank key, index), first `k` kept.
pub fn knn_oracle(x: &Array2<f64>, k: usize, metric: DistanceMetric) -> Vec<(usize, usize)> {
    let n = x.nrows();
    let score = |i: usize, j: usize| -> f64 {
        let a = x.row(i);
        let b = x.row(j);
        match metric {
            DistanceMetric::Euclidean => a.iter().zip(b.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt(),
            DistanceMetric::Cosine => {
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return 1.0;
                }
                let dot: f64 = a.iter().zip(b.iter()).map(|(p, q)| p * q).sum();
                -(dot / (na * nb)).clamp(-1.0, 1.0)
            }
        }
    };
    let mut edges = Vec::new();
    for i in 0..n {
        // Symmetric scores: compute with the smaller index first, as a
        // symmetric matrix would hold them.
        let mut row: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (score(i.min(j), i.max(j)) + 0.0, j))
            .collect();
        row.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        edges.extend(row[..k].iter().map(|&(_, j)| (i, j)));
    }
    edges
}

pub type Matrix = Vec<Vec<f64>>;

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            for j in 0..p {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn adjacency(g: &KnnGraph) -> Matrix {
    let n = g.num_nodes();
    let mut a = vec![vec![0.0; n]; n];
    for &(i, j) in g.edges() {
        a[i][j] = 1.0;
    }
    a
}

/// One dense layer: GCN `D^-1/2 (A+I) D^-1/2 X W + b`, SAGE
/// `[X, D^-1 A X] W + b`, GIN `(X + A X) W + b`, with out-degree `D`.
pub fn dense_layer(
    kind: GnnLayerKind,
    a: &Matrix,
    x: &Matrix,
    w: &Matrix,
    b: &[f64],
    activation: Activation,
) -> Matrix {
    let n = a.len();
    let combined: Matrix = match kind {
        GnnLayerKind::Gcn => {
            let mut ah = a.clone();
            for (i, row) in ah.iter_mut().enumerate() {
                row[i] += 1.0;
            }
            let deg: Vec<f64> = ah.iter().map(|r| r.iter().sum()).collect();
            let norm: Matrix = (0..n)
                .map(|i| (0..n).map(|j| ah[i][j] / (deg[i].sqrt() * deg[j].sqrt())).collect())
                .collect();
            matmul(&norm, x)
        }
        GnnLayerKind::Sage => {
            let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
            let mean: Matrix = (0..n)
                .map(|i| (0..n).map(|j| if deg[i] > 0.0 { a[i][j] / deg[i] } else { 0.0 }).collect())
                .collect();
            let agg = matmul(&mean, x);
            x.iter().zip(agg).map(|(r, m)| r.iter().copied().chain(m).collect()).collect()
        }
        GnnLayerKind::Gin => {
            let agg = matmul(a, x);
            x.iter()
                .zip(agg)
                .map(|(r, m)| r.iter().zip(m).map(|(p, q)| p + q).collect())
                .collect()
        }
    };
    let mut h = matmul(&combined, w);
    for row in &mut h {
        for (v, bias) in row.iter_mut().zip(b) {
            *v += bias;
            if activation == Activation::Relu {
                *v = v.max(0.0);
            }
        }
    }
    h
}

pub fn to_matrix(t: &Tensor) -> Matrix {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

pub fn to_tensor(m: &Matrix) -> Tensor {
    Tensor::new(m.clone(), &Device::Cpu).unwrap()
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-scale..scale)).collect())
        .collect()
}

/// `||a - b||_F / ||b||_F`.
pub fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            num += (x - y).powi(2);
            den += y * y;
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// A random directed graph: each node picks `k` distinct other nodes.
pub fn random_graph(r: &mut ChaCha8Rng, n: usize, k: usize) -> KnnGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        for _ in 0..k {
            let pick = others.swap_remove(r.random_range(0..others.len()));
            edges.push((i, pick));
        }
    }
    KnnGraph::from_edges(n, edges).unwrap()
}

/// `-sum p_i log q_i` with `p = softmax(t / tau_t)`, `q = softmax(s / tau_s)`,
/// evaluated directly from the definition.
pub fn cross_entropy_oracle(student: &[f64], teacher: &[f64], tau_s: f64, tau_t: f64) -> f64 {
    let softmax = |v: &[f64], tau: f64| -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    };
    let p = softmax(teacher, tau_t);
    let q = softmax(student, tau_s);
    -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>()
}
