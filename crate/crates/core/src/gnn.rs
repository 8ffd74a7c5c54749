//! Message passing over patch graphs (GCN, GraphSAGE, GIN) and graph-level
//! pooling.
//!
//! Aggregation is expressed as a per-graph message operator `M` of shape
//! `(N, N)` so that `messages = M @ H`; the operator is built from the edge
//! list and treated as a constant (neighbor selection is not differentiated).
//!
//! Layer updates, with `h_i` the node's own row and `m_i` its message:
//!
//! * gcn:  `sigma(m_i W + b)`, `m_i = sum_{j in N(i) + {i}} h_j / sqrt((d_i+1)(d_j+1))`
//! * sage: `sigma([h_i, m_i] W + b)`, `m_i = mean_{j in N(i)} h_j` (zero when empty)
//! * gin:  `sigma((h_i + m_i) W + b)`, `m_i = sum_{j in N(i)} h_j`
//!
//! where `d_i = |N(i)|`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::graph::KnnGraph;
use crate::ops::{linear, sigmoid};
use crate::params::{ParamInit, ParamSet, ParamSource};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnLayerKind {
    #[default]
    Gcn,
    Sage,
    Gin,
}

impl GnnLayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GnnLayerKind::Gcn => "gcn",
            GnnLayerKind::Sage => "sage",
            GnnLayerKind::Gin => "gin",
        }
    }
}

impl std::str::FromStr for GnnLayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(GnnLayerKind::Gcn),
            "sage" => Ok(GnnLayerKind::Sage),
            "gin" => Ok(GnnLayerKind::Gin),
            other => Err(Error::InvalidArgument(format!("unknown gnn layer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    GlobalMean,
    TopkScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnnConfig {
    pub layer: GnnLayerKind,
    pub num_layers: usize,
    /// Hidden and output width; `None` uses the encoder width.
    pub hidden_dim: Option<usize>,
    pub activation: Activation,
    pub pooling: Pooling,
    /// Nodes retained by `topk_score` pooling.
    pub topk_keep: usize,
    /// Add reverse edges to every KNN graph before message passing.
    pub symmetrize: bool,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            layer: GnnLayerKind::Gcn,
            num_layers: 2,
            hidden_dim: None,
            activation: Activation::Relu,
            pooling: Pooling::GlobalMean,
            topk_keep: 16,
            symmetrize: false,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::ConfigValidation("gnn: num_layers must be >= 1".into()));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::ConfigValidation("gnn: hidden_dim must be positive".into()));
        }
        if self.pooling == Pooling::TopkScore && (self.topk_keep == 0 || self.topk_keep > num_nodes) {
            return Err(Error::ConfigValidation(format!(
                "gnn: topk_keep ({}) must lie in 1..={num_nodes}",
                self.topk_keep
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        self.hidden_dim.unwrap_or(input_dim)
    }
}

/// Dense `(N, N)` row-major message operator for one graph.
pub fn message_operator(graph: &KnnGraph, kind: GnnLayerKind) -> Vec<f64> {
    let n = graph.num_nodes();
    let neighbors = graph.neighbor_lists();
    let mut m = vec![0.0; n * n];
    match kind {
        GnnLayerKind::Gcn => {
            let deg: Vec<f64> = neighbors.iter().map(|l| l.len() as f64 + 1.0).collect();
            for (i, list) in neighbors.iter().enumerate() {
                m[i * n + i] += 1.0 / deg[i];
                for &j in list {
                    m[i * n + j] += 1.0 / (deg[i] * deg[j]).sqrt();
                }
            }
        }
        GnnLayerKind::Sage => {
            for (i, list) in neighbors.iter().enumerate() {
                if list.is_empty() {
                    continue;
                }
                let w = 1.0 / list.len() as f64;
                for &j in list {
                    m[i * n + j] += w;
                }
            }
        }
        GnnLayerKind::Gin => {
            for (i, list) in neighbors.iter().enumerate() {
                for &j in list {
                    m[i * n + j] += 1.0;
                }
            }
        }
    }
    m
}

/// Stacked message operators `(B, N, N)` for a batch of same-size graphs.
pub fn message_operators(graphs: &[KnnGraph], kind: GnnLayerKind, dtype: DType) -> Result<Tensor> {
    let n = graphs
        .first()
        .map(|g| g.num_nodes())
        .ok_or_else(|| Error::InvalidArgument("no graphs".into()))?;
    let mut data = Vec::with_capacity(graphs.len() * n * n);
    for g in graphs {
        if g.num_nodes() != n {
            return Err(Error::Dimension("graphs in a batch differ in node count".into()));
        }
        data.extend(message_operator(g, kind));
    }
    Ok(Tensor::from_vec(data, (graphs.len(), n, n), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Neighborhood messages for a single graph, `(N, D)`.
pub fn aggregate(graph: &KnnGraph, node_features: &Tensor, kind: GnnLayerKind) -> Result<Tensor> {
    let (n, _) = node_features.dims2()?;
    if graph.num_nodes() != n {
        return Err(Error::Dimension(format!(
            "graph has {} nodes but features have {n} rows",
            graph.num_nodes()
        )));
    }
    let op = Tensor::from_vec(message_operator(graph, kind), (n, n), &Device::Cpu)?
        .to_dtype(node_features.dtype())?;
    Ok(op.matmul(node_features)?)
}

pub struct GnnLayer {
    kind: GnnLayerKind,
    weight: Tensor,
    bias: Tensor,
    activation: Activation,
}

impl GnnLayer {
    pub fn new(kind: GnnLayerKind, weight: Tensor, bias: Tensor, activation: Activation) -> Self {
        Self {
            kind,
            weight,
            bias,
            activation,
        }
    }

    pub fn kind(&self) -> GnnLayerKind {
        self.kind
    }

    /// Node features `(B, N, D)` and operators `(B, N, N)` for this layer's kind.
    pub fn forward(&self, ops: &Tensor, x: &Tensor) -> Result<Tensor> {
        let msg = ops.matmul(x)?;
        let combined = match self.kind {
            GnnLayerKind::Gcn => msg,
            GnnLayerKind::Sage => Tensor::cat(&[x, &msg], D::Minus1)?,
            GnnLayerKind::Gin => (x + msg)?,
        };
        let h = linear(&combined, &self.weight, Some(&self.bias))?;
        Ok(match self.activation {
            Activation::Relu => h.relu()?,
            Activation::Linear => h,
        })
    }
}

pub struct GnnStack {
    layers: Vec<GnnLayer>,
    pooling: Pooling,
    score: Option<Tensor>,
    topk_keep: usize,
    symmetrize: bool,
}

impl GnnStack {
    pub const PREFIX: &'static str = "gnn";

    fn widths(cfg: &GnnConfig, input_dim: usize) -> Vec<(usize, usize)> {
        let out = cfg.output_dim(input_dim);
        (0..cfg.num_layers)
            .map(|l| {
                let fan_in = if l == 0 { input_dim } else { out };
                let fan_in = match cfg.layer {
                    GnnLayerKind::Sage => 2 * fan_in,
                    _ => fan_in,
                };
                (fan_in, out)
            })
            .collect()
    }

    pub fn init(cfg: &GnnConfig, input_dim: usize, seed: u64, dtype: DType) -> Result<ParamSet> {
        let mut init = ParamInit::new(seed, "init/gnn", dtype);
        for (l, (fan_in, fan_out)) in Self::widths(cfg, input_dim).into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            init.uniform(&format!("gnn.layers.{l}.weight"), &[fan_in, fan_out], bound)?;
            init.constant(&format!("gnn.layers.{l}.bias"), &[fan_out], 0.0)?;
        }
        if cfg.pooling == Pooling::TopkScore {
            let out = cfg.output_dim(input_dim);
            init.uniform("gnn.score", &[out], 1.0 / (out as f64).sqrt())?;
        }
        Ok(init.finish())
    }

    pub fn load(cfg: &GnnConfig, input_dim: usize, src: &impl ParamSource) -> Result<Self> {
        let layers = Self::widths(cfg, input_dim)
            .into_iter()
            .enumerate()
            .map(|(l, (fan_in, fan_out))| {
                Ok(GnnLayer::new(
                    cfg.layer,
                    src.get(&format!("gnn.layers.{l}.weight"), &[fan_in, fan_out])?,
                    src.get(&format!("gnn.layers.{l}.bias"), &[fan_out])?,
                    cfg.activation,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let score = match cfg.pooling {
            Pooling::TopkScore => Some(src.get("gnn.score", &[cfg.output_dim(input_dim)])?),
            Pooling::GlobalMean => None,
        };
        Ok(Self {
            layers,
            pooling: cfg.pooling,
            score,
            topk_keep: cfg.topk_keep,
            symmetrize: cfg.symmetrize,
        })
    }

    pub fn from_layers(layers: Vec<GnnLayer>, pooling: Pooling, score: Option<Tensor>, topk_keep: usize) -> Self {
        Self {
            layers,
            pooling,
            score,
            topk_keep,
            symmetrize: false,
        }
    }

    pub fn layers(&self) -> &[GnnLayer] {
        &self.layers
    }

    /// Applies the configured symmetrization to freshly built graphs.
    pub fn prepare_graphs(&self, graphs: Vec<KnnGraph>) -> Vec<KnnGraph> {
        if self.symmetrize {
            graphs.iter().map(KnnGraph::symmetrized).collect()
        } else {
            graphs
        }
    }

    /// Batched forward over `(B, N, D)` node features with one graph per item.
    pub fn forward_batch(&self, graphs: &[KnnGraph], x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        if graphs.len() != b || graphs.iter().any(|g| g.num_nodes() != n) {
            return Err(Error::Dimension(format!(
                "expected {b} graphs of {n} nodes for node features {:?}",
                x.dims()
            )));
        }
        let mut cache: Vec<(GnnLayerKind, Tensor)> = Vec::new();
        let mut h = x.clone();
        for layer in &self.layers {
            let ops = match cache.iter().find(|(k, _)| *k == layer.kind) {
                Some((_, t)) => t.clone(),
                None => {
                    let t = message_operators(graphs, layer.kind, x.dtype())?;
                    cache.push((layer.kind, t.clone()));
                    t
                }
            };
            h = layer.forward(&ops, &h)?;
        }
        Ok(h)
    }

    /// Graph-level features `(B, D_out)` from per-node outputs `(B, N, D_out)`.
    pub fn pool_batch(&self, h: &Tensor) -> Result<Tensor> {
        match self.pooling {
            Pooling::GlobalMean => global_mean_pool(h),
            Pooling::TopkScore => {
                let w = self.score.as_ref().ok_or_else(|| Error::MissingParam("gnn.score".into()))?;
                let (selected, _) = topk_score_pool_batch(h, w, self.topk_keep)?;
                global_mean_pool(&selected)
            }
        }
    }
}

/// `gnn_forward` for a single graph with features `(N, D)`.
pub fn gnn_forward(stack: &GnnStack, graph: &KnnGraph, node_features: &Tensor) -> Result<Tensor> {
    let (n, d) = node_features.dims2()?;
    let out = stack.forward_batch(std::slice::from_ref(graph), &node_features.reshape((1, n, d))?)?;
    Ok(out.squeeze(0)?)
}

/// Column-wise mean over the node axis (second to last dimension).
pub fn global_mean_pool(node_features: &Tensor) -> Result<Tensor> {
    let rank = node_features.rank();
    if rank < 2 {
        return Err(Error::Dimension("pooling expects at least (N, D)".into()));
    }
    if node_features.dim(rank - 2)? == 0 {
        return Err(Error::EmptyGraph);
    }
    Ok(node_features.mean(rank - 2)?)
}

/// Indices of the `k` highest scores, ties to the lower index, in rank order.
fn top_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Score-gated top-k selection for a single graph: returns the selected rows
/// scaled by `sigmoid(v_i . w)` and their indices, highest score first.
pub fn topk_score_pool(node_features: &Tensor, score_weights: &Tensor, k_pool: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, d) = node_features.dims2()?;
    let (sel, idx) = topk_score_pool_batch(&node_features.reshape((1, n, d))?, score_weights, k_pool)?;
    Ok((sel.squeeze(0)?, idx.into_iter().next().unwrap_or_default()))
}

pub fn topk_score_pool_batch(
    node_features: &Tensor,
    score_weights: &Tensor,
    k_pool: usize,
) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let (b, n, d) = node_features.dims3()?;
    if k_pool == 0 || k_pool > n {
        return Err(Error::InvalidK {
            k: k_pool,
            min: 1,
            max: n,
        });
    }
    let scores = sigmoid(&node_features.broadcast_matmul(&score_weights.reshape((d, 1))?)?)?.reshape((b, n))?;
    let host = scores.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let picks: Vec<Vec<usize>> = host.iter().map(|row| top_indices(row, k_pool)).collect();
    let flat: Vec<u32> = picks.iter().flatten().map(|&i| i as u32).collect();
    let idx = Tensor::from_vec(flat, (b, k_pool), &Device::Cpu)?;
    let rows = node_features.gather(&idx.unsqueeze(2)?.broadcast_as((b, k_pool, d))?.contiguous()?, 1)?;
    let gate = scores.gather(&idx, 1)?.unsqueeze(2)?;
    Ok((rows.broadcast_mul(&gate)?, picks))
}
