//! Ablation sweeps over one configuration axis and their result tables.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::gnn::GnnLayerKind;
use crate::graph::DistanceMetric;
use crate::train::Method;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KNeighbors,
    GnnLayer,
    ProjectionDim,
    AlphaBeta,
    Metric,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::KNeighbors => "k_neighbors",
            SweepAxis::GnnLayer => "gnn_layer",
            SweepAxis::ProjectionDim => "projection_dim",
            SweepAxis::AlphaBeta => "alpha_beta",
            SweepAxis::Metric => "metric",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "k_neighbors" => SweepAxis::KNeighbors,
            "gnn_layer" => SweepAxis::GnnLayer,
            "projection_dim" => SweepAxis::ProjectionDim,
            "alpha_beta" => SweepAxis::AlphaBeta,
            "metric" => SweepAxis::Metric,
            other => return Err(Error::InvalidArgument(format!("unknown sweep axis `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    K(usize),
    /// `None` is the run without a graph branch.
    Layer(Option<GnnLayerKind>),
    Dim(usize),
    AlphaBeta(f64, f64),
    MetricK(DistanceMetric, usize),
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

impl SweepValue {
    pub fn axis(&self) -> SweepAxis {
        match self {
            SweepValue::K(_) => SweepAxis::KNeighbors,
            SweepValue::Layer(_) => SweepAxis::GnnLayer,
            SweepValue::Dim(_) => SweepAxis::ProjectionDim,
            SweepValue::AlphaBeta(..) => SweepAxis::AlphaBeta,
            SweepValue::MetricK(..) => SweepAxis::Metric,
        }
    }

    /// Column label; also used in run directory names.
    pub fn label(&self) -> String {
        match self {
            SweepValue::K(k) => k.to_string(),
            SweepValue::Layer(None) => "no-gnn".into(),
            SweepValue::Layer(Some(l)) => l.as_str().into(),
            SweepValue::Dim(d) => d.to_string(),
            SweepValue::AlphaBeta(a, b) => format!("{}_{}", fmt_num(*a), fmt_num(*b)),
            SweepValue::MetricK(m, k) => format!("{}_{k}", m.as_str()),
        }
    }

    /// Parses one value of `axis`: `20`, `gcn` / `no-gnn`, `4096`, `1:0.3`,
    /// `cosine:3` (a bare metric uses its default K).
    pub fn parse(axis: SweepAxis, s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad {} value `{s}`", axis.as_str()));
        let s = s.trim();
        Ok(match axis {
            SweepAxis::KNeighbors => SweepValue::K(s.parse().map_err(|_| bad())?),
            SweepAxis::GnnLayer => match s {
                "no-gnn" | "none" => SweepValue::Layer(None),
                other => SweepValue::Layer(Some(other.parse().map_err(|_| bad())?)),
            },
            SweepAxis::ProjectionDim => SweepValue::Dim(s.parse().map_err(|_| bad())?),
            SweepAxis::AlphaBeta => {
                let (a, b) = s.split_once(':').ok_or_else(bad)?;
                SweepValue::AlphaBeta(a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)
            }
            SweepAxis::Metric => {
                let (m, k) = match s.split_once(':') {
                    Some((m, k)) => (m, Some(k)),
                    None => (s, None),
                };
                let metric: DistanceMetric = m.parse().map_err(|_| bad())?;
                let k = match k {
                    Some(k) => k.parse().map_err(|_| bad())?,
                    None => metric.default_k(),
                };
                SweepValue::MetricK(metric, k)
            }
        })
    }

    /// `base` with this value applied.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.train.method = Method::DinoSgc;
        match *self {
            SweepValue::K(k) => c.graph.k_neighbors = k,
            SweepValue::Layer(None) => c.train.method = Method::DinoBaseline,
            SweepValue::Layer(Some(l)) => c.gnn.layer = l,
            SweepValue::Dim(d) => c.head.graph_output_dim = Some(d),
            SweepValue::AlphaBeta(a, b) => {
                c.loss.alpha = a;
                c.loss.beta = b;
            }
            SweepValue::MetricK(m, k) => {
                c.graph.metric = m;
                c.graph.k_neighbors = k;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub name: String,
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
}

pub const PRESETS: &[&str] = &["k-neighbors", "gnn-layer", "projection-dim", "loss-weights", "cosine-k"];

impl SweepSpec {
    pub fn new(name: impl Into<String>, axis: SweepAxis, values: Vec<SweepValue>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("sweep needs at least one value".into()));
        }
        if let Some(v) = values.iter().find(|v| v.axis() != axis) {
            return Err(Error::InvalidArgument(format!(
                "value `{}` does not belong to axis {}",
                v.label(),
                axis.as_str()
            )));
        }
        Ok(Self {
            name: name.into(),
            axis,
            values,
        })
    }

    /// Sweeps over the ablation axes: K (Euclidean), GNN layer type,
    /// graph-head projection size, loss weights and K under cosine.
    pub fn preset(name: &str) -> Result<Self> {
        use SweepValue::*;
        let (axis, values) = match name {
            "k-neighbors" => (SweepAxis::KNeighbors, [3, 5, 10, 20, 30].map(K).to_vec()),
            "gnn-layer" => (
                SweepAxis::GnnLayer,
                vec![
                    Layer(None),
                    Layer(Some(GnnLayerKind::Gcn)),
                    Layer(Some(GnnLayerKind::Sage)),
                    Layer(Some(GnnLayerKind::Gin)),
                ],
            ),
            "projection-dim" => (
                SweepAxis::ProjectionDim,
                [512, 1024, 4096, 16384, 65536, 262144].map(Dim).to_vec(),
            ),
            "loss-weights" => (
                SweepAxis::AlphaBeta,
                [(1.0, 0.0), (0.0, 1.0), (1.0, 0.1), (1.0, 0.3), (1.0, 0.5), (1.0, 1.0)]
                    .map(|(a, b)| AlphaBeta(a, b))
                    .to_vec(),
            ),
            "cosine-k" => (
                SweepAxis::Metric,
                [3, 5, 10, 20].map(|k| MetricK(DistanceMetric::Cosine, k)).to_vec(),
            ),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown sweep preset `{other}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Self::new(name, axis, values)
    }

    /// Header rows naming the axis values, in the order given.
    pub fn header_rows(&self) -> Vec<(String, Vec<String>)> {
        let labels = |f: &dyn Fn(&SweepValue) -> String| self.values.iter().map(f).collect::<Vec<_>>();
        match self.axis {
            SweepAxis::KNeighbors => vec![("K".into(), labels(&|v| v.label()))],
            SweepAxis::GnnLayer => vec![("GNN layer".into(), labels(&|v| v.label()))],
            SweepAxis::ProjectionDim => vec![("Dimension".into(), labels(&|v| v.label()))],
            SweepAxis::AlphaBeta => vec![
                (
                    "alpha".into(),
                    labels(&|v| match v {
                        SweepValue::AlphaBeta(a, _) => fmt_num(*a),
                        _ => unreachable!("validated axis"),
                    }),
                ),
                (
                    "beta".into(),
                    labels(&|v| match v {
                        SweepValue::AlphaBeta(_, b) => fmt_num(*b),
                        _ => unreachable!("validated axis"),
                    }),
                ),
            ],
            SweepAxis::Metric => {
                let metrics: Vec<DistanceMetric> = self
                    .values
                    .iter()
                    .map(|v| match v {
                        SweepValue::MetricK(m, _) => *m,
                        _ => unreachable!("validated axis"),
                    })
                    .collect();
                let row = labels(&|v| match v {
                    SweepValue::MetricK(_, k) => k.to_string(),
                    _ => unreachable!("validated axis"),
                });
                if metrics.iter().all(|m| *m == metrics[0]) {
                    vec![(format!("K ({})", metrics[0].as_str()), row)]
                } else {
                    vec![("metric/K".into(), labels(&|v| v.label()))]
                }
            }
        }
    }
}

/// One accuracy per axis value, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub name: String,
    pub header_rows: Vec<(String, Vec<String>)>,
    pub accuracy: Vec<Option<f64>>,
}

impl SweepTable {
    pub fn new(spec: &SweepSpec, accuracy: Vec<Option<f64>>) -> Result<Self> {
        if accuracy.len() != spec.values.len() {
            return Err(Error::Dimension(format!(
                "{} accuracies for {} sweep values",
                accuracy.len(),
                spec.values.len()
            )));
        }
        Ok(Self {
            name: spec.name.clone(),
            header_rows: spec.header_rows(),
            accuracy,
        })
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut rows: Vec<Vec<String>> = self
            .header_rows
            .iter()
            .map(|(name, cells)| std::iter::once(name.clone()).chain(cells.iter().cloned()).collect())
            .collect();
        rows.push(
            std::iter::once("Accuracy".to_string())
                .chain(self.accuracy.iter().map(|a| match a {
                    Some(a) => format!("{a:.2}"),
                    None => "NA".into(),
                }))
                .collect(),
        );
        rows
    }

    pub fn to_csv(&self) -> String {
        self.rows().iter().map(|r| r.join(",") + "\n").collect()
    }

    /// Header rows only, as CSV.
    pub fn header_csv(&self) -> String {
        let rows = self.rows();
        rows[..rows.len() - 1].iter().map(|r| r.join(",") + "\n").collect()
    }

    /// Right-aligned columns separated by two spaces, first column left-aligned.
    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let mut line = format!("{:<w$}", r[0], w = widths[0]);
            for c in 1..cols {
                let _ = write!(line, "  {:>w$}", r[c], w = widths[c]);
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}
