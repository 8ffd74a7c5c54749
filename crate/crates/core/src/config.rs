//! Run configuration: a TOML document with one table per module.
//!
//! Every table and key is optional; missing values take their defaults and
//! unknown keys are rejected. [`RunConfig::dump`] writes the fully resolved
//! configuration back out, so `parse(dump(parse(text))) == parse(text)`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationConfig;
use crate::data::DatasetSpec;
use crate::gnn::GnnConfig;
use crate::graph::DistanceMetric;
use crate::objective::{DistanceConfig, DistanceMode, HeadConfig, LossWeights};
use crate::probe::ProbeConfig;
use crate::train::{Method, TrainConfig};
use crate::vit::EncoderConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Out-degree of every patch node.
    pub k_neighbors: usize,
    pub metric: DistanceMetric,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 20,
            metric: DistanceMetric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the class-token term.
    pub alpha: f64,
    /// Weight of the graph term.
    pub beta: f64,
    pub student_temperature: f64,
    pub teacher_temperature: f64,
    pub center_momentum: f64,
    pub mode: DistanceMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let d = DistanceConfig::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            student_temperature: d.student_temperature,
            teacher_temperature: d.teacher_temperature,
            center_momentum: d.center_momentum,
            mode: d.mode,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn distance(&self) -> DistanceConfig {
        DistanceConfig {
            student_temperature: self.student_temperature,
            teacher_temperature: self.teacher_temperature,
            center_momentum: self.center_momentum,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every random stream is derived from it by name.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub graph: GraphConfig,
    pub gnn: GnnConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub probe: ProbeConfig,
    pub data: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            graph: GraphConfig::default(),
            gnn: GnnConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentationConfig::default(),
            probe: ProbeConfig::default(),
            data: DatasetSpec::default(),
        }
    }
}

/// Line annotations added by [`RunConfig::dump`], keyed by `(table, key)`.
const ANNOTATIONS: &[(&str, &str, &str)] = &[
    ("graph", "k_neighbors", "full-scale setting: 20"),
    ("head", "output_dim", "desk default 4096; full-scale setting: 65536"),
    ("loss", "beta", "full-scale setting: 0.3"),
    ("train", "ema_momentum", "full-scale setting: 0.996"),
    ("train", "batch_size", "full-scale setting: 128"),
];

impl RunConfig {
    /// Parses and validates a configuration document.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::ConfigParse(format!("{}: {e}", path.display())))?;
        Ok((Self::parse(text)?, bytes))
    }

    /// Fully resolved configuration as TOML, annotated with comments.
    pub fn dump(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))?;
        let mut out = String::from("# Resolved configuration. Every key is shown with its effective value.\n");
        let mut table = String::new();
        for line in body.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') {
                table = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
            }
            let key = trimmed.split(" = ").next().unwrap_or("");
            match ANNOTATIONS.iter().find(|(t, k, _)| *t == table && *k == key) {
                Some((_, _, note)) => out.push_str(&format!("{line} # {note}\n")),
                None => {
                    out.push_str(line);
                    out.push('\n');
                }
            }
        }
        Ok(out)
    }

    /// Architecture-defining part of the config; resuming requires a match.
    pub fn architecture(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Arch<'a> {
            method: Method,
            precision: crate::params::Precision,
            encoder: &'a EncoderConfig,
            gnn: &'a GnnConfig,
            head: &'a HeadConfig,
        }
        toml::to_string(&Arch {
            method: self.train.method,
            precision: self.train.precision,
            encoder: &self.encoder,
            gnn: &self.gnn,
            head: &self.head,
        })
        .map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let n = self.encoder.num_patches();
        if self.graph.k_neighbors < 1 || self.graph.k_neighbors + 1 > n {
            return Err(Error::InvalidK {
                k: self.graph.k_neighbors,
                min: 1,
                max: n.saturating_sub(1),
            });
        }
        self.gnn.validate(n)?;
        self.head.validate()?;
        self.loss.weights().validate()?;
        self.loss.distance().validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.augment.output_size != self.encoder.image_size {
            return Err(Error::ConfigValidation(format!(
                "augment.output_size ({}) must equal encoder.image_size ({})",
                self.augment.output_size, self.encoder.image_size
            )));
        }
        if self.augment.mean.len() != self.encoder.in_channels {
            return Err(Error::ConfigValidation(format!(
                "augment.mean has {} entries for {} input channels",
                self.augment.mean.len(),
                self.encoder.in_channels
            )));
        }
        self.probe.validate()?;
        self.data.validate()?;
        Ok(())
    }

    /// A small configuration for smoke runs and tests: 8x8 images, 2x2
    /// patches, width 16, four blocks.
    pub fn tiny() -> Self {
        let mut c = RunConfig::default();
        c.encoder = EncoderConfig {
            image_size: 8,
            patch_size: 2,
            embed_dim: 16,
            depth: 4,
            heads: 2,
            mlp_ratio: 2.0,
            ..EncoderConfig::default()
        };
        c.graph.k_neighbors = 3;
        c.head = HeadConfig {
            hidden_widths: vec![32],
            bottleneck_dim: 8,
            output_dim: 16,
            graph_output_dim: None,
        };
        c.gnn.topk_keep = 8;
        c.train.epochs = 2;
        c.train.batch_size = 4;
        c.train.warmup_epochs = 0;
        c.augment.output_size = 8;
        c.probe.epochs = 20;
        c.probe.batch_size = 16;
        c.data.num_classes = 2;
        c.data.samples_per_class = 8;
        c.data.image_size = 8;
        c
    }
}

/// SHA-256 of the exact bytes a run was configured with.
pub fn config_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
