//! Projection heads and the student-teacher distillation objective.
//!
//! `H(s, t) = -sum_c softmax((t - center) / tau_t)_c * log_softmax(s / tau_s)_c`,
//! averaged over the batch. The teacher side is always detached.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::ops::{l2_normalize_last, linear, log_softmax_last, softmax_last};
use crate::params::{ParamInit, ParamSet, ParamSource};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden_widths: Vec<usize>,
    pub bottleneck_dim: usize,
    /// Prototype count. 4096 at desk scale; 65536 in the full-size setting.
    pub output_dim: usize,
    /// Prototype count of the graph-branch head; `None` uses `output_dim`.
    pub graph_output_dim: Option<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![512, 512],
            bottleneck_dim: 256,
            output_dim: 4096,
            graph_output_dim: None,
        }
    }
}

impl HeadConfig {
    /// Configuration of the graph-branch head.
    pub fn graph_head(&self) -> HeadConfig {
        HeadConfig {
            output_dim: self.graph_output_dim.unwrap_or(self.output_dim),
            graph_output_dim: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim < 2 || self.graph_output_dim.is_some_and(|d| d < 2) {
            return Err(Error::ConfigValidation("head: output_dim must be >= 2".into()));
        }
        if self.bottleneck_dim == 0 || self.hidden_widths.iter().any(|w| *w == 0) {
            return Err(Error::ConfigValidation("head: widths must be positive".into()));
        }
        Ok(())
    }
}

/// MLP -> unit-length bottleneck -> weight-normalized linear layer (no bias,
/// unit gain), as used for both the class-token and the graph branch.
pub struct ProjectionHead {
    mlp: Vec<(Tensor, Tensor)>,
    last_v: Tensor,
    input_dim: usize,
}

impl ProjectionHead {
    fn widths(cfg: &HeadConfig, input_dim: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden_widths);
        dims.push(cfg.bottleneck_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn init(cfg: &HeadConfig, input_dim: usize, prefix: &str, seed: u64, dtype: DType) -> Result<ParamSet> {
        cfg.validate()?;
        let mut init = ParamInit::new(seed, &format!("init/{prefix}"), dtype);
        for (l, (i, o)) in Self::widths(cfg, input_dim).into_iter().enumerate() {
            init.trunc_normal(&format!("{prefix}.mlp.{l}.weight"), &[i, o], 0.02)?;
            init.constant(&format!("{prefix}.mlp.{l}.bias"), &[o], 0.0)?;
        }
        init.trunc_normal(&format!("{prefix}.last.weight_v"), &[cfg.bottleneck_dim, cfg.output_dim], 0.02)?;
        Ok(init.finish())
    }

    pub fn load(cfg: &HeadConfig, input_dim: usize, prefix: &str, src: &impl ParamSource) -> Result<Self> {
        cfg.validate()?;
        let mlp = Self::widths(cfg, input_dim)
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| {
                Ok((
                    src.get(&format!("{prefix}.mlp.{l}.weight"), &[i, o])?,
                    src.get(&format!("{prefix}.mlp.{l}.bias"), &[o])?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let name = format!("{prefix}.last.weight_v");
        let last_v = src.get(&name, &[cfg.bottleneck_dim, cfg.output_dim])?;
        let min_norm = last_v
            .detach()
            .sqr()?
            .sum(0)?
            .to_dtype(DType::F64)?
            .min(0)?
            .to_scalar::<f64>()?;
        if !(min_norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "`{name}` has a zero direction; weight normalization is undefined"
            )));
        }
        Ok(Self { mlp, last_v, input_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Unit-length bottleneck features `(B, bottleneck)`.
    pub fn bottleneck(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.input_dim {
            return Err(Error::Dimension(format!(
                "projection head expects width {}, got {d}",
                self.input_dim
            )));
        }
        let mut h = x.clone();
        let last = self.mlp.len() - 1;
        for (l, (w, b)) in self.mlp.iter().enumerate() {
            h = linear(&h, w, Some(b))?;
            if l < last {
                h = h.gelu_erf()?;
            }
        }
        l2_normalize_last(&h, 1e-12)
    }

    /// Logits from already normalized bottleneck features.
    pub fn logits_from_bottleneck(&self, z: &Tensor) -> Result<Tensor> {
        let norms = self.last_v.sqr()?.sum_keepdim(0)?.sqrt()?;
        let w = self.last_v.broadcast_div(&norms)?;
        Ok(z.matmul(&w)?)
    }

    /// `p(x)`: logits `(B, output_dim)` for features `(B, input_dim)`.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_from_bottleneck(&self.bottleneck(x)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Cross-entropy against a centered, sharpened teacher.
    #[default]
    CenteredCrossEntropy,
    /// KL(teacher || student) with no centering.
    PlainKl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceConfig {
    pub student_temperature: f64,
    pub teacher_temperature: f64,
    pub center_momentum: f64,
    pub mode: DistanceMode,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self {
            student_temperature: 0.1,
            teacher_temperature: 0.04,
            center_momentum: 0.9,
            mode: DistanceMode::CenteredCrossEntropy,
        }
    }
}

impl DistanceConfig {
    pub fn unit() -> Self {
        Self {
            student_temperature: 1.0,
            teacher_temperature: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.student_temperature > 0.0) || !(self.teacher_temperature > 0.0) {
            return Err(Error::ConfigValidation("loss: temperatures must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(Error::ConfigValidation("loss: center_momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::ConfigValidation("loss: alpha and beta must be >= 0".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::ConfigValidation("loss: alpha and beta cannot both be 0".into()));
        }
        Ok(())
    }
}

/// `alpha * l_ssl + beta * l_sgc`.
pub fn combined_loss(l_ssl: f64, l_sgc: f64, weights: &LossWeights) -> f64 {
    weights.alpha * l_ssl + weights.beta * l_sgc
}

/// Tensor form of [`combined_loss`]; a missing graph term contributes nothing.
pub fn combined_loss_tensor(l_ssl: &Tensor, l_sgc: Option<&Tensor>, weights: &LossWeights) -> Result<Tensor> {
    let a = (l_ssl * weights.alpha)?;
    Ok(match l_sgc {
        Some(g) => (a + (g * weights.beta)?)?,
        None => a,
    })
}

/// Detached teacher distribution `softmax((t - center) / tau_t)`.
pub fn teacher_probs(teacher_logits: &Tensor, cfg: &DistanceConfig, center: Option<&Tensor>) -> Result<Tensor> {
    let t = teacher_logits.detach();
    let t = match (cfg.mode, center) {
        (DistanceMode::CenteredCrossEntropy, Some(c)) => t.broadcast_sub(&c.detach())?,
        _ => t,
    };
    softmax_last(&(t / cfg.teacher_temperature)?)
}

/// Batch-mean distance between student logits and the (gradient-blocked)
/// teacher logits; returns a scalar tensor.
pub fn distance_h(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    cfg: &DistanceConfig,
    center: Option<&Tensor>,
) -> Result<Tensor> {
    if student_logits.dims() != teacher_logits.dims() {
        return Err(Error::Dimension(format!(
            "student logits {:?} vs teacher logits {:?}",
            student_logits.dims(),
            teacher_logits.dims()
        )));
    }
    let rank = student_logits.rank();
    let (s, t) = if rank == 1 {
        (student_logits.unsqueeze(0)?, teacher_logits.unsqueeze(0)?)
    } else {
        (student_logits.clone(), teacher_logits.clone())
    };
    let p = teacher_probs(&t, cfg, center)?;
    let log_q = log_softmax_last(&(s / cfg.student_temperature)?)?;
    let per_row = match cfg.mode {
        DistanceMode::CenteredCrossEntropy => (p * log_q)?.sum(D::Minus1)?.neg()?,
        DistanceMode::PlainKl => {
            // 0 * log 0 := 0
            let log_p = p.clamp(1e-30, 1.0)?.log()?;
            (p * (log_p - log_q)?)?.sum(D::Minus1)?
        }
    };
    Ok(per_row.mean_all()?)
}

/// Mean of `H(student[a], teacher[b])` over all view pairs with `a != b`.
pub fn cross_view_loss(
    student: &[Tensor],
    teacher: &[Tensor],
    cfg: &DistanceConfig,
    center: Option<&Tensor>,
) -> Result<Tensor> {
    if student.len() < 2 || student.len() != teacher.len() {
        return Err(Error::InvalidArgument(format!(
            "need at least two views per network, got {} student / {} teacher",
            student.len(),
            teacher.len()
        )));
    }
    let mut terms = Vec::new();
    for (a, s) in student.iter().enumerate() {
        for (b, t) in teacher.iter().enumerate() {
            if a != b {
                terms.push(distance_h(s, t, cfg, center)?);
            }
        }
    }
    let n = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

/// Class-token loss over per-view logits.
pub fn ssl_cls_loss(
    student_cls_logits: &[Tensor],
    teacher_cls_logits: &[Tensor],
    cfg: &DistanceConfig,
    center: Option<&Tensor>,
) -> Result<Tensor> {
    cross_view_loss(student_cls_logits, teacher_cls_logits, cfg, center)
}

/// Graph-consistency loss: projects per-view pooled graph features through
/// the student and teacher graph heads, then applies the cross-view distance.
/// Unweighted; the weight is applied by [`combined_loss`].
pub fn sgc_loss(
    student_pooled: &[Tensor],
    teacher_pooled: &[Tensor],
    student_head: &ProjectionHead,
    teacher_head: &ProjectionHead,
    cfg: &DistanceConfig,
    center: Option<&Tensor>,
) -> Result<Tensor> {
    let s = student_pooled
        .iter()
        .map(|x| student_head.project(x))
        .collect::<Result<Vec<_>>>()?;
    let t = teacher_pooled
        .iter()
        .map(|x| Ok(teacher_head.project(&x.detach())?.detach()))
        .collect::<Result<Vec<_>>>()?;
    cross_view_loss(&s, &t, cfg, center)
}

/// The patch-average ablation: like [`sgc_loss`] but the graph feature is
/// replaced by the plain mean of the patch tokens `(B, N, D)`.
pub fn patch_mean_loss(
    student_patches: &[Tensor],
    teacher_patches: &[Tensor],
    student_head: &ProjectionHead,
    teacher_head: &ProjectionHead,
    cfg: &DistanceConfig,
    center: Option<&Tensor>,
) -> Result<Tensor> {
    let mean = |x: &Tensor| -> Result<Tensor> { Ok(x.mean(x.rank() - 2)?) };
    let s = student_patches.iter().map(mean).collect::<Result<Vec<_>>>()?;
    let t = teacher_patches.iter().map(mean).collect::<Result<Vec<_>>>()?;
    sgc_loss(&s, &t, student_head, teacher_head, cfg, center)
}

/// `momentum * center + (1 - momentum) * mean(teacher_logits)` over all rows
/// of all given logit batches.
pub fn update_center(center: &Tensor, teacher_logits: &[Tensor], momentum: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!("center momentum {momentum} not in [0, 1)")));
    }
    let rows: Vec<Tensor> = teacher_logits
        .iter()
        .filter(|t| t.dim(0).map(|n| n > 0).unwrap_or(false))
        .map(|t| t.detach())
        .collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty teacher batch for centering".into()));
    }
    let batch_mean = Tensor::cat(&rows, 0)?.mean(0)?.to_dtype(center.dtype())?;
    Ok(((center * momentum)? + (batch_mean * (1.0 - momentum))?)?)
}

/// Running centers for the class-token and graph branches.
#[derive(Debug, Clone)]
pub struct CenterState {
    pub cls_center: Tensor,
    pub sgc_center: Tensor,
}

impl CenterState {
    pub fn zeros(cls_dim: usize, sgc_dim: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            cls_center: Tensor::zeros(cls_dim, dtype, &Device::Cpu)?,
            sgc_center: Tensor::zeros(sgc_dim, dtype, &Device::Cpu)?,
        })
    }
}
