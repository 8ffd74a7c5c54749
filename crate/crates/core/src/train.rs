//! Student-teacher pretraining: per-step update, EMA teacher, epoch loop with
//! checkpointing and a JSON-lines metrics log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::make_views;
use crate::checkpoint::CheckpointRecord;
use crate::config::RunConfig;
use crate::gnn::GnnStack;
use crate::graph::{knn_graph, KnnGraph};
use crate::objective::{combined_loss_tensor, cross_view_loss, update_center, CenterState, ProjectionHead};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamSet, ParamSource, Precision, VarSet};
use crate::schedule::{momentum_at, LrSchedule};
use crate::vit::{Encoder, Image, ImageBatch};
use crate::{rng, Error, Result};

pub const CLS_HEAD: &str = "cls_head";
pub const SGC_HEAD: &str = "sgc_head";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Class-token distillation only.
    DinoBaseline,
    /// Class-token distillation plus the patch-graph consistency term.
    #[default]
    DinoSgc,
    /// Graph term replaced by the mean of the patch tokens.
    DinoPatchMean,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::DinoBaseline => "dino_baseline",
            Method::DinoSgc => "dino_sgc",
            Method::DinoPatchMean => "dino_patch_mean",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dino_baseline" => Ok(Method::DinoBaseline),
            "dino_sgc" => Ok(Method::DinoSgc),
            "dino_patch_mean" => Ok(Method::DinoPatchMean),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    /// Cosine schedule of the teacher momentum from `ema_momentum` to 1.
    pub ema_cosine: bool,
    /// Checkpoint every this many epochs; the last epoch is always saved.
    pub checkpoint_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::DinoSgc,
            epochs: 100,
            batch_size: 128,
            base_lr: 5e-4,
            final_lr: 0.0,
            warmup_epochs: 10,
            weight_decay: 0.04,
            ema_momentum: 0.996,
            ema_cosine: false,
            checkpoint_every: 1,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ConfigValidation(format!("train: {m}")));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.warmup_epochs >= self.epochs && self.warmup_epochs > 0 {
            return fail(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size < 2 {
            return fail("batch_size must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return fail("ema_momentum must lie in [0, 1)".into());
        }
        if !(self.base_lr >= 0.0) || !(self.final_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("base_lr, final_lr and weight_decay must be >= 0".into());
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be >= 1".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        (dataset_len / self.batch_size).max(1)
    }
}

/// Per-step schedules derived from the config and the dataset size.
#[derive(Debug, Clone, Copy)]
pub struct Schedules {
    pub lr: LrSchedule,
    pub ema_base: f64,
    pub ema_cosine: bool,
    pub steps_per_epoch: usize,
    pub total_steps: u64,
}

impl Schedules {
    pub fn new(cfg: &TrainConfig, dataset_len: usize) -> Self {
        let spe = cfg.steps_per_epoch(dataset_len);
        let total = (spe * cfg.epochs) as u64;
        Self {
            lr: LrSchedule {
                base_lr: cfg.base_lr,
                final_lr: cfg.final_lr,
                warmup_steps: (spe * cfg.warmup_epochs) as u64,
                total_steps: total,
            },
            ema_base: cfg.ema_momentum,
            ema_cosine: cfg.ema_cosine,
            steps_per_epoch: spe,
            total_steps: total,
        }
    }

    /// Fixed values for every step, used by tests.
    pub fn constant(lr: f64, momentum: f64) -> Self {
        Self {
            lr: LrSchedule {
                base_lr: lr,
                final_lr: lr,
                warmup_steps: 0,
                total_steps: 0,
            },
            ema_base: momentum,
            ema_cosine: false,
            steps_per_epoch: 1,
            total_steps: 0,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr.lr_at(step)
    }

    pub fn momentum_at(&self, step: u64) -> f64 {
        momentum_at(self.ema_base, self.ema_cosine, step, self.total_steps)
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_sgc: f64,
    pub ema_momentum: f64,
}

/// Fresh parameters for every module the method needs.
pub fn init_params(cfg: &RunConfig) -> Result<ParamSet> {
    let dtype = cfg.train.precision.dtype();
    let d = cfg.encoder.embed_dim;
    let mut p = Encoder::init(&cfg.encoder, cfg.seed, dtype)?;
    p.extend(ProjectionHead::init(&cfg.head, d, CLS_HEAD, cfg.seed, dtype)?);
    match cfg.train.method {
        Method::DinoBaseline => {}
        Method::DinoSgc => {
            p.extend(GnnStack::init(&cfg.gnn, d, cfg.seed, dtype)?);
            p.extend(ProjectionHead::init(&cfg.head.graph_head(), cfg.gnn.output_dim(d), SGC_HEAD, cfg.seed, dtype)?);
        }
        Method::DinoPatchMean => {
            p.extend(ProjectionHead::init(&cfg.head.graph_head(), d, SGC_HEAD, cfg.seed, dtype)?);
        }
    }
    Ok(p)
}

/// Modules assembled from one parameter source (student or teacher).
pub struct Networks {
    pub encoder: Encoder,
    pub cls_head: ProjectionHead,
    pub gnn: Option<GnnStack>,
    pub sgc_head: Option<ProjectionHead>,
}

/// Per-view outputs of one network on a two-view batch.
pub struct NetworkOutputs {
    pub cls_logits: [Tensor; 2],
    pub sgc_logits: Option<[Tensor; 2]>,
}

impl Networks {
    pub fn load(cfg: &RunConfig, src: &impl ParamSource) -> Result<Self> {
        let d = cfg.encoder.embed_dim;
        let encoder = Encoder::load(&cfg.encoder, src)?;
        let cls_head = ProjectionHead::load(&cfg.head, d, CLS_HEAD, src)?;
        let (gnn, sgc_head) = match cfg.train.method {
            Method::DinoBaseline => (None, None),
            Method::DinoSgc => (
                Some(GnnStack::load(&cfg.gnn, d, src)?),
                Some(ProjectionHead::load(&cfg.head.graph_head(), cfg.gnn.output_dim(d), SGC_HEAD, src)?),
            ),
            Method::DinoPatchMean => (None, Some(ProjectionHead::load(&cfg.head.graph_head(), d, SGC_HEAD, src)?)),
        };
        Ok(Self {
            encoder,
            cls_head,
            gnn,
            sgc_head,
        })
    }

    /// Forward pass over `[view1; view2]` stacked along the batch axis.
    pub fn forward(&self, cfg: &RunConfig, both_views: &ImageBatch, graphs: Option<&[KnnGraph]>) -> Result<NetworkOutputs> {
        let tokens = self.encoder.encode(both_views)?;
        let b2 = tokens.cls.dim(0)?;
        let b = b2 / 2;
        let split = |t: &Tensor| -> Result<[Tensor; 2]> { Ok([t.narrow(0, 0, b)?, t.narrow(0, b, b)?]) };
        let cls_logits = split(&self.cls_head.project(&tokens.cls)?)?;
        let sgc_logits = match (cfg.train.method, &self.gnn, &self.sgc_head) {
            (Method::DinoBaseline, _, _) => None,
            (Method::DinoSgc, Some(gnn), Some(head)) => {
                let built;
                let graphs = match graphs {
                    Some(g) => g,
                    None => {
                        built = gnn.prepare_graphs(build_graphs(&tokens.patches, cfg)?);
                        &built[..]
                    }
                };
                let h = gnn.forward_batch(graphs, &tokens.patches)?;
                Some(split(&head.project(&gnn.pool_batch(&h)?)?)?)
            }
            (Method::DinoPatchMean, _, Some(head)) => {
                let pooled = tokens.patches.mean(1)?;
                Some(split(&head.project(&pooled)?)?)
            }
            _ => return Err(Error::MissingParam("graph branch modules".into())),
        };
        Ok(NetworkOutputs { cls_logits, sgc_logits })
    }
}

/// One KNN graph per batch item from detached patch tokens `(B, N, D)`.
pub fn build_graphs(patches: &Tensor, cfg: &RunConfig) -> Result<Vec<KnnGraph>> {
    let (b, n, d) = patches.dims3()?;
    let flat: Vec<f64> = patches.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    (0..b)
        .map(|i| {
            let view = ArrayView2::from_shape((n, d), &flat[i * n * d..(i + 1) * n * d])
                .map_err(|e| Error::Dimension(e.to_string()))?;
            knn_graph(view, cfg.graph.k_neighbors, cfg.graph.metric)
        })
        .collect()
}

/// A batch of raw images with one augmentation seed per image.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub images: Vec<Image>,
    pub aug_seeds: Vec<u64>,
    pub epoch: usize,
}

impl TrainBatch {
    /// Augmentation seeds are keyed by epoch and dataset index so the views of
    /// an image do not depend on which batch it lands in.
    pub fn new(images: Vec<Image>, indices: &[usize], epoch: usize, seed: u64) -> Self {
        let aug_seeds = indices
            .iter()
            .map(|i| rng::derive_seed(seed, &format!("augment/{epoch}/{i}")))
            .collect();
        Self {
            images,
            aug_seeds,
            epoch,
        }
    }

    /// Both views of every image, stacked `[view1; view2]`.
    pub fn views(&self, cfg: &RunConfig) -> Result<ImageBatch> {
        if self.images.is_empty() || self.images.len() != self.aug_seeds.len() {
            return Err(Error::InvalidArgument("batch must be nonempty with one seed per image".into()));
        }
        let mut first = Vec::with_capacity(self.images.len());
        let mut second = Vec::with_capacity(self.images.len());
        for (img, s) in self.images.iter().zip(&self.aug_seeds) {
            let mut r = ChaCha8Rng::seed_from_u64(*s);
            let (a, b) = make_views(img, &cfg.augment, &mut r);
            first.push(a);
            second.push(b);
        }
        first.extend(second);
        ImageBatch::from_images(&first, cfg.train.precision.dtype())
    }
}

/// Trainable student, EMA teacher, centers and optimizer.
pub struct SslState {
    pub student: VarSet,
    pub teacher: ParamSet,
    pub centers: CenterState,
    pub optimizer: AdamW,
    pub step: u64,
    /// Epochs fully completed.
    pub epoch: usize,
}

impl SslState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let params = init_params(cfg)?;
        Self::from_params(cfg, &params)
    }

    /// Student and teacher both start from `params`.
    pub fn from_params(cfg: &RunConfig, params: &ParamSet) -> Result<Self> {
        let student = params.to_vars()?;
        let teacher = student.snapshot()?;
        let dtype = cfg.train.precision.dtype();
        let optimizer = AdamW::new(&student, adamw_config(cfg))?;
        Ok(Self {
            student,
            teacher,
            centers: CenterState::zeros(cfg.head.output_dim, cfg.head.graph_head().output_dim, dtype)?,
            optimizer,
            step: 0,
            epoch: 0,
        })
    }

    /// Fails if the optimizer can reach any teacher tensor.
    pub fn check_teacher_isolation(&self) -> Result<()> {
        for (name, t) in self.teacher.iter() {
            if self.optimizer.holds(t.id()) {
                return Err(Error::TeacherIsolation(format!("optimizer references teacher tensor `{name}`")));
            }
        }
        Ok(())
    }
}

pub fn adamw_config(cfg: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        weight_decay: cfg.train.weight_decay,
        ..AdamWConfig::default()
    }
}

/// `m * teacher + (1 - m) * student`, elementwise for every teacher tensor.
pub fn ema_update(teacher: &ParamSet, student: &impl ParamSource, m: f64) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, t) in teacher.iter() {
        let s = student.get(name, t.dims())?.detach();
        let next = if m == 1.0 {
            t.clone()
        } else {
            ((t * m)? + (s * (1.0 - m))?)?
        };
        out.insert(name.clone(), next);
    }
    Ok(out)
}

/// Scalar losses of one step, before the update.
#[derive(Debug, Clone)]
pub struct StepLosses {
    pub total: Tensor,
    pub cls: Tensor,
    pub sgc: Option<Tensor>,
    pub teacher_cls: [Tensor; 2],
    pub teacher_sgc: Option<[Tensor; 2]>,
}

/// Losses for already augmented views. `graphs` overrides graph construction
/// as `(student, teacher)`; both are built from detached tokens otherwise.
pub fn compute_losses(
    cfg: &RunConfig,
    student: &Networks,
    teacher: &Networks,
    centers: &CenterState,
    both_views: &ImageBatch,
    graphs: Option<(&[KnnGraph], &[KnnGraph])>,
) -> Result<StepLosses> {
    let dist = cfg.loss.distance();
    let s = student.forward(cfg, both_views, graphs.map(|g| g.0))?;
    let t = teacher.forward(cfg, both_views, graphs.map(|g| g.1))?;
    let teacher_cls = [t.cls_logits[0].detach(), t.cls_logits[1].detach()];
    let cls = cross_view_loss(&s.cls_logits, &teacher_cls, &dist, Some(&centers.cls_center))?;
    let (sgc, teacher_sgc) = match (s.sgc_logits, t.sgc_logits) {
        (Some(sl), Some(tl)) => {
            let tl = [tl[0].detach(), tl[1].detach()];
            let l = cross_view_loss(&sl, &tl, &dist, Some(&centers.sgc_center))?;
            (Some(l), Some(tl))
        }
        _ => (None, None),
    };
    let total = combined_loss_tensor(&cls, sgc.as_ref(), &cfg.loss.weights())?;
    Ok(StepLosses {
        total,
        cls,
        sgc,
        teacher_cls,
        teacher_sgc,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One optimizer step on the student, EMA on the teacher, center updates.
pub fn train_step(state: &mut SslState, batch: &TrainBatch, cfg: &RunConfig, sched: &Schedules) -> Result<MetricsRow> {
    let views = batch.views(cfg)?;
    train_step_on_views(state, &views, batch.epoch, cfg, sched)
}

/// [`train_step`] with the augmentation already applied.
pub fn train_step_on_views(
    state: &mut SslState,
    views: &ImageBatch,
    epoch: usize,
    cfg: &RunConfig,
    sched: &Schedules,
) -> Result<MetricsRow> {
    state.check_teacher_isolation()?;
    let lr = sched.lr_at(state.step);
    let m = sched.momentum_at(state.step);
    let student = Networks::load(cfg, &state.student)?;
    let teacher = Networks::load(cfg, &state.teacher)?;
    let losses = compute_losses(cfg, &student, &teacher, &state.centers, views, None)?;

    let total = scalar(&losses.total)?;
    let cls = scalar(&losses.cls)?;
    let sgc = match &losses.sgc {
        Some(t) => scalar(t)?,
        None => 0.0,
    };
    if !(total.is_finite() && cls.is_finite() && sgc.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: state.step + 1,
            total,
            cls,
            sgc,
        });
    }

    let grads = losses.total.backward()?;
    state.optimizer.step(&grads, lr)?;
    state.teacher = ema_update(&state.teacher, &state.student, m)?;
    let cm = cfg.loss.center_momentum;
    state.centers.cls_center = update_center(&state.centers.cls_center, &losses.teacher_cls, cm)?;
    if let Some(t) = &losses.teacher_sgc {
        state.centers.sgc_center = update_center(&state.centers.sgc_center, t, cm)?;
    }
    state.step += 1;
    Ok(MetricsRow {
        step: state.step,
        epoch,
        lr,
        loss_total: total,
        loss_cls: cls,
        loss_sgc: sgc,
        ema_momentum: m,
    })
}

/// Dataset order for one epoch, drawn from its own stream.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, &format!("order/{epoch}")));
    order
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.ckpt"))
}

pub struct TrainOutcome {
    pub state: SslState,
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn append_row(path: &Path, row: &MetricsRow) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(row)?).map_err(|e| Error::io(path, e))
}

/// Runs the remaining epochs, writing metrics and checkpoints under
/// `out_dir`. With `resume`, continues from that checkpoint; metrics rows
/// after its step are discarded first.
pub fn train(cfg: &RunConfig, images: &[Image], out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);

    let mut state = match resume {
        Some(path) => {
            let record = CheckpointRecord::load(path)?;
            let state = record.into_state(cfg)?;
            let kept: Vec<MetricsRow> = if metrics_path.exists() {
                read_metrics(&metrics_path)?
                    .into_iter()
                    .filter(|r| r.step <= state.step)
                    .collect()
            } else {
                Vec::new()
            };
            let mut text = String::new();
            for r in &kept {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            fs::write(&metrics_path, text).map_err(|e| Error::io(&metrics_path, e))?;
            state
        }
        None => {
            fs::write(&metrics_path, "").map_err(|e| Error::io(&metrics_path, e))?;
            SslState::new(cfg)?
        }
    };

    let sched = Schedules::new(&cfg.train, images.len());
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in state.epoch..cfg.train.epochs {
        let order = epoch_order(cfg.seed, epoch, images.len());
        let bs = cfg.train.batch_size.min(images.len());
        for s in 0..sched.steps_per_epoch {
            let idx = &order[s * bs..(s + 1) * bs];
            let batch = TrainBatch::new(idx.iter().map(|&i| images[i].clone()).collect(), idx, epoch, cfg.seed);
            let row = train_step(&mut state, &batch, cfg, &sched)?;
            append_row(&metrics_path, &row)?;
            log::debug!(
                "step {} epoch {} loss {:.6} (cls {:.6}, graph {:.6})",
                row.step,
                epoch,
                row.loss_total,
                row.loss_cls,
                row.loss_sgc
            );
            rows.push(row);
        }
        state.epoch = epoch + 1;
        if state.epoch % cfg.train.checkpoint_every == 0 || state.epoch == cfg.train.epochs {
            let path = checkpoint_path(out_dir, state.epoch);
            CheckpointRecord::from_state(cfg, &state)?.save(&path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        state,
        rows,
        checkpoints,
    })
}

/// Mean `loss_total` per epoch, in epoch order.
pub fn epoch_mean_losses(rows: &[MetricsRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.loss_total;
                *n += 1;
            }
            _ => out.push((r.epoch, r.loss_total, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}
