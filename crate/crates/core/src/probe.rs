//! Linear probing on frozen features: last-four-blocks class-token features,
//! per-class stratified subsets and an SGD-trained linear classifier.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::DType;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_view, AugmentationConfig, ViewAugment};
use crate::vit::{Encoder, Image, ImageBatch};
use crate::{rng, Error, Result};

/// Blocks whose class tokens are concatenated into the probe feature.
pub const PROBE_BLOCKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cosine decay of the probe learning rate to 0 instead of a constant rate.
    pub cosine: bool,
    /// Standardize features with train-split statistics before training.
    pub standardize: bool,
    /// Random-resized-crop copies of each training image; 0 uses the plain
    /// resized image. Test images are always resized only.
    pub train_crops: usize,
    pub train_crop_scale: [f64; 2],
    /// Fractions of the labeled training split to probe with.
    pub fractions: Vec<f64>,
    /// Subset seeds; one probe per (fraction, seed).
    pub seeds: Vec<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr: 5e-4,
            momentum: 0.9,
            weight_decay: 0.0,
            cosine: false,
            standardize: false,
            train_crops: 0,
            train_crop_scale: [0.08, 1.0],
            fractions: vec![1.0],
            seeds: vec![0],
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::ConfigValidation(format!("probe: {m}")));
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return fail("lr must be > 0, momentum in [0, 1), weight_decay >= 0");
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return fail("fractions must lie in (0, 1]");
        }
        if self.fractions.is_empty() || self.seeds.is_empty() {
            return fail("fractions and seeds must be nonempty");
        }
        Ok(())
    }
}

/// Concatenated class tokens of the last four blocks, `(B, 4 * D)`.
pub fn extract_probe_features(encoder: &Encoder, images: &[Image], batch_size: usize) -> Result<Array2<f32>> {
    let depth = encoder.config().depth;
    if depth < PROBE_BLOCKS {
        return Err(Error::InvalidArgument(format!(
            "probe features need an encoder depth of at least {PROBE_BLOCKS}, got {depth}"
        )));
    }
    let d = encoder.config().embed_dim;
    let width = PROBE_BLOCKS * d;
    let mut out = Array2::<f32>::zeros((images.len(), width));
    let dtype = encoder.dtype();
    for (chunk_idx, chunk) in images.chunks(batch_size.max(1)).enumerate() {
        let batch = ImageBatch::from_images(chunk, dtype)?;
        let tokens = encoder.encode(&batch)?;
        let last: Vec<_> = tokens.per_block_cls[depth - PROBE_BLOCKS..].to_vec();
        let feats = candle_core::Tensor::cat(&last, 1)?.to_dtype(DType::F32)?;
        let rows: Vec<Vec<f32>> = feats.to_vec2()?;
        for (r, row) in rows.into_iter().enumerate() {
            out.row_mut(chunk_idx * batch_size.max(1) + r)
                .assign(&Array1::from_vec(row));
        }
    }
    Ok(out)
}

/// Probe inputs for a split: plain resized views, plus `crops` random
/// resized crops of every image (training split only), in image order.
pub fn probe_views(images: &[Image], aug: &AugmentationConfig, crops: usize, scale: [f64; 2], seed: u64) -> (Vec<Image>, Vec<usize>) {
    if crops == 0 {
        return (images.iter().map(|i| aug.eval_view(i)).collect(), (0..images.len()).collect());
    }
    let view = ViewAugment {
        crop_scale: scale,
        flip_prob: 0.5,
        ..ViewAugment::identity()
    };
    let mut out = Vec::with_capacity(images.len() * crops);
    let mut source = Vec::with_capacity(images.len() * crops);
    for (i, img) in images.iter().enumerate() {
        for c in 0..crops {
            let mut r = rng::stream(seed, &format!("probe-crop/{i}/{c}"));
            let v = augment_view(img, &view, aug.output_size, &mut r);
            out.push(aug.finish(v));
            source.push(i);
        }
    }
    (out, source)
}

/// Per-class sample: `floor(fraction * count)` indices from every class,
/// uniformly without replacement, returned in ascending order.
pub fn stratified_subset(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} not in (0, 1]")));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        // The epsilon keeps exact products such as 0.01 * 700 from rounding down.
        let take = (fraction * idx.len() as f64 + 1e-9).floor() as usize;
        if take == 0 {
            return Err(Error::NotApplicable(format!(
                "class {c} has {} samples; fraction {fraction} selects none",
                idx.len()
            )));
        }
        if take < idx.len() {
            idx.shuffle(&mut rng::stream(seed, &format!("subset/{c}")));
            idx.truncate(take);
        }
        out.extend(idx);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Top-1 test accuracy in `[0, 1]`.
    pub accuracy: f64,
    /// Accuracy per class; `None` for classes absent from the test split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub train_size: usize,
    pub test_size: usize,
    pub config_digest: String,
}

/// Feature standardization fitted on the training rows.
fn standardize(train: &mut Array2<f64>, test: &mut Array2<f64>) {
    let mean = train.mean_axis(Axis(0)).expect("nonempty train features");
    let std = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    for m in [train, test] {
        for mut row in m.rows_mut() {
            row -= &mean;
            row /= &std;
        }
    }
}

/// Trains a linear classifier with minibatch SGD and momentum on the train
/// rows and reports accuracy on the test rows.
pub fn linear_probe(
    train_x: ArrayView2<'_, f32>,
    train_y: &[usize],
    test_x: ArrayView2<'_, f32>,
    test_y: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() {
        return Err(Error::Dimension("feature rows and labels differ in length".into()));
    }
    if train_x.ncols() != test_x.ncols() {
        return Err(Error::Dimension("train and test feature widths differ".into()));
    }
    let num_classes = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
    let mut present = vec![false; num_classes];
    for &y in train_y {
        present[y] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::InvalidArgument("linear probe needs at least two training classes".into()));
    }
    cfg.validate()?;

    let mut xtr = train_x.mapv(f64::from);
    let mut xte = test_x.mapv(f64::from);
    if cfg.standardize {
        standardize(&mut xtr, &mut xte);
    }
    let (n, d) = xtr.dim();
    let mut r = rng::stream(seed, "probe/init");
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let mut w = Array2::<f64>::from_shape_fn((d, num_classes), |_| normal.sample(&mut r));
    let mut b = Array1::<f64>::zeros(num_classes);
    let mut vw = Array2::<f64>::zeros((d, num_classes));
    let mut vb = Array1::<f64>::zeros(num_classes);

    let mut order: Vec<usize> = (0..n).collect();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs) as f64;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(rng::derive_seed(seed, &format!("probe/order/{epoch}")));
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = if cfg.cosine {
                0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total).cos())
            } else {
                cfg.lr
            };
            let xb = xtr.select(Axis(0), chunk);
            let mut probs = xb.dot(&w) + &b;
            for mut row in probs.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row /= sum;
            }
            // d(mean cross-entropy)/d(logits) = (softmax - onehot) / batch
            for (k, &i) in chunk.iter().enumerate() {
                probs[[k, train_y[i]]] -= 1.0;
            }
            probs /= chunk.len() as f64;
            let mut gw = xb.t().dot(&probs);
            let gb = probs.sum_axis(Axis(0));
            if cfg.weight_decay > 0.0 {
                gw.scaled_add(cfg.weight_decay, &w);
            }
            vw = vw * cfg.momentum + &gw;
            vb = vb * cfg.momentum + &gb;
            w.scaled_add(-lr, &vw);
            b.scaled_add(-lr, &vb);
            step += 1;
        }
    }

    let logits = xte.dot(&w) + &b;
    let mut correct = vec![0usize; num_classes];
    let mut seen = vec![0usize; num_classes];
    for (row, &y) in logits.rows().into_iter().zip(test_y) {
        let mut best = 0;
        for c in 1..num_classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        seen[y] += 1;
        if best == y {
            correct[y] += 1;
        }
    }
    let total_correct: usize = correct.iter().sum();
    let accuracy = if test_y.is_empty() {
        0.0
    } else {
        total_correct as f64 / test_y.len() as f64
    };
    Ok(ProbeResult {
        accuracy,
        per_class_accuracy: correct
            .iter()
            .zip(&seen)
            .map(|(&c, &s)| (s > 0).then(|| c as f64 / s as f64))
            .collect(),
        train_size: n,
        test_size: test_y.len(),
        config_digest: probe_config_digest(cfg)?,
    })
}

pub fn probe_config_digest(cfg: &ProbeConfig) -> Result<String> {
    let text = toml::to_string(cfg).map_err(|e| Error::ConfigParse(e.to_string()))?;
    Ok(crate::config::config_digest(text.as_bytes()))
}

const FEATURE_MAGIC: &[u8; 8] = b"SGCFEAT\0";
const FEATURE_VERSION: u32 = 1;

/// Cached feature matrix with labels, tied to the checkpoint it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub key: String,
    pub features: Array2<f32>,
    pub labels: Vec<u32>,
}

impl FeatureCache {
    /// Layout (little endian): magic `SGCFEAT\0`, u32 version, u16 key length,
    /// key bytes, u64 rows, u64 cols, rows*cols f32 values row-major, rows u32
    /// labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (rows, cols) = self.features.dim();
        let mut out = Vec::with_capacity(32 + self.key.len() + rows * cols * 4 + rows * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.key.len() as u16).to_le_bytes());
        out.extend_from_slice(self.key.as_bytes());
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        out.extend_from_slice(&(cols as u64).to_le_bytes());
        for v in self.features.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("feature cache", m);
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad("truncated"));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        if take(8)? != FEATURE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let klen = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let key = String::from_utf8(take(klen)?.to_vec()).map_err(|_| bad("key is not utf-8"))?;
        let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let data: Vec<f32> = take(rows * cols * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels: Vec<u32> = take(rows * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let features = Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))?;
        Ok(Self { key, features, labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// The cached matrix if the file exists and carries `key`.
    pub fn load_matching(path: &Path, key: &str) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let cache = Self::from_bytes(&bytes)?;
        Ok((cache.key == key).then_some(cache))
    }
}

/// Rows of `x` in the order given.
pub fn select_rows(x: &Array2<f32>, rows: &[usize]) -> Array2<f32> {
    x.select(Axis(0), rows)
}

/// Rows whose source image is in `subset`, for row-to-image maps produced
/// by [`probe_views`].
pub fn expand_rows(source: &[usize], subset: &[usize]) -> Vec<usize> {
    let mut keep = vec![false; source.iter().max().map_or(0, |m| m + 1)];
    for &i in subset {
        if i < keep.len() {
            keep[i] = true;
        }
    }
    (0..source.len()).filter(|&r| keep[source[r]]).collect()
}
