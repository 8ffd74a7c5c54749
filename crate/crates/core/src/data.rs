//! Datasets: a `root/split/class/*` image folder reader and a seeded
//! synthetic generator with class-specific stripe patterns.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::vit::Image;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ImageFolder,
    #[default]
    SyntheticClusters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Folder root for `image_folder`.
    pub root: String,
    pub train_split: String,
    pub test_split: String,
    /// Display name used in result tables.
    pub name: String,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Held-out fraction of each synthetic class.
    pub test_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticClusters,
            root: String::new(),
            train_split: "train".into(),
            test_split: "test".into(),
            name: "synthetic".into(),
            num_classes: 10,
            samples_per_class: 300,
            image_size: 32,
            noise: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::ConfigValidation(format!("data: {m}")));
        match self.kind {
            DatasetKind::ImageFolder if self.root.is_empty() => fail("root is required for image_folder"),
            DatasetKind::SyntheticClusters if self.num_classes < 2 => fail("num_classes must be >= 2"),
            DatasetKind::SyntheticClusters if self.samples_per_class == 0 || self.image_size == 0 => {
                fail("samples_per_class and image_size must be positive")
            }
            DatasetKind::SyntheticClusters if !(self.noise >= 0.0) => fail("noise must be >= 0"),
            DatasetKind::SyntheticClusters if !(0.0..1.0).contains(&self.test_fraction) => {
                fail("test_fraction must lie in [0, 1)")
            }
            _ => Ok(()),
        }
    }
}

/// Images with integer labels and the class names they index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Files that failed to decode and were skipped.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            skipped: 0,
        }
    }
}

/// Train and test splits of one dataset.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// RGB image with values in `[0, 1]`.
pub fn decode_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::format(&path.display().to_string(), &e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, 3, data)
}

/// Reads `root/split/<class>/<file>`. Classes and files are visited in
/// lexicographic order; labels follow class order. Undecodable files are
/// skipped with a warning.
pub fn load_image_folder(root: &Path, split: &str) -> Result<Dataset> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::DatasetNotFound(dir));
    }
    let mut ds = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        class_names: Vec::new(),
        skipped: 0,
    };
    for class_dir in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let label = ds.class_names.len();
        let mut count = 0;
        for file in sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file()) {
            match decode_image(&file) {
                Ok(img) => {
                    ds.images.push(img);
                    ds.labels.push(label);
                    count += 1;
                }
                Err(e) => {
                    log::warn!("skipping undecodable image {}: {e}", file.display());
                    ds.skipped += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::EmptyClass(name));
        }
        ds.class_names.push(name);
    }
    if ds.class_names.is_empty() {
        return Err(Error::DatasetNotFound(dir));
    }
    Ok(ds)
}

/// Per-class appearance: stripe angle and frequency, and a hue band two class
/// spacings wide. Every hue lies in exactly two bands, so color alone
/// separates at most half the samples.
struct ClassPattern {
    angle: f32,
    freq: f32,
    hue_start: f32,
}

fn class_pattern(c: usize, num_classes: usize) -> ClassPattern {
    ClassPattern {
        angle: PI * c as f32 / num_classes as f32,
        // Periods of 4 to 8 pixels on a 32-pixel image survive crops of half the area.
        freq: 1.0 / (4.0 + 4.0 * ((c * 7) % num_classes) as f32 / num_classes as f32),
        hue_start: 2.0 * PI * (c as f32 - 0.5) / num_classes as f32,
    }
}

fn hue_color(hue: f32) -> [f32; 3] {
    [
        0.5 + 0.35 * hue.cos(),
        0.5 + 0.35 * (hue + 2.0 * PI / 3.0).cos(),
        0.5 + 0.35 * (hue + 4.0 * PI / 3.0).cos(),
    ]
}

/// `num_classes * samples_per_class` images, class-major, deterministic in
/// `seed`. Each image is the class stripe pattern with a random phase, a
/// random hue from the class band and per-pixel Gaussian noise.
pub fn generate_synthetic(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    if spec.samples_per_class == 0 || spec.image_size == 0 || !(spec.noise >= 0.0) {
        return Err(Error::InvalidArgument(
            "samples_per_class and image_size must be positive, noise >= 0".into(),
        ));
    }
    let s = spec.image_size;
    let noise = Normal::new(0.0f32, spec.noise as f32).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut images = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for c in 0..spec.num_classes {
        let pat = class_pattern(c, spec.num_classes);
        let (dx, dy) = (pat.angle.cos(), pat.angle.sin());
        for i in 0..spec.samples_per_class {
            let mut r = rng::stream(seed, &format!("synthetic/{c}/{i}"));
            let phase: f32 = r.random::<f32>() * 2.0 * PI;
            let color = hue_color(pat.hue_start + r.random::<f32>() * 4.0 * PI / spec.num_classes as f32);
            let mut img = Image::zeros(s, s, 3);
            for y in 0..s {
                for x in 0..s {
                    let t = 2.0 * PI * pat.freq * (x as f32 * dx + y as f32 * dy) + phase;
                    let stripe = 0.5 + 0.5 * t.sin();
                    for ch in 0..3 {
                        let v = color[ch] * (0.4 + 0.6 * stripe) + noise.sample(&mut r);
                        *img.at_mut(y, x, ch) = v.clamp(0.0, 1.0);
                    }
                }
            }
            images.push(img);
            labels.push(c);
        }
    }
    Ok(Dataset {
        images,
        labels,
        class_names: (0..spec.num_classes).map(|c| format!("class_{c:02}")).collect(),
        skipped: 0,
    })
}

/// Splits each class: the last `round(test_fraction * count)` samples of
/// every class go to test.
pub fn split_per_class(ds: &Dataset, test_fraction: f64) -> DataSplits {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..ds.num_classes() {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        let cut = idx.len() - n_test.min(idx.len());
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    DataSplits {
        train: ds.subset(&train),
        test: ds.subset(&test),
    }
}

/// Loads the train and test splits named by `spec`.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<DataSplits> {
    match spec.kind {
        DatasetKind::ImageFolder => {
            let root = Path::new(&spec.root);
            if !root.is_dir() {
                return Err(Error::DatasetNotFound(root.to_path_buf()));
            }
            let train = load_image_folder(root, &spec.train_split)?;
            let test = load_image_folder(root, &spec.test_split)?;
            if train.class_names != test.class_names {
                return Err(Error::InvalidArgument(format!(
                    "class folders differ between `{}` and `{}`",
                    spec.train_split, spec.test_split
                )));
            }
            Ok(DataSplits { train, test })
        }
        DatasetKind::SyntheticClusters => {
            let all = generate_synthetic(spec, seed)?;
            Ok(split_per_class(&all, spec.test_fraction))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, per: usize) -> DatasetSpec {
        DatasetSpec {
            num_classes: classes,
            samples_per_class: per,
            image_size: 16,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&spec(2, 64), 7).unwrap();
        let b = generate_synthetic(&spec(2, 64), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec(2, 64), 8).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_rejects_one_class() {
        assert!(generate_synthetic(&spec(1, 4), 0).is_err());
    }

    #[test]
    fn synthetic_is_balanced() {
        let s = DatasetSpec {
            num_classes: 10,
            samples_per_class: 100,
            image_size: 32,
            ..DatasetSpec::default()
        };
        let d = generate_synthetic(&s, 0).unwrap();
        assert_eq!(d.len(), 1000);
        for c in 0..10 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 100);
        }
        assert!(d.images.iter().all(|i| i.height == 32 && i.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn split_keeps_every_sample_once() {
        let d = generate_synthetic(&spec(3, 10), 0).unwrap();
        let s = split_per_class(&d, 0.2);
        assert_eq!(s.train.len(), 24);
        assert_eq!(s.test.len(), 6);
    }
}
