//! Command implementations behind the `patchgraph` binary: train, probe,
//! sweep and metrics export, with a manifest for every run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointRecord, GROUP_TEACHER};
use crate::config::{config_digest, RunConfig};
use crate::data::{load_dataset, DataSplits};
use crate::probe::{
    expand_rows, extract_probe_features, linear_probe, probe_config_digest, probe_views, select_rows, stratified_subset,
    FeatureCache,
};
use crate::sweep::{SweepSpec, SweepTable};
use crate::train::{epoch_mean_losses, read_metrics, train, TrainOutcome, METRICS_FILE};
use crate::vit::Encoder;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const RESULTS_FILE: &str = "results.csv";
pub const RESULTS_HEADER: &str = "dataset,fraction,seed,method,accuracy";

/// Provenance of one command invocation, written to `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// `None` when the built-in defaults were used.
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the config file bytes (of the empty document for defaults).
    pub config_digest: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn write(&self) -> Result<()> {
        let path = self.output_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A resolved configuration together with the bytes it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub path: Option<PathBuf>,
    pub bytes: Vec<u8>,
}

impl LoadedConfig {
    /// Reads `path`, or the defaults when absent; `seed` overrides the file.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let (mut config, bytes) = match path {
            Some(p) => RunConfig::from_file(p)?,
            None => (RunConfig::parse("")?, Vec::new()),
        };
        if let Some(s) = seed {
            config.seed = s;
        }
        Ok(Self {
            config,
            path: path.map(Path::to_path_buf),
            bytes,
        })
    }

    pub fn from_config(config: RunConfig) -> Result<Self> {
        let bytes = config.dump()?.into_bytes();
        Ok(Self {
            config,
            path: None,
            bytes,
        })
    }

    fn manifest(&self, command: &str, out: &Path) -> RunManifest {
        RunManifest {
            command: command.into(),
            config_path: self.path.clone(),
            config_digest: config_digest(&self.bytes),
            output_dir: out.to_path_buf(),
            seed: self.config.seed,
            started_unix: now(),
            finished_unix: None,
        }
    }
}

fn prepare_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Trains on the configured dataset and writes manifest, resolved config,
/// metrics and checkpoints under `out`.
pub fn cmd_train(cfg: &LoadedConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let data = load_dataset(&cfg.config.data, cfg.config.seed)?;
    train_on(cfg, &data, out, resume)
}

/// [`cmd_train`] on already loaded data.
pub fn train_on(cfg: &LoadedConfig, data: &DataSplits, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    prepare_dir(out)?;
    let mut manifest = cfg.manifest("train", out);
    manifest.write()?;
    let resolved = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, cfg.config.dump()?).map_err(|e| Error::io(&resolved, e))?;
    let outcome = train(&cfg.config, &data.train.images, out, resume)?;
    if let (Some((first_epoch, first)), Some((last_epoch, last))) = (
        epoch_mean_losses(&outcome.rows).first().copied(),
        epoch_mean_losses(&outcome.rows).last().copied(),
    ) {
        log::info!("mean loss epoch {first_epoch}: {first:.4}, epoch {last_epoch}: {last:.4}");
    }
    manifest.finished_unix = Some(now());
    manifest.write()?;
    Ok(outcome)
}

/// One results-table row; `accuracy` is `None` for not-applicable fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub fraction: f64,
    pub seed: u64,
    pub method: String,
    pub accuracy: Option<f64>,
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        let acc = match self.accuracy {
            Some(a) => format!("{:.4}", a * 100.0),
            None => "NA".into(),
        };
        format!("{},{},{},{},{}", self.dataset, self.fraction, self.seed, self.method, acc)
    }
}

/// Appends rows to a results CSV, writing the header if the file is new.
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(RESULTS_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Probe features of the teacher encoder, read from or written to
/// `cache_dir` keyed by checkpoint and probe-view settings.
fn probe_features(
    cfg: &RunConfig,
    record: &CheckpointRecord,
    data: &DataSplits,
    cache_dir: Option<&Path>,
) -> Result<(ndarray::Array2<f32>, Vec<usize>, ndarray::Array2<f32>)> {
    let encoder = Encoder::load(&cfg.encoder, record.group(GROUP_TEACHER)?)?;
    let p = &cfg.probe;
    let key = format!(
        "{}-{}-{}-{}",
        record.digest()?,
        p.train_crops,
        p.train_crop_scale[0],
        p.train_crop_scale[1]
    );
    let cached = |split: &str| -> Result<Option<FeatureCache>> {
        match cache_dir {
            Some(d) => FeatureCache::load_matching(&d.join(format!("features_{split}.bin")), &key),
            None => Ok(None),
        }
    };
    let store = |split: &str, features: &ndarray::Array2<f32>, labels: Vec<u32>| -> Result<()> {
        if let Some(d) = cache_dir {
            FeatureCache {
                key: key.clone(),
                features: features.clone(),
                labels,
            }
            .save(&d.join(format!("features_{split}.bin")))?;
        }
        Ok(())
    };
    let bs = p.batch_size.max(64);

    let (train_x, source) = match cached("train")? {
        Some(c) => (c.features, c.labels.iter().map(|&l| l as usize).collect()),
        None => {
            let (views, source) = probe_views(&data.train.images, &cfg.augment, p.train_crops, p.train_crop_scale, cfg.seed);
            let x = extract_probe_features(&encoder, &views, bs)?;
            store("train", &x, source.iter().map(|&s| s as u32).collect())?;
            (x, source)
        }
    };
    let test_x = match cached("test")? {
        Some(c) => c.features,
        None => {
            let (views, _) = probe_views(&data.test.images, &cfg.augment, 0, p.train_crop_scale, cfg.seed);
            let x = extract_probe_features(&encoder, &views, bs)?;
            store("test", &x, data.test.labels.iter().map(|&l| l as u32).collect())?;
            x
        }
    };
    Ok((train_x, source, test_x))
}

/// Linear-probe results for every `(fraction, seed)` of the probe config.
pub fn probe_record(
    cfg: &RunConfig,
    record: &CheckpointRecord,
    data: &DataSplits,
    method: &str,
    cache_dir: Option<&Path>,
) -> Result<Vec<ResultRow>> {
    let (train_x, source, test_x) = probe_features(cfg, record, data, cache_dir)?;
    let mut rows = Vec::new();
    for &fraction in &cfg.probe.fractions {
        for &seed in &cfg.probe.seeds {
            let accuracy = match stratified_subset(&data.train.labels, fraction, seed) {
                Ok(subset) => {
                    let r = expand_rows(&source, &subset);
                    let x = select_rows(&train_x, &r);
                    let y: Vec<usize> = r.iter().map(|&i| data.train.labels[source[i]]).collect();
                    let res = linear_probe(x.view(), &y, test_x.view(), &data.test.labels, &cfg.probe, seed)?;
                    log::info!(
                        "probe fraction {fraction} seed {seed}: accuracy {:.4} on {} train / {} test rows",
                        res.accuracy,
                        res.train_size,
                        res.test_size
                    );
                    Some(res.accuracy)
                }
                Err(Error::NotApplicable(why)) => {
                    log::warn!("fraction {fraction}: {why}");
                    None
                }
                Err(e) => return Err(e),
            };
            rows.push(ResultRow {
                dataset: cfg.data.name.clone(),
                fraction,
                seed,
                method: method.into(),
                accuracy,
            });
        }
    }
    Ok(rows)
}

pub struct ProbeArgs<'a> {
    pub checkpoint: &'a Path,
    /// Overrides the probe and data sections of the checkpoint's config.
    pub config: Option<&'a LoadedConfig>,
    pub fractions: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub out: &'a Path,
}

/// Probes a checkpoint; appends rows to `out/results.csv` and writes JSON
/// objects to `out/probe_results.jsonl`.
pub fn cmd_probe(args: &ProbeArgs<'_>) -> Result<Vec<ResultRow>> {
    let record = CheckpointRecord::load(args.checkpoint)?;
    let saved = record.config()?;
    let mut cfg = saved.clone();
    if let Some(over) = args.config {
        if over.config.architecture()? != saved.architecture()? {
            return Err(Error::ConfigMismatch(format!(
                "config does not match the architecture of {}",
                args.checkpoint.display()
            )));
        }
        cfg.probe = over.config.probe.clone();
        cfg.data = over.config.data.clone();
        cfg.augment = over.config.augment.clone();
    }
    if let Some(f) = &args.fractions {
        cfg.probe.fractions = f.clone();
    }
    if let Some(s) = &args.seeds {
        cfg.probe.seeds = s.clone();
    }
    cfg.probe.validate()?;
    let data = load_dataset(&cfg.data, saved.seed)?;
    prepare_dir(args.out)?;
    let loaded = match args.config {
        Some(c) => c.clone(),
        None => LoadedConfig::from_config(cfg.clone())?,
    };
    let mut manifest = loaded.manifest("probe", args.out);
    manifest.write()?;
    let rows = probe_record(&cfg, &record, &data, cfg.train.method.as_str(), Some(&args.out.join("cache")))?;
    append_results(&args.out.join(RESULTS_FILE), &rows)?;
    let jsonl = args.out.join("probe_results.jsonl");
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&jsonl)
        .map_err(|e| Error::io(&jsonl, e))?;
    for r in &rows {
        let mut v = serde_json::to_value(r)?;
        v["probe_config_digest"] = probe_config_digest(&cfg.probe)?.into();
        writeln!(f, "{v}").map_err(|e| Error::io(&jsonl, e))?;
    }
    manifest.finished_unix = Some(now());
    manifest.write()?;
    Ok(rows)
}

/// Trains and probes once per sweep value and writes `<name>.csv` and
/// `<name>.txt` under `out`. Accuracy is the mean over the probe seeds at
/// the first configured fraction, in percent.
pub fn cmd_sweep(base: &LoadedConfig, spec: &SweepSpec, out: &Path) -> Result<SweepTable> {
    let data = load_dataset(&base.config.data, base.config.seed)?;
    sweep_on(base, spec, &data, out)
}

/// [`cmd_sweep`] on already loaded data.
pub fn sweep_on(base: &LoadedConfig, spec: &SweepSpec, data: &DataSplits, out: &Path) -> Result<SweepTable> {
    prepare_dir(out)?;
    let mut manifest = base.manifest("sweep", out);
    manifest.write()?;
    let fraction = *base
        .config
        .probe
        .fractions
        .first()
        .ok_or_else(|| Error::InvalidArgument("probe.fractions is empty".into()))?;
    let mut accuracy = Vec::with_capacity(spec.values.len());
    for (i, value) in spec.values.iter().enumerate() {
        let mut cfg = value.apply(&base.config);
        cfg.probe.fractions = vec![fraction];
        let run_dir = out.join(format!("{i:02}_{}", value.label()));
        let context = |e: Error| Error::InvalidArgument(format!("sweep run `{}` failed: {e}", value.label()));
        cfg.validate().map_err(context)?;
        let loaded = LoadedConfig::from_config(cfg.clone())?;
        let outcome = train_on(&loaded, data, &run_dir, None).map_err(context)?;
        let last = outcome
            .checkpoints
            .last()
            .ok_or_else(|| Error::InvalidArgument("training wrote no checkpoint".into()))?;
        let record = CheckpointRecord::load(last)?;
        let rows = probe_record(&cfg, &record, data, cfg.train.method.as_str(), None).map_err(context)?;
        append_results(&run_dir.join(RESULTS_FILE), &rows)?;
        let accs: Vec<f64> = rows.iter().filter_map(|r| r.accuracy).collect();
        accuracy.push((!accs.is_empty()).then(|| 100.0 * accs.iter().sum::<f64>() / accs.len() as f64));
    }
    let table = SweepTable::new(spec, accuracy)?;
    for (ext, text) in [("csv", table.to_csv()), ("txt", table.to_text())] {
        let path = out.join(format!("{}.{ext}", spec.name));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    manifest.finished_unix = Some(now());
    manifest.write()?;
    Ok(table)
}

/// Converts a run's JSON-lines metrics log into CSV.
pub fn cmd_export_metrics(run_dir: &Path, out: &Path) -> Result<usize> {
    let rows = read_metrics(&run_dir.join(METRICS_FILE))?;
    let mut text = String::from("step,epoch,lr,loss_total,loss_cls,loss_sgc,ema_momentum\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.epoch, r.lr, r.loss_total, r.loss_cls, r.loss_sgc, r.ema_momentum
        ));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        prepare_dir(dir)?;
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn result_rows_format_na() {
        let row = ResultRow {
            dataset: "synthetic".into(),
            fraction: 0.01,
            seed: 2,
            method: "dino_sgc".into(),
            accuracy: None,
        };
        assert_eq!(row.to_csv(), "synthetic,0.01,2,dino_sgc,NA");
        let row = ResultRow {
            accuracy: Some(0.5),
            ..row
        };
        assert_eq!(row.to_csv(), "synthetic,0.01,2,dino_sgc,50.0000");
    }

    #[test]
    fn manifest_digest_matches_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 4\n").unwrap();
        let c = LoadedConfig::load(Some(&path), None).unwrap();
        assert_eq!(c.config.seed, 4);
        let m = c.manifest("train", dir.path());
        assert_eq!(m.config_digest, config_digest(b"seed = 4\n"));
        m.write().unwrap();
        assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
    }
}
