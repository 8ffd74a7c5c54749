use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use patchgraph::commands::{cmd_export_metrics, cmd_probe, cmd_sweep, cmd_train, LoadedConfig, ProbeArgs};
use patchgraph::sweep::{SweepAxis, SweepSpec, SweepValue, PRESETS};

/// Default output root when `--out` is absent.
const OUTPUT_ROOT_ENV: &str = "SGC_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "patchgraph", version, about = "Self-supervised ViT pretraining with a patch-graph regularizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: $SGC_OUTPUT_ROOT/<command>, else runs/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the root seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded kernels, so reruns are bit-identical.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Linear-probe the teacher encoder of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated label fractions, e.g. 0.01,0.1,1.0.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// Comma-separated subset seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and probe once per value of one axis; writes a CSV and a text table.
    Sweep {
        /// Named axis preset.
        #[arg(long, conflicts_with_all = ["axis", "values"])]
        preset: Option<String>,
        /// k_neighbors, gnn_layer, projection_dim, alpha_beta or metric.
        #[arg(long, requires = "values")]
        axis: Option<String>,
        /// Semicolon-separated values, e.g. "3;5;10", "1:0;1:0.3" or "cosine:5".
        #[arg(long, value_delimiter = ';')]
        values: Option<Vec<String>>,
        #[command(flatten)]
        common: Common,
    },
    /// Convert a run's metrics.jsonl into CSV.
    ExportMetrics {
        /// Training output directory.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => Path::new(&root).join(command),
        None => Path::new("runs").join(command),
    }
}

fn prepare(common: &Common) -> Result<LoadedConfig> {
    if common.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    Ok(LoadedConfig::load(common.config.as_deref(), common.seed)?)
}

fn sweep_spec(preset: Option<String>, axis: Option<String>, values: Option<Vec<String>>) -> Result<SweepSpec> {
    if let Some(p) = preset {
        return Ok(SweepSpec::preset(&p)?);
    }
    let Some(axis) = axis else {
        bail!("sweep needs --preset ({}) or --axis with --values", PRESETS.join(", "));
    };
    let axis: SweepAxis = axis.parse()?;
    let values = values
        .unwrap_or_default()
        .iter()
        .map(|v| SweepValue::parse(axis, v.trim()))
        .collect::<patchgraph::Result<Vec<_>>>()?;
    Ok(SweepSpec::new(axis.as_str(), axis, values)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { resume, common } => {
            let cfg = prepare(&common)?;
            let out = out_dir(&common, "train");
            let outcome = cmd_train(&cfg, &out, resume.as_deref())?;
            log::info!(
                "trained {} steps; {} checkpoints under {}",
                outcome.state.step,
                outcome.checkpoints.len(),
                out.display()
            );
        }
        Command::Probe {
            checkpoint,
            fractions,
            seeds,
            common,
        } => {
            let loaded = prepare(&common)?;
            let cfg = common.config.is_some().then_some(loaded);
            let out = out_dir(&common, "probe");
            let rows = cmd_probe(&ProbeArgs {
                checkpoint: &checkpoint,
                config: cfg.as_ref(),
                fractions,
                seeds,
                out: &out,
            })?;
            for r in rows {
                println!("{}", r.to_csv());
            }
        }
        Command::Sweep {
            preset,
            axis,
            values,
            common,
        } => {
            let cfg = prepare(&common)?;
            let spec = sweep_spec(preset, axis, values)?;
            let out = out_dir(&common, "sweep");
            let table = cmd_sweep(&cfg, &spec, &out).with_context(|| format!("sweep `{}`", spec.name))?;
            print!("{}", table.to_text());
        }
        Command::ExportMetrics { run, common } => {
            let out = common.out.clone().unwrap_or_else(|| run.join("metrics.csv"));
            let n = cmd_export_metrics(&run, &out)?;
            log::info!("wrote {n} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
