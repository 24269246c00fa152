use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use localign::diagnostics::{
    alignment_csv, retrieval_json, run_diagnostics, smoothness_csv, std_csv, weight_map_csv, write_report,
};
use localign::model::Model;
use localign::probe::{probe_curve_csv, train_linear_probe, ProbeConfig};
use localign::synthdata::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, Split};
use localign::training::{
    gradient_fixture, load_checkpoint, pipeline_grad_check, save_checkpoint, train_with,
    TrainConfig, METRICS_HEADER,
};

mod config;

use config::load_config;

/// Environment variable naming the directory runs go to when `--out` is absent.
const OUT_ROOT_ENV: &str = "LOCALIGN_OUT_ROOT";
const MANIFEST: &str = "run_manifest.json";
const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "localign", version, about = "Localized image-text contrastive pre-training on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation flag to enable; repeatable.
        #[arg(long = "ablate", value_name = "FLAG")]
        ablate: Vec<String>,
    },
    /// Representation diagnostics of a trained checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the one recorded by `train`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear segmentation probe on a frozen checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also probe an untrained encoder of the same architecture.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the whole training loss.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Check the variant without batch normalization in the heads.
        #[arg(long)]
        no_batch_norm: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Suite {
    All,
    Smoothness,
    Std,
    Alignment,
    Weights,
    Retrieval,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Serialize)]
struct RunManifest {
    schema_version: u32,
    command: &'static str,
    seed: Option<u64>,
    config: Value,
    inputs: Value,
    artifacts: Vec<String>,
    summary: Value,
    versions: Value,
}

fn versions() -> Value {
    json!({ "localign": env!("CARGO_PKG_VERSION") })
}

fn out_dir(out: Option<PathBuf>, default_name: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(default_name)
    })
}

fn write_text(dir: &Path, name: &str, text: &str, artifacts: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    artifacts.push(name.to_string());
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn absolute(p: &Path) -> String {
    p.canonicalize().unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

fn gen_data(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg: DatasetConfig = load_config(config, &DatasetConfig::default())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out_dir(out, &format!("data-seed{}", cfg.seed));
    let ds = generate_dataset(&cfg)?;
    save_dataset(&ds, &dir)?;
    let artifacts = vec!["manifest.json".to_string(), format!("{} sample_*.bin/.json pairs", ds.samples.len())];
    write_manifest(
        &dir,
        &RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: "gen-data",
            seed: Some(cfg.seed),
            config: serde_json::to_value(&cfg)?,
            inputs: json!({ "config": absolute(config) }),
            artifacts,
            summary: json!({
                "samples": ds.samples.len(),
                "train": ds.train.len(),
                "validation": ds.validation.len(),
                "test": ds.test.len(),
            }),
            versions: versions(),
        },
    )?;
    println!("wrote {} samples to {}", ds.samples.len(), dir.display());
    Ok(())
}

fn train(config: &Path, data: &Path, out: Option<PathBuf>, seed: Option<u64>, ablate: &[String]) -> Result<()> {
    let mut cfg: TrainConfig = load_config(config, &TrainConfig::desk())?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    for flag in ablate {
        cfg.ablations.enable(flag)?;
    }
    cfg.validate()?;
    let dataset = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let dir = out_dir(out, &format!("train-seed{}", cfg.seed));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let metrics_path = dir.join("metrics.csv");
    let mut metrics = File::create(&metrics_path).with_context(|| format!("writing {}", metrics_path.display()))?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    let started = Instant::now();
    let (ck, summary) = train_with(&dataset, &cfg, |epoch| {
        metrics
            .write_all(epoch.csv_rows().as_bytes())
            .and_then(|()| metrics.flush())
            .map_err(|e| localign::Error::io(&metrics_path, e))?;
        eprintln!(
            "epoch {:>3}  lr {:.3e}  train {:.4}  validation {:.4}",
            epoch.epoch, epoch.lr, epoch.train.total, epoch.validation.total
        );
        Ok(())
    })?;
    save_checkpoint(&ck, &dir)?;

    let mut artifacts = vec![
        "metrics.csv".to_string(),
        "checkpoint.json".to_string(),
        "params.bin".to_string(),
        "optimizer.bin".to_string(),
    ];
    let trace: String = std::iter::once("step,lr\n".to_string())
        .chain(summary.lr_trace.iter().enumerate().map(|(i, lr)| format!("{},{}\n", i + 1, lr)))
        .collect();
    write_text(&dir, "lr_trace.csv", &trace, &mut artifacts)?;
    write_manifest(
        &dir,
        &RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: "train",
            seed: Some(cfg.seed),
            config: serde_json::to_value(&cfg)?,
            inputs: json!({ "config": absolute(config), "data": absolute(data) }),
            artifacts,
            summary: json!({
                "effective_loss": cfg.effective_loss(),
                "epochs_run": summary.epochs.len(),
                "best_epoch": summary.best_epoch,
                "stopped_early": summary.stopped_early,
                "best_validation": ck.validation,
                "wall_time_secs": started.elapsed().as_secs_f64(),
            }),
            versions: versions(),
        },
    )?;
    println!(
        "best epoch {} validation {:.6}; run written to {}",
        summary.best_epoch,
        ck.validation.total,
        dir.display()
    );
    Ok(())
}

/// The dataset a checkpoint was trained on, unless overridden.
fn dataset_for(checkpoint: &Path, data: Option<PathBuf>) -> Result<(PathBuf, Dataset)> {
    let path = match data {
        Some(p) => p,
        None => {
            let manifest = checkpoint.join(MANIFEST);
            let text = fs::read_to_string(&manifest)
                .with_context(|| format!("no --data given and cannot read {}", manifest.display()))?;
            let v: Value = serde_json::from_str(&text)?;
            match v.pointer("/inputs/data").and_then(Value::as_str) {
                Some(p) => PathBuf::from(p),
                None => bail!("{} records no dataset; pass --data", manifest.display()),
            }
        }
    };
    let ds = load_dataset(&path).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok((path, ds))
}

fn diagnose(checkpoint: &Path, data: Option<PathBuf>, suite: Suite, split: SplitArg, out: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let (data_path, dataset) = dataset_for(checkpoint, data)?;
    let dir = out.unwrap_or_else(|| checkpoint.join("diagnostics"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let split_name = Split::from(split).name();
    let samples = dataset.split(split.into());
    let report = run_diagnostics(&ck.model, &samples, &ck.config, split_name)?;
    let run_id = "run";
    let tag = format!("{run_id}_{split_name}");
    let mut artifacts = Vec::new();
    match suite {
        Suite::All => artifacts = write_report(&report, &dir, run_id)?,
        Suite::Smoothness => write_text(&dir, &format!("smoothness_{tag}.csv"), &smoothness_csv(&report.smoothness), &mut artifacts)?,
        Suite::Std => write_text(&dir, &format!("std_{tag}.csv"), &std_csv(&report.std), &mut artifacts)?,
        Suite::Alignment => write_text(&dir, &format!("alignment_{tag}.csv"), &alignment_csv(&report.alignment), &mut artifacts)?,
        Suite::Weights => write_text(&dir, &format!("weights_{tag}.csv"), &weight_map_csv(&report.weights), &mut artifacts)?,
        Suite::Retrieval => {
            let text = serde_json::to_string_pretty(&retrieval_json(&report))?;
            write_text(&dir, &format!("retrieval_{tag}.json"), &text, &mut artifacts)?;
        }
    }
    write_manifest(
        &dir,
        &RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: "diagnose",
            seed: Some(ck.config.seed),
            config: json!({ "suite": format!("{suite:?}").to_lowercase(), "split": split_name }),
            inputs: json!({ "checkpoint": absolute(checkpoint), "data": absolute(&data_path) }),
            artifacts,
            summary: json!({
                "samples": report.samples,
                "retrieval_top1": report.retrieval_top1,
                "std": report.std,
            }),
            versions: versions(),
        },
    )?;
    println!(
        "{} {split_name} samples; retrieval top-1 {:.4}; outputs in {}",
        report.samples,
        report.retrieval_top1,
        dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn probe(
    checkpoint: &Path,
    data: Option<PathBuf>,
    config: Option<&Path>,
    seed: Option<u64>,
    baseline: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => load_config(p, &ProbeConfig::default())?,
        None => ProbeConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ck = load_checkpoint(checkpoint)?;
    let (data_path, dataset) = dataset_for(checkpoint, data)?;
    let dir = out.unwrap_or_else(|| checkpoint.join("probe"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut artifacts = Vec::new();
    let result = train_linear_probe(&ck.model, &dataset, &cfg)?;
    write_text(&dir, "probe.json", &serde_json::to_string_pretty(&result)?, &mut artifacts)?;
    write_text(&dir, "probe_curve.csv", &probe_curve_csv(&result), &mut artifacts)?;
    let mut summary = json!({ "micro_dice": result.micro_dice, "per_class_dice": result.per_class_dice });
    if baseline {
        let fresh = Model::new(ck.model.config.clone())?;
        let base = train_linear_probe(&fresh, &dataset, &cfg)?;
        write_text(&dir, "probe_baseline.json", &serde_json::to_string_pretty(&base)?, &mut artifacts)?;
        write_text(&dir, "probe_baseline_curve.csv", &probe_curve_csv(&base), &mut artifacts)?;
        summary["baseline_micro_dice"] = json!(base.micro_dice);
        summary["gap"] = json!(result.micro_dice - base.micro_dice);
        println!("micro Dice {:.4} (untrained encoder {:.4})", result.micro_dice, base.micro_dice);
    } else {
        println!("micro Dice {:.4}", result.micro_dice);
    }
    write_manifest(
        &dir,
        &RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: "probe",
            seed: Some(cfg.seed),
            config: serde_json::to_value(&cfg)?,
            inputs: json!({ "checkpoint": absolute(checkpoint), "data": absolute(&data_path) }),
            artifacts,
            summary,
            versions: versions(),
        },
    )
}

fn grad_check(seed: u64, eps: f64, tol: f64, no_batch_norm: bool, out: Option<PathBuf>) -> Result<()> {
    let (model, cfg, batch) = gradient_fixture(seed, !no_batch_norm)?;
    let report = pipeline_grad_check(&model, &batch, &cfg, eps)?;
    let dir = out_dir(out, &format!("grad-check-seed{seed}"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut artifacts = Vec::new();
    write_text(&dir, "grad_check.json", &serde_json::to_string_pretty(&report)?, &mut artifacts)?;
    let worst = report
        .params
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .context("model has no trainable parameters")?;
    write_manifest(
        &dir,
        &RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: "grad-check",
            seed: Some(seed),
            config: json!({ "eps": eps, "tol": tol, "head_batch_norm": !no_batch_norm }),
            inputs: json!({}),
            artifacts,
            summary: json!({ "max_rel_error": worst.max_rel_error, "worst_param": worst.name, "passes": report.passes(tol) }),
            versions: versions(),
        },
    )?;
    if !report.passes(tol) {
        bail!(
            "gradient check failed: relative error {:.3e} on {} exceeds {tol:e}",
            worst.max_rel_error,
            worst.name
        );
    }
    println!(
        "{} parameter arrays pass; worst {:.3e} on {}",
        report.params.len(),
        worst.max_rel_error,
        worst.name
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => gen_data(&config, out, seed),
        Command::Train { config, data, out, seed, ablate } => train(&config, &data, out, seed, &ablate),
        Command::Diagnose { checkpoint, data, suite, split, out } => diagnose(&checkpoint, data, suite, split, out),
        Command::Probe { checkpoint, data, config, seed, baseline, out } => {
            probe(&checkpoint, data, config.as_deref(), seed, baseline, out)
        }
        Command::GradCheck { seed, eps, tol, no_batch_norm, out } => grad_check(seed, eps, tol, no_batch_norm, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
