//! `csd` — train, evaluate, export and sweep contrastive self-distillation
//! super-resolution models.
//!
//! Exit codes: 0 success, 1 configuration error, 2 training abort
//! (non-finite loss), 3 I/O failure.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use csd_core::arch::{build_backbone, SRBackbone, WidthMultiplier};
use csd_core::config::{parse_config, Config};
use csd_core::data::PairedDataset;
use csd_core::eval::{benchmark, emit_report, time_forward};
use csd_core::trainer::{Trainer, TrainerSummary};
use csd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "csd", version, about = "Contrastive self-distillation for super-resolution")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a student/teacher pair from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override trainer.strategy
        /// (csd|csd-a|csd-b|jt1|individual|gt-pos|ts-separate).
        #[arg(long)]
        strategy: Option<String>,
        /// Resume from a training-state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for checkpoints, history and the run manifest.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Override any config key, e.g. --set trainer.lr0=5e-5 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Evaluate a checkpoint across datasets and widths.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Width multiplier to evaluate (repeatable).
        #[arg(long = "width", default_values_t = [1.0])]
        widths: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [
            "set5".to_string(), "set14".to_string(), "bsd100".to_string(),
            "urban100".to_string(), "div2k-val".to_string()
        ])]
        datasets: Vec<String>,
        /// Average the eight dihedral views of each input.
        #[arg(long)]
        ensemble: bool,
        /// Dataset root; defaults to $CSD_DATA_ROOT.
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value = "eval-out")]
        out: PathBuf,
    },
    /// Slice a student out of a checkpoint into a standalone model file.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        width: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training per value of a config axis and summarize.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: strategy, k, width.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Time forward passes of a checkpoint (or a random net from a config).
    Bench {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Config supplying the architecture when no checkpoint is given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "width", default_values_t = [0.25, 1.0])]
        widths: Vec<f64>,
        /// Input edge length in LR pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ConfigList(_) | Error::Shape(_) => 1,
        Error::TrainAbort { .. } => 2,
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint { .. } | Error::Plot(_) => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            strategy,
            resume,
            out,
            sets,
        } => cmd_train(&config, strategy.as_deref(), resume.as_deref(), &out, sets),
        Cmd::Eval {
            ckpt,
            widths,
            datasets,
            ensemble,
            data_root,
            out,
        } => cmd_eval(&ckpt, &widths, &datasets, ensemble, data_root, &out),
        Cmd::Export { ckpt, width, out } => cmd_export(&ckpt, width, &out),
        Cmd::Sweep {
            config,
            axis,
            values,
            out,
            sets,
        } => cmd_sweep(&config, &axis, &values, &out, &sets),
        Cmd::Bench {
            ckpt,
            config,
            widths,
            size,
            reps,
        } => cmd_bench(ckpt.as_deref(), config.as_deref(), &widths, size, reps),
    }
}

/// Write the run manifest (config snapshot, provenance, seed) so every
/// artifact under `out` is traceable. Called before the first training step.
fn write_manifest(
    out: &Path,
    cfg: &Config,
    config_path: &Path,
    overrides: &[String],
    resume: Option<&Path>,
) -> Result<()> {
    let manifest = serde_json::json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config_path": config_path,
        "overrides": overrides,
        "resume": resume,
        "seed": cfg.trainer.seed,
        "strategy": cfg.trainer.strategy,
        "created_unix": SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "config": cfg,
    });
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn cmd_train(
    config_path: &Path,
    strategy_flag: Option<&str>,
    resume: Option<&Path>,
    out: &Path,
    mut overrides: Vec<String>,
) -> Result<()> {
    if let Some(s) = strategy_flag {
        overrides.push(format!("trainer.strategy={s}"));
    }
    let cfg = parse_config(config_path, &overrides)?;
    let summary = run_training(&cfg, config_path, &overrides, resume, out)?;
    println!(
        "done: {} iterations, final loss {:.6}, outputs in {}",
        summary.iterations,
        summary.final_loss,
        out.display()
    );
    Ok(())
}

/// Shared by `train` and `sweep`: manifest, datasets, fit.
fn run_training(
    cfg: &Config,
    config_path: &Path,
    overrides: &[String],
    resume: Option<&Path>,
    out: &Path,
) -> Result<TrainerSummary> {
    let strategy = cfg.strategy()?;
    let bcfg = cfg.to_backbone_config();
    let tcfg = cfg.to_train_config()?;
    let extractor = cfg.build_extractor()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_manifest(out, cfg, config_path, overrides, resume)?;

    let root = cfg.data_root()?;
    let train = PairedDataset::from_dir(&root, &cfg.data.train_set, bcfg.scale)?;
    let val = match PairedDataset::from_dir(&root, &cfg.data.val_set, bcfg.scale) {
        Ok(ds) => Some(ds),
        Err(e) => {
            eprintln!("warning: validation set unavailable ({e}); continuing without");
            None
        }
    };

    let mut trainer = match resume {
        Some(ckpt) => Trainer::load_state(ckpt, tcfg, extractor)?,
        None => Trainer::new(&bcfg, tcfg, strategy, extractor)?,
    };
    let history = trainer.fit(&train, val.as_ref(), out)?;
    Ok(TrainerSummary {
        iterations: trainer.iteration,
        final_loss: history.last().map(|r| r.loss_total).unwrap_or(f64::NAN),
        best_psnr: trainer.best_psnr,
    })
}

fn cmd_eval(
    ckpt: &Path,
    widths: &[f64],
    datasets: &[String],
    ensemble: bool,
    data_root: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let net = SRBackbone::load(ckpt)?;
    let widths = widths
        .iter()
        .map(|&w| WidthMultiplier::new(w))
        .collect::<Result<Vec<_>>>()?;
    let root = match data_root {
        Some(r) => r,
        None => std::env::var_os("CSD_DATA_ROOT")
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("pass --data-root or set $CSD_DATA_ROOT".into()))?,
    };
    let results = benchmark(&net, &root, datasets, &widths, ensemble)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    emit_report(&results, out)?;
    for r in &results {
        println!(
            "{:<12} r={:<5} {:>9} params  {:>7.3} dB  ssim {:.4}  {:>8.2} ms/image",
            r.dataset, r.width, r.params, r.psnr_db, r.ssim, r.ms_per_image
        );
    }
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_export(ckpt: &Path, width: f64, out: &Path) -> Result<()> {
    let net = SRBackbone::load(ckpt)?;
    let r = WidthMultiplier::new(width)?;
    let student = net.extract_student(r);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    student.save(out, r.value())?;
    println!(
        "exported width {} ({} parameters) to {}",
        r.value(),
        student.parameter_count(WidthMultiplier::FULL),
        out.display()
    );
    Ok(())
}

fn cmd_sweep(
    config_path: &Path,
    axis: &str,
    values: &[String],
    out: &Path,
    sets: &[String],
) -> Result<()> {
    let key = match axis {
        "strategy" => "trainer.strategy",
        "k" => "data.negatives.k",
        "width" => "trainer.r_w",
        other => {
            return Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected strategy|k|width)"
            )))
        }
    };
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one --values entry".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut rows: Vec<[String; 6]> = Vec::new();
    let mut first_err: Option<Error> = None;
    let mut succeeded = 0usize;
    for value in values {
        let mut overrides = sets.to_vec();
        overrides.push(format!("{key}={value}"));
        let run_dir = out.join(format!("{axis}-{value}"));
        let outcome = parse_config(config_path, &overrides)
            .and_then(|cfg| run_training(&cfg, config_path, &overrides, None, &run_dir));
        match outcome {
            Ok(s) => {
                succeeded += 1;
                rows.push([
                    axis.to_string(),
                    value.clone(),
                    "ok".to_string(),
                    s.iterations.to_string(),
                    s.final_loss.to_string(),
                    if s.best_psnr.is_finite() {
                        s.best_psnr.to_string()
                    } else {
                        String::new()
                    },
                ]);
            }
            Err(e) => {
                eprintln!("warning: run {axis}={value} failed: {e}");
                rows.push([
                    axis.to_string(),
                    value.clone(),
                    format!("error: {e}"),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }

    let summary = out.join("summary.csv");
    let to_io = |e: csv::Error| Error::io(&summary, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(&summary).map_err(to_io)?;
    w.write_record(["axis", "value", "status", "iterations", "final_loss", "best_psnr"])
        .map_err(to_io)?;
    for row in &rows {
        w.write_record(row).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(&summary, e))?;
    println!(
        "sweep finished: {succeeded}/{} runs ok, summary in {}",
        values.len(),
        summary.display()
    );
    match (succeeded, first_err) {
        (0, Some(e)) => Err(e),
        _ => Ok(()),
    }
}

fn cmd_bench(
    ckpt: Option<&Path>,
    config: Option<&Path>,
    widths: &[f64],
    size: usize,
    reps: usize,
) -> Result<()> {
    let net = match ckpt {
        Some(path) => SRBackbone::load(path)?,
        None => {
            let cfg = match config {
                Some(path) => parse_config(path, &[])?,
                None => Config::default(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            build_backbone(&cfg.to_backbone_config(), &mut rng)?
        }
    };
    if size == 0 {
        return Err(Error::Config("--size must be >= 1".into()));
    }
    let ds = PairedDataset::synthetic(1, size * net.cfg.scale, net.cfg.scale, 0);
    let (lr, _) = ds.load_pair(0)?;
    let (c, h, w) = lr.dim();
    let mut x = ndarray::Array4::<f64>::zeros((1, c, h, w));
    x.index_axis_mut(ndarray::Axis(0), 0).assign(&lr);
    println!("input {h}x{w}, scale x{}", net.cfg.scale);
    for &width in widths {
        let r = WidthMultiplier::new(width)?;
        let secs = time_forward(&net, r, &x, 2, reps)?;
        println!(
            "width {:<5} {:>10} params  {:>9.2} ms/image",
            r.value(),
            net.parameter_count(r),
            1000.0 * secs
        );
    }
    Ok(())
}
