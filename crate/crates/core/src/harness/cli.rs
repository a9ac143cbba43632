//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::calibration::{CalibrationLogs, Strategy};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::harness::config::ExperimentConfig;
use crate::harness::pipeline;
use crate::quantizer::Bitwidth;

#[derive(Parser, Debug)]
#[command(
    name = "diffquant",
    about = "Timestep-grouped post-training quantization for a toy diffusion model",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the full-precision denoiser and save a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output checkpoint path (default <out_dir>/fp.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the calibration set, search group assignments, and save the
    /// quantized bundle plus CSV logs.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pretrained full-precision checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strategy: Option<Strategy_>,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long, value_parser = parse_bits)]
        weight_bits: Option<Bitwidth>,
        #[arg(long, value_parser = parse_bits)]
        act_bits: Option<Bitwidth>,
        #[arg(long)]
        calib_size: Option<usize>,
        /// Output bundle path (default <out_dir>/bundle.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate samples from a checkpoint or bundle into a CSV.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path (default <out_dir>/samples.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a quantized bundle against its full-precision teacher.
    Eval {
        /// Pretrained full-precision checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Calibrated bundle.
        #[arg(long)]
        bundle: PathBuf,
        /// Output metrics path (default <out_dir>/metrics.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat calibration for G in {1,4,8,16} at W8A8 and W6A6.
    AblateGroups {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat calibration for {random, heuristic, active} x {128,256,512,1024}.
    AblateStrategy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge run JSONs (metrics or ablation reports) into CSV tables.
    Report {
        /// Output directory for the merged CSVs.
        #[arg(long)]
        out: PathBuf,
        /// Input JSON files.
        inputs: Vec<PathBuf>,
    },
}

// clap needs ValueEnum-ish parsing; reuse FromStr.
type Strategy_ = Strategy;

impl clap::builder::ValueParserFactory for Strategy {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| {
            s.parse::<Strategy>().map_err(|e| e.to_string())
        })
    }
}

fn parse_bits(s: &str) -> std::result::Result<Bitwidth, String> {
    s.parse::<Bitwidth>().map_err(|e| e.to_string())
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/usage text.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let (ckpt, losses) = pipeline::run_train(&cfg)?;
            let path = out.unwrap_or_else(|| cfg.out_dir.join("fp.json"));
            save_checkpoint(&path, &ckpt)?;
            write_loss_csv(&sidecar(&path, "loss.csv"), &losses)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Calibrate {
            config,
            checkpoint,
            seed,
            strategy,
            groups,
            weight_bits,
            act_bits,
            calib_size,
            out,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(s) = strategy {
                cfg.strategy = s;
            }
            if let Some(g) = groups {
                cfg.groups = g;
            }
            if let Some(b) = weight_bits {
                cfg.weight_bits = b;
            }
            if let Some(b) = act_bits {
                cfg.act_bits = b;
            }
            if let Some(n) = calib_size {
                cfg.calib_size = n;
            }
            let fp = load_checkpoint(&checkpoint)?;
            let (bundle, logs) = pipeline::run_calibrate(&cfg, &fp)?;
            let path = out.unwrap_or_else(|| cfg.out_dir.join("bundle.json"));
            save_checkpoint(&path, &bundle)?;
            write_calibration_logs(&path, &logs, &bundle)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Sample {
            checkpoint,
            n,
            seed,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let samples = pipeline::run_sample(&ckpt, n, seed)?;
            let path = out.unwrap_or_else(|| ckpt.config_echo.out_dir.join("samples.csv"));
            ensure_parent(&path)?;
            let d = samples.shape()[1];
            let mut body = String::new();
            let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
            body.push_str(&header.join(","));
            body.push('\n');
            for row in samples.data().chunks(d) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                body.push_str(&cells.join(","));
                body.push('\n');
            }
            std::fs::write(&path, body)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            bundle,
            out,
        } => {
            let fp = load_checkpoint(&checkpoint)?;
            let bundle = load_checkpoint(&bundle)?;
            let report = pipeline::run_eval(&fp, &bundle)?;
            let path =
                out.unwrap_or_else(|| bundle.config_echo.out_dir.join("metrics.json"));
            write_json(&path, &report)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::AblateGroups {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let fp = load_checkpoint(&checkpoint)?;
            let report = pipeline::ablate_groups(&cfg, &fp)?;
            let path = out.unwrap_or_else(|| cfg.out_dir.join("ablate_groups.json"));
            write_json(&path, &report)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::AblateStrategy {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let fp = load_checkpoint(&checkpoint)?;
            let report = pipeline::ablate_strategy(&cfg, &fp)?;
            let path = out.unwrap_or_else(|| cfg.out_dir.join("ablate_strategy.json"));
            write_json(&path, &report)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Report { out, inputs } => report_command(&out, &inputs),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialize: {e}")))?;
    std::fs::write(path, body)?;
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    ensure_parent(path)?;
    let mut body = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        body.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, body)?;
    Ok(())
}

/// Sidecar CSVs next to a bundle: importance-weight evolution, selection
/// trace, per-step losses, and the final count histogram.
fn write_calibration_logs(
    bundle_path: &Path,
    logs: &CalibrationLogs,
    bundle: &Checkpoint,
) -> Result<()> {
    let mut sigma = String::from("epoch,t,group,sigma\n");
    for r in &logs.sigma_trace {
        sigma.push_str(&format!("{},{},{},{}\n", r.epoch, r.t, r.group, r.sigma));
    }
    std::fs::write(sidecar(bundle_path, "sigma.csv"), sigma)?;

    let mut sel = String::from("round,strategy,t_star,s1,s2,score\n");
    for r in &logs.selections {
        sel.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.round, r.strategy, r.t_star, r.s1, r.s2, r.score
        ));
    }
    std::fs::write(sidecar(bundle_path, "selection.csv"), sel)?;

    let mut steps = String::from("step,lr,j,j_d,j_e\n");
    for r in &logs.steps {
        steps.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.lr, r.j, r.j_d, r.j_e
        ));
    }
    std::fs::write(sidecar(bundle_path, "steps.csv"), steps)?;

    if let Some(extras) = &bundle.quant {
        let counts: Vec<u64> = count_histogram(&extras.calib_samples, bundle);
        let summary = serde_json::json!({
            "schema_version": "1",
            "rounds": counts.iter().sum::<u64>(),
            "counts": counts,
        });
        write_json(&sidecar(bundle_path, "counts.json"), &summary)?;
    }
    Ok(())
}

fn count_histogram(
    samples: &[crate::calibration::CalibSample],
    bundle: &Checkpoint,
) -> Vec<u64> {
    let t_max = bundle.config_echo.timesteps;
    let batch = bundle.config_echo.batch_size.max(1);
    let mut counts = vec![0u64; t_max];
    for s in samples {
        if s.t >= 1 && s.t <= t_max {
            counts[s.t - 1] += 1;
        }
    }
    // Counts are selections (rounds), not samples.
    counts.iter().map(|c| c.div_ceil(batch as u64)).collect()
}

/// Merge metrics / ablation JSONs into per-kind CSV tables.
fn report_command(out_dir: &Path, inputs: &[PathBuf]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one input JSON".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut metrics = String::from("file,c_error,g_error,mmd2\n");
    let mut groups = String::from("file,bitwidth,groups,c_error,g_error,mmd2\n");
    let mut strategies = String::from("file,strategy,bitwidth,calib_size,c_error,g_error,mmd2\n");
    let (mut n_m, mut n_g, mut n_s) = (0usize, 0usize, 0usize);

    for path in inputs {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let name = path.display();
        if value.get("c_error").is_some() {
            metrics.push_str(&format!(
                "{name},{},{},{}\n",
                value["c_error"], value["g_error"], value["mmd2"]
            ));
            n_m += 1;
        } else if let Some(rows) = value.get("rows").and_then(|r| r.as_array()) {
            for row in rows {
                if row.get("groups").is_some() {
                    groups.push_str(&format!(
                        "{name},{},{},{},{},{}\n",
                        row["bitwidth"].as_str().unwrap_or("?"),
                        row["groups"],
                        row["c_error"],
                        row["g_error"],
                        row["mmd2"]
                    ));
                    n_g += 1;
                } else if row.get("strategy").is_some() {
                    strategies.push_str(&format!(
                        "{name},{},{},{},{},{},{}\n",
                        row["strategy"].as_str().unwrap_or("?"),
                        row["bitwidth"].as_str().unwrap_or("?"),
                        row["calib_size"],
                        row["c_error"],
                        row["g_error"],
                        row["mmd2"]
                    ));
                    n_s += 1;
                }
            }
        } else {
            return Err(Error::Config(format!(
                "{}: not a metrics or ablation report",
                path.display()
            )));
        }
    }
    if n_m > 0 {
        std::fs::write(out_dir.join("metrics.csv"), metrics)?;
    }
    if n_g > 0 {
        std::fs::write(out_dir.join("ablate_groups.csv"), groups)?;
    }
    if n_s > 0 {
        std::fs::write(out_dir.join("ablate_strategy.csv"), strategies)?;
    }
    println!(
        "merged {} metrics, {} group rows, {} strategy rows into {}",
        n_m,
        n_g,
        n_s,
        out_dir.display()
    );
    Ok(())
}
