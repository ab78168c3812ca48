//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
//! 3 verification failure. Run directories default to `$DESSILBI_OUT/<name>`
//! (or `runs/<name>` when the variable is unset).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{emit_config, parse_with_overrides, ExperimentConfig};
use crate::error::Error;
use crate::harness::{
    fine_tune_rewind, one_shot_prune_retrain, resume_run, retrain_from_run, train, InitPolicy, RetrainPlan,
    RetrainResult,
};
use crate::path::{inverse_scale_order, write_path_csv, write_path_json};
use crate::verify;

pub const OUT_ENV: &str = "DESSILBI_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dessilbi", version, about = "Structural-sparsity training with split linearized Bregman iteration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set optimizer.nu=100`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Replaces `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Epoch whose `Gamma` support becomes the mask.
    #[arg(long)]
    mask_epoch: usize,
    /// Total epoch budget; defaults to `run.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportFormat {
    Csv,
    Json,
    /// Entry epoch of every group (inverse-scale-space order).
    Order,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its run directory.
    Train(ConfigArgs),
    /// Run every numerical self-check.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// One-shot pruning: mask from `Gamma` at an early epoch, retrain from the same init.
    Prune {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Retrain a saved run under the support mask of one of its checkpoints.
    Retrain {
        /// Run directory written by `train` with the needed checkpoints.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        /// Start from the weights of this checkpoint instead of the initialization.
        #[arg(long)]
        rewind_epoch: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rewind fine-tuning: weights from one epoch, mask from another.
    Rewind {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        rewind_epoch: usize,
    },
    /// Re-export the path of a run directory.
    PathExport {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: ExportFormat,
        /// Destination file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form prox against the numerical oracle.
    ProxCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T, O, E>(args: I, stdout: &mut O, stderr: &mut E) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    O: Write,
    E: Write,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
        Err(Failure::Verification(msg)) => {
            let _ = writeln!(stderr, "verification failed: {msg}");
            EXIT_VERIFY
        }
    }
}

fn load_config(args: &ConfigArgs) -> std::result::Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    parse_with_overrides(&text, &overrides).map_err(|e| Failure::Usage(format!("{}: {e}", args.config.display())))
}

fn default_out(args: &ConfigArgs, cfg: &ExperimentConfig, suffix: &str) -> PathBuf {
    if let Some(out) = &args.out {
        return out.clone();
    }
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stem = args.config.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    root.join(format!("{stem}-seed{}{suffix}", cfg.run.seed))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::Runtime(Error::io(path, e)))
}

#[derive(Serialize)]
struct RetrainSummary {
    final_val_loss: f64,
    final_val_acc: Option<f64>,
    density: f64,
}

fn summary(r: &RetrainResult) -> RetrainSummary {
    RetrainSummary { final_val_loss: r.final_val_loss, final_val_acc: r.final_val_acc, density: r.density }
}

/// Writes `<name>.csv` with the path of a retrain and returns its summary line.
fn save_retrain(dir: &Path, name: &str, r: &RetrainResult) -> std::result::Result<String, Failure> {
    let mut csv = Vec::new();
    write_path_csv(&r.records, &mut csv)?;
    write_file(&dir.join(format!("{name}.csv")), &csv)?;
    let acc = r.final_val_acc.map_or_else(|| "-".into(), |a| format!("{:.4}", a));
    Ok(format!("{name}: val loss {:.5}, val acc {acc}, density {:.4}", r.final_val_loss, r.density))
}

fn plan(cfg: &ExperimentConfig, p: &PlanArgs, init: InitPolicy) -> RetrainPlan {
    RetrainPlan { mask_epoch: p.mask_epoch, epochs: p.epochs.unwrap_or(cfg.run.epochs), init }
}

fn dispatch<O: Write>(command: Command, stdout: &mut O) -> CliResult {
    let mut say = |line: String| {
        let _ = writeln!(stdout, "{line}");
    };
    match command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let dir = default_out(&args, &cfg, "");
            let result = train(&cfg, Some(&dir))?;
            let last = result.records.last().expect("initial record");
            say(format!("run directory: {}", dir.display()));
            say(format!(
                "epoch {}: train loss {:.5}, val loss {:.5}, Gamma nonzero fraction {:.4}",
                last.epoch,
                last.train_loss,
                last.val_loss,
                last.overall_sparsity()
            ));
            if result.monitor.is_some() {
                say(format!("monitor violations: {}", result.monitor_violations()));
            }
        }
        Command::Verify { seed } => {
            let outcomes = verify::run_all(seed);
            for o in &outcomes {
                say(o.to_string());
            }
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
            if !failed.is_empty() {
                return Err(Failure::Verification(failed.join(", ")));
            }
            say(format!("all {} suites passed", outcomes.len()));
        }
        Command::Prune { config, plan: p } => {
            let cfg = load_config(&config)?;
            let dir = default_out(&config, &cfg, "-prune");
            let (dense, sparse) = one_shot_prune_retrain(&cfg, &plan(&cfg, &p, InitPolicy::SameInit))?;
            write_file(&dir.join("config.toml"), emit_config(&cfg)?.as_bytes())?;
            say(save_retrain(&dir, "dense", &dense)?);
            say(save_retrain(&dir, "sparse", &sparse)?);
            let json = serde_json::json!({ "dense": summary(&dense), "sparse": summary(&sparse) });
            write_file(
                &dir.join("summary.json"),
                serde_json::to_string_pretty(&json).map_err(Error::from)?.as_bytes(),
            )?;
        }
        Command::Retrain { run, plan: p, rewind_epoch, out } => {
            let (cfg, source) = resume_run(&run)?;
            let init = rewind_epoch.map_or(InitPolicy::SameInit, InitPolicy::Rewind);
            let result = retrain_from_run(&cfg, &source, &plan(&cfg, &p, init))?;
            let dir = out.unwrap_or_else(|| run.join("retrain"));
            say(save_retrain(&dir, "retrain", &result)?);
            write_file(
                &dir.join("summary.json"),
                serde_json::to_string_pretty(&summary(&result)).map_err(Error::from)?.as_bytes(),
            )?;
        }
        Command::Rewind { config, plan: p, rewind_epoch } => {
            let cfg = load_config(&config)?;
            let dir = default_out(&config, &cfg, "-rewind");
            let result = fine_tune_rewind(&cfg, &plan(&cfg, &p, InitPolicy::Rewind(rewind_epoch)))?;
            write_file(&dir.join("config.toml"), emit_config(&cfg)?.as_bytes())?;
            say(save_retrain(&dir, "rewind", &result)?);
            write_file(
                &dir.join("summary.json"),
                serde_json::to_string_pretty(&summary(&result)).map_err(Error::from)?.as_bytes(),
            )?;
        }
        Command::PathExport { run, format, out } => {
            let file = run.join("path.json");
            let text = fs::read_to_string(&file)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", file.display())))?;
            let records = crate::path::read_path_json(&text)?;
            let mut buf = Vec::new();
            match format {
                ExportFormat::Csv => write_path_csv(&records, &mut buf)?,
                ExportFormat::Json => write_path_json(&records, &mut buf)?,
                ExportFormat::Order => {
                    let mut w = csv::Writer::from_writer(&mut buf);
                    w.write_record(["layer", "group", "entry_epoch"]).map_err(Error::from)?;
                    for e in inverse_scale_order(&records)? {
                        let epoch = e.epoch.map_or_else(String::new, |v| v.to_string());
                        w.write_record([e.layer.to_string(), e.group.to_string(), epoch]).map_err(Error::from)?;
                    }
                    w.flush().map_err(|e| Error::io("order csv", e))?;
                }
            }
            match out {
                Some(p) => write_file(&p, &buf)?,
                None => {
                    let _ = stdout.write_all(&buf);
                }
            }
        }
        Command::ProxCheck { trials, seed } => {
            let r = verify::prox_check(trials, seed)?;
            say(format!("{} trials, max |closed - numeric| = {:.3e}", r.trials, r.max_abs_err));
            if r.max_abs_err > verify::PROX_TOL {
                return Err(Failure::Verification(format!(
                    "prox error {:.3e} above {:.0e}",
                    r.max_abs_err,
                    verify::PROX_TOL
                )));
            }
        }
    }
    Ok(())
}
