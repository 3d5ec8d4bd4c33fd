//! The `adljepa` command line: synthetic data generation, pre-training,
//! diagnostics, linear probing and gradient checking.

pub mod commands;
pub mod run_config;

use std::path::PathBuf;

use adljepa_core::config::parse_override;
use adljepa_core::CoreError;
use clap::{Args, Parser, Subcommand};

use commands::*;
use run_config::{RunConfig, PROFILES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Layering: defaults, then `--profile`, then `--config`, then `--set`, then
/// dedicated flags.
#[derive(Debug, Args)]
pub struct Common {
    /// key = value file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Built-in profile: kitti_like, large_like or tiny
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Override one key, e.g. --set lambda_reg=10 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Write into a non-empty output directory
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scans, annotations and a manifest
    Generate {
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Pre-train and write checkpoints and the step log
    Pretrain {
        /// `synthetic` or a directory of .bin scans
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        no_variance_reg: bool,
        #[arg(long)]
        no_empty_token: bool,
        #[arg(long)]
        no_mask_token: bool,
    },
    /// Spectrum, occupancy similarity maps and spreads of a checkpoint
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of evaluation scans instead of synthetic ones
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Object-presence linear probe on frozen embeddings
    Probe {
        /// Omit to probe a fresh initialization
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Finite-difference check of every op and of the full loss
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: u64,
    },
}

#[derive(Debug, Parser)]
#[command(name = "adljepa", version, about = "Joint-embedding predictive pre-training on BEV grids")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

pub fn exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::NumericalAbort { .. } => EXIT_NUMERICAL,
        CoreError::Io { .. } | CoreError::Format { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig, CoreError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.profile {
        cfg.apply_profile(p)?;
    }
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for o in &common.overrides {
        let (k, v) = parse_override(o)?;
        cfg.assign(&k, &v, "--set")?;
    }
    if let Some(s) = common.seed {
        cfg.assign("seed", &s.to_string(), "--seed")?;
    }
    match command {
        Command::Generate { scenes } => {
            if let Some(n) = scenes {
                cfg.scenes = *n;
            }
        }
        Command::Pretrain {
            dataset,
            scenes,
            epochs,
            max_steps,
            no_variance_reg,
            no_empty_token,
            no_mask_token,
            ..
        } => {
            if let Some(d) = dataset {
                cfg.assign("dataset", d, "--dataset")?;
            }
            if let Some(n) = scenes {
                cfg.scenes = *n;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
                // An explicit epoch count replaces any step cap from a profile.
                if max_steps.is_none() {
                    cfg.train.max_steps = None;
                }
            }
            if let Some(s) = max_steps {
                cfg.train.max_steps = Some(*s);
            }
            cfg.train.use_variance_reg &= !no_variance_reg;
            cfg.train.model.use_empty_token &= !no_empty_token;
            cfg.train.model.use_mask_token &= !no_mask_token;
        }
        Command::Diagnose { dataset, .. } => {
            if let Some(d) = dataset {
                cfg.eval_dataset = Some(d.clone());
            }
        }
        Command::Probe { dataset, .. } => {
            if let Some(d) = dataset {
                cfg.assign("dataset", d, "--dataset")?;
            }
        }
        Command::Gradcheck { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<PathBuf, CoreError> {
    common
        .out
        .clone()
        .ok_or_else(|| CoreError::Config("--out DIR is required for this subcommand".into()))
}

fn last_log_line(out: &std::path::Path) -> Option<String> {
    let text = std::fs::read_to_string(out.join(LOG_FILE)).ok()?;
    text.lines().last().map(str::to_string)
}

fn execute(common: &Common, command: &Command) -> Result<i32, CoreError> {
    let cfg = resolve(common, command)?;
    match command {
        Command::Generate { .. } => {
            let out = require_out(common)?;
            let files = cmd_generate(&cfg, &out, common.force)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Pretrain { resume, .. } => {
            let out = require_out(common)?;
            let every = (cfg.train.max_steps.unwrap_or(u64::MAX).min(1000) / 20).max(1);
            let res = cmd_pretrain(&cfg, &out, common.force, resume.as_deref(), |r| {
                if r.step % every == 0 {
                    let b = &r.breakdown;
                    eprintln!(
                        "step {} epoch {} loss {:.5} jepa {:.5} reg {:.5} var_ctx {:.4} lr {:.3e}",
                        r.step, r.epoch, b.loss_pretrain, b.loss_jepa, b.loss_reg, b.var_context_context_voxels, b.learning_rate
                    );
                }
            });
            match res {
                Ok(s) => {
                    println!("trained to step {}; wrote {}", s.steps, s.checkpoints.last().expect("final checkpoint").display());
                }
                Err(e @ CoreError::NumericalAbort { .. }) => {
                    if let CoreError::NumericalAbort { last: Some(b), .. } = &e {
                        eprintln!("aborted step: {}", serde_json::to_string(b.as_ref()).expect("plain record"));
                    }
                    if let Some(line) = last_log_line(&out) {
                        eprintln!("last log line: {line}");
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Command::Diagnose { checkpoint, .. } => {
            let out = require_out(common)?;
            let d = cmd_diagnose(&cfg, checkpoint, &out, common.force)?;
            println!(
                "effective rank {:.3} (threshold {}){}",
                d.effective_rank,
                d.erank_threshold,
                if d.low_effective_rank { " LOW" } else { "" }
            );
            match d.occupancy_auc {
                Some(a) => println!("occupancy AUC {a:.4}"),
                None => println!("occupancy AUC undefined"),
            }
            println!("spread per scene {:.4}, pooled {:.4}, gamma {:.4}", d.spread_per_scene, d.spread_pooled, d.gamma);
            for w in &d.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Probe { checkpoint, .. } => {
            let out = require_out(common)?;
            let (label, r) = cmd_probe(&cfg, checkpoint.as_deref(), &out, common.force)?;
            println!(
                "{label}: AUC {:.4}, accuracy {:.4} ({} train, {} test cells)",
                r.auc, r.accuracy, r.train_examples, r.test_examples
            );
        }
        Command::Gradcheck { trials } => {
            let reports = cmd_gradcheck(*trials, cfg.train.seed)?;
            let mut failed = 0;
            let mut text = String::new();
            for (name, r) in &reports {
                let line = format!(
                    "{} {name}: {} checked, max rel err {:.2e}",
                    if r.passed() { "ok  " } else { "FAIL" },
                    r.checked,
                    r.max_rel_err
                );
                println!("{line}");
                text.push_str(&line);
                text.push('\n');
                failed += usize::from(!r.passed());
            }
            if let Some(out) = &common.out {
                prepare_out_dir(out, common.force)?;
                std::fs::write(out.join("gradcheck.txt"), &text).map_err(|e| CoreError::io(out.join("gradcheck.txt"), e))?;
            }
            if failed > 0 {
                eprintln!("{failed} of {} gradient checks failed", reports.len());
                return Ok(EXIT_NUMERICAL);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(args) {
        Ok(p) => p,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(p) = &parsed.common.profile {
        if !PROFILES.contains(&p.as_str()) {
            eprintln!("error: unknown profile '{p}' (expected one of {})", PROFILES.join(", "));
            return EXIT_USAGE;
        }
    }
    match execute(&parsed.common, &parsed.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
