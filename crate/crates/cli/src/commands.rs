//! Subcommand implementations. Each writes a `<command>.json` report
//! envelope into the output directory plus command-specific CSV files.

use std::path::{Path, PathBuf};

use dagr_core::diagnostics::geometry_report;
use dagr_core::flow::{initial_state, run_flow_from};
use dagr_core::gradcheck::run_gradient_suite;
use dagr_core::trainer::robustness::{robustness_sweep, DegradationCurve};
use dagr_core::trainer::gap::estimate_modality_gap;
use dagr_core::trainer::{generate_dataset, train_with, TrainOptions};
use dagr_core::DagrError;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::io::{DumpError, EmbeddingDump, ReportEnvelope};

/// Stable exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {reason}")]
    Io { context: String, reason: String },
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Domain(#[from] DagrError),
    #[error("{0}")]
    Usage(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Domain(_) => EXIT_CHECK_FAILED,
            _ => EXIT_USAGE,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CommandError {
    let context = context.into();
    move |e| CommandError::Io {
        context,
        reason: e.to_string(),
    }
}

/// What every command needs besides its config.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out: PathBuf,
    pub started_at: String,
}

impl RunContext {
    pub fn prepare(out: PathBuf) -> Result<Self, CommandError> {
        std::fs::create_dir_all(&out).map_err(io_err(format!("cannot create output dir {}", out.display())))?;
        Ok(Self {
            out,
            started_at: chrono::Utc::now().to_rfc3339(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_report<T: Serialize>(&self, command: &str, cfg: &RunConfig, results: &T) -> Result<(), CommandError> {
        let env = ReportEnvelope::new(
            command,
            cfg.echo(),
            cfg.seed,
            self.started_at.clone(),
            serde_json::to_value(results).expect("results serialize"),
        );
        let path = self.path(&format!("{command}.json"));
        env.write_file(&path).map_err(io_err(format!("cannot write {}", path.display())))
    }

    fn write_text(&self, name: &str, text: &[u8]) -> Result<(), CommandError> {
        let path = self.path(name);
        std::fs::write(&path, text).map_err(io_err(format!("cannot write {}", path.display())))
    }
}

pub fn cmd_gradcheck(cfg: &RunConfig, ctx: &RunContext) -> Result<i32, CommandError> {
    let rep = run_gradient_suite(&cfg.gradcheck)?;
    for c in &rep.checks {
        log::info!("{:<26} max rel error {:.3e}", c.name, c.max_rel_error);
    }
    println!(
        "gradcheck: {} instances, max relative error {:.3e} (tolerance {:.0e}): {}",
        rep.instances,
        rep.max_rel_error,
        rep.tolerance,
        if rep.passed { "pass" } else { "FAIL" }
    );
    ctx.write_report("gradcheck", cfg, &rep)?;
    Ok(if rep.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub fn cmd_flow(cfg: &RunConfig, ctx: &RunContext) -> Result<i32, CommandError> {
    let state = initial_state(&cfg.flow)?;
    let run = run_flow_from(&cfg.flow, state, &cfg.dump_embeddings)?;
    let mut csv = Vec::new();
    run.record.write_csv(&mut csv).map_err(io_err("cannot format trajectory"))?;
    ctx.write_text("flow_trajectory.csv", &csv)?;
    for (step, set) in &run.snapshots {
        EmbeddingDump::from_set(set).write_file(&ctx.path(&format!("flow_step{step}.csv")))?;
    }
    let rank = &run.record.eff_rank;
    let first: Vec<f64> = rank.iter().map(|r| r[0]).collect();
    let last: Vec<f64> = rank.iter().map(|r| *r.last().expect("T+1 entries")).collect();
    println!("flow: effective rank {first:.4?} -> {last:.4?}");
    ctx.write_report("flow", cfg, &run.record)?;
    Ok(EXIT_OK)
}

pub fn cmd_train(cfg: &RunConfig, ctx: &RunContext) -> Result<i32, CommandError> {
    let data = generate_dataset(&cfg.data)?;
    let opts = TrainOptions {
        trace: false,
        dump_epochs: cfg.dump_embeddings.clone(),
    };
    let mut out = train_with(&data, &cfg.train, &opts)?;
    if cfg.gap.enabled {
        out.report.delta_hat = Some(estimate_modality_gap(&data, &cfg.train, cfg.gap.tie)?);
    }
    let mut csv = Vec::new();
    out.report
        .write_epoch_csv(&mut csv)
        .map_err(io_err("cannot format epoch series"))?;
    ctx.write_text("train_epochs.csv", &csv)?;
    for snap in &out.dumps {
        EmbeddingDump::from_set(&snap.set).write_file(&ctx.path(&format!("embeddings_epoch{}.csv", snap.epoch)))?;
    }
    let acc = &out.report.final_accuracy;
    println!("train: unimodal accuracy {:.4?}, fused {:.4}", acc.unimodal, acc.fused);
    if let Some(g) = &out.report.delta_hat {
        println!("train: gap estimate {:.6} ({})", g.delta_hat, g.method);
    }
    ctx.write_report("train", cfg, &out.report)?;
    Ok(EXIT_OK)
}

pub fn cmd_diagnose(cfg: &RunConfig, input: Option<&Path>, ctx: &RunContext) -> Result<i32, CommandError> {
    let path = input
        .map(Path::to_path_buf)
        .or_else(|| cfg.diagnose.input.clone())
        .ok_or_else(|| CommandError::Usage("diagnose needs an embedding dump (--input or diagnose.input)".into()))?;
    let dump = EmbeddingDump::read_file(&path)?;
    let set = dump.to_set()?;
    let rep = geometry_report(&set, &cfg.diagnose.report)?;
    println!(
        "diagnose: {} modalities x {} samples, effective rank {:.4?}, cross-modal deviation {:.6e}",
        set.modalities(),
        set.samples(),
        rep.effective_rank,
        rep.cross_modal_deviation
    );
    ctx.write_report("diagnose", cfg, &rep)?;
    Ok(EXIT_OK)
}

fn curves_csv(curves: &[DegradationCurve]) -> String {
    let m = curves
        .first()
        .and_then(|c| c.accuracies.first())
        .map_or(0, |a| a.unimodal.len());
    let mut s = String::from("kind,target,severity,target_acc,fused_acc");
    for k in 0..m {
        s.push_str(&format!(",acc_m{k}"));
    }
    s.push('\n');
    for c in curves {
        let kind = serde_json::to_value(c.kind).expect("kind serializes");
        for (i, sev) in c.severities.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{sev},{},{}",
                kind.as_str().unwrap_or_default(),
                c.target,
                c.target_acc[i],
                c.fused_acc[i]
            ));
            for a in &c.accuracies[i].unimodal {
                s.push_str(&format!(",{a}"));
            }
            s.push('\n');
        }
    }
    s
}

pub fn cmd_robustness(cfg: &RunConfig, ctx: &RunContext) -> Result<i32, CommandError> {
    let data = generate_dataset(&cfg.data)?;
    let out = train_with(&data, &cfg.train, &TrainOptions::default())?;
    let curves = cfg
        .robustness
        .specs()
        .par_iter()
        .map(|spec| robustness_sweep(&data, &out.model, spec))
        .collect::<Result<Vec<_>, _>>()?;
    for c in &curves {
        println!("robustness {:?}: target accuracy {:.4?}", c.kind, c.target_acc);
    }
    ctx.write_text("robustness.csv", curves_csv(&curves).as_bytes())?;
    ctx.write_report("robustness", cfg, &curves)?;
    Ok(EXIT_OK)
}
