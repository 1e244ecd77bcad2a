//! `attn-memcap` command-line front end.

pub mod io;
pub mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use attn_memcap_core::assumptions::{check_all, SamplingParams};
use attn_memcap_core::bounds::{
    prop2_upper_bound, prop5_upper_bound, relu_upper_bound, remark1_lower_bound, theorem1_lower_bound,
};
use attn_memcap_core::experiments::{
    gen_general_position_dataset, gen_shared_context_dataset, run_cell, saturation_report, sweep_rows, train_memorize,
    CellOutcome, DataKind, GridCell, SweepBase, SweepRow, TrainConfig,
};
use attn_memcap_core::model::{AttentionConfig, Task};
use attn_memcap_core::synthesis::{synthesize, synthesize_skip, verify_memorization, SynthesisConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::io::{load_dataset, load_weights, save_dataset, save_json, save_weights, WeightsManifest};
use crate::manifest::RunClock;

#[derive(Debug, Parser)]
#[command(name = "attn-memcap", version, about = "Memorization capacity of multi-head attention")]
pub struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, env = "ATTN_MEMCAP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Cap on worker threads (sweeps).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Shared,
    Genpos,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Test the dataset assumptions.
    Check(CheckArgs),
    /// Build weights that memorize a dataset exactly.
    Synthesize(SynthesizeArgs),
    /// Check that weights reproduce every label.
    Verify(VerifyArgs),
    /// Evaluate the closed-form capacity bounds.
    Bounds(BoundsArgs),
    /// Train the layer with Adam.
    Train(TrainArgs),
    /// Train over a grid of shapes and write a CSV table.
    Sweep(SweepArgs),
    /// Per-head softmax saturation of trained or synthesized weights.
    Saturation(SaturationArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    #[arg(long = "T")]
    pub t: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    /// `cls:<k>` or `reg`.
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub trials: usize,
    #[arg(long = "pass-frac", default_value_t = 0.99)]
    pub pass_frac: f64,
    /// Report file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub heads: usize,
    #[arg(long)]
    pub dh: usize,
    /// Defaults to the label width.
    #[arg(long)]
    pub dv: Option<usize>,
    /// Defaults to the label width.
    #[arg(long)]
    pub dout: Option<usize>,
    #[arg(long)]
    pub skip: bool,
    /// Trials for the sampled assumption checks.
    #[arg(long, default_value_t = 5000)]
    pub trials: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long = "H")]
    pub heads: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub dh: usize,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub dv: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub dout: usize,
    /// Hidden width of the ReLU network to compare against.
    #[arg(long)]
    pub m: Option<usize>,
    /// Measured Kruskal rank of the queries.
    #[arg(long = "Q")]
    pub q: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub heads: usize,
    #[arg(long)]
    pub dh: usize,
    /// Defaults to the label width.
    #[arg(long)]
    pub dv: Option<usize>,
    #[arg(long, default_value_t = 50_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub grid: PathBuf,
    /// Seeds per cell, counted up from `--seed`.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaturationArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    Task::parse(s).map_err(|e| e.to_string())
}

/// Bad input that clap could not catch; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// A check or verification did not pass.
    Failed,
}

/// Sweep grid file: a bare array of cells, or an object with `cells` and
/// optional shared settings.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum GridFile {
    Cells(Vec<GridCell>),
    Full(GridConfig),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub cells: Vec<GridCell>,
    #[serde(default = "default_grid_d")]
    pub d: usize,
    #[serde(default = "default_grid_kind")]
    pub kind: DataKind,
    #[serde(default = "default_grid_task")]
    pub task: String,
    #[serde(default = "default_grid_steps")]
    pub steps: usize,
    #[serde(default = "default_grid_lr")]
    pub lr: f64,
    #[serde(default = "default_grid_batch")]
    pub batch: usize,
}

fn default_grid_d() -> usize {
    32
}
fn default_grid_kind() -> DataKind {
    DataKind::Shared
}
fn default_grid_task() -> String {
    "cls:10".to_string()
}
fn default_grid_steps() -> usize {
    10_000
}
fn default_grid_lr() -> f64 {
    1e-3
}
fn default_grid_batch() -> usize {
    256
}

impl GridFile {
    pub fn into_config(self) -> GridConfig {
        match self {
            GridFile::Full(s) => s,
            GridFile::Cells(cells) => GridConfig {
                cells,
                d: default_grid_d(),
                kind: default_grid_kind(),
                task: default_grid_task(),
                steps: default_grid_steps(),
                lr: default_grid_lr(),
                batch: default_grid_batch(),
            },
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<Status> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed;
    let clock = RunClock::start();
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, seed, &clock),
        Command::Check(a) => cmd_check(&a, seed, &clock),
        Command::Synthesize(a) => cmd_synthesize(&a, seed, &clock),
        Command::Verify(a) => cmd_verify(&a),
        Command::Bounds(a) => cmd_bounds(&a),
        Command::Train(a) => cmd_train(&a, seed, &clock),
        Command::Sweep(a) => cmd_sweep(&a, seed, &clock),
        Command::Saturation(a) => cmd_saturation(&a, seed, &clock),
    }
}

/// Parses `argv`, runs, and maps the result to an exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("For more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_gen(a: &GenArgs, seed: u64, clock: &RunClock) -> Result<Status> {
    let data = match a.kind {
        Kind::Shared => gen_shared_context_dataset(a.t, a.n, a.d, a.task, seed),
        Kind::Genpos => gen_general_position_dataset(a.t, a.n, a.d, a.task, seed),
    }
    .map_err(|e| usage(e.to_string()))?;
    save_dataset(&a.out, &data)?;
    let config = json!({
        "kind": format!("{:?}", a.kind).to_lowercase(),
        "T": a.t, "n": a.n, "d": a.d, "task": a.task.to_string(),
    });
    clock.finish("gen", config, seed, &[], &a.out, true)?;
    eprintln!("wrote {} examples to {}", data.len(), a.out.display());
    Ok(Status::Ok)
}

fn cmd_check(a: &CheckArgs, seed: u64, clock: &RunClock) -> Result<Status> {
    if a.trials == 0 || !(a.pass_frac > 0.0 && a.pass_frac <= 1.0) {
        return Err(usage("--trials must be positive and --pass-frac in (0, 1]"));
    }
    let data = load_dataset(&a.dataset)?;
    let params = SamplingParams {
        trials: a.trials,
        pass_fraction: a.pass_frac,
        seed,
        ..Default::default()
    };
    let report = check_all(&data, &params)?;
    match &a.out {
        Some(out) => {
            save_json(out, &report)?;
            let config = json!({ "trials": a.trials, "pass_frac": a.pass_frac });
            clock.finish("check", config, seed, &[&a.dataset], out, false)?;
        }
        None => print_json(&report)?,
    }
    for (name, passed) in [
        ("assumption 1", report.assumption1.passed),
        ("assumption 2", report.assumption2.passed),
        ("assumption 3", report.assumption3.passed),
        ("general position", report.general_position.passed),
    ] {
        eprintln!("{name}: {}", if passed { "pass" } else { "FAIL" });
    }
    Ok(if report.construction_ready() {
        Status::Ok
    } else {
        Status::Failed
    })
}

fn model_for(data_d: usize, d_out: usize, heads: usize, dh: usize, dv: Option<usize>, dout: Option<usize>) -> Result<AttentionConfig> {
    let d_out_model = dout.unwrap_or(d_out);
    if d_out_model != d_out {
        return Err(usage(format!("--dout {d_out_model} does not match the label width {d_out}")));
    }
    AttentionConfig::new(heads, data_d, dh, dv.unwrap_or(d_out), d_out_model).map_err(|e| usage(e.to_string()))
}

fn cmd_synthesize(a: &SynthesizeArgs, seed: u64, clock: &RunClock) -> Result<Status> {
    let data = load_dataset(&a.dataset)?;
    let dims = data.dims();
    let model = model_for(dims.d, dims.d_out, a.heads, a.dh, a.dv, a.dout)?.with_skip(a.skip);
    let cfg = SynthesisConfig {
        assumption_trials: a.trials,
        ..SynthesisConfig::new(model)
    }
    .with_seed(seed);
    let (w, report) = if a.skip {
        synthesize_skip(&data, &cfg)
    } else {
        synthesize(&data, &cfg)
    }
    .context("synthesis failed")?;
    save_weights(&a.out, &w, &WeightsManifest::new(&model, seed, "synthesize"))?;
    save_json(&a.out.join("synthesis_report.json"), &report)?;
    clock.finish("synthesize", serde_json::to_value(cfg)?, seed, &[&a.dataset], &a.out, true)?;
    eprintln!(
        "memorized {} examples with {} heads (capacity {}), max relative error {:e}",
        dims.t, a.heads, report.capacity, report.max_rel_error
    );
    Ok(Status::Ok)
}

fn cmd_verify(a: &VerifyArgs) -> Result<Status> {
    if !(a.tol >= 0.0) {
        return Err(usage("--tol must be non-negative"));
    }
    let data = load_dataset(&a.dataset)?;
    let (w, cfg, _) = load_weights(&a.weights)?;
    let v = verify_memorization(&w, &cfg, &data, a.tol)?;
    print_json(&v)?;
    Ok(if v.passed { Status::Ok } else { Status::Failed })
}

pub fn bounds_json(a: &BoundsArgs) -> Result<Value> {
    let counts = [Some(a.heads), Some(a.n), Some(a.dh), a.d, a.dv, Some(a.dout), a.m, a.q];
    if counts.iter().flatten().any(|&c| c == 0) {
        return Err(usage("all counts must be positive"));
    }
    let mut out = json!({
        "H": a.heads, "n": a.n, "dh": a.dh,
        "theorem1_lower": theorem1_lower_bound(a.heads, a.n, a.dh),
        "shared_context_rank_upper": prop2_upper_bound(a.heads, a.n),
    });
    let obj = out.as_object_mut().expect("object literal");
    if let Some(q) = a.q {
        obj.insert("remark1_lower".into(), json!(remark1_lower_bound(a.heads, q, a.dh)));
    }
    if let Some(d) = a.d {
        obj.insert("d".into(), json!(d));
        obj.insert("constant_sum_rank_upper".into(), json!(prop5_upper_bound(a.heads, d)));
        let dv = a.dv.unwrap_or(a.dout);
        obj.insert(
            "attention_parameters".into(),
            json!(a.heads * (2 * d * a.dh + 2 * d * dv) + d * a.dout),
        );
    }
    if let Some(m) = a.m {
        obj.insert("relu_upper".into(), json!(relu_upper_bound(a.n, m, a.dout)));
        obj.insert("relu_parameters".into(), json!(m * (a.n + 1) + m * a.dout));
    }
    Ok(out)
}

fn cmd_bounds(a: &BoundsArgs) -> Result<Status> {
    print_json(&bounds_json(a)?)?;
    Ok(Status::Ok)
}

fn cmd_train(a: &TrainArgs, seed: u64, clock: &RunClock) -> Result<Status> {
    let data = load_dataset(&a.dataset)?;
    let dims = data.dims();
    let task = data.task().unwrap_or(Task::Regression);
    let cfg = model_for(dims.d, dims.d_out, a.heads, a.dh, a.dv, None)?;
    let tcfg = TrainConfig {
        batch_size: a.batch,
        learning_rate: a.lr,
        seed,
        ..TrainConfig::new(task, a.steps)
    };
    tcfg.validate().map_err(|e| usage(e.to_string()))?;
    let (w, mut report) = train_memorize(&data, &cfg, &tcfg)?;
    report.wall_time_secs = Some(clock.elapsed_secs());
    save_weights(&a.out, &w, &WeightsManifest::new(&cfg, seed, "train"))?;
    save_json(&a.out.join("train_report.json"), &report)?;
    let config = json!({ "model": cfg, "train": tcfg });
    clock.finish("train", config, seed, &[&a.dataset], &a.out, true)?;
    let (metric, value) = report.metric();
    eprintln!("final loss {:e}, {metric} {value}", report.final_loss);
    Ok(Status::Ok)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, seed: u64, clock: &RunClock) -> Result<Status> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let text = std::fs::read_to_string(&a.grid).with_context(|| format!("reading {}", a.grid.display()))?;
    let grid: GridFile = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", a.grid.display())))?;
    let setup = grid.into_config();
    if setup.cells.is_empty() {
        return Err(usage("grid has no cells"));
    }
    let task = Task::parse(&setup.task).map_err(|e| usage(e.to_string()))?;
    let kind = setup.kind;
    let base = SweepBase {
        d: setup.d,
        kind,
        train: TrainConfig {
            batch_size: setup.batch,
            learning_rate: setup.lr,
            ..TrainConfig::new(task, setup.steps)
        },
    };
    base.train.validate().map_err(|e| usage(e.to_string()))?;
    let seeds: Vec<u64> = (0..a.seeds).map(|k| seed + k).collect();
    let jobs: Vec<(GridCell, u64)> = setup.cells.iter().flat_map(|c| seeds.iter().map(move |&s| (*c, s))).collect();
    let outcomes: Vec<CellOutcome> = jobs
        .par_iter()
        .map(|&(cell, s)| {
            let result = run_cell(&cell, &base, s).map_err(|e| e.to_string());
            if let Err(e) = &result {
                eprintln!("cell H={} n={} dh={} T={} seed {s}: {e}", cell.heads, cell.n, cell.d_h, cell.t);
            }
            CellOutcome { cell, seed: s, result }
        })
        .collect();
    write_sweep_csv(&a.out, &sweep_rows(&outcomes))?;
    let config = json!({
        "cells": setup.cells, "d": setup.d, "kind": kind, "task": setup.task,
        "steps": setup.steps, "lr": setup.lr, "batch": setup.batch, "seeds": seeds,
    });
    clock.finish("sweep", config, seed, &[&a.grid], &a.out, false)?;
    Ok(Status::Ok)
}

fn cmd_saturation(a: &SaturationArgs, seed: u64, clock: &RunClock) -> Result<Status> {
    let data = load_dataset(&a.dataset)?;
    let (w, cfg, _) = load_weights(&a.weights)?;
    let report = saturation_report(&w, &cfg, &data, a.threshold).map_err(|e| usage(e.to_string()))?;
    save_json(&a.out, &report)?;
    clock.finish("saturation", json!({ "threshold": a.threshold }), seed, &[&a.dataset, &a.weights], &a.out, false)?;
    Ok(Status::Ok)
}
