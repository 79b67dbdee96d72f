//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad config or empty sweep,
//! 3 divergence, 4 infeasible `k_free`.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, SpectralConfig, SweepCell};
use crate::engine::{run_experiment, RunOptions, RunOutput};
use crate::error::{Error, Result};
use crate::mixing::BudgetSchedule;
use crate::rng;
use crate::spectral::{
    alpha_range, check_contraction, default_k_free, estimate_rho, lambda_zeta, ContractionReport,
    MixingParams,
};
use crate::topology::Matching;

#[derive(Debug, Parser)]
#[command(name = "aldsgd", version, about = "Leader-assisted decentralized SGD simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "ALDSGD_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Metrics every this many rounds.
    #[arg(long)]
    pub stride: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write metrics.csv and summary.json.
    Run(Common),
    /// Mixing-matrix diagnostics to spectral.json.
    Spectral(Common),
    /// Run every cell of the config's sweep section.
    Sweep(Common),
    /// Print the matching decomposition of each phase graph.
    Decompose(Common),
}

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::KFreeInfeasible { .. } => EXIT_INFEASIBLE,
        _ => EXIT_RUNTIME,
    }
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = c.stride {
        cfg.stride = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &ExperimentConfig) -> PathBuf {
    c.out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    out.log.write_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?))?;
    out.log.write_summary(BufWriter::new(File::create(dir.join("summary.json"))?))?;
    Ok(())
}

/// Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Spectral(c) => cmd_spectral(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Decompose(c) => cmd_decompose(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_run(c: &Common) -> Result<i32> {
    let cfg = load(c)?;
    let dir = out_dir(c, &cfg);
    let out = run_experiment(
        &cfg,
        RunOptions {
            jobs: c.jobs,
            record_trajectory: false,
        },
    )?;
    write_run(&dir, &out)?;
    let s = &out.log.summary;
    println!(
        "{} rounds={}/{} avg_grad_norm_sq={:.6e} averaged_eval_loss={:.6e} consensus={:.6e}{}",
        cfg.preset.name(),
        s.rounds_completed,
        s.rounds,
        s.avg_grad_norm_sq,
        s.averaged_eval_loss,
        s.final_consensus_dist,
        if s.diverged { " DIVERGED" } else { "" }
    );
    Ok(if s.diverged { EXIT_DIVERGED } else { 0 })
}

#[derive(Debug, Serialize)]
struct SpectralOutput {
    rho: f64,
    e1_norm: f64,
    e2_norm: f64,
    std_err: f64,
    phase_rho: Vec<f64>,
    alpha: f64,
    omega: f64,
    alpha_in_range: bool,
    k_free: f64,
    alpha_min: f64,
    alpha_max: f64,
    omega_max_at_alpha: f64,
    lambda_min: f64,
    lambda_max: f64,
    zeta: f64,
    samples: usize,
    seed: u64,
    contraction: ContractionReport,
}

pub fn cmd_spectral(c: &Common) -> Result<i32> {
    let cfg = load(c)?;
    let sc = cfg.spectral.clone().unwrap_or_else(SpectralConfig::default);
    let dset = cfg.graph_set()?;
    let hp = cfg.hyper_params(&dset)?;
    let sched = BudgetSchedule::new(hp.c_b)?;
    let lz = lambda_zeta(&dset, &sched)?;
    let k_free = sc.k_free.unwrap_or_else(|| default_k_free(&lz));
    let range = alpha_range(&lz, k_free, dset.m())?;
    let alpha = sc
        .alpha
        .or(cfg.hyper.alpha)
        .unwrap_or(0.5 * (range.alpha_min + range.alpha_max));
    let omega = sc.omega.unwrap_or_else(|| hp.omega());
    let params = MixingParams::symmetric(alpha, omega);

    let mut r = rng::stream(cfg.seed, rng::SPECTRAL);
    let report = estimate_rho(&dset, &sched, &params, sc.policy, sc.samples, &mut r)?;
    let contraction = check_contraction(&dset, &sched, &params, sc.policy, &report, sc.n_products, sc.trials, &mut r)?;
    let out = SpectralOutput {
        rho: report.rho,
        e1_norm: report.e1_norm,
        e2_norm: report.e2_norm,
        std_err: report.std_err,
        phase_rho: report.phase_rho,
        alpha,
        omega,
        alpha_in_range: range.contains(alpha),
        k_free,
        alpha_min: range.alpha_min,
        alpha_max: range.alpha_max,
        omega_max_at_alpha: range.omega_max(alpha),
        lambda_min: lz.lambda_min,
        lambda_max: lz.lambda_max,
        zeta: lz.zeta,
        samples: report.samples,
        seed: cfg.seed,
        contraction,
    };
    let dir = out_dir(c, &cfg);
    fs::create_dir_all(&dir)?;
    let mut f = BufWriter::new(File::create(dir.join("spectral.json"))?);
    serde_json::to_writer_pretty(&mut f, &out)?;
    writeln!(f)?;
    println!(
        "rho={:.6} (e1={:.6}, e2={:.6}) alpha={alpha} omega={omega} window=({:.6}, {:.6})",
        out.rho, out.e1_norm, out.e2_norm, out.alpha_min, out.alpha_max
    );
    Ok(0)
}

fn cell_label(cell: &SweepCell, cfg: &ExperimentConfig) -> [String; 5] {
    [
        cfg.topology
            .target_d
            .map(|d| d.to_string())
            .unwrap_or_default(),
        cfg.hyper.c_b.map(|v| v.to_string()).unwrap_or_default(),
        cell.preset.unwrap_or(cfg.preset).name().to_string(),
        cfg.seed.to_string(),
        cfg.rounds.to_string(),
    ]
}

pub fn cmd_sweep(c: &Common) -> Result<i32> {
    let cfg = load(c)?;
    let cells = cfg.sweep.as_ref().map(|s| s.cells()).unwrap_or_default();
    if cells.is_empty() {
        return Err(Error::Config {
            path: "sweep".into(),
            message: "sweep product is empty".into(),
        });
    }
    let configs: Vec<ExperimentConfig> = cells.iter().map(|cell| cfg.with_cell(cell)).collect();
    for (i, cell_cfg) in configs.iter().enumerate() {
        cell_cfg.validate().map_err(|e| match e {
            Error::Config { path, message } => Error::Config {
                path: format!("sweep[{i}].{path}"),
                message,
            },
            other => other,
        })?;
    }
    let dir = out_dir(c, &cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.jobs.unwrap_or(0))
        .build()?;
    let results: Vec<Result<RunOutput>> = pool.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(i, cell_cfg)| {
                let out = run_experiment(cell_cfg, RunOptions::default())?;
                write_run(&dir.join(format!("cell_{i:03}")), &out)?;
                Ok(out)
            })
            .collect()
    });

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("aggregate.csv"))?));
    w.write_record([
        "cell",
        "target_D",
        "c_b",
        "preset",
        "seed",
        "K",
        "rounds_completed",
        "diverged",
        "avg_grad_norm_sq",
        "averaged_eval_loss",
        "mean_node_eval_loss",
        "max_node_eval_loss",
        "final_consensus_dist",
    ])?;
    let mut diverged = false;
    for (i, (res, (cell, cell_cfg))) in results.into_iter().zip(cells.iter().zip(&configs)).enumerate() {
        let out = res?;
        let s = &out.log.summary;
        diverged |= s.diverged;
        let evals = &s.final_eval_loss;
        let mean = evals.iter().sum::<f64>() / evals.len() as f64;
        let max = evals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut rec = vec![i.to_string()];
        rec.extend(cell_label(cell, cell_cfg));
        rec.extend([
            s.rounds_completed.to_string(),
            s.diverged.to_string(),
            s.avg_grad_norm_sq.to_string(),
            s.averaged_eval_loss.to_string(),
            mean.to_string(),
            max.to_string(),
            s.final_consensus_dist.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    println!("{} cells written to {}", cells.len(), dir.display());
    Ok(if diverged { EXIT_DIVERGED } else { 0 })
}

#[derive(Debug, Serialize)]
struct PhaseDecomposition {
    phase: usize,
    shift: usize,
    total_degree: usize,
    matchings: Vec<Matching>,
}

pub fn cmd_decompose(c: &Common) -> Result<i32> {
    let cfg = load(c)?;
    let dset = cfg.graph_set()?;
    let phases: Vec<PhaseDecomposition> = dset
        .graphs()
        .iter()
        .zip(dset.decompositions())
        .zip(dset.shifts())
        .enumerate()
        .map(|(phase, ((g, dec), &shift))| PhaseDecomposition {
            phase,
            shift,
            total_degree: g.total_degree(),
            matchings: dec.clone(),
        })
        .collect();
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    serde_json::to_writer_pretty(&mut lock, &phases)?;
    writeln!(lock)?;
    Ok(0)
}
