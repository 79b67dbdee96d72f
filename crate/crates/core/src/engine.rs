//! Experiment driver: initialisation, the round loop, metrics and the
//! nonconvex convergence bound.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::objectives::{global_grad_norm, ConstantEstimates, Objective, Problem, Trajectory};
use crate::protocol::{self, output_model, HyperParams, SystemState};
use crate::rng;
use crate::topology::DynamicGraphSet;

/// Losses above this count as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Independent `N(0, σ²I)` draws per worker.
    DistinctGaussian { sigma: f64 },
    /// Every worker at the same point; a single value is broadcast.
    Identical(Vec<f64>),
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::DistinctGaussian { sigma: 1.0 }
    }
}

pub fn init_workers(m: usize, d: usize, mode: &InitMode, seed: u64) -> Result<SystemState> {
    let xs = match mode {
        InitMode::DistinctGaussian { sigma } => {
            let normal = Normal::new(0.0, *sigma)
                .map_err(|e| Error::Hyper(format!("init sigma: {e}")))?;
            let mut r = rng::stream(seed, rng::INIT);
            (0..m)
                .map(|_| DVector::from_fn(d, |_, _| normal.sample(&mut r)))
                .collect()
        }
        InitMode::Identical(v) => {
            let x = match v.len() {
                1 => DVector::from_element(d, v[0]),
                n if n == d => DVector::from_vec(v.clone()),
                n => {
                    return Err(Error::Hyper(format!(
                        "identical init has {n} entries for dimension {d}"
                    )))
                }
            };
            vec![x; m]
        }
    };
    Ok(SystemState::new(xs, seed))
}

/// `‖X(I−J)‖_F`.
pub fn consensus_distance(state: &SystemState) -> f64 {
    let xs = state.params();
    let mean = protocol::mean(&xs);
    xs.iter().map(|x| (*x - &mean).norm_squared()).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub k: u64,
    /// `F_i(x_i)` on each worker's full shard.
    pub local_loss: Vec<f64>,
    pub eval_loss: Vec<f64>,
    pub consensus_dist: f64,
    pub global_grad_norm_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub rounds: u64,
    pub rounds_completed: u64,
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence: Option<String>,
    /// `(1/K) Σ_{k<K} ‖∇F(x̄_k)‖²`.
    pub avg_grad_norm_sq: f64,
    pub final_grad_norm_sq: f64,
    pub final_consensus_dist: f64,
    pub final_eval_loss: Vec<f64>,
    /// Held-out score of the averaged model.
    pub averaged_eval_loss: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
}

pub const CSV_HEADER: [&str; 6] = [
    "k",
    "node",
    "local_loss",
    "eval_loss",
    "consensus_dist",
    "global_grad_norm_sq",
];

impl MetricsLog {
    /// One line per (row, node); the two global columns are filled on node 0
    /// only.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for row in &self.rows {
            for (node, (local, eval)) in row.local_loss.iter().zip(&row.eval_loss).enumerate() {
                let (cd, gn) = if node == 0 {
                    (row.consensus_dist.to_string(), row.global_grad_norm_sq.to_string())
                } else {
                    (String::new(), String::new())
                };
                w.write_record([
                    row.k.to_string(),
                    node.to_string(),
                    local.to_string(),
                    eval.to_string(),
                    cd,
                    gn,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, &self.summary)?;
        writeln!(out)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    /// Keep every recorded iterate for constant estimation.
    pub record_trajectory: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub final_model: DVector<f64>,
    /// `‖∇F(x̄_k)‖²` for `k = 0..=rounds_completed`.
    pub grad_norm_sq: Vec<f64>,
    /// `F(x̄_0)`.
    pub initial_loss: f64,
    pub trajectory: Option<Trajectory>,
    pub hyper: HyperParams,
}

fn record(state: &SystemState, problem: &Problem, gn: f64) -> MetricsRow {
    let (local_loss, eval_loss): (Vec<f64>, Vec<f64>) = state
        .workers
        .par_iter()
        .enumerate()
        .map(|(i, w)| (problem.local_loss(i, &w.x), problem.eval_loss(&w.x)))
        .unzip();
    MetricsRow {
        k: state.k,
        local_loss,
        eval_loss,
        consensus_dist: consensus_distance(state),
        global_grad_norm_sq: gn,
    }
}

/// Runs `rounds` rounds from `state`. Divergence truncates the log and sets
/// the flag instead of failing.
#[allow(clippy::too_many_arguments)]
pub fn run_rounds(
    mut state: SystemState,
    problem: &Problem,
    dset: &DynamicGraphSet,
    hp: &HyperParams,
    rounds: u64,
    stride: u64,
    seed: u64,
    opts: RunOptions,
) -> Result<RunOutput> {
    hp.validate()?;
    if stride == 0 {
        return Err(Error::Hyper("metrics stride must be >= 1".into()));
    }
    let start = Instant::now();
    let m = state.m();
    let mut traj = opts.record_trajectory.then(Trajectory::default);
    let mut rows = Vec::new();
    let mut grad_norm_sq = Vec::with_capacity(rounds as usize + 1);

    let x_bar = output_model(&state);
    let initial_loss = problem.global_loss(&x_bar);
    grad_norm_sq.push(global_grad_norm(problem, &x_bar));
    rows.push(record(&state, problem, grad_norm_sq[0]));
    if let Some(t) = traj.as_mut() {
        t.points.extend(state.workers.iter().map(|w| w.x.clone()));
        t.points.push(x_bar);
    }

    let mut divergence = None;
    while state.k < rounds {
        let info = match protocol::round(&mut state, hp, dset, problem) {
            Ok(info) => info,
            Err(Error::NonFinite { round, worker }) => {
                divergence = Some(format!("non-finite parameters at round {round} on worker {worker}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let x_bar = output_model(&state);
        let gn = global_grad_norm(problem, &x_bar);
        grad_norm_sq.push(gn);
        if let Some(t) = traj.as_mut() {
            t.delta2 = t.delta2.max(info.leader_gap2);
            t.points.extend(state.workers.iter().map(|w| w.x.clone()));
            t.points.push(x_bar);
        }
        if let Some((i, l)) = info
            .losses
            .iter()
            .enumerate()
            .find(|(_, l)| !l.is_finite() || **l > DIVERGENCE_LOSS)
        {
            divergence = Some(format!("loss {l} on worker {i} at round {}", info.k));
            rows.push(record(&state, problem, gn));
            break;
        }
        if state.k % stride == 0 || state.k == rounds {
            rows.push(record(&state, problem, gn));
        }
    }
    if divergence.is_some() && rows.last().map(|r| r.k) != Some(state.k) {
        rows.push(record(&state, problem, *grad_norm_sq.last().expect("nonempty")));
    }

    let completed = state.k;
    let averaged = if completed == 0 {
        grad_norm_sq[0]
    } else {
        grad_norm_sq[..completed as usize].iter().sum::<f64>() / completed as f64
    };
    let final_model = output_model(&state);
    let last = rows.last().expect("initial row");
    let summary = Summary {
        seed,
        rounds,
        rounds_completed: completed,
        diverged: divergence.is_some(),
        divergence,
        avg_grad_norm_sq: averaged,
        final_grad_norm_sq: *grad_norm_sq.last().expect("nonempty"),
        final_consensus_dist: last.consensus_dist,
        final_eval_loss: last.eval_loss.clone(),
        averaged_eval_loss: problem.eval_loss(&final_model),
        alpha: hp.alpha_for(dset),
        gamma: hp.gamma,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    debug_assert_eq!(last.eval_loss.len(), m);
    Ok(RunOutput {
        log: MetricsLog { rows, summary },
        final_model,
        grad_norm_sq,
        initial_loss,
        trajectory: traj,
        hyper: hp.clone(),
    })
}

fn in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build()?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Builds everything from `cfg` and runs it.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutput> {
    let setup = cfg.setup()?;
    let m = setup.dset.m();
    let mut state = init_workers(m, setup.problem.dim(), &cfg.init, cfg.seed)?;
    if cfg.hyper.random_start {
        state.start_phase = rng::indexed_stream(cfg.seed, rng::INIT, 1).gen_range(0..setup.dset.n());
    }
    in_pool(opts.jobs, || {
        run_rounds(
            state,
            &setup.problem,
            &setup.dset,
            &setup.hyper,
            cfg.rounds,
            cfg.stride,
            cfg.seed,
            opts,
        )
    })?
}

/// Inputs of the nonconvex convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInputs {
    pub constants: ConstantEstimates,
    pub rho: f64,
    /// `(1−α)(1−ω)γ`.
    pub eta: f64,
    /// Total pulling strength `λ_N + λ_τ`.
    pub lambda: f64,
    pub k_rounds: u64,
    pub m: usize,
    pub f1: f64,
    pub f_star: f64,
}

impl BoundInputs {
    pub fn eta(alpha: f64, omega: f64, gamma: f64) -> f64 {
        (1.0 - alpha) * (1.0 - omega) * gamma
    }
}

/// `8(F(x̄_1)−F*)/(ηK) + 8M/η + 8η²L²ρ/(1−√ρ) · ((mσ²+λ²Δ²)/(m(1+√ρ)) + 3ζ²/(1−√ρ))`
/// with `M = η²Lσ²/(2m) + ληβΔ + λη²LβΔ + λ²η²LΔ²/2`.
pub fn theorem2_bound(bi: &BoundInputs) -> Result<f64> {
    let c = &bi.constants;
    if !(bi.rho >= 0.0 && bi.rho < 1.0) {
        return Err(Error::BoundPrecondition(format!("rho < 1 (rho = {})", bi.rho)));
    }
    if bi.k_rounds == 0 || !(bi.eta > 0.0) {
        return Err(Error::BoundPrecondition("K >= 1 and eta > 0".into()));
    }
    let sr = bi.rho.sqrt();
    let step_cap = if bi.rho == 0.0 { 1.0 } else { (1.0 / sr - 1.0).min(1.0) };
    if bi.eta * c.l_smooth > step_cap {
        return Err(Error::BoundPrecondition(format!(
            "(1-alpha)(1-omega)*gamma*L <= min(1, 1/sqrt(rho) - 1) ({} > {step_cap})",
            bi.eta * c.l_smooth
        )));
    }
    let (eta, l, lam, m) = (bi.eta, c.l_smooth, bi.lambda, bi.m as f64);
    let delta = c.delta2.sqrt();
    let big_m = eta * eta * l * c.sigma2 / (2.0 * m)
        + lam * eta * c.beta_lip * delta
        + lam * eta * eta * l * c.beta_lip * delta
        + lam * lam * eta * eta * l * c.delta2 / 2.0;
    let consensus = 8.0 * eta * eta * l * l * bi.rho / (1.0 - sr)
        * ((m * c.sigma2 + lam * lam * c.delta2) / (m * (1.0 + sr)) + 3.0 * c.zeta2 / (1.0 - sr));
    Ok(8.0 * (bi.f1 - bi.f_star) / (eta * bi.k_rounds as f64) + 8.0 * big_m / eta + consensus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::objectives::{ProblemKind, ProblemSpec};
    use crate::topology::{GraphKind, TopologyDescriptor};

    fn state(xs: &[f64]) -> SystemState {
        SystemState::new(xs.iter().map(|&v| DVector::from_element(1, v)).collect(), 0)
    }

    #[test]
    fn consensus_distance_cases() {
        assert_eq!(consensus_distance(&state(&[3.0, 3.0, 3.0])), 0.0);
        assert!((consensus_distance(&state(&[0.0, 2.0])) - 2f64.sqrt()).abs() < 1e-15);
        let a = consensus_distance(&state(&[0.3, -1.0, 4.0]));
        let b = consensus_distance(&state(&[10.3, 9.0, 14.0]));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn init_modes() {
        let s = init_workers(4, 3, &InitMode::Identical(vec![0.0]), 1).unwrap();
        assert!(s.workers.iter().all(|w| w.x == DVector::zeros(3)));
        let g = InitMode::DistinctGaussian { sigma: 1.0 };
        let a = init_workers(4, 3, &g, 1).unwrap();
        assert!(consensus_distance(&a) > 0.0);
        let b = init_workers(4, 3, &g, 1).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(init_workers(4, 3, &InitMode::Identical(vec![1.0, 2.0]), 1).is_err());
    }

    fn quad_cfg(preset: Preset, rounds: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(
            preset,
            TopologyDescriptor::new(GraphKind::Ring, 4),
            ProblemSpec::new(ProblemKind::Quadratic, 5, 200),
            rounds,
        );
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn zero_rounds_gives_initial_row() {
        let out = run_experiment(&quad_cfg(Preset::Dpsgd, 0), RunOptions::default()).unwrap();
        assert_eq!(out.log.rows.len(), 1);
        assert_eq!(out.log.rows[0].k, 0);
        assert_eq!(out.log.summary.rounds_completed, 0);
    }

    #[test]
    fn dpsgd_quadratic_converges() {
        let mut cfg = quad_cfg(Preset::Dpsgd, 2000);
        cfg.hyper.gamma = Some(0.1);
        cfg.problem.batch_size = 32;
        let out = run_experiment(&cfg, RunOptions::default()).unwrap();
        let gn = &out.grad_norm_sq;
        assert!(gn[2000] * 100.0 <= gn[0], "{} vs {}", gn[2000], gn[0]);
        let rows: Vec<u64> = out.log.rows.iter().map(|r| r.k).collect();
        assert_eq!(rows.len(), 201);
        assert!(rows.windows(2).all(|w| w[1] - w[0] == 10));
    }

    #[test]
    fn divergence_truncates() {
        let mut cfg = quad_cfg(Preset::Dpsgd, 500);
        cfg.hyper.gamma = Some(50.0);
        let out = run_experiment(&cfg, RunOptions::default()).unwrap();
        assert!(out.log.summary.diverged);
        assert!(out.log.summary.rounds_completed < 500);
    }

    #[test]
    fn csv_blank_except_node_zero() {
        let out = run_experiment(&quad_cfg(Preset::Aldsgd, 20), RunOptions::default()).unwrap();
        let mut buf = Vec::new();
        out.log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        let second: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert!(!first[4].is_empty() && !first[5].is_empty());
        assert!(second[4].is_empty() && second[5].is_empty());
        assert_eq!(text.lines().count(), 1 + 3 * 4);
    }

    #[test]
    fn jobs_do_not_change_results() {
        let cfg = quad_cfg(Preset::Aldsgd, 60);
        let a = run_experiment(&cfg, RunOptions { jobs: Some(1), ..Default::default() }).unwrap();
        let b = run_experiment(&cfg, RunOptions { jobs: Some(4), ..Default::default() }).unwrap();
        assert_eq!(a.log.rows, b.log.rows);
        assert_eq!(a.final_model, b.final_model);
    }

    fn inputs() -> BoundInputs {
        BoundInputs {
            constants: ConstantEstimates {
                l_smooth: 2.0,
                beta_lip: 1.0,
                sigma2: 0.0,
                zeta2: 0.0,
                delta2: 0.0,
            },
            rho: 0.5,
            eta: 0.05,
            lambda: 0.1,
            k_rounds: 100,
            m: 8,
            f1: 1.0,
            f_star: 1.0,
        }
    }

    #[test]
    fn bound_vanishes_without_noise_or_gap() {
        assert_eq!(theorem2_bound(&inputs()).unwrap(), 0.0);
    }

    #[test]
    fn bound_preconditions_are_named() {
        let mut bi = inputs();
        bi.rho = 1.0;
        assert!(matches!(theorem2_bound(&bi), Err(Error::BoundPrecondition(s)) if s.contains("rho < 1")));
        let mut bi = inputs();
        bi.eta = 0.3;
        assert!(matches!(theorem2_bound(&bi), Err(Error::BoundPrecondition(s)) if s.contains("1/sqrt(rho)")));
    }

    #[test]
    fn theorem2_schedule_shrinks_bound() {
        let c = ConstantEstimates {
            l_smooth: 1.0,
            beta_lip: 2.0,
            sigma2: 0.5,
            zeta2: 0.3,
            delta2: 0.4,
        };
        let at = |k: u64| {
            let hp = HyperParams::theorem2(8, k, 0.3, 0.05, 0.05);
            theorem2_bound(&BoundInputs {
                constants: c,
                rho: 0.5,
                eta: BoundInputs::eta(0.3, 0.1, hp.gamma),
                lambda: hp.lambda_n + hp.lambda_tau,
                k_rounds: k,
                m: 8,
                f1: 3.0,
                f_star: 0.0,
            })
            .unwrap()
        };
        assert!(at(20_000) < at(10_000));
    }
}
