//! One synchronous round of the leader-assisted protocol.
//!
//! Each worker takes a gradient step with two corrective forces pulling it
//! towards its best-loss neighbour `x^N` and its highest-degree neighbour
//! `x^τ`, then averages with its active neighbours and both leaders. Setting
//! `λ = ω = 0` and `n = 1` recovers MATCHA, and additionally `c_b = 1`
//! recovers D-PSGD.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::{base_weight_matrix, check_omegas, sample_phase, ActiveGraph, BudgetSchedule};
use crate::objectives::{Batch, Objective};
use crate::rng::{self, StreamRng};
use crate::topology::DynamicGraphSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub gamma: f64,
    /// `(round, multiplier)`: from `round` on, the step size is scaled by
    /// the product of all multipliers reached so far.
    #[serde(default)]
    pub lr_schedule: Vec<(u64, f64)>,
    pub lambda_n: f64,
    pub lambda_tau: f64,
    pub omega_n: f64,
    pub omega_tau: f64,
    /// Mixing step; `None` means `1/(max_degree + 1)` of the graph set.
    pub alpha: Option<f64>,
    pub c_b: f64,
    pub n_graphs: usize,
}

impl HyperParams {
    /// D-PSGD with step `gamma`.
    pub fn dpsgd(gamma: f64) -> Self {
        Self {
            gamma,
            lr_schedule: Vec::new(),
            lambda_n: 0.0,
            lambda_tau: 0.0,
            omega_n: 0.0,
            omega_tau: 0.0,
            alpha: None,
            c_b: 1.0,
            n_graphs: 1,
        }
    }

    /// `λ = √(m/K)` split evenly between the two forces and
    /// `γ = √(m/((1−ω)(1−α)K))`.
    pub fn theorem2(m: usize, k_rounds: u64, alpha: f64, omega_n: f64, omega_tau: f64) -> Self {
        let m = m as f64;
        let k = k_rounds.max(1) as f64;
        let lambda = (m / k).sqrt();
        let omega = omega_n + omega_tau;
        Self {
            gamma: (m / ((1.0 - omega) * (1.0 - alpha) * k)).sqrt(),
            lr_schedule: Vec::new(),
            lambda_n: lambda / 2.0,
            lambda_tau: lambda / 2.0,
            omega_n,
            omega_tau,
            alpha: Some(alpha),
            c_b: 1.0,
            n_graphs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Hyper(format!("gamma must be positive, got {}", self.gamma)));
        }
        for (name, v) in [("lambda_n", self.lambda_n), ("lambda_tau", self.lambda_tau)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Hyper(format!("{name} must be nonnegative, got {v}")));
            }
        }
        check_omegas(self.omega_n, self.omega_tau).map_err(|e| Error::Hyper(e.to_string()))?;
        if let Some(a) = self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Hyper(format!("alpha must be nonnegative, got {a}")));
            }
        }
        BudgetSchedule::new(self.c_b).map_err(|e| Error::Hyper(e.to_string()))?;
        if self.n_graphs == 0 {
            return Err(Error::Hyper("n_graphs must be >= 1".into()));
        }
        if self.lr_schedule.iter().any(|&(_, f)| !(f > 0.0 && f.is_finite())) {
            return Err(Error::Hyper("lr_schedule multipliers must be positive".into()));
        }
        Ok(())
    }

    pub fn omega(&self) -> f64 {
        self.omega_n + self.omega_tau
    }

    pub fn alpha_for(&self, dset: &DynamicGraphSet) -> f64 {
        self.alpha
            .unwrap_or_else(|| 1.0 / (dset.max_degree() as f64 + 1.0))
    }

    /// Step size used in round `k`.
    pub fn lr_at(&self, k: u64) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|&&(r, _)| k >= r)
            .fold(self.gamma, |g, &(_, f)| g * f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub x: DVector<f64>,
    /// Minibatch loss from the latest gradient evaluation.
    pub last_loss: f64,
    /// Degree in the latest active graph.
    pub degree: usize,
}

#[derive(Debug, Clone)]
pub struct SystemState {
    pub workers: Vec<WorkerState>,
    /// Completed rounds.
    pub k: u64,
    /// Phase offset; round `k` uses graph `(start_phase + k − 1) mod n`.
    pub start_phase: usize,
    link_rng: StreamRng,
    batch_rngs: Vec<StreamRng>,
}

impl SystemState {
    pub fn new(xs: Vec<DVector<f64>>, seed: u64) -> Self {
        let batch_rngs = (0..xs.len())
            .map(|i| rng::indexed_stream(seed, rng::BATCH, i as u64))
            .collect();
        Self {
            workers: xs
                .into_iter()
                .map(|x| WorkerState {
                    x,
                    last_loss: f64::NAN,
                    degree: 0,
                })
                .collect(),
            k: 0,
            start_phase: 0,
            link_rng: rng::stream(seed, rng::LAPLACIAN),
            batch_rngs,
        }
    }

    pub fn m(&self) -> usize {
        self.workers.len()
    }

    pub fn params(&self) -> Vec<&DVector<f64>> {
        self.workers.iter().map(|w| &w.x).collect()
    }

    /// Graph index the next round will use.
    pub fn next_phase(&self, dset: &DynamicGraphSet) -> usize {
        (self.start_phase + dset.phase_index(self.k + 1)) % dset.n()
    }
}

/// Leaders of node `i` over its closed neighbourhood: lowest loss and highest
/// degree, ties to the lowest index. An isolated node leads itself.
pub fn select_leaders(i: usize, adj: &[Vec<usize>], losses: &[f64], degrees: &[usize]) -> (usize, usize) {
    let mut best = i;
    let mut hub = i;
    for &j in &adj[i] {
        if losses[j] < losses[best] || (losses[j] == losses[best] && j < best) {
            best = j;
        }
        if degrees[j] > degrees[hub] || (degrees[j] == degrees[hub] && j < hub) {
            hub = j;
        }
    }
    (best, hub)
}

/// `x − γg − γλ_N(x − x^N) − γλ_τ(x − x^τ)`.
pub fn corrective_step(
    x: &DVector<f64>,
    g: &DVector<f64>,
    x_n: &DVector<f64>,
    x_tau: &DVector<f64>,
    gamma: f64,
    hp: &HyperParams,
) -> DVector<f64> {
    let mut out = x.clone();
    out.axpy(-gamma, g, 1.0);
    out.axpy(-gamma * hp.lambda_n, &(x - x_n), 1.0);
    out.axpy(-gamma * hp.lambda_tau, &(x - x_tau), 1.0);
    out
}

/// `(1−ω_N−ω_τ)(Σ_{j≠i} W_ij x_j + W_ii x_half) + ω_N x^N + ω_τ x^τ`, with
/// `xs` the pre-round parameters of all workers.
pub fn leader_average(
    i: usize,
    x_half: &DVector<f64>,
    xs: &[&DVector<f64>],
    w_row: &[f64],
    x_n: &DVector<f64>,
    x_tau: &DVector<f64>,
    hp: &HyperParams,
) -> DVector<f64> {
    let mut mix = DVector::zeros(x_half.len());
    for (j, &w) in w_row.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let xj = if j == i { x_half } else { xs[j] };
        mix.axpy(w, xj, 1.0);
    }
    let keep = 1.0 - hp.omega_n - hp.omega_tau;
    mix *= keep;
    mix.axpy(hp.omega_n, x_n, 1.0);
    mix.axpy(hp.omega_tau, x_tau, 1.0);
    mix
}

/// `(1/m) Σ x_i`.
pub fn output_model(state: &SystemState) -> DVector<f64> {
    mean(&state.params())
}

pub fn mean(xs: &[&DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(xs[0].len());
    for x in xs {
        acc += *x;
    }
    acc / xs.len() as f64
}

/// What happened in one round, for diagnostics and oracle checks.
#[derive(Debug, Clone)]
pub struct RoundInfo {
    pub k: u64,
    pub phase: usize,
    pub lr: f64,
    pub alpha: f64,
    pub active: ActiveGraph,
    pub weights: DMatrix<f64>,
    /// `(best, max_degree)` per node.
    pub leaders: Vec<(usize, usize)>,
    pub grads: Vec<DVector<f64>>,
    pub losses: Vec<f64>,
    /// Largest `‖x_i − x^N‖²` or `‖x_i − x^τ‖²` before the update.
    pub leader_gap2: f64,
}

/// Advances `state` by one round. Cross-worker reads use the pre-round
/// snapshot, so the result does not depend on how workers are scheduled.
pub fn round<O: Objective + ?Sized>(
    state: &mut SystemState,
    hp: &HyperParams,
    dset: &DynamicGraphSet,
    objective: &O,
) -> Result<RoundInfo> {
    let m = state.m();
    if objective.workers() != m || dset.m() != m {
        return Err(Error::Hyper(format!(
            "{m} workers but objective has {} and topology {}",
            objective.workers(),
            dset.m()
        )));
    }
    let k = state.k + 1;
    let phase = state.next_phase(dset);
    let lr = hp.lr_at(k);
    let alpha = hp.alpha_for(dset);
    let sched = BudgetSchedule::new(hp.c_b).map_err(|e| Error::Hyper(e.to_string()))?;

    let batch_size = objective.batch_size();
    let evals: Vec<(f64, DVector<f64>)> = state
        .workers
        .par_iter()
        .zip(state.batch_rngs.par_iter_mut())
        .enumerate()
        .map(|(i, (w, rng))| {
            let batch = Batch::sample(objective.shard_len(i), batch_size, rng);
            objective.loss_and_grad(i, &w.x, &batch)
        })
        .collect();
    let (losses, grads): (Vec<f64>, Vec<DVector<f64>>) = evals.into_iter().unzip();

    let active = sample_phase(dset, phase, &sched, &mut state.link_rng);
    let degrees = active.degrees();
    let adj = active.adjacency();
    let leaders: Vec<(usize, usize)> = (0..m)
        .map(|i| select_leaders(i, &adj, &losses, &degrees))
        .collect();
    let weights = base_weight_matrix(&active.laplacian, alpha)?.entries().clone();

    let xs = state.params();
    let leader_gap2 = leaders
        .iter()
        .enumerate()
        .map(|(i, &(b, t))| (xs[i] - xs[b]).norm_squared().max((xs[i] - xs[t]).norm_squared()))
        .fold(0.0, f64::max);
    let next: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let (b, t) = leaders[i];
            let x_half = corrective_step(xs[i], &grads[i], xs[b], xs[t], lr, hp);
            let row: Vec<f64> = weights.row(i).iter().copied().collect();
            leader_average(i, &x_half, &xs, &row, xs[b], xs[t], hp)
        })
        .collect();

    for (i, x) in next.iter().enumerate() {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { round: k, worker: i });
        }
    }
    for (i, (w, x)) in state.workers.iter_mut().zip(next).enumerate() {
        w.x = x;
        w.last_loss = losses[i];
        w.degree = degrees[i];
    }
    state.k = k;
    Ok(RoundInfo {
        k,
        phase,
        lr,
        alpha,
        active,
        weights,
        leaders,
        grads,
        losses,
        leader_gap2,
    })
}
