//! Spectral diagnostics for the effective mixing matrix.
//!
//! `ρ = max(‖E[W̃(I−J)W̃ᵀ]‖, ‖E[W̃W̃ᵀ]‖)`, with the expectation taken per
//! phase graph and the maximum over phases. Because every column of `W̃`
//! sums to one, `1ᵀW̃W̃ᵀ1 = m` and the second norm is never below one on the
//! full space. Only its action on `1⊥` matters for consensus, so `e2_norm` is
//! the norm of `(I−J)E[W̃W̃ᵀ](I−J)`. The first matrix already has `1` in its
//! kernel and needs no projection.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{centering, sym_eigenvalues, sym_spectral_norm, symmetrize};
use crate::mixing::{
    base_weight_matrix, check_omegas, effective_mixing, sample_phase, selection_matrices,
    ActiveGraph, BudgetSchedule,
};
use crate::protocol::select_leaders;
use crate::rng::StreamRng;
use crate::topology::DynamicGraphSet;

/// Below this `λ_2` a phase graph counts as disconnected in expectation.
pub const DISCONNECTED_TOL: f64 = 1e-10;

/// Sampling is split into this many independent streams regardless of the
/// thread count, so estimates depend only on the seed.
const STREAMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaZeta {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub zeta: f64,
}

/// Per phase graph `i`: `M_i = Σ_j p_j L_j`, `N_i = Σ_j p_j(1−p_j) L_j`.
/// Returns `min_i λ_2(M_i)`, `max_i λ_max(M_i)` and `max_i ‖N_i‖`.
pub fn lambda_zeta(dset: &DynamicGraphSet, sched: &BudgetSchedule) -> Result<LambdaZeta> {
    let m = dset.m();
    let mut out = LambdaZeta {
        lambda_min: f64::INFINITY,
        lambda_max: 0.0,
        zeta: 0.0,
    };
    for (phase, matchings) in dset.decompositions().iter().enumerate() {
        let mut mean = DMatrix::zeros(m, m);
        let mut var = DMatrix::zeros(m, m);
        for (j, matching) in matchings.iter().enumerate() {
            let p = sched.probability(phase, j);
            let l = matching.laplacian(m).into_matrix();
            mean += &l * p;
            var += &l * (p * (1.0 - p));
        }
        let ev = sym_eigenvalues(&mean);
        if ev[1] <= DISCONNECTED_TOL {
            return Err(Error::DisconnectedPhase {
                phase,
                lambda2: ev[1],
            });
        }
        out.lambda_min = out.lambda_min.min(ev[1]);
        out.lambda_max = out.lambda_max.max(ev[m - 1]);
        let zeta = sym_eigenvalues(&var).into_iter().fold(0.0, |a: f64, v| a.max(v.abs()));
        out.zeta = out.zeta.max(zeta);
    }
    Ok(out)
}

/// Lower bound `k_free` must exceed, and which term sets it. The
/// `λ_max²/(2ζ)` term is dropped when `ζ = 0`.
pub fn k_threshold(lz: &LambdaZeta) -> (f64, &'static str) {
    let mut best = (1.0, "1");
    let t2 = 8.0 * lz.zeta / (lz.lambda_min * lz.lambda_min) - 1.0;
    if t2 > best.0 {
        best = (t2, "8*zeta/lambda_min^2 - 1");
    }
    if lz.zeta > 0.0 {
        let t3 = lz.lambda_max * lz.lambda_max / (2.0 * lz.zeta);
        if t3 > best.0 {
            best = (t3, "lambda_max^2/(2*zeta)");
        }
    }
    best
}

pub const DEFAULT_K_FACTOR: f64 = 1.05;

pub fn default_k_free(lz: &LambdaZeta) -> f64 {
    DEFAULT_K_FACTOR * k_threshold(lz).0
}

/// Feasible `(α, ω)` window for a given free parameter `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamRange {
    pub k_free: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub zeta: f64,
    pub m: usize,
}

impl ParamRange {
    /// Upper end of the total averaging weight `ω = ω_N + ω_τ`:
    /// `(1 − αλ_min) / (2k√m)`. Nonpositive means the window is empty.
    pub fn omega_max(&self, alpha: f64) -> f64 {
        (1.0 - alpha * self.lambda_min) / (2.0 * self.k_free * (self.m as f64).sqrt())
    }

    /// `h(α) = ((k+1)/k)²(1−αλ)² + 2(1−αλ)/k + 2α²ζ`, the analytic upper
    /// bound on ρ at `ω = omega_max(α)`.
    pub fn rho_bound(&self, alpha: f64) -> f64 {
        let k = self.k_free;
        let s = 1.0 - alpha * self.lambda_min;
        ((k + 1.0) / k).powi(2) * s * s + 2.0 * s / k + 2.0 * alpha * alpha * self.zeta
    }

    pub fn contains(&self, alpha: f64) -> bool {
        alpha > self.alpha_min && alpha < self.alpha_max
    }
}

pub fn alpha_range(lz: &LambdaZeta, k_free: f64, m: usize) -> Result<ParamRange> {
    let (threshold, bound) = k_threshold(lz);
    if !(k_free > threshold) {
        return Err(Error::KFreeInfeasible {
            k_free,
            bound,
            threshold,
        });
    }
    let k = k_free;
    let l = lz.lambda_min;
    let denom = (k + 1.0).powi(2) * l * l + 2.0 * k * k * lz.zeta;
    Ok(ParamRange {
        k_free,
        alpha_min: (k + 1.0).powi(2) * l / denom,
        alpha_max: ((k + 1.0).powi(2) + k) * l / denom,
        lambda_min: lz.lambda_min,
        lambda_max: lz.lambda_max,
        zeta: lz.zeta,
        m,
    })
}

/// How leaders are drawn when sampling `W̃` outside a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderPolicy {
    /// Every node leads itself: `A^N = A^τ = I`.
    Identity,
    /// Both leaders uniform over the closed neighbourhood in the active graph.
    #[default]
    UniformNeighborhood,
    /// What the protocol picks when all losses tie: lowest index for the
    /// best-loss leader, highest active degree for the other.
    EqualLoss,
}

impl LeaderPolicy {
    pub fn draw<R: Rng + ?Sized>(&self, active: &ActiveGraph, rng: &mut R) -> Vec<(usize, usize)> {
        let m = active.m;
        match self {
            LeaderPolicy::Identity => (0..m).map(|i| (i, i)).collect(),
            LeaderPolicy::UniformNeighborhood => active
                .closed_neighborhoods()
                .iter()
                .map(|nb| (nb[rng.gen_range(0..nb.len())], nb[rng.gen_range(0..nb.len())]))
                .collect(),
            LeaderPolicy::EqualLoss => {
                let losses = vec![0.0; m];
                let deg = active.degrees();
                let adj = active.adjacency();
                (0..m).map(|i| select_leaders(i, &adj, &losses, &deg)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingParams {
    pub alpha: f64,
    pub omega_n: f64,
    pub omega_tau: f64,
}

impl MixingParams {
    /// Splits a total averaging weight evenly between the two leaders.
    pub fn symmetric(alpha: f64, omega: f64) -> Self {
        Self {
            alpha,
            omega_n: omega / 2.0,
            omega_tau: omega / 2.0,
        }
    }
}

/// One draw of `W̃` for a phase.
pub fn sample_effective<R: Rng + ?Sized>(
    dset: &DynamicGraphSet,
    phase: usize,
    sched: &BudgetSchedule,
    params: &MixingParams,
    policy: LeaderPolicy,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let active = sample_phase(dset, phase, sched, rng);
    let w = base_weight_matrix(&active.laplacian, params.alpha)?;
    let leaders = policy.draw(&active, rng);
    let (a_n, a_tau) = selection_matrices(&leaders, &active.closed_neighborhoods())?;
    Ok(effective_mixing(&w, &a_n, &a_tau, params.omega_n, params.omega_tau)?
        .entries()
        .clone())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    pub rho: f64,
    pub e1_norm: f64,
    pub e2_norm: f64,
    pub samples: usize,
    pub std_err: f64,
    /// `max(e1, e2)` for each phase graph.
    pub phase_rho: Vec<f64>,
}

struct PhaseEstimate {
    e1: f64,
    e2: f64,
    std_err: f64,
}

fn chunk_sizes(total: usize) -> Vec<usize> {
    (0..STREAMS)
        .map(|c| total / STREAMS + usize::from(c < total % STREAMS))
        .collect()
}

fn estimate_phase(
    dset: &DynamicGraphSet,
    phase: usize,
    sched: &BudgetSchedule,
    params: &MixingParams,
    policy: LeaderPolicy,
    samples: usize,
    seeds: &[u64],
) -> Result<PhaseEstimate> {
    let m = dset.m();
    let p = centering(m);
    let chunks: Vec<Result<Vec<DMatrix<f64>>>> = seeds
        .par_iter()
        .zip(chunk_sizes(samples))
        .map(|(&seed, count)| {
            let mut rng = StreamRng::seed_from_u64(seed);
            (0..count)
                .map(|_| sample_effective(dset, phase, sched, params, policy, &mut rng))
                .collect()
        })
        .collect();
    let mut draws = Vec::with_capacity(samples);
    for c in chunks {
        draws.extend(c?);
    }

    let mut s1 = DMatrix::zeros(m, m);
    let mut s2 = DMatrix::zeros(m, m);
    for wt in &draws {
        let wtt = wt.transpose();
        s1 += wt * &p * &wtt;
        s2 += wt * &wtt;
    }
    let n = samples as f64;
    let e1_mat = symmetrize(&(s1 / n));
    let e2_mat = symmetrize(&(&p * (s2 / n) * &p));
    let (e1, v1) = sym_spectral_norm(&e1_mat)?;
    let (e2, v2) = sym_spectral_norm(&e2_mat)?;

    // First-order error of the norm: vᵀ(ΔS)v for the dominant eigenvector.
    let (v, project_first) = if e1 >= e2 { (v1, false) } else { (v2, true) };
    let per_sample: Vec<f64> = draws
        .iter()
        .map(|wt| {
            let u = if project_first {
                wt.transpose() * (&p * &v)
            } else {
                &p * (wt.transpose() * &v)
            };
            u.norm_squared()
        })
        .collect();
    let mean = per_sample.iter().sum::<f64>() / n;
    let var = if samples > 1 {
        per_sample.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(PhaseEstimate {
        e1,
        e2,
        std_err: (var / n).sqrt(),
    })
}

pub const MIN_SAMPLES: usize = 100;

/// Monte Carlo estimate of ρ. Draws `samples` matrices per phase graph.
pub fn estimate_rho<R: RngCore + ?Sized>(
    dset: &DynamicGraphSet,
    sched: &BudgetSchedule,
    params: &MixingParams,
    policy: LeaderPolicy,
    samples: usize,
    rng: &mut R,
) -> Result<SpectralReport> {
    if samples < MIN_SAMPLES {
        return Err(Error::Mixing(format!(
            "need at least {MIN_SAMPLES} samples, got {samples}"
        )));
    }
    check_omegas(params.omega_n, params.omega_tau)?;
    let mut report = SpectralReport {
        rho: 0.0,
        e1_norm: 0.0,
        e2_norm: 0.0,
        samples,
        std_err: 0.0,
        phase_rho: Vec::with_capacity(dset.n()),
    };
    for phase in 0..dset.n() {
        let seeds: Vec<u64> = (0..STREAMS).map(|_| rng.next_u64()).collect();
        let est = estimate_phase(dset, phase, sched, params, policy, samples, &seeds)?;
        let rho = est.e1.max(est.e2);
        report.phase_rho.push(rho);
        report.e1_norm = report.e1_norm.max(est.e1);
        report.e2_norm = report.e2_norm.max(est.e2);
        if rho >= report.rho {
            report.rho = rho;
            report.std_err = est.std_err;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub n_products: usize,
    pub trials: usize,
    pub rho: f64,
    pub empirical_mean: f64,
    pub std_err: f64,
    /// `ρ^n + 3·std_err`.
    pub bound: f64,
    pub margin: f64,
    pub passed: bool,
}

/// Checks `E‖B·W̃^(1)···W̃^(n)·(I−J)‖_F² ≤ ρ^n` for random unit-Frobenius `B`,
/// with `W̃^(k)` following the phase schedule from round 1.
#[allow(clippy::too_many_arguments)]
pub fn check_contraction<R: RngCore + ?Sized>(
    dset: &DynamicGraphSet,
    sched: &BudgetSchedule,
    params: &MixingParams,
    policy: LeaderPolicy,
    report: &SpectralReport,
    n_products: usize,
    trials: usize,
    rng: &mut R,
) -> Result<ContractionReport> {
    if trials == 0 {
        return Err(Error::Mixing("contraction check needs at least one trial".into()));
    }
    let m = dset.m();
    let p = centering(m);
    let seeds: Vec<u64> = (0..trials).map(|_| rng.next_u64()).collect();
    let values: Vec<Result<f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = StreamRng::seed_from_u64(seed);
            let mut b = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = b.norm();
            b /= norm;
            for k in 1..=n_products as u64 {
                let wt = sample_effective(dset, dset.phase_index(k), sched, params, policy, &mut rng)?;
                b = b * wt;
            }
            Ok((b * &p).norm_squared())
        })
        .collect();
    let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
    let n = trials as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if trials > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let std_err = (var / n).sqrt();
    let bound = report.rho.powi(n_products as i32) + 3.0 * std_err;
    Ok(ContractionReport {
        n_products,
        trials,
        rho: report.rho,
        empirical_mean: mean,
        std_err,
        bound,
        margin: bound - mean,
        passed: mean <= bound,
    })
}
