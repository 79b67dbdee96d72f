//! Per-round weight matrices.
//!
//! Models are stacked as columns, `X = [x_1, ..., x_m]`, so one averaging
//! step is `X ← X·W̃` and column `i` of `W̃` holds the weights node `i`
//! applies. The base matrix `W = I − αL` is symmetric; the effective matrix
//! `W̃ = (1−ω_N−ω_τ)W + ω_N A^N + ω_τ A^τ` is only column stochastic.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::topology::{adjacency, DynamicGraphSet, Edge, Laplacian};

/// Matching activation probabilities. Every matching of every graph is
/// switched on independently with probability `c_b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetSchedule {
    c_b: f64,
}

impl BudgetSchedule {
    pub fn new(c_b: f64) -> Result<Self> {
        if !(c_b > 0.0 && c_b <= 1.0) {
            return Err(Error::Mixing(format!("communication budget {c_b} not in (0, 1]")));
        }
        Ok(Self { c_b })
    }

    pub fn full() -> Self {
        Self { c_b: 1.0 }
    }

    pub fn c_b(&self) -> f64 {
        self.c_b
    }

    pub fn probability(&self, _graph: usize, _matching: usize) -> f64 {
        self.c_b
    }
}

/// Links that survived this round's Bernoulli draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveGraph {
    pub phase: usize,
    pub m: usize,
    pub edges: Vec<Edge>,
    pub laplacian: Laplacian,
}

impl ActiveGraph {
    pub fn degrees(&self) -> Vec<usize> {
        crate::topology::degrees(self.m, &self.edges)
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        adjacency(self.m, &self.edges)
    }

    /// Sorted closed neighbourhood of every node.
    pub fn closed_neighborhoods(&self) -> Vec<Vec<usize>> {
        let mut adj = self.adjacency();
        for (i, list) in adj.iter_mut().enumerate() {
            let pos = list.partition_point(|&j| j < i);
            list.insert(pos, i);
        }
        adj
    }
}

/// `L^(k) = Σ_j B_j L_j` over the matchings of the phase graph for round
/// `k >= 1`. One Bernoulli draw per matching, in decomposition order.
pub fn sample_laplacian<R: Rng + ?Sized>(
    dset: &DynamicGraphSet,
    k: u64,
    sched: &BudgetSchedule,
    rng: &mut R,
) -> ActiveGraph {
    sample_phase(dset, dset.phase_index(k), sched, rng)
}

pub fn sample_phase<R: Rng + ?Sized>(
    dset: &DynamicGraphSet,
    phase: usize,
    sched: &BudgetSchedule,
    rng: &mut R,
) -> ActiveGraph {
    let m = dset.m();
    let mut edges = Vec::new();
    for (j, matching) in dset.decompositions()[phase].iter().enumerate() {
        let p = sched.probability(phase, j);
        if rng.gen_bool(p) {
            edges.extend_from_slice(&matching.edges);
        }
    }
    edges.sort_unstable();
    let laplacian = Laplacian::from_edges(m, &edges);
    ActiveGraph {
        phase,
        m,
        edges,
        laplacian,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingKind {
    Base,
    Effective,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    entries: DMatrix<f64>,
    kind: MixingKind,
    /// Set when some entry is negative (`α·max degree > 1`).
    pub negative_weights: bool,
}

impl MixingMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn kind(&self) -> MixingKind {
        self.kind
    }

    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    /// Writes the matrix as CSV, row-major, shortest round-trip decimal.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for r in 0..self.m() {
            w.write_record(self.entries.row(r).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `W = I − αL`.
pub fn base_weight_matrix(l: &Laplacian, alpha: f64) -> Result<MixingMatrix> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Mixing(format!("alpha must be nonnegative, got {alpha}")));
    }
    let m = l.m();
    let lm = l.matrix();
    let entries = DMatrix::from_fn(m, m, |r, c| {
        let id = if r == c { 1.0 } else { 0.0 };
        id - alpha * lm[(r, c)]
    });
    Ok(MixingMatrix {
        entries,
        kind: MixingKind::Base,
        negative_weights: alpha * l.max_degree() > 1.0,
    })
}

/// Column-one-hot leader selection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMatrix {
    leaders: Vec<usize>,
}

impl SelectionMatrix {
    pub fn identity(m: usize) -> Self {
        Self {
            leaders: (0..m).collect(),
        }
    }

    /// Column `i` selects `leaders[i]`; every leader must lie in node `i`'s
    /// closed neighbourhood.
    pub fn new(leaders: Vec<usize>, closed: &[Vec<usize>]) -> Result<Self> {
        if leaders.len() != closed.len() {
            return Err(Error::Mixing(format!(
                "{} leaders for {} nodes",
                leaders.len(),
                closed.len()
            )));
        }
        for (i, (&l, nb)) in leaders.iter().zip(closed).enumerate() {
            if nb.binary_search(&l).is_err() {
                return Err(Error::Mixing(format!(
                    "leader {l} is outside the closed neighbourhood of node {i}"
                )));
            }
        }
        Ok(Self { leaders })
    }

    pub fn leaders(&self) -> &[usize] {
        &self.leaders
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let m = self.leaders.len();
        let mut a = DMatrix::zeros(m, m);
        for (i, &l) in self.leaders.iter().enumerate() {
            a[(l, i)] = 1.0;
        }
        a
    }
}

/// Builds `(A^N, A^τ)` from per-node `(best, max_degree)` leader pairs.
pub fn selection_matrices(
    leaders: &[(usize, usize)],
    closed: &[Vec<usize>],
) -> Result<(SelectionMatrix, SelectionMatrix)> {
    let best = leaders.iter().map(|l| l.0).collect();
    let maxdeg = leaders.iter().map(|l| l.1).collect();
    Ok((
        SelectionMatrix::new(best, closed)?,
        SelectionMatrix::new(maxdeg, closed)?,
    ))
}

pub fn check_omegas(omega_n: f64, omega_tau: f64) -> Result<()> {
    if !(omega_n >= 0.0 && omega_tau >= 0.0) {
        return Err(Error::Mixing(format!(
            "averaging weights must be nonnegative, got ({omega_n}, {omega_tau})"
        )));
    }
    if omega_n + omega_tau >= 1.0 {
        return Err(Error::Mixing(format!(
            "omega_N + omega_tau = {} must be < 1",
            omega_n + omega_tau
        )));
    }
    Ok(())
}

/// `W̃ = (1−ω_N−ω_τ)W + ω_N A^N + ω_τ A^τ`.
pub fn effective_mixing(
    w: &MixingMatrix,
    a_n: &SelectionMatrix,
    a_tau: &SelectionMatrix,
    omega_n: f64,
    omega_tau: f64,
) -> Result<MixingMatrix> {
    check_omegas(omega_n, omega_tau)?;
    let keep = 1.0 - omega_n - omega_tau;
    let mut entries = w.entries() * keep;
    for (i, (&ln, &lt)) in a_n.leaders().iter().zip(a_tau.leaders()).enumerate() {
        entries[(ln, i)] += omega_n;
        entries[(lt, i)] += omega_tau;
    }
    Ok(MixingMatrix {
        entries,
        kind: MixingKind::Effective,
        negative_weights: w.negative_weights,
    })
}
