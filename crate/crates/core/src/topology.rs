//! Communication graphs: generators, Laplacians, matching decompositions,
//! rotations and degree reduction.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Edge = (usize, usize);

fn normalize(e: Edge) -> Edge {
    if e.0 <= e.1 {
        e
    } else {
        (e.1, e.0)
    }
}

/// Undirected simple graph on nodes `0..m`. Edges are stored as `(u, v)`
/// with `u < v`, sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    m: usize,
    edges: Vec<Edge>,
}

impl Graph {
    /// Validates endpoints, self-loops and duplicates. Connectivity is not
    /// required here; see [`build_graph`].
    pub fn new(m: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        if m < 2 {
            return Err(Error::Topology(format!("need at least 2 nodes, got {m}")));
        }
        let mut set = BTreeSet::new();
        for e in edges {
            let (u, v) = normalize(e);
            if v >= m {
                return Err(Error::Topology(format!("edge ({u}, {v}) out of range for m = {m}")));
            }
            if u == v {
                return Err(Error::Topology(format!("self-loop at node {u}")));
            }
            if !set.insert((u, v)) {
                return Err(Error::Topology(format!("duplicate edge ({u}, {v})")));
            }
        }
        Ok(Self {
            m,
            edges: set.into_iter().collect(),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Total degree: the number of links.
    pub fn total_degree(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        degrees(self.m, &self.edges)
    }

    pub fn max_degree(&self) -> usize {
        self.degrees().into_iter().max().unwrap_or(0)
    }

    pub fn is_connected(&self) -> bool {
        is_connected(self.m, &self.edges)
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        adjacency(self.m, &self.edges)
    }
}

pub fn degrees(m: usize, edges: &[Edge]) -> Vec<usize> {
    let mut deg = vec![0; m];
    for &(u, v) in edges {
        deg[u] += 1;
        deg[v] += 1;
    }
    deg
}

/// Sorted neighbour lists.
pub fn adjacency(m: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); m];
    for &(u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

pub fn is_connected(m: usize, edges: &[Edge]) -> bool {
    if m == 0 {
        return true;
    }
    let adj = adjacency(m, edges);
    let mut seen = vec![false; m];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == m
}

/// Generator families and explicit edge lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphSpec {
    Ring(usize),
    Complete(usize),
    /// Center at node 0.
    Star(usize),
    /// Ring on nodes `0..m-1` plus node `m-1` hanging off node 0.
    PendantRing(usize),
    Explicit { m: usize, edges: Vec<Edge> },
}

/// Builds a connected base topology.
pub fn build_graph(spec: &GraphSpec) -> Result<Graph> {
    let graph = match spec {
        GraphSpec::Ring(m) => {
            let m = *m;
            if m < 3 {
                Graph::new(m, (0..m.saturating_sub(1)).map(|i| (i, i + 1)))?
            } else {
                Graph::new(m, (0..m).map(|i| (i, (i + 1) % m)))?
            }
        }
        GraphSpec::Complete(m) => {
            let m = *m;
            Graph::new(m, (0..m).flat_map(|u| (u + 1..m).map(move |v| (u, v))))?
        }
        GraphSpec::Star(m) => Graph::new(*m, (1..*m).map(|v| (0, v)))?,
        GraphSpec::PendantRing(m) => {
            let m = *m;
            if m < 4 {
                return Err(Error::Topology(format!("pendant_ring needs m >= 4, got {m}")));
            }
            let ring = m - 1;
            let edges = (0..ring)
                .map(|i| (i, (i + 1) % ring))
                .chain(std::iter::once((0, m - 1)));
            Graph::new(m, edges)?
        }
        GraphSpec::Explicit { m, edges } => Graph::new(*m, edges.iter().copied())?,
    };
    if !graph.is_connected() {
        return Err(Error::Topology("graph is disconnected".into()));
    }
    Ok(graph)
}

/// Graph Laplacian `D - A` of an edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian(DMatrix<f64>);

impl Laplacian {
    pub fn from_edges(m: usize, edges: &[Edge]) -> Self {
        let mut l = DMatrix::zeros(m, m);
        for &(u, v) in edges {
            l[(u, u)] += 1.0;
            l[(v, v)] += 1.0;
            l[(u, v)] -= 1.0;
            l[(v, u)] -= 1.0;
        }
        Self(l)
    }

    pub fn zeros(m: usize) -> Self {
        Self(DMatrix::zeros(m, m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn m(&self) -> usize {
        self.0.nrows()
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.0[(i, i)]
    }

    pub fn max_degree(&self) -> f64 {
        (0..self.m()).map(|i| self.degree(i)).fold(0.0, f64::max)
    }
}

pub fn laplacian(g: &Graph) -> Laplacian {
    Laplacian::from_edges(g.m, &g.edges)
}

/// A set of vertex-disjoint edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    pub edges: Vec<Edge>,
}

impl Matching {
    pub fn laplacian(&self, m: usize) -> Laplacian {
        Laplacian::from_edges(m, &self.edges)
    }
}

/// Greedy sequential edge colouring: edges in lexicographic order each take
/// the lowest colour free at both endpoints. Each colour class is a matching.
pub fn matching_decomposition(g: &Graph) -> Vec<Matching> {
    let mut used: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); g.m];
    let mut classes: Vec<Vec<Edge>> = Vec::new();
    for &(u, v) in &g.edges {
        let color = (0..)
            .find(|c| !used[u].contains(c) && !used[v].contains(c))
            .expect("unbounded colour search");
        used[u].insert(color);
        used[v].insert(color);
        if classes.len() <= color {
            classes.resize_with(color + 1, Vec::new);
        }
        classes[color].push((u, v));
    }
    classes.into_iter().map(|edges| Matching { edges }).collect()
}

/// Relabels node `u` as `(u + shift) mod m`.
pub fn rotate_graph(g: &Graph, shift: usize) -> Graph {
    let m = g.m;
    let shift = shift % m;
    let edges = g
        .edges
        .iter()
        .map(|&(u, v)| normalize(((u + shift) % m, (v + shift) % m)));
    Graph::new(m, edges).expect("rotation preserves validity")
}

/// Rotations of one base graph, switched between round by round.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGraphSet {
    graphs: Vec<Graph>,
    decompositions: Vec<Vec<Matching>>,
    shifts: Vec<usize>,
}

impl DynamicGraphSet {
    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn decompositions(&self) -> &[Vec<Matching>] {
        &self.decompositions
    }

    pub fn shifts(&self) -> &[usize] {
        &self.shifts
    }

    pub fn n(&self) -> usize {
        self.graphs.len()
    }

    pub fn m(&self) -> usize {
        self.graphs[0].m()
    }

    /// Graph index used at round `k >= 1`: phase `k mod n = 1` maps to
    /// `graphs[0]`, ..., phase `0` to `graphs[n-1]`.
    pub fn phase_index(&self, k: u64) -> usize {
        let n = self.n() as u64;
        ((k + n - 1) % n) as usize
    }

    /// Largest degree found in any graph of the set.
    pub fn max_degree(&self) -> usize {
        self.graphs.iter().map(Graph::max_degree).max().unwrap_or(0)
    }
}

/// `{0, ⌊m/n⌋, ⌊2m/n⌋, ...}`; for `n = 3` this is `{0, ⌊m/3⌋, ⌊2m/3⌋}`.
pub fn default_shifts(m: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i * m / n).collect()
}

pub fn make_dynamic_set(g: &Graph, shifts: &[usize]) -> Result<DynamicGraphSet> {
    if shifts.is_empty() {
        return Err(Error::Topology("dynamic set needs at least one graph".into()));
    }
    let mut seen = BTreeSet::new();
    for &s in shifts {
        if s >= g.m {
            return Err(Error::Topology(format!("shift {s} out of range for m = {}", g.m)));
        }
        if !seen.insert(s) {
            return Err(Error::Topology(format!("duplicate shift {s}")));
        }
    }
    let graphs: Vec<Graph> = shifts.iter().map(|&s| rotate_graph(g, s)).collect();
    let decompositions = graphs.iter().map(matching_decomposition).collect();
    Ok(DynamicGraphSet {
        graphs,
        decompositions,
        shifts: shifts.to_vec(),
    })
}

/// Thins `g` to exactly `target` edges. Each step drops the non-bridge edge
/// with the largest endpoint-degree sum; ties go to the lexicographically
/// smallest edge.
pub fn reduce_degree(g: &Graph, target: usize) -> Result<Graph> {
    let m = g.m;
    if target < m - 1 {
        return Err(Error::Topology(format!(
            "target total degree {target} is below spanning-tree size {}",
            m - 1
        )));
    }
    if target > g.total_degree() {
        return Err(Error::Topology(format!(
            "target total degree {target} exceeds current {}",
            g.total_degree()
        )));
    }
    if !g.is_connected() {
        return Err(Error::Topology("cannot reduce a disconnected graph".into()));
    }
    let mut edges = g.edges.clone();
    while edges.len() > target {
        let deg = degrees(m, &edges);
        let mut best: Option<(usize, usize)> = None;
        for (idx, &(u, v)) in edges.iter().enumerate() {
            let score = deg[u] + deg[v];
            if best.is_some_and(|(_, s)| s >= score) {
                continue;
            }
            let mut rest = edges.clone();
            rest.remove(idx);
            if is_connected(m, &rest) {
                best = Some((idx, score));
            }
        }
        let (idx, _) = best.ok_or_else(|| {
            Error::Topology(format!("no removable edge left at {} edges", edges.len()))
        })?;
        edges.remove(idx);
    }
    Graph::new(m, edges)
}

/// Topology section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyDescriptor {
    pub kind: GraphKind,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamic_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shifts: Option<Vec<usize>>,
    #[serde(rename = "target_D", default, skip_serializing_if = "Option::is_none")]
    pub target_d: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Ring,
    Complete,
    Star,
    PendantRing,
    Explicit,
}

impl TopologyDescriptor {
    pub fn new(kind: GraphKind, m: usize) -> Self {
        Self {
            kind,
            m,
            edges: Vec::new(),
            dynamic_n: None,
            shifts: None,
            target_d: None,
        }
    }

    pub fn explicit(m: usize, edges: &[Edge]) -> Self {
        Self {
            edges: edges.iter().map(|&(u, v)| [u, v]).collect(),
            ..Self::new(GraphKind::Explicit, m)
        }
    }

    pub fn graph_spec(&self) -> GraphSpec {
        match self.kind {
            GraphKind::Ring => GraphSpec::Ring(self.m),
            GraphKind::Complete => GraphSpec::Complete(self.m),
            GraphKind::Star => GraphSpec::Star(self.m),
            GraphKind::PendantRing => GraphSpec::PendantRing(self.m),
            GraphKind::Explicit => GraphSpec::Explicit {
                m: self.m,
                edges: self.edges.iter().map(|e| (e[0], e[1])).collect(),
            },
        }
    }

    /// Base graph after optional degree reduction.
    pub fn base_graph(&self) -> Result<Graph> {
        let g = build_graph(&self.graph_spec())?;
        match self.target_d {
            Some(t) => reduce_degree(&g, t),
            None => Ok(g),
        }
    }

    /// `n_override` replaces `dynamic_n` (presets force `n = 1`).
    pub fn dynamic_set(&self, n_override: Option<usize>) -> Result<DynamicGraphSet> {
        let g = self.base_graph()?;
        let n = n_override.or(self.dynamic_n).unwrap_or(1);
        let shifts = match (&self.shifts, n_override) {
            (Some(s), None) => s.clone(),
            (Some(s), Some(n)) if s.len() == n => s.clone(),
            _ => default_shifts(g.m(), n),
        };
        make_dynamic_set(&g, &shifts)
    }
}
