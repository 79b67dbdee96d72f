//! Experiment configuration: a versioned JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::InitMode;
use crate::error::{Error, Result};
use crate::objectives::{make_problem, Problem, ProblemSpec};
use crate::protocol::HyperParams;
use crate::spectral::LeaderPolicy;
use crate::topology::{DynamicGraphSet, TopologyDescriptor};

pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_GAMMA: f64 = 0.05;
pub const DEFAULT_PULL: f64 = 0.1;
pub const DEFAULT_OMEGA: f64 = 0.1;
pub const DEFAULT_GRAPHS: usize = 3;
pub const DEFAULT_MATCHA_BUDGET: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `λ = ω = 0`, `n = 1`, `c_b = 1`.
    Dpsgd,
    /// `λ = ω = 0`, `n = 1`.
    Matcha,
    Aldsgd,
    /// Step size and pulling strength tied to `K`.
    Theorem2,
    Custom,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Dpsgd => "dpsgd",
            Preset::Matcha => "matcha",
            Preset::Aldsgd => "aldsgd",
            Preset::Theorem2 => "theorem2",
            Preset::Custom => "custom",
        }
    }
}

/// Hyperparameter overrides; anything left out takes the preset default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lr_schedule: Vec<(u64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_n: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_n: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_graphs: Option<usize>,
    /// Start at a seeded random phase instead of graph 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub random_start: bool,
}

fn default_samples() -> usize {
    2000
}

fn default_products() -> usize {
    20
}

fn default_trials() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    /// Defaults to the run's α, or the middle of the feasible window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Total averaging weight, split evenly between the two leaders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_free: Option<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_products")]
    pub n_products: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub policy: LeaderPolicy,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            omega: None,
            k_free: None,
            samples: default_samples(),
            n_products: default_products(),
            trials: default_trials(),
            policy: LeaderPolicy::default(),
        }
    }
}

/// Sweep axes; the cells are their Cartesian product.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(rename = "target_D", default, skip_serializing_if = "Option::is_none")]
    pub target_d: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Vec<Preset>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<Vec<u64>>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<u64>>,
}

/// One point of a sweep. `None` keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepCell {
    pub target_d: Option<usize>,
    pub c_b: Option<f64>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub k: Option<u64>,
}

impl SweepAxes {
    /// Row-major product, `target_D` varying slowest. Empty when no axis is
    /// given or any given axis is empty.
    pub fn cells(&self) -> Vec<SweepCell> {
        let any = self.target_d.is_some()
            || self.c_b.is_some()
            || self.preset.is_some()
            || self.seed.is_some()
            || self.k.is_some();
        if !any {
            return Vec::new();
        }
        fn axis<T: Copy>(v: &Option<Vec<T>>) -> Vec<Option<T>> {
            match v {
                Some(items) => items.iter().copied().map(Some).collect(),
                None => vec![None],
            }
        }
        let mut cells = Vec::new();
        for &target_d in &axis(&self.target_d) {
            for &c_b in &axis(&self.c_b) {
                for &preset in &axis(&self.preset) {
                    for &seed in &axis(&self.seed) {
                        for &k in &axis(&self.k) {
                            cells.push(SweepCell {
                                target_d,
                                c_b,
                                preset,
                                seed,
                                k,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

fn default_stride() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub preset: Preset,
    pub topology: TopologyDescriptor,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub hyper: HyperConfig,
    #[serde(rename = "K")]
    pub rounds: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_stride")]
    pub stride: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral: Option<SpectralConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepAxes>,
}

/// Everything a run needs, resolved from a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub hyper: HyperParams,
    pub dset: DynamicGraphSet,
    pub problem: Problem,
}

fn config_err(path: &str, e: impl std::fmt::Display) -> Error {
    Error::Config {
        path: path.into(),
        message: e.to_string(),
    }
}

impl ExperimentConfig {
    pub fn new(preset: Preset, topology: TopologyDescriptor, problem: ProblemSpec, rounds: u64) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            preset,
            topology,
            problem,
            hyper: HyperConfig::default(),
            rounds,
            seed: 0,
            stride: default_stride(),
            out: None,
            init: InitMode::default(),
            spectral: None,
            sweep: None,
        }
    }

    /// Parses and validates; errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(".", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(config_err(
                "schema",
                format!("unsupported schema {} (expected {SCHEMA_VERSION})", self.schema),
            ));
        }
        if self.stride == 0 {
            return Err(config_err("stride", "must be >= 1"));
        }
        self.setup()?;
        Ok(())
    }

    /// Graph count after the preset is applied.
    pub fn n_graphs(&self) -> usize {
        match self.preset {
            Preset::Dpsgd | Preset::Matcha => 1,
            Preset::Aldsgd | Preset::Theorem2 => self
                .hyper
                .n_graphs
                .or(self.topology.dynamic_n)
                .unwrap_or(DEFAULT_GRAPHS),
            Preset::Custom => self.hyper.n_graphs.or(self.topology.dynamic_n).unwrap_or(1),
        }
    }

    pub fn graph_set(&self) -> Result<DynamicGraphSet> {
        self.topology
            .dynamic_set(Some(self.n_graphs()))
            .map_err(|e| config_err("topology", e))
    }

    /// Applies the preset to the overrides.
    pub fn hyper_params(&self, dset: &DynamicGraphSet) -> Result<HyperParams> {
        let h = &self.hyper;
        let gamma = h.gamma.unwrap_or(DEFAULT_GAMMA);
        let n_graphs = self.n_graphs();
        let (pull, avg) = match self.preset {
            Preset::Aldsgd | Preset::Theorem2 => (DEFAULT_PULL, DEFAULT_OMEGA),
            _ => (0.0, 0.0),
        };
        let mut hp = HyperParams {
            gamma,
            lr_schedule: h.lr_schedule.clone(),
            lambda_n: h.lambda_n.unwrap_or(pull),
            lambda_tau: h.lambda_tau.unwrap_or(pull),
            omega_n: h.omega_n.unwrap_or(avg),
            omega_tau: h.omega_tau.unwrap_or(avg),
            alpha: h.alpha,
            c_b: h.c_b.unwrap_or(1.0),
            n_graphs,
        };
        match self.preset {
            Preset::Dpsgd => {
                hp.lambda_n = 0.0;
                hp.lambda_tau = 0.0;
                hp.omega_n = 0.0;
                hp.omega_tau = 0.0;
                hp.c_b = 1.0;
            }
            Preset::Matcha => {
                hp.lambda_n = 0.0;
                hp.lambda_tau = 0.0;
                hp.omega_n = 0.0;
                hp.omega_tau = 0.0;
                hp.c_b = h.c_b.unwrap_or(DEFAULT_MATCHA_BUDGET);
            }
            Preset::Theorem2 => {
                let alpha = hp.alpha_for(dset);
                let t = HyperParams::theorem2(dset.m(), self.rounds, alpha, hp.omega_n, hp.omega_tau);
                hp.gamma = t.gamma;
                hp.lambda_n = t.lambda_n;
                hp.lambda_tau = t.lambda_tau;
                hp.alpha = Some(alpha);
            }
            Preset::Aldsgd | Preset::Custom => {}
        }
        hp.validate().map_err(|e| config_err("hyper", e))?;
        Ok(hp)
    }

    pub fn setup(&self) -> Result<Setup> {
        let dset = self.graph_set()?;
        let hyper = self.hyper_params(&dset)?;
        let problem = make_problem(&self.problem, dset.m(), self.seed).map_err(|e| config_err("problem", e))?;
        Ok(Setup {
            hyper,
            dset,
            problem,
        })
    }

    /// Copy with a sweep cell's overrides applied.
    pub fn with_cell(&self, cell: &SweepCell) -> Self {
        let mut cfg = self.clone();
        cfg.sweep = None;
        if let Some(t) = cell.target_d {
            cfg.topology.target_d = Some(t);
        }
        if let Some(c) = cell.c_b {
            cfg.hyper.c_b = Some(c);
        }
        if let Some(p) = cell.preset {
            cfg.preset = p;
        }
        if let Some(s) = cell.seed {
            cfg.seed = s;
        }
        if let Some(k) = cell.k {
            cfg.rounds = k;
        }
        cfg
    }
}
