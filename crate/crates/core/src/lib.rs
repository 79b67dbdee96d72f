//! Decentralized SGD over simulated worker networks.
//!
//! The round protocol adds two things to gossip-based SGD: a corrective pull
//! toward each node's best-loss and highest-degree neighbours, and extra
//! averaging weight on those same neighbours. Communication graphs rotate
//! round by round and links are activated per matching under a budget.
//! D-PSGD and MATCHA fall out as parameter settings.
//!
//! Modules, bottom up: [`topology`], [`mixing`], [`spectral`],
//! [`objectives`], [`protocol`], [`engine`], then [`config`] and [`cli`].

pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod mixing;
pub mod objectives;
pub mod protocol;
pub mod rng;
pub mod spectral;
pub mod topology;

pub use error::{Error, Result};
