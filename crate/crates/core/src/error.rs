use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid mixing input: {0}")]
    Mixing(String),

    #[error("k_free = {k_free} does not exceed the {bound} threshold {threshold}")]
    KFreeInfeasible {
        k_free: f64,
        bound: &'static str,
        threshold: f64,
    },

    #[error("phase graph {phase} is disconnected in expectation (lambda_2 = {lambda2:e})")]
    DisconnectedPhase { phase: usize, lambda2: f64 },

    #[error("power iteration did not converge after {0} steps")]
    PowerIteration(usize),

    #[error("invalid problem: {0}")]
    Problem(String),

    #[error("invalid hyperparameters: {0}")]
    Hyper(String),

    #[error("non-finite parameters at round {round} on worker {worker}")]
    NonFinite { round: u64, worker: usize },

    #[error("bound precondition violated: {0}")]
    BoundPrecondition(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
