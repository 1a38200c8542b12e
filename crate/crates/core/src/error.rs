use thiserror::Error;

use crate::mdp::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {}", format_violations(.0))]
    InvalidMdp(Vec<Violation>),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("policy-induced chain is not unichain ({recurrent_classes} recurrent classes)")]
    NotUnichain { recurrent_classes: usize },

    #[error("refusing to enumerate {count} policies (cap {cap})")]
    PolicyCapExceeded { count: String, cap: u64 },

    #[error("state space too large to export: {count} states (cap {cap})")]
    StateCapExceeded { count: String, cap: usize },

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("invalid environment spec: {0}")]
    EnvSpec(String),

    #[error("invalid action {action} (environment has {num_actions} actions)")]
    InvalidAction { action: usize, num_actions: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("series too short: need {needed} evaluations, have {have}")]
    SeriesTooShort { needed: usize, have: usize },

    #[error("evaluation grids differ between records")]
    GridMismatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
