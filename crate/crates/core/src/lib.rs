//! Constrained-Hamiltonian embedding of non-holonomic mechanical systems.
//!
//! Given a mechanical system (Q, g, U) with Pfaffian constraints W, this crate
//! assembles the auxiliary extension on phase space T*Q, integrates its flow,
//! constructs the critical manifold by Newton refinement and predictor-corrector
//! continuation, classifies equilibrium stability spectra with small-divisor
//! resonance diagnostics, and verifies the Morse-Bott-style Poincare polynomial
//! ledger for user-declared component topology.
//!
//! Modules follow the pipeline: [`expr`] parses scalar fields with exact dual
//! derivatives, [`geometry`] provides pointwise differential-geometric kernels,
//! [`mechsys`] assembles systems from config files, [`flow`] integrates
//! extension and gradient-like flows, [`critical`] continues the critical
//! manifold, [`stability`] linearizes and scans resonances, and [`topology`]
//! checks the integer polynomial identities.

pub mod config;
pub mod critical;
pub mod dual;
pub mod expr;
pub mod flow;
pub mod geometry;
pub mod linalg;
pub mod mechsys;
pub mod stability;
pub mod topology;

use thiserror::Error;

/// Crate-wide error type. The CLI maps configuration-class errors to exit
/// code 2 and numeric-class errors to exit code 3.
#[derive(Error, Debug)]
pub enum Error {
    #[error("syntax error at byte offset {offset}: {msg}")]
    Syntax { offset: usize, msg: String },
    #[error("unknown identifier `{name}`")]
    UnknownIdentifier { name: String },
    #[error("config error{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("metric is not positive definite at q = {0:?}")]
    NotSpd(Vec<f64>),
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpdMatrix(String),
    #[error("rank deficiency: {0}")]
    RankDeficient(String),
    #[error("integrator step underflow at t = {t} (h = {h})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("maximum step count {0} exceeded")]
    MaxSteps(usize),
    #[error("Newton iteration did not converge after {iters} iterations (residual {residual})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("Newton iteration diverged (residual {residual})")]
    Divergence { residual: f64 },
    #[error("point is off the critical set (residual {residual}, tolerance {tol})")]
    OffCritical { residual: f64, tol: f64 },
    #[error("potential is degenerate: {0}")]
    DegeneratePotential(String),
    #[error("index undefined at non-generic critical point (kernel dimension {kernel_dim})")]
    IndexUndefined { kernel_dim: usize },
    #[error("index changed along component: {0}")]
    IndexChange(String),
    #[error("component dimension {0} > 1: continuation handles curves only; use multistart clouds")]
    ComponentDimension(usize),
    #[error("enumeration cap exceeded: {0} tuples requested, cap is {1}")]
    EnumerationCap(u64, u64),
    #[error("{0} called on a report that is not critically stable")]
    NotCriticallyStable(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
