//! Data-enabled predictive control for eco-driving of mixed vehicle platoons.
//!
//! The crate simulates a single-lane platoon headed by an uncontrolled
//! preceding vehicle (PV) and containing a mix of connected automated
//! vehicles (CAVs) and human-driven vehicles (HDVs), and closes the loop
//! with a physics-augmented data-enabled predictive controller (PA-DeePC):
//! a Hankel-matrix behavioral predictor augmented with exact kinematic
//! equality rows, an energy-aware convex objective, cruising-headway safety
//! bounds, and online data adaptation gated on excitation rank.
//!
//! Module map:
//! - [`platoon`]: plant simulation (IDM human drivers, OVM-ACC baseline,
//!   error-state transforms, driver-diversity sampling, speed cycles).
//! - [`energy`]: wheel/battery power model, polynomial surrogate fit, and
//!   the convex per-step power form used inside the controller.
//! - [`deepc`]: Hankel library construction, persistency-of-excitation
//!   checks, excitation generation, and the tracking-QP assembly.
//! - [`qp`]: dense convex QP solver (ADMM) — the single numerical backend.
//! - [`controller`]: physics rows, spacing bounds, eco-QP assembly, online
//!   Hankel adaptation, and the closed-loop driver.
//! - [`harness`]: scenario runner, safety/energy metrics, batch sweeps,
//!   offline data collection, and plot-data export.
//! - [`config`]: serde-backed configuration schema shared by the CLI.

pub mod config;
pub mod controller;
pub mod deepc;
pub mod energy;
pub mod harness;
pub mod platoon;
pub mod qp;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A non-finite value (NaN/inf) reached a numeric entry point.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// Bumper-to-bumper spacing closed to zero or below: physical collision.
    #[error("collision: vehicle {vehicle} spacing {spacing:.4} m")]
    Collision { vehicle: usize, spacing: f64 },

    /// No finite equilibrium spacing exists at or above the desired speed.
    #[error("no equilibrium: v* = {v_star} m/s >= v_d = {v_d} m/s")]
    NoEquilibrium { v_star: f64, v_d: f64 },

    /// Input has the wrong length/shape for the operation.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Configuration value out of range or structurally invalid.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Input sequence failed the persistency-of-excitation rank check.
    #[error("excitation rank deficient: rank {rank} < {required} (order {order})")]
    RankDeficient {
        order: usize,
        rank: usize,
        required: usize,
    },

    /// The quadratic power surrogate is not convex at the given mean speed.
    #[error("power form Hessian not PSD at v_bar = {v_bar} m/s")]
    NonConvexPowerForm { v_bar: f64 },

    /// Spacing bounds crossed (lower > upper) for a vehicle.
    #[error("inverted spacing bounds for vehicle {vehicle}: [{lower:.3}, {upper:.3}] m")]
    InvertedBounds {
        vehicle: usize,
        lower: f64,
        upper: f64,
    },

    /// Hessian handed to the QP solver is not positive semidefinite.
    #[error("QP Hessian not PSD: min eigenvalue {min_eig:.3e}")]
    NonPsdHessian { min_eig: f64 },

    /// The QP solver terminated without an optimal point.
    #[error("QP solve failed with status {status:?}")]
    Solver { status: qp::SolveStatus },

    /// Exhausted retries while searching for an exciting input sequence.
    #[error("failed to generate persistently exciting input after {attempts} attempts")]
    ExcitationRetries { attempts: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
