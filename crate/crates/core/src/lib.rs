//! Quadrotor racing through gate tunnels: simulation, contouring MPC with
//! prismatic corridor constraints, residual-dynamics identification, and
//! trust-region Bayesian tuning of the controller weights.
//!
//! The crate is organised around the closed loop:
//!
//! - [`quadmodel`] — rigid-body + motor dynamics, polynomial residual wrench,
//!   RK4 integration and analytic sensitivities.
//! - [`trackgeom`] — gates, centerline spline, moving frames, tunnel widths,
//!   halfspace constraints, gate-pass/collision events.
//! - [`qp`] — dense strictly convex QP solver (primal-dual interior point).
//! - [`mpcc`] — the contouring OCP: costs, linearisation, condensing, and the
//!   real-time-iteration controller.
//! - [`terminalset`] — offline periodic trajectory used as terminal set.
//! - [`sysid`] — least-squares identification of the residual coefficients.
//! - [`turbo`] — trust-region Bayesian optimization of the 8 cost weights.
//! - [`harness`] — closed-loop episodes, metrics, telemetry.
//! - [`report`] — plot-data export from telemetry and tuning histories.

// pub mod harness;
// pub mod mpcc;
pub mod qp;
pub mod quadmodel;
// pub mod report;
pub mod seeds;
// pub mod sysid;
pub mod terminalset;
pub mod trackgeom;
// pub mod turbo;

// pub use harness::{EnvConfig, EpisodeResult, Environment};
// pub use mpcc::{MpccController, MpccParams, OcpConfig, PlanSolution};
pub use quadmodel::{QuadGeometry, QuadState, ResidualCoeffs, RotorCommand};
pub use terminalset::TerminalSet;
pub use trackgeom::{Centerline, Gate, Track, TrackSpec, TunnelProfile};
