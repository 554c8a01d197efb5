//! The contouring optimal control problem and its real-time-iteration
//! controller: one Gauss–Newton SQP step over a condensed convex QP per
//! control cycle.

mod condense;
mod cost;
mod linearize;

pub use condense::CondensedPlan;
pub use cost::{
    barrier, barrier_d1, barrier_d2, contour_errors, stage_cost, stage_cost_gradient,
    stage_geometry, state_cost_terms, ContourDecomposition, SafetyMode, StageGeometry,
};
pub use linearize::{AugState, AugVec, PredictionModel, UVec, IDX_THETA, IDX_VTHETA, NA, NU};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector4};
use serde::{Deserialize, Serialize};

use crate::qp::{solve_qp, LinearRow, QpProblem, QpStatus};
use crate::quadmodel::{QuadGeometry, QuadState, ResidualCoeffs, RotorCommand};
use crate::terminalset::TerminalSet;
use crate::trackgeom::{Centerline, Track};

/// The 8 tunable cost weights φ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpccParams {
    /// Lag-error weight.
    pub q_l: f64,
    /// Horizontal contour-error weight.
    pub q_c_h: f64,
    /// Vertical contour-error weight.
    pub q_c_v: f64,
    /// Roll/pitch rate weight.
    pub q_w_h: f64,
    /// Yaw rate weight.
    pub q_w_v: f64,
    /// Progress-speed weight.
    pub r_vtheta: f64,
    /// Thrust-rate weight.
    pub r_df: f64,
    /// Progress reward weight.
    pub mu: f64,
}

impl Default for MpccParams {
    fn default() -> Self {
        // Hand-tuned starting point; the tuner explores around it.
        Self {
            q_l: 100.0,
            q_c_h: 1.5,
            q_c_v: 3.0,
            q_w_h: 0.02,
            q_w_v: 0.05,
            r_vtheta: 0.003,
            r_df: 0.01,
            mu: 3.0,
        }
    }
}

impl MpccParams {
    pub const NAMES: [&'static str; 8] = [
        "q_l", "q_c_h", "q_c_v", "q_w_h", "q_w_v", "r_vtheta", "r_df", "mu",
    ];

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.q_l,
            self.q_c_h,
            self.q_c_v,
            self.q_w_h,
            self.q_w_v,
            self.r_vtheta,
            self.r_df,
            self.mu,
        ]
    }

    pub fn from_array(a: &[f64; 8]) -> Self {
        Self {
            q_l: a[0],
            q_c_h: a[1],
            q_c_v: a[2],
            q_w_h: a[3],
            q_w_v: a[4],
            r_vtheta: a[5],
            r_df: a[6],
            mu: a[7],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in Self::NAMES.iter().zip(self.as_array()) {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if self.mu <= 0.0 {
            return Err(format!("mu must be positive, got {}", self.mu));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Fixed OCP configuration: horizon, bounds, barrier, terminal ball.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OcpConfig {
    pub n_nodes: usize,
    /// Node spacing [s].
    pub dt_node: f64,
    /// Control period [s].
    pub control_period: f64,
    /// Roll/pitch rate bound [rad/s].
    pub omega_xy_max: f64,
    /// Yaw rate bound [rad/s].
    pub omega_z_max: f64,
    /// Progress speed bound [m/s].
    pub v_theta_max: f64,
    /// Progress acceleration bound [m/s²].
    pub a_theta_max: f64,
    /// Per-node thrust-step bound as a fraction of f_max.
    pub df_max_frac: f64,
    /// Barrier slope α.
    pub barrier_alpha: f64,
    /// Tunnel soft-penalty weight (fixed, not part of φ).
    pub barrier_weight: f64,
    /// Terminal ball radius ε_N [m].
    pub terminal_radius: f64,
    /// Levelling added to the QP Hessian diagonal.
    pub levelling: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            n_nodes: 20,
            dt_node: 0.04,
            control_period: 0.01,
            omega_xy_max: 10.0,
            omega_z_max: 4.0,
            v_theta_max: 30.0,
            a_theta_max: 60.0,
            df_max_frac: 0.35,
            barrier_alpha: 100.0,
            barrier_weight: 1.0,
            terminal_radius: 0.3,
            levelling: 1e-6,
        }
    }
}

/// One RTI solve outcome: the updated plan and solver diagnostics.
#[derive(Clone, Debug)]
pub struct PlanSolution {
    pub states: Vec<AugState>,
    /// Per node: desired rotor thrusts and progress acceleration.
    pub inputs: Vec<UVec>,
    pub theta_trajectory: Vec<f64>,
    pub objective: f64,
    pub qp_status: QpStatus,
    pub kkt_residual: f64,
    /// Largest tunnel violation over the plan nodes [m].
    pub max_tunnel_violation: f64,
    /// True when the fallback input was applied instead of a fresh solve.
    pub used_fallback: bool,
}

/// Coarse-to-fine projection for controller initialization.
fn global_project(cl: &Centerline, p: &nalgebra::Vector3<f64>) -> f64 {
    let total = cl.total_length();
    let steps = (total / 0.5).ceil() as usize;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..steps {
        let th = total * i as f64 / steps as f64;
        let d = (cl.position(th) - p).norm_squared();
        if d < best.0 {
            best = (d, th);
        }
    }
    cl.project_progress(p, best.1).unwrap_or(best.1)
}

pub struct MpccController {
    pub track: Arc<Track>,
    terminal: Option<Arc<TerminalSet>>,
    model: PredictionModel,
    pub params: MpccParams,
    pub cfg: OcpConfig,
    mode: SafetyMode,
    plan_x: Vec<AugVec>,
    plan_u: Vec<UVec>,
    last_cmd: Vector4<f64>,
    /// Unwrapped progress of the vehicle.
    theta: f64,
    eps_terminal: f64,
    pub solver_failures: usize,
    pub control_steps: usize,
    fallback_idx: usize,
    inject_failure: bool,
    started: bool,
}

impl MpccController {
    pub fn new(
        track: Arc<Track>,
        terminal: Option<Arc<TerminalSet>>,
        geom: QuadGeometry,
        coeffs: Option<ResidualCoeffs>,
        params: MpccParams,
        cfg: OcpConfig,
        mode: SafetyMode,
    ) -> Self {
        let eps = cfg.terminal_radius;
        Self {
            track,
            terminal,
            model: PredictionModel::new(geom, coeffs),
            params,
            cfg,
            mode,
            plan_x: Vec::new(),
            plan_u: Vec::new(),
            last_cmd: Vector4::zeros(),
            theta: 0.0,
            eps_terminal: eps,
            solver_failures: 0,
            control_steps: 0,
            fallback_idx: 0,
            inject_failure: false,
            started: false,
        }
    }

    pub fn failure_rate(&self) -> f64 {
        if self.control_steps == 0 {
            0.0
        } else {
            self.solver_failures as f64 / self.control_steps as f64
        }
    }

    /// Unwrapped progress estimate of the vehicle.
    pub fn progress(&self) -> f64 {
        self.theta
    }

    /// Force the next solve to take the failure path (fault injection for
    /// tests and harness diagnostics).
    pub fn inject_solver_failure(&mut self) {
        self.inject_failure = true;
    }

    fn init_plan(&mut self, measured: &QuadState) {
        let n = self.cfg.n_nodes;
        let cl = &self.track.centerline;
        self.theta = global_project(cl, &measured.p);
        let hover = self.model.geom.hover_thrust();
        let aug = AugState {
            quad: measured.clone(),
            theta: self.theta,
            v_theta: 0.0,
        }
        .to_vector();
        self.plan_x = vec![aug; n + 1];
        self.plan_u = vec![UVec::new(hover, hover, hover, hover, 0.0); n];
        self.last_cmd = Vector4::repeat(hover);
        self.started = true;
    }

    /// Shift the plan by one control period: states interpolate toward the
    /// next node (the last node is duplicated), inputs are held.
    fn shift_plan(&mut self) {
        let frac = (self.cfg.control_period / self.cfg.dt_node).clamp(0.0, 1.0);
        let n = self.cfg.n_nodes;
        for k in 0..n {
            let a = self.plan_x[k];
            let b = self.plan_x[k + 1];
            let mut x = a + frac * (b - a);
            // nlerp for the quaternion block
            let qn = x.fixed_rows::<4>(3).norm();
            if qn > 1e-12 {
                let q = x.fixed_rows::<4>(3) / qn;
                x.fixed_rows_mut::<4>(3).copy_from(&q);
            }
            self.plan_x[k] = x;
        }
        self.plan_x[n] = self.plan_x[n];
    }

    /// One real-time iteration: project progress, shift, linearize, solve
    /// the condensed QP, apply the first input. Solver failures fall back to
    /// the previous plan's next input and are counted.
    pub fn control_step(&mut self, measured: &QuadState) -> (RotorCommand, PlanSolution) {
        if !self.started {
            self.init_plan(measured);
        }
        self.control_steps += 1;
        let cl = &self.track.centerline;
        let n = self.cfg.n_nodes;

        // Progress measurement, unwrapped across laps.
        let wrapped = cl.wrap(self.theta);
        let th_meas = cl.project_progress(&measured.p, wrapped).unwrap_or(wrapped);
        self.theta += cl.wrapped_diff(th_meas, wrapped);
        let tangent = cl.tangent(th_meas);
        let v_theta_meas = measured.v.dot(&tangent).clamp(0.0, self.cfg.v_theta_max);

        self.shift_plan();

        let meas_aug = AugState {
            quad: measured.clone(),
            theta: self.theta,
            v_theta: v_theta_meas,
        }
        .to_vector();

        // The plan's θ entries live on the unwrapped axis anchored at the
        // vehicle; re-anchor them if a lap boundary was crossed between
        // plan creation and now.
        let plan_shift = self.theta - self.plan_x[0][IDX_THETA];
        if plan_shift.abs() > 0.5 * cl.total_length() {
            let lap_jump =
                (plan_shift / cl.total_length()).round() * cl.total_length();
            for x in self.plan_x.iter_mut() {
                x[IDX_THETA] += lap_jump;
            }
        }

        let solved = if self.inject_failure {
            self.inject_failure = false;
            None
        } else {
            self.solve_rti(&meas_aug)
        };

        match solved {
            Some(sol) => {
                self.fallback_idx = 0;
                self.eps_terminal = self.cfg.terminal_radius;
                let f_des = Vector4::new(
                    self.plan_u[0][0],
                    self.plan_u[0][1],
                    self.plan_u[0][2],
                    self.plan_u[0][3],
                );
                self.last_cmd = f_des;
                let cmd = RotorCommand::from_thrusts(&f_des, &self.model.geom)
                    .clamped(&self.model.geom);
                (cmd, sol)
            }
            None => {
                // Failure path: consume the previous plan.
                self.solver_failures += 1;
                self.fallback_idx = (self.fallback_idx + 1).min(n - 1);
                let u = self.plan_u[self.fallback_idx];
                let f_des = Vector4::new(u[0], u[1], u[2], u[3]);
                self.last_cmd = f_des;
                // Relax the terminal ball so the next solve can recover.
                self.eps_terminal = (self.eps_terminal * 2.0).min(8.0 * self.cfg.terminal_radius);
                let cmd = RotorCommand::from_thrusts(&f_des, &self.model.geom)
                    .clamped(&self.model.geom);
                (cmd, self.snapshot(QpStatus::MaxIter, f64::INFINITY, true))
            }
        }
    }

    /// Build and solve the condensed QP around the shifted plan; update the
    /// plan on success. Returns None on solver failure.
    fn solve_rti(&mut self, meas_aug: &AugVec) -> Option<PlanSolution> {
        let n = self.cfg.n_nodes;
        let geom = self.model.geom.clone();
        let nu = NU;

        // Linearize the dynamics along the plan.
        let mut a_mats = Vec::with_capacity(n);
        let mut b_mats = Vec::with_capacity(n);
        let mut defects = Vec::with_capacity(n);
        for k in 0..n {
            let (xn, a, b) =
                self.model
                    .step_with_sensitivity(&self.plan_x[k], &self.plan_u[k], self.cfg.dt_node);
            a_mats.push(DMatrix::from_fn(NA, NA, |r, c| a[(r, c)]));
            b_mats.push(DMatrix::from_fn(NA, nu, |r, c| b[(r, c)]));
            defects.push(DVector::from_fn(NA, |r, _| (xn - self.plan_x[k + 1])[r]));
        }
        if a_mats
            .iter()
            .any(|m| m.iter().any(|v| !v.is_finite()))
        {
            return None;
        }

        let dx0 = DVector::from_fn(NA, |r, _| (meas_aug - self.plan_x[0])[r]);
        let plan = CondensedPlan::build(dx0, &a_mats, &b_mats, &defects);
        let nvars = plan.n_vars();

        let mut h = DMatrix::<f64>::zeros(nvars, nvars);
        let mut g = DVector::<f64>::zeros(nvars);

        // State cost terms at nodes 1..N.
        for k in 1..=n {
            let geo = stage_geometry(&self.track, &self.mode, self.plan_x[k][IDX_THETA]);
            let terms = state_cost_terms(&geo, &self.params, &self.cfg, &self.mode, &self.plan_x[k]);
            if !terms.value.is_finite() {
                return None;
            }
            let grad = DVector::from_fn(NA, |r, _| terms.grad[r]);
            let hess = DMatrix::from_fn(NA, NA, |r, c| terms.hess[(r, c)]);
            plan.add_state_cost(k, &grad, &hess, &mut h, &mut g);
        }

        // Thrust-rate cost on consecutive inputs (u_{-1} = last applied).
        let r_df = self.params.r_df;
        for k in 0..n {
            for i in 0..4 {
                let cur = nu * k + i;
                let v = if k == 0 {
                    self.plan_u[0][i] - self.last_cmd[i]
                } else {
                    self.plan_u[k][i] - self.plan_u[k - 1][i]
                };
                h[(cur, cur)] += 2.0 * r_df;
                g[cur] += 2.0 * r_df * v;
                if k > 0 {
                    let prev = nu * (k - 1) + i;
                    h[(prev, prev)] += 2.0 * r_df;
                    h[(cur, prev)] -= 2.0 * r_df;
                    h[(prev, cur)] -= 2.0 * r_df;
                    g[prev] -= 2.0 * r_df * v;
                }
            }
        }
        for i in 0..nvars {
            h[(i, i)] += self.cfg.levelling;
        }

        // Input boxes.
        let mut lb = DVector::<f64>::zeros(nvars);
        let mut ub = DVector::<f64>::zeros(nvars);
        for k in 0..n {
            for i in 0..4 {
                lb[nu * k + i] = geom.f_min - self.plan_u[k][i];
                ub[nu * k + i] = geom.f_max - self.plan_u[k][i];
            }
            lb[nu * k + 4] = -self.cfg.a_theta_max - self.plan_u[k][4];
            ub[nu * k + 4] = self.cfg.a_theta_max - self.plan_u[k][4];
        }

        let mut rows: Vec<LinearRow> = Vec::new();
        // Thrust-rate bounds.
        let df_max = self.cfg.df_max_frac * geom.f_max;
        for k in 0..n {
            for i in 0..4 {
                let cur = nu * k + i;
                if k == 0 {
                    let v = self.plan_u[0][i] - self.last_cmd[i];
                    rows.push(LinearRow::new(
                        vec![cur],
                        vec![1.0],
                        -df_max - v,
                        df_max - v,
                    ));
                } else {
                    let prev = nu * (k - 1) + i;
                    let v = self.plan_u[k][i] - self.plan_u[k - 1][i];
                    rows.push(LinearRow::new(
                        vec![prev, cur],
                        vec![-1.0, 1.0],
                        -df_max - v,
                        df_max - v,
                    ));
                }
            }
        }
        // State bounds at nodes 1..N: body rates and progress speed.
        for k in 1..=n {
            for (idx, bound) in [
                (10, self.cfg.omega_xy_max),
                (11, self.cfg.omega_xy_max),
                (12, self.cfg.omega_z_max),
            ] {
                rows.push(plan.state_row(k, idx, self.plan_x[k][idx], -bound, bound));
            }
            rows.push(plan.state_row(
                k,
                IDX_VTHETA,
                self.plan_x[k][IDX_VTHETA],
                0.0,
                self.cfg.v_theta_max,
            ));
        }
        // Terminal ball around the terminal-set point selected by θ_N.
        if let (true, Some(ts)) = (self.mode.uses_tunnel(), self.terminal.as_ref()) {
            let th_n = self.track.centerline.wrap(self.plan_x[n][IDX_THETA]);
            let (_, p_star) = ts.point_for(th_n);
            let p_n = nalgebra::Vector3::new(self.plan_x[n][0], self.plan_x[n][1], self.plan_x[n][2]);
            let dir = p_n - p_star;
            let dist = dir.norm();
            if dist > 1e-9 {
                let a = dir / dist;
                let xbar = DVector::from_fn(NA, |r, _| self.plan_x[n][r]);
                rows.push(plan.combination_row(
                    n,
                    &[0, 1, 2],
                    &[a.x, a.y, a.z],
                    f64::NEG_INFINITY,
                    // aᵀp ≤ aᵀp̄ + (ε − dist)
                    a.dot(&p_n) + (self.eps_terminal - dist),
                    &xbar,
                ));
            }
        }

        let qp = QpProblem {
            hessian: h,
            gradient: g,
            var_lower: lb,
            var_upper: ub,
            rows,
        };
        let sol = solve_qp(&qp);
        if sol.status != QpStatus::Optimal || sol.z.iter().any(|v| !v.is_finite()) {
            return None;
        }

        // Expand and apply the step.
        let dxs = plan.expand(&a_mats, &b_mats, &defects, &sol.z);
        for k in 0..=n {
            for r in 0..NA {
                self.plan_x[k][r] += dxs[k][r];
            }
            let qn = self.plan_x[k].fixed_rows::<4>(3).norm();
            if qn > 1e-12 {
                let q = self.plan_x[k].fixed_rows::<4>(3) / qn;
                self.plan_x[k].fixed_rows_mut::<4>(3).copy_from(&q);
            }
        }
        for k in 0..n {
            for i in 0..nu {
                self.plan_u[k][i] += sol.z[nu * k + i];
            }
        }
        Some(self.snapshot(sol.status, sol.kkt_residual, false))
    }

    /// Evaluate the current plan into a PlanSolution record.
    fn snapshot(&self, status: QpStatus, kkt: f64, used_fallback: bool) -> PlanSolution {
        let n = self.cfg.n_nodes;
        let mut objective = 0.0;
        let mut violation = 0.0f64;
        for k in 1..=n {
            let geo = stage_geometry(&self.track, &self.mode, self.plan_x[k][IDX_THETA]);
            let terms = state_cost_terms(&geo, &self.params, &self.cfg, &self.mode, &self.plan_x[k]);
            objective += terms.value;
            violation = violation.max(terms.tunnel_violation);
        }
        for k in 0..n {
            for i in 0..4 {
                let v = if k == 0 {
                    self.plan_u[0][i] - self.last_cmd[i]
                } else {
                    self.plan_u[k][i] - self.plan_u[k - 1][i]
                };
                objective += self.params.r_df * v * v;
            }
        }
        PlanSolution {
            states: self.plan_x.iter().map(AugState::from_vector).collect(),
            inputs: self.plan_u.clone(),
            theta_trajectory: self.plan_x.iter().map(|x| x[IDX_THETA]).collect(),
            objective,
            qp_status: status,
            kkt_residual: kkt,
            max_tunnel_violation: violation,
            used_fallback,
        }
    }
}
