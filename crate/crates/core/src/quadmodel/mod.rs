//! Quadrotor rigid-body dynamics with a first-order motor model and an
//! optional data-driven residual wrench.
//!
//! State layout (17 dimensions): position, unit quaternion (w,x,y,z,
//! body→inertial), inertial velocity, body rates, four motor speeds.
//! All units SI.

mod jacobian;

pub use jacobian::{
    quad_jacobians, renormalize_quaternion, rk4_with_sensitivity, thrust_cmd_derivative,
    QuadJacobians,
};

use nalgebra::{Matrix3, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const QUAD_STATE_DIM: usize = 17;

pub const GRAVITY: f64 = 9.81;

/// Gravity vector in the inertial frame (z up).
pub fn gravity_vec() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("integration produced a non-finite state component")]
    NonFiniteState,
}

/// Full 17-dimensional quadrotor state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    /// Position [m], inertial frame.
    pub p: Vector3<f64>,
    /// Unit quaternion (w, x, y, z), body → inertial.
    pub q: Vector4<f64>,
    /// Velocity [m/s], inertial frame.
    pub v: Vector3<f64>,
    /// Body rates [rad/s], body frame.
    pub w: Vector3<f64>,
    /// Motor speeds [rad/s], all nonnegative.
    pub omega: Vector4<f64>,
}

impl QuadState {
    /// Level hover at `p` with the given per-rotor motor speed.
    pub fn hover_at(p: Vector3<f64>, motor_speed: f64) -> Self {
        Self {
            p,
            q: Vector4::new(1.0, 0.0, 0.0, 0.0),
            v: Vector3::zeros(),
            w: Vector3::zeros(),
            omega: Vector4::repeat(motor_speed),
        }
    }

    pub fn to_vector(&self) -> SVector<f64, QUAD_STATE_DIM> {
        let mut x = SVector::<f64, QUAD_STATE_DIM>::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.p);
        x.fixed_rows_mut::<4>(3).copy_from(&self.q);
        x.fixed_rows_mut::<3>(7).copy_from(&self.v);
        x.fixed_rows_mut::<3>(10).copy_from(&self.w);
        x.fixed_rows_mut::<4>(13).copy_from(&self.omega);
        x
    }

    pub fn from_vector(x: &SVector<f64, QUAD_STATE_DIM>) -> Self {
        Self {
            p: x.fixed_rows::<3>(0).into(),
            q: x.fixed_rows::<4>(3).into(),
            v: x.fixed_rows::<3>(7).into(),
            w: x.fixed_rows::<3>(10).into(),
            omega: x.fixed_rows::<4>(13).into(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }

    /// Rotation matrix body → inertial.
    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rot(&self.q)
    }

    /// Velocity expressed in the body frame.
    pub fn body_velocity(&self) -> Vector3<f64> {
        self.rotation().transpose() * self.v
    }

    /// Mean-squared rotor speed, the Ω² feature of the residual model.
    pub fn omega_sq_mean(&self) -> f64 {
        self.omega.map(|o| o * o).sum() / 4.0
    }
}

/// Desired motor speeds commanded to the platform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotorCommand {
    /// Desired motor speeds [rad/s], each within [0, omega_max].
    pub omega_des: Vector4<f64>,
}

impl RotorCommand {
    /// Command equivalent to the given per-rotor thrusts through the map
    /// f_i = k_f Ω_i².
    pub fn from_thrusts(f: &Vector4<f64>, geom: &QuadGeometry) -> Self {
        Self {
            omega_des: f.map(|fi| (fi.max(0.0) / geom.k_f).sqrt()),
        }
    }

    pub fn clamped(&self, geom: &QuadGeometry) -> Self {
        Self {
            omega_des: self.omega_des.map(|o| o.clamp(0.0, geom.omega_max)),
        }
    }
}

/// Physical platform parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuadGeometry {
    /// Mass [kg].
    pub mass: f64,
    /// Principal inertia diagonal [kg m²].
    pub inertia_diag: Vector3<f64>,
    /// Arm length [m].
    pub arm_length: f64,
    /// Rotor torque constant [m].
    pub c_tau: f64,
    /// Thrust coefficient [N s²/rad²], f_i = k_f Ω_i².
    pub k_f: f64,
    /// Motor time constant [s].
    pub tau_mot: f64,
    /// Maximum motor speed [rad/s].
    pub omega_max: f64,
    /// Per-rotor thrust bound [N].
    pub f_max: f64,
    /// Per-rotor thrust lower bound [N].
    pub f_min: f64,
}

impl Default for QuadGeometry {
    /// Representative racing quad, thrust-to-weight ≈ 4.8.
    fn default() -> Self {
        Self {
            mass: 0.85,
            inertia_diag: Vector3::new(2.5e-3, 2.1e-3, 4.3e-3),
            arm_length: 0.15,
            c_tau: 0.013,
            k_f: 1.6e-6,
            tau_mot: 0.033,
            omega_max: 2500.0,
            f_max: 10.0,
            f_min: 0.05,
        }
    }
}

impl QuadGeometry {
    pub fn inertia(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia_diag)
    }

    /// Per-rotor hover thrust [N].
    pub fn hover_thrust(&self) -> f64 {
        self.mass * GRAVITY / 4.0
    }

    /// Motor speed that produces hover thrust on one rotor.
    pub fn hover_motor_speed(&self) -> f64 {
        (self.hover_thrust() / self.k_f).sqrt()
    }

    /// Thrusts produced by the given motor speeds.
    pub fn thrusts(&self, omega: &Vector4<f64>) -> Vector4<f64> {
        omega.map(|o| self.k_f * o * o)
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Coefficients of the polynomial residual wrench. Units map the body-frame
/// velocity / mean-squared rotor speed features to N and N·m.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualCoeffs {
    pub c_fx: [f64; 4],
    pub c_fy: [f64; 4],
    pub c_fz: [f64; 7],
    pub c_tx: [f64; 3],
    pub c_ty: [f64; 3],
    pub c_tz: [f64; 2],
}

impl ResidualCoeffs {
    pub fn is_zero(&self) -> bool {
        self.c_fx.iter().all(|c| *c == 0.0)
            && self.c_fy.iter().all(|c| *c == 0.0)
            && self.c_fz.iter().all(|c| *c == 0.0)
            && self.c_tx.iter().all(|c| *c == 0.0)
            && self.c_ty.iter().all(|c| *c == 0.0)
            && self.c_tz.iter().all(|c| *c == 0.0)
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

// ---------------------------------------------------------------------------
// Quaternion helpers, scalar-first (w, x, y, z).
// ---------------------------------------------------------------------------

/// Hamilton product a ⊙ b.
pub fn quat_mul(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    )
}

/// Rotation matrix of a (near-)unit quaternion, body → inertial.
pub fn quat_to_rot(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    )
}

/// Quaternion for a rotation that takes unit vector `from` to unit vector `to`
/// by the minimal arc.
pub fn quat_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Vector4<f64> {
    let c = from.cross(to);
    let d = from.dot(to);
    if d < -1.0 + 1e-12 {
        // Antipodal: rotate π about any axis perpendicular to `from`.
        let axis = if from.x.abs() < 0.9 {
            Vector3::x().cross(from).normalize()
        } else {
            Vector3::y().cross(from).normalize()
        };
        return Vector4::new(0.0, axis.x, axis.y, axis.z);
    }
    let w = (2.0 * (1.0 + d)).sqrt();
    Vector4::new(w / 2.0, c.x / w, c.y / w, c.z / w)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Attitude whose body z-axis points along `lift` by the minimal rotation
/// from level. Falls back to identity for a degenerate direction.
pub fn quad_between_vertical(lift: &Vector3<f64>) -> Vector4<f64> {
    let n = lift.norm();
    if n < 1e-9 {
        return Vector4::new(1.0, 0.0, 0.0, 0.0);
    }
    quat_between(&Vector3::z(), &(lift / n))
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

/// Thrust/torque mixing: per-rotor thrusts → collective thrust vector and
/// body torque.
pub fn mix_forces(f: &Vector4<f64>, geom: &QuadGeometry) -> (Vector3<f64>, Vector3<f64>) {
    let la = geom.arm_length / std::f64::consts::SQRT_2;
    let f_t = Vector3::new(0.0, 0.0, f.sum());
    let tau = Vector3::new(
        la * (f[0] + f[1] - f[2] - f[3]),
        la * (-f[0] + f[1] + f[2] - f[3]),
        geom.c_tau * (f[0] - f[1] + f[2] - f[3]),
    );
    (f_t, tau)
}

/// Rigid-body derivative under a given collective thrust and torque. Does not
/// touch motor speeds.
pub fn nominal_derivative(
    x: &QuadState,
    f_t: &Vector3<f64>,
    tau_t: &Vector3<f64>,
    geom: &QuadGeometry,
) -> QuadState {
    let rot = x.rotation();
    let j = geom.inertia();
    let j_inv = Matrix3::from_diagonal(&geom.inertia_diag.map(|d| 1.0 / d));
    let wq = Vector4::new(0.0, x.w.x, x.w.y, x.w.z);
    QuadState {
        p: x.v,
        q: 0.5 * quat_mul(&x.q, &wq),
        v: gravity_vec() + rot * f_t / geom.mass,
        w: j_inv * (tau_t - x.w.cross(&(j * x.w))),
        omega: Vector4::zeros(),
    }
}

/// First-order motor response Ω̇ = (Ω_des − Ω)/τ.
pub fn motor_derivative(omega: &Vector4<f64>, omega_des: &Vector4<f64>, tau_mot: f64) -> Vector4<f64> {
    (omega_des - omega) / tau_mot
}

/// Polynomial residual force and torque in the body frame.
///
/// Features per axis (v in body frame, s = mean-squared rotor speed):
///   f_x: [v_x, v_x³, s, v_x s]
///   f_y: [v_y, v_y³, s, v_y s]
///   f_z: [v_z, v_z³, v_xy, v_xy², v_xy s, v_z s, v_xy v_z s]
///   τ_x: [v_y, s, v_y s]
///   τ_y: [v_x, s, v_x s]
///   τ_z: [v_x, v_y]
pub fn residual_wrench(
    v_body: &Vector3<f64>,
    omega_sq_mean: f64,
    coeffs: &ResidualCoeffs,
) -> (Vector3<f64>, Vector3<f64>) {
    let (vx, vy, vz) = (v_body.x, v_body.y, v_body.z);
    let s = omega_sq_mean;
    let vxy = (vx * vx + vy * vy).sqrt();

    let c = &coeffs.c_fx;
    let fx = c[0] * vx + c[1] * vx.powi(3) + c[2] * s + c[3] * vx * s;
    let c = &coeffs.c_fy;
    let fy = c[0] * vy + c[1] * vy.powi(3) + c[2] * s + c[3] * vy * s;
    let c = &coeffs.c_fz;
    let fz = c[0] * vz
        + c[1] * vz.powi(3)
        + c[2] * vxy
        + c[3] * vxy * vxy
        + c[4] * vxy * s
        + c[5] * vz * s
        + c[6] * vxy * vz * s;

    let c = &coeffs.c_tx;
    let tx = c[0] * vy + c[1] * s + c[2] * vy * s;
    let c = &coeffs.c_ty;
    let ty = c[0] * vx + c[1] * s + c[2] * vx * s;
    let c = &coeffs.c_tz;
    let tz = c[0] * vx + c[1] * vy;

    (Vector3::new(fx, fy, fz), Vector3::new(tx, ty, tz))
}

/// Full state derivative: nominal rigid body + motor model, plus the residual
/// wrench when `coeffs` is given. Thrusts follow f_i = k_f Ω_i² from the
/// actual motor speeds.
pub fn full_derivative(
    x: &QuadState,
    u: &RotorCommand,
    geom: &QuadGeometry,
    coeffs: Option<&ResidualCoeffs>,
) -> QuadState {
    let f = geom.thrusts(&x.omega);
    let (mut f_t, mut tau_t) = mix_forces(&f, geom);
    if let Some(c) = coeffs {
        let (f_res, tau_res) = residual_wrench(&x.body_velocity(), x.omega_sq_mean(), c);
        // Residual force is produced in the body frame; the rigid-body
        // equations rotate f_t to inertial, so adding here is equivalent to
        // adding R(q) f_res to the inertial force. Torque acts in body frame.
        f_t += f_res;
        tau_t += tau_res;
    }
    let mut dx = nominal_derivative(x, &f_t, &tau_t, geom);
    dx.omega = motor_derivative(&x.omega, &u.omega_des, geom.tau_mot);
    dx
}

/// Classical 4-stage Runge–Kutta over an arbitrary state vector.
pub fn rk4_generic<const N: usize, F>(x: &SVector<f64, N>, dt: f64, f: F) -> SVector<f64, N>
where
    F: Fn(&SVector<f64, N>) -> SVector<f64, N>,
{
    let k1 = f(x);
    let k2 = f(&(x + k1 * (dt / 2.0)));
    let k3 = f(&(x + k2 * (dt / 2.0)));
    let k4 = f(&(x + k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// One RK4 step of the full model. Renormalizes the quaternion and clamps
/// motor speeds to [0, omega_max].
pub fn rk4_step(
    x: &QuadState,
    u: &RotorCommand,
    dt: f64,
    geom: &QuadGeometry,
    coeffs: Option<&ResidualCoeffs>,
) -> Result<QuadState, ModelError> {
    let xv = x.to_vector();
    let next = rk4_generic(&xv, dt, |s| {
        full_derivative(&QuadState::from_vector(s), u, geom, coeffs).to_vector()
    });
    let mut out = QuadState::from_vector(&next);
    let norm = out.q.norm();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(ModelError::NonFiniteState);
    }
    out.q /= norm;
    out.omega = out.omega.map(|o| o.clamp(0.0, geom.omega_max));
    if !out.is_finite() {
        return Err(ModelError::NonFiniteState);
    }
    Ok(out)
}
