//! Analytic Jacobians of the quadrotor dynamics, used to propagate exact
//! sensitivities through the RK4 prediction model.
//!
//! The prediction model takes desired per-rotor thrusts as inputs (the motor
//! target is Ω_des = √(f_des/k_f)), which keeps the input bounds and rate
//! penalties linear.

use nalgebra::{Matrix3, Matrix3x4, SMatrix, SVector, Vector3, Vector4};

use super::{
    gravity_vec, motor_derivative, quat_to_rot, residual_wrench, skew, QuadGeometry,
    QuadState, ResidualCoeffs, QUAD_STATE_DIM,
};

pub type StateVec = SVector<f64, QUAD_STATE_DIM>;
pub type StateMat = SMatrix<f64, QUAD_STATE_DIM, QUAD_STATE_DIM>;
pub type InputMat = SMatrix<f64, QUAD_STATE_DIM, 4>;

/// Continuous-time Jacobians of the thrust-commanded model.
pub struct QuadJacobians {
    pub a: StateMat,
    pub b: InputMat,
}

/// State derivative with desired thrusts as input.
pub fn thrust_cmd_derivative(
    x: &QuadState,
    f_des: &Vector4<f64>,
    geom: &QuadGeometry,
    coeffs: Option<&ResidualCoeffs>,
) -> StateVec {
    let omega_des = f_des.map(|f| (f.max(0.0) / geom.k_f).sqrt());
    let f = geom.thrusts(&x.omega);
    let (mut f_t, mut tau_t) = super::mix_forces(&f, geom);
    if let Some(c) = coeffs {
        let (f_res, tau_res) = residual_wrench(&x.body_velocity(), x.omega_sq_mean(), c);
        f_t += f_res;
        tau_t += tau_res;
    }
    let mut dx = super::nominal_derivative(x, &f_t, &tau_t, geom);
    dx.omega = motor_derivative(&x.omega, &omega_des, geom.tau_mot);
    dx.to_vector()
}

/// Left quaternion multiplication matrix: q ⊙ r = L(q) r.
fn quat_left(q: &Vector4<f64>) -> SMatrix<f64, 4, 4> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    SMatrix::<f64, 4, 4>::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// Right quaternion multiplication matrix: q ⊙ r = R(r) q.
fn quat_right(r: &Vector4<f64>) -> SMatrix<f64, 4, 4> {
    let (w, x, y, z) = (r[0], r[1], r[2], r[3]);
    SMatrix::<f64, 4, 4>::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// ∂(R(q) a)/∂q for fixed a, 3×4.
fn d_rot_a_dq(q: &Vector4<f64>, a: &Vector3<f64>) -> SMatrix<f64, 3, 4> {
    let w = q[0];
    let qv = Vector3::new(q[1], q[2], q[3]);
    let mut out = SMatrix::<f64, 3, 4>::zeros();
    out.set_column(0, &(2.0 * (w * a + qv.cross(a))));
    let block = 2.0
        * (Matrix3::identity() * qv.dot(a) + qv * a.transpose()
            - a * qv.transpose()
            - w * skew(a));
    out.fixed_view_mut::<3, 3>(0, 1).copy_from(&block);
    out
}

/// ∂(R(q)ᵀ v)/∂q for fixed v, 3×4.
fn d_rot_t_v_dq(q: &Vector4<f64>, v: &Vector3<f64>) -> SMatrix<f64, 3, 4> {
    let w = q[0];
    let qv = Vector3::new(q[1], q[2], q[3]);
    let mut out = SMatrix::<f64, 3, 4>::zeros();
    out.set_column(0, &(2.0 * (w * v - qv.cross(v))));
    let block = 2.0
        * (Matrix3::identity() * qv.dot(v) + qv * v.transpose() - v * qv.transpose()
            + w * skew(v));
    out.fixed_view_mut::<3, 3>(0, 1).copy_from(&block);
    out
}

/// Partials of the residual wrench w.r.t. body velocity and the mean-squared
/// rotor speed s.
fn residual_partials(
    v: &Vector3<f64>,
    s: f64,
    c: &ResidualCoeffs,
) -> (Matrix3<f64>, Vector3<f64>, Matrix3<f64>, Vector3<f64>) {
    let (vx, vy, vz) = (v.x, v.y, v.z);
    let vxy = (vx * vx + vy * vy).sqrt();
    // ∂v_xy/∂(vx,vy); the kink at v_xy = 0 gets a zero subgradient.
    let (dxy_dx, dxy_dy) = if vxy > 1e-12 {
        (vx / vxy, vy / vxy)
    } else {
        (0.0, 0.0)
    };

    let mut df_dv = Matrix3::zeros();
    let mut df_ds = Vector3::zeros();
    let cf = &c.c_fx;
    df_dv[(0, 0)] = cf[0] + 3.0 * cf[1] * vx * vx + cf[3] * s;
    df_ds.x = cf[2] + cf[3] * vx;
    let cf = &c.c_fy;
    df_dv[(1, 1)] = cf[0] + 3.0 * cf[1] * vy * vy + cf[3] * s;
    df_ds.y = cf[2] + cf[3] * vy;
    let cf = &c.c_fz;
    let dfz_dvxy = cf[2] + 2.0 * cf[3] * vxy + cf[4] * s + cf[6] * vz * s;
    df_dv[(2, 0)] = dfz_dvxy * dxy_dx;
    df_dv[(2, 1)] = dfz_dvxy * dxy_dy;
    df_dv[(2, 2)] = cf[0] + 3.0 * cf[1] * vz * vz + cf[5] * s + cf[6] * vxy * s;
    df_ds.z = cf[4] * vxy + cf[5] * vz + cf[6] * vxy * vz;

    let mut dt_dv = Matrix3::zeros();
    let mut dt_ds = Vector3::zeros();
    let ct = &c.c_tx;
    dt_dv[(0, 1)] = ct[0] + ct[2] * s;
    dt_ds.x = ct[1] + ct[2] * vy;
    let ct = &c.c_ty;
    dt_dv[(1, 0)] = ct[0] + ct[2] * s;
    dt_ds.y = ct[1] + ct[2] * vx;
    let ct = &c.c_tz;
    dt_dv[(2, 0)] = ct[0];
    dt_dv[(2, 1)] = ct[1];

    (df_dv, df_ds, dt_dv, dt_ds)
}

/// Continuous-time A = ∂f/∂x (17×17) and B = ∂f/∂f_des (17×4) of the
/// thrust-commanded model at (x, f_des).
pub fn quad_jacobians(
    x: &QuadState,
    f_des: &Vector4<f64>,
    geom: &QuadGeometry,
    coeffs: Option<&ResidualCoeffs>,
) -> QuadJacobians {
    let mut a = StateMat::zeros();
    let mut b = InputMat::zeros();

    let rot = quat_to_rot(&x.q);
    let j = geom.inertia();
    let j_inv = Matrix3::from_diagonal(&geom.inertia_diag.map(|d| 1.0 / d));
    let m = geom.mass;
    let _ = gravity_vec();

    // ṗ = v
    a.fixed_view_mut::<3, 3>(0, 7).copy_from(&Matrix3::identity());

    // q̇ = ½ q ⊙ [0, ω]
    let wq = Vector4::new(0.0, x.w.x, x.w.y, x.w.z);
    let dq_dq = 0.5 * quat_right(&wq);
    a.fixed_view_mut::<4, 4>(3, 3).copy_from(&dq_dq);
    let l = quat_left(&x.q);
    a.fixed_view_mut::<4, 3>(3, 10)
        .copy_from(&(0.5 * l.fixed_view::<4, 3>(0, 1).into_owned()));

    // Body-frame force and torque with residual contributions.
    let f_rot = geom.thrusts(&x.omega);
    let (mut f_b, _tau) = super::mix_forces(&f_rot, geom);
    let v_body = rot.transpose() * x.v;
    let s = x.omega_sq_mean();

    let (df_dv, df_ds, dt_dv, dt_ds) = match coeffs {
        Some(c) => {
            let (f_res, _) = residual_wrench(&v_body, s, c);
            f_b += f_res;
            residual_partials(&v_body, s, c)
        }
        None => (
            Matrix3::zeros(),
            Vector3::zeros(),
            Matrix3::zeros(),
            Vector3::zeros(),
        ),
    };

    let d_vb_dq = d_rot_t_v_dq(&x.q, &x.v);
    let ds_domega = 0.5 * x.omega.transpose(); // ∂s/∂Ω_i = Ω_i/2

    // v̇ = g + R(q) f_b / m
    let dv_dq = (d_rot_a_dq(&x.q, &f_b) + rot * df_dv * d_vb_dq) / m;
    a.fixed_view_mut::<3, 4>(7, 3).copy_from(&dv_dq);
    let dv_dv = rot * df_dv * rot.transpose() / m;
    a.fixed_view_mut::<3, 3>(7, 7).copy_from(&dv_dv);
    // ∂f_prop/∂Ω: only the collective z row; plus residual via s.
    let mut dfb_domega = SMatrix::<f64, 3, 4>::zeros();
    for i in 0..4 {
        dfb_domega[(2, i)] = 2.0 * geom.k_f * x.omega[i];
    }
    dfb_domega += df_ds * ds_domega;
    a.fixed_view_mut::<3, 4>(7, 13)
        .copy_from(&(rot * dfb_domega / m));

    // ω̇ = J⁻¹(τ_mix + τ_res − ω×Jω)
    let dw_dq = j_inv * dt_dv * d_vb_dq;
    a.fixed_view_mut::<3, 4>(10, 3).copy_from(&dw_dq);
    let dw_dv = j_inv * dt_dv * rot.transpose();
    a.fixed_view_mut::<3, 3>(10, 7).copy_from(&dw_dv);
    let dw_dw = j_inv * (skew(&(j * x.w)) - skew(&x.w) * j);
    a.fixed_view_mut::<3, 3>(10, 10).copy_from(&dw_dw);

    let la = geom.arm_length / std::f64::consts::SQRT_2;
    let mix = Matrix3x4::new(
        la, la, -la, -la, //
        -la, la, la, -la, //
        geom.c_tau, -geom.c_tau, geom.c_tau, -geom.c_tau,
    );
    let mut dtau_domega = Matrix3x4::<f64>::zeros();
    for i in 0..4 {
        let col = mix.column(i) * (2.0 * geom.k_f * x.omega[i]);
        dtau_domega.set_column(i, &col);
    }
    dtau_domega += dt_ds * ds_domega;
    a.fixed_view_mut::<3, 4>(10, 13)
        .copy_from(&(j_inv * dtau_domega));

    // Ω̇ = (√(f_des/k_f) − Ω)/τ
    for i in 0..4 {
        a[(13 + i, 13 + i)] = -1.0 / geom.tau_mot;
        let fi = f_des[i].max(1e-9);
        b[(13 + i, i)] = 1.0 / (geom.tau_mot * 2.0 * (geom.k_f * fi).sqrt());
    }

    QuadJacobians { a, b }
}

/// RK4 over substeps with exact sensitivity propagation. `f` returns the
/// derivative and its continuous-time Jacobians at a point.
pub fn rk4_with_sensitivity<const N: usize, const M: usize, F>(
    x: &SVector<f64, N>,
    u: &SVector<f64, M>,
    dt: f64,
    substeps: usize,
    f: F,
) -> (SVector<f64, N>, SMatrix<f64, N, N>, SMatrix<f64, N, M>)
where
    F: Fn(&SVector<f64, N>, &SVector<f64, M>) -> (SVector<f64, N>, SMatrix<f64, N, N>, SMatrix<f64, N, M>),
{
    let h = dt / substeps as f64;
    let mut xk = *x;
    let mut a_total = SMatrix::<f64, N, N>::identity();
    let mut b_total = SMatrix::<f64, N, M>::zeros();
    let eye = SMatrix::<f64, N, N>::identity();

    for _ in 0..substeps {
        let (k1, a1, b1) = f(&xk, u);
        let s1 = a1;
        let t1 = b1;

        let x2 = xk + k1 * (h / 2.0);
        let (k2, a2, b2) = f(&x2, u);
        let s2 = a2 * (eye + s1 * (h / 2.0));
        let t2 = a2 * t1 * (h / 2.0) + b2;

        let x3 = xk + k2 * (h / 2.0);
        let (k3, a3, b3) = f(&x3, u);
        let s3 = a3 * (eye + s2 * (h / 2.0));
        let t3 = a3 * t2 * (h / 2.0) + b3;

        let x4 = xk + k3 * h;
        let (k4, a4, b4) = f(&x4, u);
        let s4 = a4 * (eye + s3 * h);
        let t4 = a4 * t3 * h + b4;

        xk += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let a_step = eye + (s1 + s2 * 2.0 + s3 * 2.0 + s4) * (h / 6.0);
        let b_step = (t1 + t2 * 2.0 + t3 * 2.0 + t4) * (h / 6.0);

        b_total = a_step * b_total + b_step;
        a_total = a_step * a_total;
    }
    (xk, a_total, b_total)
}

/// Renormalize the quaternion block (rows `q_off..q_off+4`) of a state vector
/// and fold the projection Jacobian into an existing sensitivity matrix.
pub fn renormalize_quaternion<const N: usize>(
    x: &mut SVector<f64, N>,
    q_off: usize,
) -> SMatrix<f64, N, N> {
    let q = Vector4::new(x[q_off], x[q_off + 1], x[q_off + 2], x[q_off + 3]);
    let norm = q.norm();
    let qn = q / norm;
    for i in 0..4 {
        x[q_off + i] = qn[i];
    }
    let mut jac = SMatrix::<f64, N, N>::identity();
    let block = (SMatrix::<f64, 4, 4>::identity() - qn * qn.transpose()) / norm;
    jac.fixed_view_mut::<4, 4>(q_off, q_off).copy_from(&block);
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadmodel::QuadState;

    fn test_state() -> QuadState {
        let mut x = QuadState::hover_at(Vector3::new(0.3, -0.2, 1.4), 1150.0);
        x.q = Vector4::new(0.9, 0.2, -0.3, 0.15).normalize();
        x.v = Vector3::new(6.0, -3.0, 1.5);
        x.w = Vector3::new(1.2, -0.8, 0.5);
        x.omega = Vector4::new(1100.0, 1250.0, 990.0, 1300.0);
        x
    }

    fn test_coeffs() -> ResidualCoeffs {
        ResidualCoeffs {
            c_fx: [-0.2, -3e-4, 1e-7, -8e-9],
            c_fy: [-0.22, -2e-4, -1e-7, -7e-9],
            c_fz: [-0.35, -5e-4, 0.05, 8e-3, 2e-8, -1e-8, 1e-10],
            c_tx: [-2e-3, 1e-9, -4e-10],
            c_ty: [2e-3, -1e-9, 4e-10],
            c_tz: [1e-3, -1e-3],
        }
    }

    /// Central finite differences of the continuous dynamics.
    fn fd_jacobians(
        x: &QuadState,
        f_des: &Vector4<f64>,
        geom: &QuadGeometry,
        coeffs: Option<&ResidualCoeffs>,
    ) -> (StateMat, InputMat) {
        let mut a = StateMat::zeros();
        let mut b = InputMat::zeros();
        let xv = x.to_vector();
        for i in 0..QUAD_STATE_DIM {
            let h = 1e-6 * xv[i].abs().max(1.0);
            let mut xp = xv;
            xp[i] += h;
            let mut xm = xv;
            xm[i] -= h;
            let fp = thrust_cmd_derivative(&QuadState::from_vector(&xp), f_des, geom, coeffs);
            let fm = thrust_cmd_derivative(&QuadState::from_vector(&xm), f_des, geom, coeffs);
            a.set_column(i, &((fp - fm) / (2.0 * h)));
        }
        for i in 0..4 {
            let h = 1e-6 * f_des[i].abs().max(1.0);
            let mut up = *f_des;
            up[i] += h;
            let mut um = *f_des;
            um[i] -= h;
            let fp = thrust_cmd_derivative(x, &up, geom, coeffs);
            let fm = thrust_cmd_derivative(x, &um, geom, coeffs);
            b.set_column(i, &((fp - fm) / (2.0 * h)));
        }
        (a, b)
    }

    #[test]
    fn continuous_jacobians_match_finite_differences() {
        let geom = QuadGeometry::default();
        let coeffs = test_coeffs();
        let x = test_state();
        let f_des = Vector4::new(2.0, 3.5, 1.5, 2.8);
        for c in [None, Some(&coeffs)] {
            let jac = quad_jacobians(&x, &f_des, &geom, c);
            let (a_fd, b_fd) = fd_jacobians(&x, &f_des, &geom, c);
            let err_a = (jac.a - a_fd).norm() / a_fd.norm();
            let err_b = (jac.b - b_fd).norm() / b_fd.norm();
            assert!(err_a < 1e-7, "A mismatch: {err_a}");
            assert!(err_b < 1e-7, "B mismatch: {err_b}");
        }
    }

    #[test]
    fn discrete_sensitivity_matches_finite_differences() {
        // Contract for the SQP linearization: relative error < 1e-5 against
        // central finite differences of the discrete transition.
        let geom = QuadGeometry::default();
        let coeffs = test_coeffs();
        let x = test_state();
        let f_des = SVector::<f64, 4>::new(2.0, 3.5, 1.5, 2.8);
        let dt = 0.04;

        let step = |xv: &StateVec, u: &SVector<f64, 4>| {
            let (mut xn, mut a, b) = rk4_with_sensitivity(xv, u, dt, 2, |s, uu| {
                let st = QuadState::from_vector(s);
                let f4 = Vector4::new(uu[0], uu[1], uu[2], uu[3]);
                let d = thrust_cmd_derivative(&st, &f4, &geom, Some(&coeffs));
                let j = quad_jacobians(&st, &f4, &geom, Some(&coeffs));
                (d, j.a, j.b)
            });
            let proj = renormalize_quaternion(&mut xn, 3);
            a = proj * a;
            (xn, a, proj * b)
        };

        let (_, a, b) = step(&x.to_vector(), &f_des);

        let mut a_fd = StateMat::zeros();
        let xv = x.to_vector();
        for i in 0..QUAD_STATE_DIM {
            let h = 1e-6 * xv[i].abs().max(1.0);
            let mut xp = xv;
            xp[i] += h;
            let mut xm = xv;
            xm[i] -= h;
            a_fd.set_column(i, &((step(&xp, &f_des).0 - step(&xm, &f_des).0) / (2.0 * h)));
        }
        let mut b_fd = InputMat::zeros();
        for i in 0..4 {
            let h = 1e-5;
            let mut up = f_des;
            up[i] += h;
            let mut um = f_des;
            um[i] -= h;
            b_fd.set_column(i, &((step(&xv, &up).0 - step(&xv, &um).0) / (2.0 * h)));
        }
        assert!((a - a_fd).norm() / a_fd.norm() < 1e-5);
        assert!((b - b_fd).norm() / b_fd.norm() < 1e-5);
    }
}
