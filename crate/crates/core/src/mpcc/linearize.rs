//! Augmented prediction model for the contouring OCP.
//!
//! State: the 17-dimensional quadrotor state plus progress θ and progress
//! speed v_θ (19 total). Inputs: four desired per-rotor thrusts plus the
//! progress acceleration a_θ (5 total). Thrust commands keep the input
//! bounds and rate penalties linear; the motor target is Ω_des = √(f/k_f).

use nalgebra::{SMatrix, SVector, Vector4};

use crate::quadmodel::{
    quad_jacobians, renormalize_quaternion, rk4_with_sensitivity, thrust_cmd_derivative,
    QuadGeometry, QuadState, ResidualCoeffs, QUAD_STATE_DIM,
};

/// Augmented state dimension.
pub const NA: usize = QUAD_STATE_DIM + 2;
/// Input dimension.
pub const NU: usize = 5;
/// Index of θ in the augmented state.
pub const IDX_THETA: usize = 17;
/// Index of v_θ in the augmented state.
pub const IDX_VTHETA: usize = 18;

pub type AugVec = SVector<f64, NA>;
pub type UVec = SVector<f64, NU>;
pub type AugMat = SMatrix<f64, NA, NA>;
pub type AugInputMat = SMatrix<f64, NA, NU>;

/// Quadrotor state with progress coordinates.
#[derive(Clone, Debug)]
pub struct AugState {
    pub quad: QuadState,
    pub theta: f64,
    pub v_theta: f64,
}

impl AugState {
    pub fn to_vector(&self) -> AugVec {
        let mut v = AugVec::zeros();
        v.fixed_rows_mut::<QUAD_STATE_DIM>(0)
            .copy_from(&self.quad.to_vector());
        v[IDX_THETA] = self.theta;
        v[IDX_VTHETA] = self.v_theta;
        v
    }

    pub fn from_vector(v: &AugVec) -> Self {
        Self {
            quad: QuadState::from_vector(&v.fixed_rows::<QUAD_STATE_DIM>(0).into_owned()),
            theta: v[IDX_THETA],
            v_theta: v[IDX_VTHETA],
        }
    }
}

#[derive(Clone, Debug)]
pub struct PredictionModel {
    pub geom: QuadGeometry,
    pub coeffs: Option<ResidualCoeffs>,
    pub substeps: usize,
}

impl PredictionModel {
    pub fn new(geom: QuadGeometry, coeffs: Option<ResidualCoeffs>) -> Self {
        Self {
            geom,
            coeffs,
            substeps: 2,
        }
    }

    fn derivative(&self, x: &AugVec, u: &UVec) -> (AugVec, AugMat, AugInputMat) {
        let quad = QuadState::from_vector(&x.fixed_rows::<QUAD_STATE_DIM>(0).into_owned());
        let f_des = Vector4::new(u[0], u[1], u[2], u[3]);
        let dq = thrust_cmd_derivative(&quad, &f_des, &self.geom, self.coeffs.as_ref());
        let jac = quad_jacobians(&quad, &f_des, &self.geom, self.coeffs.as_ref());

        let mut dx = AugVec::zeros();
        dx.fixed_rows_mut::<QUAD_STATE_DIM>(0).copy_from(&dq);
        dx[IDX_THETA] = x[IDX_VTHETA];
        dx[IDX_VTHETA] = u[4];

        let mut a = AugMat::zeros();
        a.fixed_view_mut::<QUAD_STATE_DIM, QUAD_STATE_DIM>(0, 0)
            .copy_from(&jac.a);
        a[(IDX_THETA, IDX_VTHETA)] = 1.0;

        let mut b = AugInputMat::zeros();
        b.fixed_view_mut::<QUAD_STATE_DIM, 4>(0, 0)
            .copy_from(&jac.b);
        b[(IDX_VTHETA, 4)] = 1.0;

        (dx, a, b)
    }

    /// Node transition with exact sensitivities; the quaternion is
    /// renormalized at the node boundary with its projection Jacobian folded
    /// in.
    pub fn step_with_sensitivity(
        &self,
        x: &AugVec,
        u: &UVec,
        dt: f64,
    ) -> (AugVec, AugMat, AugInputMat) {
        let (mut xn, a, b) =
            rk4_with_sensitivity(x, u, dt, self.substeps, |s, uu| self.derivative(s, uu));
        let proj = renormalize_quaternion(&mut xn, 3);
        (xn, proj * a, proj * b)
    }

    pub fn step(&self, x: &AugVec, u: &UVec, dt: f64) -> AugVec {
        // Plain RK4 over the substeps plus the boundary renormalization.
        let h = dt / self.substeps as f64;
        let mut xk = *x;
        for _ in 0..self.substeps {
            let k1 = self.derivative(&xk, u).0;
            let k2 = self.derivative(&(xk + k1 * (h / 2.0)), u).0;
            let k3 = self.derivative(&(xk + k2 * (h / 2.0)), u).0;
            let k4 = self.derivative(&(xk + k3 * h), u).0;
            xk += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        renormalize_quaternion(&mut xk, 3);
        xk
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn augmented_sensitivities_match_finite_differences() {
        let geom = QuadGeometry::default();
        let model = PredictionModel::new(geom.clone(), None);
        let mut quad = QuadState::hover_at(Vector3::new(1.0, -0.5, 2.0), 1200.0);
        quad.v = Vector3::new(5.0, 2.0, -1.0);
        quad.w = Vector3::new(0.5, -1.0, 0.2);
        let x = AugState {
            quad,
            theta: 3.0,
            v_theta: 6.0,
        }
        .to_vector();
        let u = UVec::new(2.5, 2.0, 3.0, 2.2, 4.0);
        let dt = 0.04;

        let (_, a, b) = model.step_with_sensitivity(&x, &u, dt);

        let mut a_fd = AugMat::zeros();
        for i in 0..NA {
            let h = 1e-6 * x[i].abs().max(1.0);
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            a_fd.set_column(i, &((model.step(&xp, &u, dt) - model.step(&xm, &u, dt)) / (2.0 * h)));
        }
        let mut b_fd = AugInputMat::zeros();
        for i in 0..NU {
            let h = 1e-6;
            let mut up = u;
            up[i] += h;
            let mut um = u;
            um[i] -= h;
            b_fd.set_column(i, &((model.step(&x, &up, dt) - model.step(&x, &um, dt)) / (2.0 * h)));
        }
        // Contract: Jacobian error < 1e-5 relative against central FD.
        assert!((a - a_fd).norm() / a_fd.norm() < 1e-5);
        assert!((b - b_fd).norm() / b_fd.norm() < 1e-5);
    }
}
