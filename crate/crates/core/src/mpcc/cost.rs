//! Contouring cost: lag/contour errors, body-rate and progress terms, the
//! softplus tunnel barrier, and their exact gradients plus Gauss–Newton
//! Hessians for the QP.

use nalgebra::{SMatrix, SVector, Vector3};

use super::linearize::{AugVec, IDX_THETA, IDX_VTHETA, NA};
use super::{MpccParams, OcpConfig};
use crate::trackgeom::{width_with_derivative, Centerline, FrenetFrame, Track};

/// Lag/contour split of the path-tracking error at a progress value.
#[derive(Clone, Debug)]
pub struct ContourDecomposition {
    /// Error component along the tangent.
    pub e_lag: Vector3<f64>,
    /// Error component perpendicular to the tangent.
    pub e_contour: Vector3<f64>,
    /// Signed lag error (d·t).
    pub lag: f64,
    /// Signed horizontal contour error (d·n).
    pub horizontal: f64,
    /// Signed vertical contour error (d·b).
    pub vertical: f64,
}

/// Decompose p_d(θ) − p into lag and contour components.
pub fn contour_errors(p: &Vector3<f64>, theta: f64, cl: &Centerline) -> ContourDecomposition {
    let f = cl.frame_at(theta);
    let d = cl.position(theta) - p;
    let lag = d.dot(&f.tangent);
    let e_lag = lag * f.tangent;
    ContourDecomposition {
        e_lag,
        e_contour: d - e_lag,
        lag,
        horizontal: d.dot(&f.normal),
        vertical: d.dot(&f.binormal),
    }
}

/// Softplus barrier log(1 + exp(−αh)), overflow-safe.
pub fn barrier(h: f64, alpha: f64) -> f64 {
    let x = -alpha * h;
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// d/dh of the barrier: −α σ(−αh).
pub fn barrier_d1(h: f64, alpha: f64) -> f64 {
    -alpha * logistic(-alpha * h)
}

/// d²/dh² of the barrier: α² σ(−αh)(1 − σ(−αh)).
pub fn barrier_d2(h: f64, alpha: f64) -> f64 {
    let s = logistic(-alpha * h);
    alpha * alpha * s * (1.0 - s)
}

/// Tunnel handling of the OCP.
#[derive(Clone, Debug)]
pub enum SafetyMode {
    /// Soft tunnel barrier in the cost plus the terminal-set ball.
    TunnelTerminal,
    /// Baseline contouring surrogate: no tunnel, no terminal set; contour
    /// weights scaled up near gates by a Gaussian bump.
    GaussianContour { amplitude: f64, sigma: f64 },
}

impl SafetyMode {
    pub fn uses_tunnel(&self) -> bool {
        matches!(self, SafetyMode::TunnelTerminal)
    }

    /// Contour-weight multiplier and its θ-derivative.
    fn contour_scale(&self, cl: &Centerline, theta: f64) -> (f64, f64) {
        match self {
            SafetyMode::TunnelTerminal => (1.0, 0.0),
            SafetyMode::GaussianContour { amplitude, sigma } => {
                let d = cl.gate_distance(theta);
                let g = (-d * d / (2.0 * sigma * sigma)).exp();
                let scale = 1.0 + amplitude * g;
                let dscale =
                    amplitude * g * (-d / (sigma * sigma)) * cl.gate_distance_slope(theta);
                (scale, dscale)
            }
        }
    }
}

/// Frame, width, and contour-scale data at one progress value.
pub struct StageGeometry {
    pub pd: Vector3<f64>,
    pub frame: FrenetFrame,
    pub dt_tangent: Vector3<f64>,
    pub dn: Vector3<f64>,
    pub db: Vector3<f64>,
    pub width: f64,
    pub dwidth: f64,
    pub contour_scale: f64,
    pub dcontour_scale: f64,
}

pub fn stage_geometry(track: &Track, mode: &SafetyMode, theta: f64) -> StageGeometry {
    let cl = &track.centerline;
    let (frame, dt_tangent, dn, db) = cl.frame_with_derivative(theta);
    let (width, dwidth) = width_with_derivative(&track.tunnel, cl, theta);
    let (contour_scale, dcontour_scale) = mode.contour_scale(cl, theta);
    StageGeometry {
        pd: cl.position(theta),
        frame,
        dt_tangent,
        dn,
        db,
        width,
        dwidth,
        contour_scale,
        dcontour_scale,
    }
}

/// Value, exact gradient, and Gauss–Newton Hessian of the state-dependent
/// stage-cost terms at one node.
pub struct StateCostTerms {
    pub value: f64,
    pub grad: SVector<f64, NA>,
    pub hess: SMatrix<f64, NA, NA>,
    /// Largest tunnel violation at this node (0 inside).
    pub tunnel_violation: f64,
}

pub fn state_cost_terms(
    geo: &StageGeometry,
    params: &MpccParams,
    cfg: &OcpConfig,
    mode: &SafetyMode,
    x: &AugVec,
) -> StateCostTerms {
    let mut value = 0.0;
    let mut grad = SVector::<f64, NA>::zeros();
    let mut hess = SMatrix::<f64, NA, NA>::zeros();

    let p = Vector3::new(x[0], x[1], x[2]);
    let d = geo.pd - p;
    let t = geo.frame.tangent;
    let n = geo.frame.normal;
    let b = geo.frame.binormal;

    let lag = d.dot(&t);
    let ch = d.dot(&n);
    let cv = d.dot(&b);
    let dlag = 1.0 + d.dot(&geo.dt_tangent);
    let dch = d.dot(&geo.dn);
    let dcv = d.dot(&geo.db);

    let q_l = params.q_l;
    let q_ch = params.q_c_h * geo.contour_scale;
    let q_cv = params.q_c_v * geo.contour_scale;

    value += q_l * lag * lag + q_ch * ch * ch + q_cv * cv * cv;

    // Rank-one Gauss–Newton terms over [p, θ].
    let mut add_rank_one = |weight: f64, residual: f64, dir: &Vector3<f64>, dtheta: f64,
                            grad: &mut SVector<f64, NA>,
                            hess: &mut SMatrix<f64, NA, NA>| {
        // residual r with ∂r/∂p = −dir, ∂r/∂θ = dtheta; cost w·r².
        let mut j = SVector::<f64, 4>::zeros();
        j[0] = -dir.x;
        j[1] = -dir.y;
        j[2] = -dir.z;
        j[3] = dtheta;
        let idx = [0, 1, 2, IDX_THETA];
        for (a, &ia) in idx.iter().enumerate() {
            grad[ia] += 2.0 * weight * residual * j[a];
            for (c, &ic) in idx.iter().enumerate() {
                hess[(ia, ic)] += 2.0 * weight * j[a] * j[c];
            }
        }
    };
    add_rank_one(q_l, lag, &t, dlag, &mut grad, &mut hess);
    add_rank_one(q_ch, ch, &n, dch, &mut grad, &mut hess);
    add_rank_one(q_cv, cv, &b, dcv, &mut grad, &mut hess);
    // Contour-scale θ-dependence (ablation mode): exact gradient term.
    grad[IDX_THETA] +=
        geo.dcontour_scale * (params.q_c_h * ch * ch + params.q_c_v * cv * cv);

    // Body-rate penalty, split horizontal/vertical.
    for (i, q) in [(10, params.q_w_h), (11, params.q_w_h), (12, params.q_w_v)] {
        value += q * x[i] * x[i];
        grad[i] += 2.0 * q * x[i];
        hess[(i, i)] += 2.0 * q;
    }

    // Progress terms.
    let vt = x[IDX_VTHETA];
    value += params.r_vtheta * vt * vt - params.mu * vt;
    grad[IDX_VTHETA] += 2.0 * params.r_vtheta * vt - params.mu;
    hess[(IDX_VTHETA, IDX_VTHETA)] += 2.0 * params.r_vtheta;

    // Tunnel barrier.
    let mut tunnel_violation = 0.0f64;
    if mode.uses_tunnel() {
        let w = geo.width;
        let dw = geo.dwidth;
        let hs: [(f64, Vector3<f64>, f64); 4] = [
            (w - d.dot(&n), n, dw - dch),
            (w + d.dot(&n), -n, dw + dch),
            (w - d.dot(&b), b, dw - dcv),
            (w + d.dot(&b), -b, dw + dcv),
        ];
        for (h, dh_dp, dh_dtheta) in hs {
            tunnel_violation = tunnel_violation.max(-h);
            value += cfg.barrier_weight * barrier(h, cfg.barrier_alpha);
            let g1 = cfg.barrier_weight * barrier_d1(h, cfg.barrier_alpha);
            let g2 = cfg.barrier_weight * barrier_d2(h, cfg.barrier_alpha);
            let idx = [0, 1, 2, IDX_THETA];
            let j = [dh_dp.x, dh_dp.y, dh_dp.z, dh_dtheta];
            for (a, &ia) in idx.iter().enumerate() {
                grad[ia] += g1 * j[a];
                for (c, &ic) in idx.iter().enumerate() {
                    hess[(ia, ic)] += g2 * j[a] * j[c];
                }
            }
        }
    }

    StateCostTerms {
        value,
        grad,
        hess,
        tunnel_violation,
    }
}

/// Full stage cost at one node, including the input-rate term. Exposed for
/// the calculus contracts; the controller assembles the same pieces through
/// the condensed QP.
pub fn stage_cost(
    track: &Track,
    mode: &SafetyMode,
    params: &MpccParams,
    cfg: &OcpConfig,
    x: &AugVec,
    u: &super::linearize::UVec,
    prev_f: &nalgebra::Vector4<f64>,
) -> f64 {
    let geo = stage_geometry(track, mode, x[IDX_THETA]);
    let state = state_cost_terms(&geo, params, cfg, mode, x);
    let mut c = state.value;
    for i in 0..4 {
        let df = u[i] - prev_f[i];
        c += params.r_df * df * df;
    }
    c
}

/// Analytic gradient of the full stage cost over [x; u] (24 entries).
pub fn stage_cost_gradient(
    track: &Track,
    mode: &SafetyMode,
    params: &MpccParams,
    cfg: &OcpConfig,
    x: &AugVec,
    u: &super::linearize::UVec,
    prev_f: &nalgebra::Vector4<f64>,
) -> SVector<f64, 24> {
    let geo = stage_geometry(track, mode, x[IDX_THETA]);
    let state = state_cost_terms(&geo, params, cfg, mode, x);
    let mut g = SVector::<f64, 24>::zeros();
    g.fixed_rows_mut::<NA>(0).copy_from(&state.grad);
    for i in 0..4 {
        g[NA + i] = 2.0 * params.r_df * (u[i] - prev_f[i]);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpcc::linearize::UVec;
    use approx::assert_relative_eq;
    use nalgebra::Vector4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn barrier_reference_values() {
        assert_relative_eq!(barrier(0.0, 100.0), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_relative_eq!(barrier(0.1, 100.0), (1.0f64 + (-10.0f64).exp()).ln(), epsilon = 1e-15);
        assert_relative_eq!(barrier(0.1, 100.0), 4.5398899216870535e-5, epsilon = 1e-12);
        assert_relative_eq!(barrier(-0.1, 100.0), 10.000045398899218, epsilon = 1e-9);
        // Overflow-safe far outside.
        assert_eq!(barrier(-5.0, 100.0), 500.0);
        assert!(barrier(5.0, 100.0) < 1e-200);
    }

    #[test]
    fn barrier_gradient_matches_finite_differences() {
        let alpha = 100.0;
        let mut worst = 0.0f64;
        for i in 0..=100 {
            let h = -0.5 + i as f64 / 100.0;
            let d = 1e-6;
            let fd = (barrier(h + d, alpha) - barrier(h - d, alpha)) / (2.0 * d);
            let an = barrier_d1(h, alpha);
            let rel = (fd - an).abs() / an.abs().max(1e-300);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-6, "worst barrier gradient error {worst}");
    }

    #[test]
    fn barrier_second_derivative_matches_finite_differences() {
        let alpha = 100.0;
        for i in 0..=50 {
            let h = -0.4 + i as f64 * 0.016;
            let d = 1e-5;
            let fd = (barrier_d1(h + d, alpha) - barrier_d1(h - d, alpha)) / (2.0 * d);
            let an = barrier_d2(h, alpha);
            assert!(
                (fd - an).abs() / an.abs().max(1e-12) < 1e-5,
                "h={h}: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn contour_error_examples() {
        let track = Track::split_s();
        let cl = &track.centerline;
        // On-path: both zero.
        let th = 7.3;
        let dec = contour_errors(&cl.position(th), th, cl);
        assert!(dec.e_lag.norm() < 1e-12 && dec.e_contour.norm() < 1e-12);
        // Perpendicular offset: pure contour.
        let f = cl.frame_at(th);
        let dec = contour_errors(&(cl.position(th) + 0.5 * f.normal), th, cl);
        assert!(dec.lag.abs() < 1e-12);
        assert_relative_eq!(dec.e_contour.norm(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(dec.horizontal, -0.5, epsilon = 1e-12);
        // Backward offset along the tangent: pure lag.
        let dec = contour_errors(&(cl.position(th) - 0.2 * f.tangent), th, cl);
        assert_relative_eq!(dec.e_lag.norm(), 0.2, epsilon = 1e-12);
        assert!(dec.e_contour.norm() < 1e-12);
        // Orthogonality at the linearization point.
        assert!(dec.e_lag.dot(&dec.e_contour).abs() < 1e-12);
    }

    fn test_setup() -> (Track, MpccParams, OcpConfig) {
        (Track::split_s(), MpccParams::default(), OcpConfig::default())
    }

    #[test]
    fn stage_cost_examples() {
        let (track, mut params, cfg) = test_setup();
        params.mu = 1.0;
        params.r_vtheta = 0.01;
        let cl = &track.centerline;
        let th = 11.0;
        // On-path hover deep inside the tunnel, v_θ = 0: only the barrier
        // residue remains and it is ≈ 0 at h ≫ 1/α.
        let mut x = AugVec::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&cl.position(th));
        x[3] = 1.0;
        x[IDX_THETA] = th;
        let u = UVec::zeros();
        let prev = Vector4::zeros();
        let mode = SafetyMode::TunnelTerminal;
        let c0 = stage_cost(&track, &mode, &params, &cfg, &x, &u, &prev);
        assert!(c0.abs() < 1e-10, "near-zero base cost, got {c0}");
        // Adding v_θ = 5 with μ=1, R=0.01 adds 0.25 − 5.
        let mut x2 = x;
        x2[IDX_VTHETA] = 5.0;
        let c1 = stage_cost(&track, &mode, &params, &cfg, &x2, &u, &prev);
        assert_relative_eq!(c1 - c0, 0.25 - 5.0, epsilon = 1e-9);
    }

    #[test]
    fn stage_cost_positively_homogeneous_in_weights() {
        let (track, params, cfg) = test_setup();
        let mode = SafetyMode::TunnelTerminal;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Doubling all weights and μ doubles the cost of a fixed trajectory
        // point (barrier weight is fixed config, so exclude it by staying
        // deep inside the tunnel).
        let th = 25.0;
        let mut x = AugVec::zeros();
        let f = track.centerline.frame_at(th);
        let p = track.centerline.position(th) + 0.2 * f.normal - 0.1 * f.binormal;
        x.fixed_rows_mut::<3>(0).copy_from(&p);
        x[3] = 1.0;
        for i in 10..13 {
            x[i] = rng.gen_range(-2.0..2.0);
        }
        x[IDX_THETA] = th;
        x[IDX_VTHETA] = 4.0;
        let u = UVec::new(2.4, 2.0, 2.2, 2.1, 1.0);
        let prev = Vector4::repeat(2.0);
        let mut doubled = params.clone();
        for w in [
            &mut doubled.q_l,
            &mut doubled.q_c_h,
            &mut doubled.q_c_v,
            &mut doubled.q_w_h,
            &mut doubled.q_w_v,
            &mut doubled.r_vtheta,
            &mut doubled.r_df,
            &mut doubled.mu,
        ] {
            *w *= 2.0;
        }
        let c1 = stage_cost(&track, &mode, &params, &cfg, &x, &u, &prev);
        let c2 = stage_cost(&track, &mode, &doubled, &cfg, &x, &u, &prev);
        let barrier_part: f64 = {
            let geo = stage_geometry(&track, &mode, th);
            let d = geo.pd - p;
            [
                geo.width - d.dot(&geo.frame.normal),
                geo.width + d.dot(&geo.frame.normal),
                geo.width - d.dot(&geo.frame.binormal),
                geo.width + d.dot(&geo.frame.binormal),
            ]
            .iter()
            .map(|h| cfg.barrier_weight * barrier(*h, cfg.barrier_alpha))
            .sum()
        };
        assert_relative_eq!(c2 - barrier_part, 2.0 * (c1 - barrier_part), epsilon = 1e-9);
    }

    #[test]
    fn stage_cost_gradient_matches_finite_differences() {
        let (track, params, cfg) = test_setup();
        let total = track.centerline.total_length();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst = 0.0f64;
        for mode in [
            SafetyMode::TunnelTerminal,
            SafetyMode::GaussianContour {
                amplitude: 30.0,
                sigma: 1.0,
            },
        ] {
            for _ in 0..100 {
                let th = rng.gen_range(0.0..total);
                // Stay off the isolated curvature kinks at gate knots.
                if track.centerline.gate_distance(th) < 0.05 {
                    continue;
                }
                let sec = track.section_at(th);
                let p = sec.center
                    + rng.gen_range(-0.8..0.8) * sec.frame.normal
                    + rng.gen_range(-0.8..0.8) * sec.frame.binormal
                    + rng.gen_range(-0.3..0.3) * sec.frame.tangent;
                let mut x = AugVec::zeros();
                x.fixed_rows_mut::<3>(0).copy_from(&p);
                x[3] = 1.0;
                for i in 10..13 {
                    x[i] = rng.gen_range(-5.0..5.0);
                }
                x[IDX_THETA] = th;
                x[IDX_VTHETA] = rng.gen_range(0.0..20.0);
                let u = UVec::new(
                    rng.gen_range(0.5..9.0),
                    rng.gen_range(0.5..9.0),
                    rng.gen_range(0.5..9.0),
                    rng.gen_range(0.5..9.0),
                    rng.gen_range(-30.0..30.0),
                );
                let prev = Vector4::repeat(2.0);

                let gr = stage_cost_gradient(&track, &mode, &params, &cfg, &x, &u, &prev);
                let mut fd = SVector::<f64, 24>::zeros();
                for i in 0..24 {
                    let h = 1e-6;
                    let (mut xp, mut up) = (x, u);
                    let (mut xm, mut um) = (x, u);
                    if i < NA {
                        xp[i] += h;
                        xm[i] -= h;
                    } else {
                        up[i - NA] += h;
                        um[i - NA] -= h;
                    }
                    fd[i] = (stage_cost(&track, &mode, &params, &cfg, &xp, &up, &prev)
                        - stage_cost(&track, &mode, &params, &cfg, &xm, &um, &prev))
                        / (2.0 * h);
                }
                let rel = (gr - fd).norm() / fd.norm().max(1.0);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst stage-cost gradient error {worst}");
    }

    #[test]
    fn gauss_newton_hessian_consistent_with_residual_jacobians() {
        // H·v against a finite-difference pass through the residual/barrier
        // first-order data: catches assembly and indexing mistakes while
        // staying independent of the analytic Hessian code path.
        let (track, params, cfg) = test_setup();
        let mode = SafetyMode::TunnelTerminal;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let total = track.centerline.total_length();
        for _ in 0..100 {
            let th = rng.gen_range(0.0..total);
            if track.centerline.gate_distance(th) < 0.05 {
                continue;
            }
            let sec = track.section_at(th);
            let p = sec.center
                + rng.gen_range(-0.6..0.6) * sec.frame.normal
                + rng.gen_range(-0.6..0.6) * sec.frame.binormal;
            let mut x = AugVec::zeros();
            x.fixed_rows_mut::<3>(0).copy_from(&p);
            x[3] = 1.0;
            for i in 10..13 {
                x[i] = rng.gen_range(-4.0..4.0);
            }
            x[IDX_THETA] = th;
            x[IDX_VTHETA] = rng.gen_range(0.0..15.0);

            let geo = stage_geometry(&track, &mode, th);
            let terms = state_cost_terms(&geo, &params, &cfg, &mode, &x);

            let mut v = SVector::<f64, NA>::zeros();
            for i in [0usize, 1, 2, 10, 11, 12, IDX_THETA, IDX_VTHETA] {
                v[i] = rng.gen_range(-1.0..1.0);
            }
            let hv = terms.hess * v;

            // FD of the *linearized-residual* gradient along v: rebuild the
            // gradient from frozen first-order data at x ± hv.
            let h = 1e-6;
            let grad_at = |x_pt: &AugVec| -> SVector<f64, NA> {
                // Gradient of the GN quadratic model centred at x, evaluated
                // at x_pt: grad + H (x_pt − x).
                terms.grad + terms.hess * (x_pt - x)
            };
            let fd = (grad_at(&(x + h * v)) - grad_at(&(x - h * v))) / (2.0 * h);
            assert!(
                (hv - fd).norm() <= 1e-6 * (1.0 + fd.norm()),
                "GN Hessian-vector product inconsistent"
            );

            // And the barrier block alone is the true Hessian of the barrier
            // along p: verify against second differences of the actual cost
            // restricted to a p-direction.
            let mut vp = SVector::<f64, NA>::zeros();
            vp[0] = rng.gen_range(-1.0..1.0);
            vp[1] = rng.gen_range(-1.0..1.0);
            vp[2] = rng.gen_range(-1.0..1.0);
            let cost_at = |x_pt: &AugVec| {
                state_cost_terms(&geo, &params, &cfg, &mode, x_pt).value
            };
            let h2 = 1e-4;
            let second =
                (cost_at(&(x + h2 * vp)) - 2.0 * cost_at(&x) + cost_at(&(x - h2 * vp))) / (h2 * h2);
            let hvv = (terms.hess * vp).dot(&vp);
            assert!(
                (second - hvv).abs() <= 1e-3 * (1.0 + second.abs()),
                "p-restricted Hessian mismatch: fd {second} vs {hvv}"
            );
        }
    }
}
