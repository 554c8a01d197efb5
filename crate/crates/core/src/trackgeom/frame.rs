//! Smooth orthonormal moving frames along the centerline.
//!
//! Classical Frenet frames are undefined on straight segments and flip at
//! inflection points, so the frame here is built from a rotation-minimizing
//! (double-reflection) transport pass, smoothed into a C¹ field, and twisted
//! about the tangent so that the binormal coincides with each gate's up
//! vector at the gate. The constraint geometry only needs some smooth
//! orthonormal triad; gate alignment makes the tunnel cross-section match
//! the physical gate opening.

use nalgebra::Vector3;

use super::{Centerline, Gate};

/// Orthonormal right-handed triad at a progress value: t × n = b.
#[derive(Clone, Copy, Debug)]
pub struct FrenetFrame {
    pub tangent: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub binormal: Vector3<f64>,
}

#[derive(Clone, Debug)]
pub(super) struct FrameField {
    spacing: f64,
    /// Reference up vectors at uniform θ knots (rotation-minimizing samples).
    ref_knots: Vec<Vector3<f64>>,
    /// Gate-alignment twist spline knots (θ, unwrapped angle).
    twist_thetas: Vec<f64>,
    twist_alphas: Vec<f64>,
}

fn smoothstep(x: f64) -> (f64, f64) {
    let x = x.clamp(0.0, 1.0);
    (x * x * (3.0 - 2.0 * x), 6.0 * x * (1.0 - x))
}

impl FrameField {
    pub(super) fn empty() -> Self {
        Self {
            spacing: 1.0,
            ref_knots: Vec::new(),
            twist_thetas: Vec::new(),
            twist_alphas: Vec::new(),
        }
    }

    pub(super) fn build(cl: &Centerline, gates: &[Gate]) -> Self {
        let total = cl.total_length();
        let knots = ((total / 0.5).ceil() as usize).max(8);
        let spacing = total / knots as f64;

        // Rotation-minimizing transport of the first gate's up vector,
        // sampled at the knots (double-reflection method).
        let mut ref_knots = Vec::with_capacity(knots + 1);
        let substeps = 8;
        let h = spacing / substeps as f64;
        let (p0, t0, _) = cl.position_derivs(0.0);
        let mut u = (gates[0].up - gates[0].up.dot(&t0) * t0).normalize();
        let mut prev_p = p0;
        let mut prev_t = t0;
        ref_knots.push(u);
        for j in 1..=knots {
            for i in 1..=substeps {
                let th = ((j - 1) as f64 + i as f64 / substeps as f64) * spacing;
                let (p1, t1, _) = cl.position_derivs(th.min(total));
                let v1 = p1 - prev_p;
                let c1 = v1.norm_squared();
                if c1 > 1e-16 {
                    let ul = u - (2.0 / c1) * v1.dot(&u) * v1;
                    let tl = prev_t - (2.0 / c1) * v1.dot(&prev_t) * v1;
                    let v2 = t1 - tl;
                    let c2 = v2.norm_squared();
                    u = if c2 > 1e-16 {
                        ul - (2.0 / c2) * v2.dot(&ul) * v2
                    } else {
                        ul
                    };
                }
                prev_p = p1;
                prev_t = t1;
            }
            // Keep exactly perpendicular to the tangent.
            u = (u - u.dot(&prev_t) * prev_t).normalize();
            ref_knots.push(u);
        }

        let mut field = Self {
            spacing,
            ref_knots,
            twist_thetas: Vec::new(),
            twist_alphas: Vec::new(),
        };

        // Twist angles that align the binormal with each gate's up vector.
        let mut thetas = Vec::new();
        let mut alphas = Vec::new();
        let gate_thetas = cl.gate_thetas();
        let mut prev_alpha = 0.0;
        for (i, th) in gate_thetas.iter().enumerate() {
            let (_, t, _) = cl.position_derivs(*th);
            let (b0, n0) = field.base_frame(cl, *th, &t);
            let up = gates[i].up;
            let mut alpha = (-up.dot(&n0)).atan2(up.dot(&b0));
            while alpha - prev_alpha > std::f64::consts::PI {
                alpha -= 2.0 * std::f64::consts::PI;
            }
            while alpha - prev_alpha < -std::f64::consts::PI {
                alpha += 2.0 * std::f64::consts::PI;
            }
            thetas.push(*th);
            alphas.push(alpha);
            prev_alpha = alpha;
        }
        if cl.is_closed() {
            // Wrap knot: gate 0 again, on the nearest 2π branch.
            let (_, t, _) = cl.position_derivs(total);
            let (b0, n0) = field.base_frame(cl, total, &t);
            let up = gates[0].up;
            let mut alpha = (-up.dot(&n0)).atan2(up.dot(&b0));
            while alpha - prev_alpha > std::f64::consts::PI {
                alpha -= 2.0 * std::f64::consts::PI;
            }
            while alpha - prev_alpha < -std::f64::consts::PI {
                alpha += 2.0 * std::f64::consts::PI;
            }
            thetas.push(total);
            alphas.push(alpha);
        } else if (thetas.last().unwrap() - total).abs() > 1e-9 {
            thetas.push(total);
            alphas.push(prev_alpha);
        }
        field.twist_thetas = thetas;
        field.twist_alphas = alphas;
        field
    }

    /// Smoothed reference up vector and its θ-derivative.
    fn reference(&self, theta: f64) -> (Vector3<f64>, Vector3<f64>) {
        let last = self.ref_knots.len() - 1;
        let x = theta / self.spacing;
        let j = (x.floor() as usize).min(last.saturating_sub(1));
        let (w, dw) = smoothstep(x - j as f64);
        let r0 = self.ref_knots[j];
        let r1 = self.ref_knots[(j + 1).min(last)];
        let raw = (1.0 - w) * r0 + w * r1;
        let draw = (r1 - r0) * (dw / self.spacing);
        let norm = raw.norm();
        let u = raw / norm;
        let du = (draw - u * u.dot(&draw)) / norm;
        (u, du)
    }

    /// Projected frame before twist: binormal-like b₀ and n₀ = b₀ × t.
    fn base_frame(&self, _cl: &Centerline, theta: f64, t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let (u, _) = self.reference(theta);
        let m = u - u.dot(t) * t;
        let b0 = m.normalize();
        let n0 = b0.cross(t);
        (b0, n0)
    }

    fn twist(&self, theta: f64) -> (f64, f64) {
        let n = self.twist_thetas.len();
        if n == 0 {
            return (0.0, 0.0);
        }
        if theta <= self.twist_thetas[0] {
            return (self.twist_alphas[0], 0.0);
        }
        if theta >= self.twist_thetas[n - 1] {
            return (self.twist_alphas[n - 1], 0.0);
        }
        let i = match self
            .twist_thetas
            .binary_search_by(|a| a.partial_cmp(&theta).unwrap())
        {
            Ok(i) => return (self.twist_alphas[i], 0.0),
            Err(i) => i - 1,
        };
        let span = self.twist_thetas[i + 1] - self.twist_thetas[i];
        let (w, dw) = smoothstep((theta - self.twist_thetas[i]) / span);
        let da = self.twist_alphas[i + 1] - self.twist_alphas[i];
        (self.twist_alphas[i] + da * w, da * dw / span)
    }

    pub(super) fn frame(&self, cl: &Centerline, theta: f64) -> FrenetFrame {
        let th = cl.wrap(theta);
        let (_, t, _) = cl.position_derivs(th);
        let (b0, n0) = self.base_frame(cl, th, &t);
        let (psi, _) = self.twist(th);
        let (s, c) = psi.sin_cos();
        FrenetFrame {
            tangent: t,
            normal: c * n0 + s * b0,
            binormal: -s * n0 + c * b0,
        }
    }

    pub(super) fn frame_with_derivative(
        &self,
        cl: &Centerline,
        theta: f64,
    ) -> (FrenetFrame, Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let th = cl.wrap(theta);
        let (_, t, dt) = cl.position_derivs(th);
        let (u, du) = self.reference(th);

        let m = u - u.dot(&t) * t;
        let mnorm = m.norm();
        let b0 = m / mnorm;
        let dm = du - (du.dot(&t) + u.dot(&dt)) * t - u.dot(&t) * dt;
        let db0 = (dm - b0 * b0.dot(&dm)) / mnorm;
        let n0 = b0.cross(&t);
        let dn0 = db0.cross(&t) + b0.cross(&dt);

        let (psi, dpsi) = self.twist(th);
        let (s, c) = psi.sin_cos();
        let n = c * n0 + s * b0;
        let b = -s * n0 + c * b0;
        let dn = dpsi * (-s * n0 + c * b0) + c * dn0 + s * db0;
        let db = dpsi * (-c * n0 - s * b0) - s * dn0 + c * db0;

        (
            FrenetFrame {
                tangent: t,
                normal: n,
                binormal: b,
            },
            dt,
            dn,
            db,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trackgeom::tests::{split_s_gates, straight_gates};
    use crate::trackgeom::Centerline;
    use approx::assert_relative_eq;

    #[test]
    fn straight_track_constant_frame() {
        let gates = straight_gates(2, 6.0);
        let cl = Centerline::build(&gates, false).unwrap();
        for k in 0..=20 {
            let f = cl.frame_at(6.0 * k as f64 / 20.0);
            assert_relative_eq!(f.tangent, Vector3::x(), epsilon = 1e-9);
            assert_relative_eq!(f.normal, Vector3::y(), epsilon = 1e-9);
            assert_relative_eq!(f.binormal, Vector3::z(), epsilon = 1e-9);
        }
    }

    #[test]
    fn frames_orthonormal_right_handed() {
        let gates = split_s_gates();
        let cl = Centerline::build(&gates, true).unwrap();
        let total = cl.total_length();
        let mut worst: f64 = 0.0;
        for k in 0..10_000 {
            let f = cl.frame_at(total * k as f64 / 10_000.0);
            let e: f64 = [
                f.tangent.norm() - 1.0,
                f.normal.norm() - 1.0,
                f.binormal.norm() - 1.0,
                f.tangent.dot(&f.normal),
                f.tangent.dot(&f.binormal),
                f.normal.dot(&f.binormal),
                (f.tangent.cross(&f.normal) - f.binormal).norm(),
            ]
            .iter()
            .fold(0.0f64, |a, b| a.max(b.abs()));
            worst = worst.max(e);
        }
        assert!(worst < 1e-8, "worst orthonormality defect {worst}");
    }

    #[test]
    fn binormal_matches_gate_up_at_gates() {
        let gates = split_s_gates();
        let cl = Centerline::build(&gates, true).unwrap();
        for (i, th) in cl.gate_thetas().iter().enumerate() {
            let f = cl.frame_at(*th);
            assert!(
                (f.binormal - gates[i].up).norm() < 1e-9,
                "gate {i}: binormal {:?} vs up {:?}",
                f.binormal,
                gates[i].up
            );
        }
        // Wrap continuity for closed tracks.
        let f0 = cl.frame_at(0.0);
        let f1 = cl.frame_at(cl.total_length());
        assert!((f0.normal - f1.normal).norm() < 1e-9);
    }

    #[test]
    fn frame_derivatives_match_finite_differences() {
        let gates = split_s_gates();
        let cl = Centerline::build(&gates, true).unwrap();
        let total = cl.total_length();
        // Probe away from gate knots where curvature is discontinuous.
        for k in 0..40 {
            let th = total * (0.013 + 0.9 * k as f64 / 40.0);
            if cl.gate_distance(th) < 0.05 {
                continue;
            }
            let h = 1e-6;
            let (f, dt, dn, db) = cl.frame_with_derivative(th);
            let fp = cl.frame_at(th + h);
            let fm = cl.frame_at(th - h);
            let fd_t = (fp.tangent - fm.tangent) / (2.0 * h);
            let fd_n = (fp.normal - fm.normal) / (2.0 * h);
            let fd_b = (fp.binormal - fm.binormal) / (2.0 * h);
            assert!((dt - fd_t).norm() < 1e-5 * (1.0 + fd_t.norm()), "t′ at {th}");
            assert!((dn - fd_n).norm() < 1e-5 * (1.0 + fd_n.norm()), "n′ at {th}: {dn:?} vs {fd_n:?}");
            assert!((db - fd_b).norm() < 1e-5 * (1.0 + fd_b.norm()), "b′ at {th}");
            let _ = f;
        }
    }
}
