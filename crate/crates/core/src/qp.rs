//! Dense strictly convex QP solver.
//!
//! Solves
//!
//! ```text
//!     minimize    ½ zᵀ H z + gᵀ z
//!     subject to  lb ≤ z ≤ ub            (variable bounds)
//!                 lo_r ≤ a_rᵀ z ≤ up_r   (sparse general rows)
//! ```
//!
//! with a Mehrotra predictor-corrector primal-dual interior point method.
//! The normal matrix H + Cᵀ(Λ/S)C is assembled structurally: variable bounds
//! contribute only diagonal terms and general rows contribute outer products
//! on their support, which keeps the per-iteration cost dominated by one
//! Cholesky of an n×n matrix. Deterministic given its inputs.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// A two-sided linear constraint on a sparse subset of variables.
#[derive(Clone, Debug)]
pub struct LinearRow {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

impl LinearRow {
    pub fn new(indices: Vec<usize>, values: Vec<f64>, lower: f64, upper: f64) -> Self {
        debug_assert_eq!(indices.len(), values.len());
        Self {
            indices,
            values,
            lower,
            upper,
        }
    }

    fn dot(&self, z: &DVector<f64>) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(i, v)| v * z[*i])
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub var_lower: DVector<f64>,
    pub var_upper: DVector<f64>,
    pub rows: Vec<LinearRow>,
}

impl QpProblem {
    /// Unconstrained problem of dimension n.
    pub fn unconstrained(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            var_lower: DVector::repeat(n, f64::NEG_INFINITY),
            var_upper: DVector::repeat(n, f64::INFINITY),
            rows: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.gradient.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
    NonFinite,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub status: QpStatus,
    /// max(scaled dual residual, scaled primal residual, complementarity).
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Multipliers for (lower, upper) sides of each general row.
    pub row_duals: Vec<(f64, f64)>,
    /// Multipliers for (lower, upper) variable bounds.
    pub bound_duals: Vec<(f64, f64)>,
}

/// One-sided constraint c·z ≤ d, tagged with its origin.
#[derive(Clone, Copy)]
enum ConSide {
    VarLo(usize),
    VarUp(usize),
    RowLo(usize),
    RowUp(usize),
}

const MAX_ITER: usize = 60;
const TOL: f64 = 1e-10;

pub fn solve_qp(p: &QpProblem) -> QpSolution {
    let n = p.n();

    // Collect one-sided constraints.
    let mut sides: Vec<(ConSide, f64)> = Vec::new();
    for i in 0..n {
        if p.var_lower[i].is_finite() {
            sides.push((ConSide::VarLo(i), -p.var_lower[i]));
        }
        if p.var_upper[i].is_finite() {
            sides.push((ConSide::VarUp(i), p.var_upper[i]));
        }
    }
    for (r, row) in p.rows.iter().enumerate() {
        if row.lower.is_finite() {
            sides.push((ConSide::RowLo(r), -row.lower));
        }
        if row.upper.is_finite() {
            sides.push((ConSide::RowUp(r), row.upper));
        }
    }
    let m = sides.len();

    let finish = |z: DVector<f64>, status, kkt, iters, lambda: &DVector<f64>| {
        let mut row_duals = vec![(0.0, 0.0); p.rows.len()];
        let mut bound_duals = vec![(0.0, 0.0); n];
        for (k, (side, _)) in sides.iter().enumerate() {
            let l = lambda[k];
            match side {
                ConSide::VarLo(i) => bound_duals[*i].0 = l,
                ConSide::VarUp(i) => bound_duals[*i].1 = l,
                ConSide::RowLo(r) => row_duals[*r].0 = l,
                ConSide::RowUp(r) => row_duals[*r].1 = l,
            }
        }
        QpSolution {
            z,
            status,
            kkt_residual: kkt,
            iterations: iters,
            row_duals,
            bound_duals,
        }
    };

    if m == 0 {
        // Pure Newton step.
        return match p.hessian.clone().cholesky() {
            Some(chol) => {
                let z = chol.solve(&(-&p.gradient));
                let kkt = (&p.hessian * &z + &p.gradient).amax() / (1.0 + p.gradient.amax());
                finish(z, QpStatus::Optimal, kkt, 0, &DVector::zeros(0))
            }
            None => finish(
                DVector::zeros(n),
                QpStatus::NonFinite,
                f64::INFINITY,
                0,
                &DVector::zeros(0),
            ),
        };
    }

    // c·z for a one-sided constraint.
    let con_dot = |side: &ConSide, z: &DVector<f64>| -> f64 {
        match side {
            ConSide::VarLo(i) => -z[*i],
            ConSide::VarUp(i) => z[*i],
            ConSide::RowLo(r) => -p.rows[*r].dot(z),
            ConSide::RowUp(r) => p.rows[*r].dot(z),
        }
    };
    // y ← y + α c for a one-sided constraint.
    let con_axpy = |side: &ConSide, alpha: f64, y: &mut DVector<f64>| match side {
        ConSide::VarLo(i) => y[*i] -= alpha,
        ConSide::VarUp(i) => y[*i] += alpha,
        ConSide::RowLo(r) => {
            let row = &p.rows[*r];
            for (i, v) in row.indices.iter().zip(&row.values) {
                y[*i] -= alpha * v;
            }
        }
        ConSide::RowUp(r) => {
            let row = &p.rows[*r];
            for (i, v) in row.indices.iter().zip(&row.values) {
                y[*i] += alpha * v;
            }
        }
    };

    let scale_g = 1.0 + p.gradient.amax();
    let scale_d = 1.0 + sides.iter().map(|(_, d)| d.abs()).fold(0.0, f64::max);

    let mut z = DVector::<f64>::zeros(n);
    let mut s = DVector::<f64>::from_fn(m, |k, _| (sides[k].1 - con_dot(&sides[k].0, &z)).max(1.0));
    let mut lambda = DVector::<f64>::repeat(m, 1.0);

    let mut best_kkt = f64::INFINITY;
    let mut iterations = 0;

    for iter in 0..MAX_ITER {
        iterations = iter;
        // Residuals.
        let mut r_d = &p.hessian * &z + &p.gradient;
        for (k, (side, _)) in sides.iter().enumerate() {
            con_axpy(side, lambda[k], &mut r_d);
        }
        let r_p = DVector::<f64>::from_fn(m, |k, _| con_dot(&sides[k].0, &z) + s[k] - sides[k].1);
        let mu = s.dot(&lambda) / m as f64;

        let kkt = (r_d.amax() / scale_g).max(r_p.amax() / scale_d).max(mu);
        best_kkt = best_kkt.min(kkt);
        if !kkt.is_finite() {
            return finish(z, QpStatus::NonFinite, best_kkt, iterations, &lambda);
        }
        if kkt < TOL {
            return finish(z, QpStatus::Optimal, kkt, iterations, &lambda);
        }
        // Primal infeasibility: complementarity collapsed but the primal
        // residual cannot (duals blowing up).
        if (mu < 1e-12 && r_p.amax() / scale_d > 1e-7 && lambda.amax() > 1e6)
            || lambda.amax() > 1e12
        {
            return finish(z, QpStatus::Infeasible, best_kkt, iterations, &lambda);
        }

        // Normal matrix M = H + Cᵀ(Λ/S)C with structural updates.
        let mut mmat = p.hessian.clone();
        let w: Vec<f64> = (0..m).map(|k| lambda[k] / s[k]).collect();
        // Lower and upper sides of the same row share the outer product.
        let mut row_w = vec![0.0; p.rows.len()];
        for (k, (side, _)) in sides.iter().enumerate() {
            match side {
                ConSide::VarLo(i) | ConSide::VarUp(i) => mmat[(*i, *i)] += w[k],
                ConSide::RowLo(r) | ConSide::RowUp(r) => row_w[*r] += w[k],
            }
        }
        for (r, row) in p.rows.iter().enumerate() {
            if row_w[r] == 0.0 {
                continue;
            }
            for (ii, vi) in row.indices.iter().zip(&row.values) {
                for (jj, vj) in row.indices.iter().zip(&row.values) {
                    mmat[(*ii, *jj)] += row_w[r] * vi * vj;
                }
            }
        }

        let mut chol = None;
        for attempt in 0..5 {
            let mut mj = mmat.clone();
            if attempt > 0 {
                let jitter = 1e-12 * 10f64.powi(2 * attempt);
                for i in 0..n {
                    mj[(i, i)] += jitter;
                }
            }
            if let Some(c) = mj.cholesky() {
                chol = Some(c);
                break;
            }
        }
        let chol = match chol {
            Some(c) => c,
            None => return finish(z, QpStatus::NonFinite, best_kkt, iterations, &lambda),
        };

        // Shared reduction: rhs = −r_d + Σ c_k (r_c,k − λ_k r_p,k)/s_k,
        // where r_c is the target complementarity residual.
        let solve_direction = |r_c: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>) {
            let mut rhs = -&r_d;
            for (k, (side, _)) in sides.iter().enumerate() {
                con_axpy(side, (r_c[k] - lambda[k] * r_p[k]) / s[k], &mut rhs);
            }
            let dz = chol.solve(&rhs);
            let mut ds = DVector::<f64>::zeros(m);
            let mut dl = DVector::<f64>::zeros(m);
            for (k, (side, _)) in sides.iter().enumerate() {
                ds[k] = -r_p[k] - con_dot(side, &dz);
                dl[k] = -(r_c[k] + lambda[k] * ds[k]) / s[k];
            }
            (dz, ds, dl)
        };

        let max_step = |v: &DVector<f64>, dv: &DVector<f64>| -> f64 {
            let mut a: f64 = 1.0;
            for k in 0..m {
                if dv[k] < 0.0 {
                    a = a.min(-v[k] / dv[k]);
                }
            }
            a
        };

        // Affine (predictor) direction.
        let r_c_aff = DVector::<f64>::from_fn(m, |k, _| s[k] * lambda[k]);
        let (dz_aff, ds_aff, dl_aff) = solve_direction(&r_c_aff);
        let a_p = max_step(&s, &ds_aff);
        let a_d = max_step(&lambda, &dl_aff);
        let mu_aff = (0..m)
            .map(|k| (s[k] + a_p * ds_aff[k]) * (lambda[k] + a_d * dl_aff[k]))
            .sum::<f64>()
            / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let _ = dz_aff;

        // Corrector.
        let r_c = DVector::<f64>::from_fn(m, |k, _| {
            s[k] * lambda[k] + ds_aff[k] * dl_aff[k] - sigma * mu
        });
        let (dz, ds, dl) = solve_direction(&r_c);
        let tau = 0.995;
        let a_p = (tau * max_step(&s, &ds)).min(1.0);
        let a_d = (tau * max_step(&lambda, &dl)).min(1.0);

        z += a_p * &dz;
        s += a_p * &ds;
        lambda += a_d * &dl;
    }

    // Out of iterations: classify.
    let r_p_end = DVector::<f64>::from_fn(m, |k, _| con_dot(&sides[k].0, &z) + s[k] - sides[k].1);
    let status = if r_p_end.amax() / scale_d > 1e-6 && lambda.amax() > 1e6 {
        QpStatus::Infeasible
    } else {
        QpStatus::MaxIter
    };
    finish(z, status, best_kkt, MAX_ITER, &lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn textbook_1d() {
        // min ½x² s.t. x ≥ 1 → x = 1, dual = 1.
        let p = QpProblem {
            hessian: DMatrix::from_element(1, 1, 1.0),
            gradient: DVector::zeros(1),
            var_lower: DVector::from_element(1, 1.0),
            var_upper: DVector::from_element(1, f64::INFINITY),
            rows: vec![],
        };
        let sol = solve_qp(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.z[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(sol.bound_duals[0].0, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn unconstrained_newton_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &a * a.transpose() + DMatrix::identity(n, n);
        let g = DVector::<f64>::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let p = QpProblem::unconstrained(h.clone(), g.clone());
        let sol = solve_qp(&p);
        let expect = h.cholesky().unwrap().solve(&(-&g));
        assert!((sol.z - expect).amax() < 1e-8);
    }

    #[test]
    fn detects_infeasible() {
        // x ≥ 1 and x ≤ 0 cannot both hold.
        let p = QpProblem {
            hessian: DMatrix::from_element(1, 1, 1.0),
            gradient: DVector::zeros(1),
            var_lower: DVector::from_element(1, 1.0),
            var_upper: DVector::from_element(1, f64::INFINITY),
            rows: vec![LinearRow::new(vec![0], vec![1.0], f64::NEG_INFINITY, 0.0)],
        };
        let sol = solve_qp(&p);
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (p, _) = random_qp(&mut rng, 8, 4);
        let a = solve_qp(&p);
        let b = solve_qp(&p);
        assert_eq!(a.z, b.z);
        assert_eq!(a.iterations, b.iterations);
    }

    /// Random strictly convex QP with m one-sided rows; kept loose enough to
    /// usually be feasible.
    fn random_qp(
        rng: &mut ChaCha8Rng,
        n: usize,
        m: usize,
    ) -> (QpProblem, Vec<(DVector<f64>, f64)>) {
        let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &a * a.transpose() + DMatrix::identity(n, n) * rng.gen_range(0.5..2.0);
        let g = DVector::<f64>::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let mut rows = Vec::new();
        let mut dense = Vec::new();
        for _ in 0..m {
            let c = DVector::<f64>::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let d = rng.gen_range(-0.5..1.5);
            rows.push(LinearRow::new(
                (0..n).collect(),
                c.iter().cloned().collect(),
                f64::NEG_INFINITY,
                d,
            ));
            dense.push((c, d));
        }
        (
            QpProblem {
                hessian: h,
                gradient: g,
                var_lower: DVector::repeat(n, f64::NEG_INFINITY),
                var_upper: DVector::repeat(n, f64::INFINITY),
                rows,
            },
            dense,
        )
    }

    /// Brute-force active-set enumeration over the ≤ 2^m subsets.
    fn enumeration_oracle(p: &QpProblem, dense: &[(DVector<f64>, f64)]) -> Option<DVector<f64>> {
        let n = p.n();
        let m = dense.len();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0u32..(1 << m) {
            let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let na = active.len();
            if na > n {
                continue;
            }
            let mut kkt = DMatrix::<f64>::zeros(n + na, n + na);
            kkt.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
            for (j, &ai) in active.iter().enumerate() {
                for i in 0..n {
                    kkt[(i, n + j)] = dense[ai].0[i];
                    kkt[(n + j, i)] = dense[ai].0[i];
                }
            }
            let mut rhs = DVector::<f64>::zeros(n + na);
            rhs.rows_mut(0, n).copy_from(&(-&p.gradient));
            for (j, &ai) in active.iter().enumerate() {
                rhs[n + j] = dense[ai].1;
            }
            let sol = match kkt.lu().solve(&rhs) {
                Some(s) => s,
                None => continue,
            };
            let z = sol.rows(0, n).into_owned();
            let lam = sol.rows(n, na);
            if lam.iter().any(|l| *l < -1e-9) {
                continue;
            }
            if dense.iter().any(|(c, d)| c.dot(&z) > d + 1e-9) {
                continue;
            }
            let obj = 0.5 * (&p.hessian * &z).dot(&z) + p.gradient.dot(&z);
            if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                best = Some((obj, z));
            }
        }
        best.map(|(_, z)| z)
    }

    #[test]
    fn matches_active_set_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut solved = 0;
        for _ in 0..120 {
            let n = rng.gen_range(2..=20);
            let m = rng.gen_range(1..=6);
            let (p, dense) = random_qp(&mut rng, n, m);
            let oracle = match enumeration_oracle(&p, &dense) {
                Some(z) => z,
                None => continue, // infeasible draw
            };
            let sol = solve_qp(&p);
            assert_eq!(sol.status, QpStatus::Optimal, "ipm failed on feasible qp");
            assert!(
                (sol.z - &oracle).amax() < 1e-6,
                "mismatch vs enumeration oracle"
            );
            solved += 1;
        }
        assert!(solved > 80, "not enough feasible instances: {solved}");
    }

    #[test]
    fn box_form_agrees_with_row_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(2..=10);
            let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &a * a.transpose() + DMatrix::identity(n, n);
            let g = DVector::<f64>::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
            let lb = DVector::<f64>::from_fn(n, |_, _| rng.gen_range(-1.0..0.0));
            let ub = DVector::<f64>::from_fn(n, |_, _| rng.gen_range(0.1..1.0));
            let boxed = QpProblem {
                hessian: h.clone(),
                gradient: g.clone(),
                var_lower: lb.clone(),
                var_upper: ub.clone(),
                rows: vec![],
            };
            let rowed = QpProblem {
                hessian: h,
                gradient: g,
                var_lower: DVector::repeat(n, f64::NEG_INFINITY),
                var_upper: DVector::repeat(n, f64::INFINITY),
                rows: (0..n)
                    .map(|i| LinearRow::new(vec![i], vec![1.0], lb[i], ub[i]))
                    .collect(),
            };
            let za = solve_qp(&boxed);
            let zb = solve_qp(&rowed);
            assert_eq!(za.status, QpStatus::Optimal);
            assert!((za.z - zb.z).amax() < 1e-7);
        }
    }

    #[test]
    fn kkt_residual_reported_small_on_success() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (p, _) = random_qp(&mut rng, 15, 5);
        let sol = solve_qp(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.kkt_residual < 1e-6);
    }
}
