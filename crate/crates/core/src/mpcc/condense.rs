//! Condensing of a multiple-shooting linear-quadratic OCP onto the input
//! sequence: δx_k = φ_k + Γ_k δU with the shooting defects and the initial
//! deviation folded into φ. Dimension-generic so the same pipeline serves
//! the contouring controller and small reference problems.

use nalgebra::{DMatrix, DVector};

use crate::qp::LinearRow;

pub struct CondensedPlan {
    pub nx: usize,
    pub nu: usize,
    pub n_nodes: usize,
    /// φ_k, k = 0..N (φ_0 = initial deviation).
    pub phi: Vec<DVector<f64>>,
    /// Γ_k as nx × (nu·k); columns beyond nu·k are structurally zero.
    pub gamma: Vec<DMatrix<f64>>,
}

impl CondensedPlan {
    /// Build from node linearizations δx_{k+1} = A_k δx_k + B_k δu_k + c_k.
    pub fn build(
        dx0: DVector<f64>,
        a: &[DMatrix<f64>],
        b: &[DMatrix<f64>],
        defects: &[DVector<f64>],
    ) -> Self {
        let n_nodes = a.len();
        assert_eq!(b.len(), n_nodes);
        assert_eq!(defects.len(), n_nodes);
        let nx = dx0.len();
        let nu = b[0].ncols();

        let mut phi = Vec::with_capacity(n_nodes + 1);
        let mut gamma = Vec::with_capacity(n_nodes + 1);
        phi.push(dx0);
        gamma.push(DMatrix::zeros(nx, 0));
        for k in 0..n_nodes {
            let phi_next = &a[k] * &phi[k] + &defects[k];
            let mut gamma_next = DMatrix::zeros(nx, nu * (k + 1));
            if k > 0 {
                gamma_next
                    .view_mut((0, 0), (nx, nu * k))
                    .copy_from(&(&a[k] * &gamma[k]));
            }
            gamma_next
                .view_mut((0, nu * k), (nx, nu))
                .copy_from(&b[k]);
            phi.push(phi_next);
            gamma.push(gamma_next);
        }
        Self {
            nx,
            nu,
            n_nodes,
            phi,
            gamma,
        }
    }

    /// Total input-vector dimension of the condensed QP.
    pub fn n_vars(&self) -> usize {
        self.nu * self.n_nodes
    }

    /// Accumulate a node state cost (value-expansion gradient and Hessian at
    /// the linearization point) into the condensed quadratic.
    pub fn add_state_cost(
        &self,
        k: usize,
        grad: &DVector<f64>,
        hess: &DMatrix<f64>,
        qp_h: &mut DMatrix<f64>,
        qp_g: &mut DVector<f64>,
    ) {
        let cols = self.gamma[k].ncols();
        if cols == 0 {
            return;
        }
        let hg = hess * &self.gamma[k]; // nx × cols
        let hterm = self.gamma[k].transpose() * &hg;
        qp_h.view_mut((0, 0), (cols, cols)).zip_apply(&hterm, |a, b| *a += b);
        let lin = self.gamma[k].transpose() * (grad + hess * &self.phi[k]);
        qp_g.rows_mut(0, cols).zip_apply(&lin, |a, b| *a += b);
    }

    /// Constraint row for one state component at node k:
    /// lo ≤ x̄ + φ + Γ_row·δU ≤ up becomes a LinearRow on δU.
    pub fn state_row(&self, k: usize, idx: usize, xbar: f64, lo: f64, up: f64) -> LinearRow {
        let cols = self.gamma[k].ncols();
        let offset = xbar + self.phi[k][idx];
        let mut indices = Vec::with_capacity(cols);
        let mut values = Vec::with_capacity(cols);
        for c in 0..cols {
            let v = self.gamma[k][(idx, c)];
            if v != 0.0 {
                indices.push(c);
                values.push(v);
            }
        }
        LinearRow::new(indices, values, lo - offset, up - offset)
    }

    /// Combination row aᵀ(x̄_sel + δx_sel) at node k over the given state
    /// indices: returns (LinearRow bounds on δU, current value aᵀx̄ + aᵀφ).
    pub fn combination_row(
        &self,
        k: usize,
        idx: &[usize],
        coeff: &[f64],
        lo: f64,
        up: f64,
        xbar: &DVector<f64>,
    ) -> LinearRow {
        let cols = self.gamma[k].ncols();
        let mut offset = 0.0;
        let mut dense = vec![0.0; cols];
        for (i, &si) in idx.iter().enumerate() {
            offset += coeff[i] * (xbar[si] + self.phi[k][si]);
            for c in 0..cols {
                dense[c] += coeff[i] * self.gamma[k][(si, c)];
            }
        }
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (c, v) in dense.iter().enumerate() {
            if *v != 0.0 {
                indices.push(c);
                values.push(*v);
            }
        }
        LinearRow::new(indices, values, lo - offset, up - offset)
    }

    /// Roll the solved input deviation forward through the linear model.
    pub fn expand(
        &self,
        a: &[DMatrix<f64>],
        b: &[DMatrix<f64>],
        defects: &[DVector<f64>],
        du: &DVector<f64>,
    ) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(self.n_nodes + 1);
        out.push(self.phi[0].clone());
        for k in 0..self.n_nodes {
            let duk = du.rows(self.nu * k, self.nu);
            let next = &a[k] * &out[k] + &b[k] * duk + &defects[k];
            out.push(next);
        }
        out
    }
}
