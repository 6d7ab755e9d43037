//! Vertical lifting of an object held between two grippers.
//!
//! `q = (o, g₁, g₂)`: object height and the two gripper heights. Grippers are
//! unit masses driven by forces `a₁, a₂`; the normal forces `n₁, n₂` they press
//! onto the object are inputs too. Friction (μ = 1) between each gripper and
//! the object is the only thing holding the object up.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::c3::{C3Params, Projection};
use crate::contact::{ContactDims, MultiContactModel};
use crate::error::{Error, Result};
use crate::lcs::LcsDims;
use crate::mpc::{CostSpec, StageConstraints};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FingerGaiting {
    pub mu: f64,
    pub gravity: f64,
    pub gripper1_limits: [f64; 2],
    pub gripper2_limits: [f64; 2],
    /// Back-off applied to the gripper limits inside the planner.
    pub bound_margin: f64,
    pub dt: f64,
}

impl Default for FingerGaiting {
    fn default() -> Self {
        Self {
            mu: 1.0,
            gravity: 9.81,
            gripper1_limits: [1.0, 3.0],
            gripper2_limits: [3.0, 5.0],
            bound_margin: 0.35,
            dt: 0.1,
        }
    }
}

impl MultiContactModel for FingerGaiting {
    fn dims(&self) -> ContactDims {
        ContactDims { n_q: 3, n_u: 4, n_c: 2 }
    }

    fn mass_matrix(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(3, 3)
    }

    fn bias(&self, _q: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![self.gravity, 0.0, 0.0])
    }

    fn input_matrix(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 4, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    }

    fn normal_jacobian(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(2, 3)
    }

    fn tangent_jacobian(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            4,
            3,
            &[1.0, -1.0, 0.0, -1.0, 1.0, 0.0, 1.0, 0.0, -1.0, -1.0, 0.0, 1.0],
        )
    }

    fn signed_distance(&self, _q: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(2)
    }

    fn friction(&self) -> DVector<f64> {
        DVector::from_element(2, self.mu)
    }

    fn commanded_normal(&self, contact: usize) -> Option<usize> {
        Some(2 + contact)
    }
}

impl FingerGaiting {
    pub fn lcs_dims(&self) -> LcsDims {
        LcsDims {
            n_x: 6,
            n_u: 4,
            n_lambda: 6,
        }
    }

    /// Gripper limits, tightened by `bound_margin`, as hard bounds on every
    /// planned state, plus non-negative normal forces.
    pub fn constraints(&self) -> StageConstraints {
        let d = self.lcs_dims();
        let ui = d.n_x + d.n_lambda;
        let m = self.bound_margin;
        StageConstraints::unbounded(d.n_z())
            .bound(1, self.gripper1_limits[0] + m, self.gripper1_limits[1] - m)
            .bound(2, self.gripper2_limits[0] + m, self.gripper2_limits[1] - m)
            .bound(ui + 2, 0.0, f64::INFINITY)
            .bound(ui + 3, 0.0, f64::INFINITY)
    }

    /// Tracks an object height above the start with grippers near the middle
    /// of their ranges.
    pub fn cost(&self, object_target: f64, horizon: usize) -> CostSpec {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 1.0, 1.0, 0.1, 0.1, 0.1]));
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.01, 0.01, 0.01]));
        let mid1 = 0.5 * (self.gripper1_limits[0] + self.gripper1_limits[1]);
        let mid2 = 0.5 * (self.gripper2_limits[0] + self.gripper2_limits[1]);
        let x_ref = DVector::from_vec(vec![object_target, mid1, mid2, 0.0, 0.0, 0.0]);
        CostSpec::uniform(q.clone(), r, q, horizon).with_reference(x_ref)
    }

    /// Projection metric: states weighted 100, normal forces 0.01, the rest 1.
    /// The projection then mostly adjusts forces, not the planned motion.
    pub fn projection_metric(&self) -> DMatrix<f64> {
        let d = self.lcs_dims();
        let mut w = DVector::from_element(d.n_z(), 1.0);
        w.rows_mut(0, d.n_x).fill(100.0);
        let ui = d.n_x + d.n_lambda;
        w[ui + 2] = 0.01;
        w[ui + 3] = 0.01;
        DMatrix::from_diagonal(&w)
    }

    /// Controller settings: MIQP projection, `N = 10`, `s = 10`, `ρ = 0.1`,
    /// `ρ_s = 1.2`, object target `o = 0`.
    pub fn controller_params(&self) -> C3Params {
        let dims = self.lcs_dims();
        let mut params = C3Params::new(self.cost(0.0, 10), dims, Projection::Miqp);
        params.s = 10;
        params.rho = 0.1;
        params.rho_s = 1.2;
        params.u = self.projection_metric();
        params.constraints = Some(self.constraints());
        params
    }

    /// Object in `[-8, -6]`, grippers in `[2, 3]` and `[3, 4]`, at rest.
    pub fn sample_initial_state<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let o = rng.gen_range(-8.0..-6.0);
        let g1 = rng.gen_range(2.0..3.0);
        let g2 = rng.gen_range(3.0..4.0);
        DVector::from_vec(vec![o, g1, g2, 0.0, 0.0, 0.0])
    }

    /// Gripper positions within their limits up to `tol`.
    pub fn within_limits(&self, x: &DVector<f64>, tol: f64) -> bool {
        let [l1, u1] = self.gripper1_limits;
        let [l2, u2] = self.gripper2_limits;
        x[1] >= l1 - tol && x[1] <= u1 + tol && x[2] >= l2 - tol && x[2] <= u2 + tol
    }

    pub fn validate(&self) -> Result<()> {
        let [l1, u1] = self.gripper1_limits;
        let [l2, u2] = self.gripper2_limits;
        let m = self.bound_margin;
        if !(self.mu >= 0.0)
            || !(self.dt > 0.0)
            || !(self.gravity >= 0.0)
            || !(m >= 0.0)
            || l1 + 2.0 * m > u1
            || l2 + 2.0 * m > u2
        {
            return Err(Error::Config {
                field: "finger_gaiting".into(),
                message: "need mu ≥ 0, dt > 0, gravity ≥ 0, margin ≥ 0 and limits wider than twice the margin".into(),
            });
        }
        Ok(())
    }
}
