//! Cart-pole between two soft walls, linearized about the upright.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::DisturbanceSpec;
use crate::c3::{C3Params, Projection};
use crate::error::{Error, Result};
use crate::lcs::Lcs;
use crate::mpc::{solve_dare, CostSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartpoleParams {
    pub m_cart: f64,
    pub m_pole: f64,
    pub l_pole: f64,
    /// Distance from the pivot to the pole's center of mass.
    pub l_com: f64,
    pub k_right: f64,
    pub k_left: f64,
    pub wall_distance: f64,
    pub dt: f64,
    pub gravity: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            m_cart: 0.978,
            m_pole: 0.411,
            l_pole: 0.6,
            l_com: 0.4267,
            k_right: 50.0,
            k_left: 50.0,
            wall_distance: 0.35,
            dt: 0.01,
            gravity: 9.81,
        }
    }
}

impl CartpoleParams {
    /// Hardware configuration: stiffer walls placed further out.
    pub fn hardware() -> Self {
        Self {
            k_right: 100.0,
            k_left: 100.0,
            wall_distance: 0.39,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("m_cart", self.m_cart),
            ("m_pole", self.m_pole),
            ("l_pole", self.l_pole),
            ("l_com", self.l_com),
            ("k_right", self.k_right),
            ("k_left", self.k_left),
            ("wall_distance", self.wall_distance),
            ("dt", self.dt),
            ("gravity", self.gravity),
        ];
        for (name, v) in all {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    field: name.into(),
                    message: format!("must be positive, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// State `(x, θ, ẋ, θ̇)`, input the cart force, `λ = (right wall, left wall)`.
///
/// The pole tip sits at `x - l_p θ`; each wall is a linear spring, so the
/// contact rows are `±(x - l_p θ) + d + λ_i / k_i ≥ 0 ⊥ λ_i ≥ 0`.
pub fn build_cartpole_lcs(p: &CartpoleParams) -> Result<Lcs> {
    p.validate()?;
    let (mc, mp, lp, lc, g, ts) = (p.m_cart, p.m_pole, p.l_pole, p.l_com, p.gravity, p.dt);
    let mut ac = DMatrix::zeros(4, 4);
    ac[(0, 2)] = 1.0;
    ac[(1, 3)] = 1.0;
    ac[(2, 1)] = g * mp / mc;
    ac[(3, 1)] = g * (mc + mp) / (lc * mc);
    let bc = DVector::from_vec(vec![0.0, 0.0, 1.0 / mc, 1.0 / (lc * mc)]);
    let right = DVector::from_vec(vec![
        0.0,
        0.0,
        -1.0 / mc + lp / (mc * lc),
        -1.0 / (mc * lc) + lp * (mc + mp) / (mc * mp * lc * lc),
    ]);
    let mut dc = DMatrix::zeros(4, 2);
    dc.set_column(0, &right);
    dc.set_column(1, &(-&right));

    let a = DMatrix::identity(4, 4) + ac * ts;
    let b = DMatrix::from_column_slice(4, 1, (bc * ts).as_slice());
    let d = dc * ts;
    let e = DMatrix::from_row_slice(2, 4, &[-1.0, lp, 0.0, 0.0, 1.0, -lp, 0.0, 0.0]);
    let f = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / p.k_right, 1.0 / p.k_left]));
    let c = DVector::from_element(2, p.wall_distance);
    Lcs::new(a, b, d, DVector::zeros(4), e, f, DMatrix::zeros(2, 1), c, ts)
}

/// Regulation cost with `Q = diag(0.3, 0.09, 0.03, 0.03)`, `R = 0.01` and the
/// LQR cost-to-go of the contact-free linearization as terminal weight.
///
/// The overall scale is small on purpose: with `ρ = 0.1`, `ρ_s = 2` and ten
/// iterations the consensus penalty only dominates a cost of this size.
pub fn cartpole_cost(lcs: &Lcs, horizon: usize) -> Result<CostSpec> {
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.09, 0.03, 0.03]));
    let r = DMatrix::from_element(1, 1, 0.01);
    let qn = solve_dare(&lcs.a, &lcs.b, &q, &r)?;
    Ok(CostSpec::uniform(q, r, qn, horizon))
}

/// Cart push of magnitude `U[10, 15]` for the first 250 ms.
pub fn cartpole_disturbance() -> DisturbanceSpec {
    DisturbanceSpec {
        input: 0,
        low: 10.0,
        high: 15.0,
        start: 0.0,
        duration: 0.25,
    }
}

/// `U = 100 diag(1, …, 1, 10⁻⁴, …, 10⁻⁴, 1)` with the small weight on the
/// wall forces.
pub fn cartpole_projection_metric(lcs: &Lcs) -> DMatrix<f64> {
    C3Params::lambda_weighted_metric(lcs.dims(), 1e-4) * 100.0
}

/// `N = 10`, `s = 10`, `ρ = 0.1`, `ρ_s = 2`, `G_k = I`.
pub fn cartpole_controller_params(lcs: &Lcs, projection: Projection) -> Result<C3Params> {
    let mut params = C3Params::new(cartpole_cost(lcs, 10)?, lcs.dims(), projection);
    params.s = 10;
    params.rho = 0.1;
    params.rho_s = 2.0;
    params.u = cartpole_projection_metric(lcs);
    Ok(params)
}
