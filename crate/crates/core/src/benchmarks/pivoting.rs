//! Pivoting a square box about its bottom-left corner with two fingers.
//!
//! `q = (x, y, α, f₁, f₂)`: box center, angle, and the finger positions along
//! the left (`x_b = -w`) and right (`x_b = +w`) faces in the box frame.
//! Inputs `(a₁, a₂, n₁, n₂)` are the tangential drive forces on the fingers and
//! the normal forces they press onto the box. The ground touches the corner
//! `(-w, -h)`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::c3::{C3Params, Projection};
use crate::contact::{ContactDims, MultiContactModel};
use crate::error::{Error, Result};
use crate::lcs::LcsDims;
use crate::mpc::CostSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PivotingBox {
    /// Half-width and half-height.
    pub half_width: f64,
    pub half_height: f64,
    pub mass: f64,
    pub finger_mass: f64,
    pub mu_fingers: f64,
    pub mu_ground: f64,
    pub gravity: f64,
    pub dt: f64,
}

impl Default for PivotingBox {
    fn default() -> Self {
        Self {
            half_width: 1.0,
            half_height: 1.0,
            mass: 1.0,
            finger_mass: 0.1,
            mu_fingers: 0.1,
            mu_ground: 1.0,
            gravity: 9.81,
            dt: 0.1,
        }
    }
}

fn rot(a: f64) -> Matrix2<f64> {
    let (s, c) = a.sin_cos();
    Matrix2::new(c, -s, s, c)
}

fn rot_da(a: f64) -> Matrix2<f64> {
    let (s, c) = a.sin_cos();
    Matrix2::new(-s, -c, c, -s)
}

impl PivotingBox {
    pub fn inertia(&self) -> f64 {
        let (w, h) = (2.0 * self.half_width, 2.0 * self.half_height);
        self.mass * (w * w + h * h) / 12.0
    }

    fn finger_side(i: usize) -> f64 {
        if i == 0 {
            -1.0
        } else {
            1.0
        }
    }

    /// Jacobian `∂p_f/∂q` of finger `i`'s world position.
    fn finger_jacobian(&self, q: &DVector<f64>, i: usize) -> DMatrix<f64> {
        let a = q[2];
        let s = Vector2::new(Self::finger_side(i) * self.half_width, q[3 + i]);
        let mut j = DMatrix::zeros(2, 5);
        j[(0, 0)] = 1.0;
        j[(1, 1)] = 1.0;
        let da = rot_da(a) * s;
        j[(0, 2)] = da[0];
        j[(1, 2)] = da[1];
        let df = rot(a) * Vector2::new(0.0, 1.0);
        j[(0, 3 + i)] = df[0];
        j[(1, 3 + i)] = df[1];
        j
    }

    pub fn lcs_dims(&self) -> LcsDims {
        LcsDims {
            n_x: 10,
            n_u: 4,
            n_lambda: 10,
        }
    }

    /// Start pose: fingers low on the faces, box tilted slightly above ground.
    pub fn initial_state(&self) -> DVector<f64> {
        DVector::from_vec(vec![0.0, 1.36, 0.2, -0.3, -0.7, 0.0, 0.0, 0.0, 0.0, 0.0])
    }

    /// Box balanced on its corner with the fingers near the top.
    pub fn target_state(&self) -> DVector<f64> {
        let y = (self.half_width * self.half_width + self.half_height * self.half_height).sqrt();
        let alpha = (self.half_width / self.half_height).atan();
        DVector::from_vec(vec![0.0, y, alpha, 0.9, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0])
    }

    pub fn cost(&self, horizon: usize) -> CostSpec {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![
            10.0, 10.0, 100.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0,
        ]));
        let r = DMatrix::identity(4, 4) * 0.01;
        CostSpec::uniform(q.clone(), r, q, horizon).with_reference(self.target_state())
    }

    /// Controller settings: MIQP projection, `N = 10`, `s = 5`, `ρ = 10`,
    /// `ρ_s = 1.1`.
    pub fn controller_params(&self) -> C3Params {
        let mut params = C3Params::new(self.cost(10), self.lcs_dims(), Projection::Miqp);
        params.s = 5;
        params.rho = 10.0;
        params.rho_s = 1.1;
        params
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.half_width,
            self.half_height,
            self.mass,
            self.finger_mass,
            self.dt,
        ];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || !(self.mu_fingers >= 0.0)
            || !(self.mu_ground >= 0.0)
            || !(self.gravity >= 0.0)
        {
            return Err(Error::Config {
                field: "pivoting".into(),
                message: "dimensions, masses and dt must be positive; friction and gravity non-negative".into(),
            });
        }
        Ok(())
    }
}

impl MultiContactModel for PivotingBox {
    fn dims(&self) -> ContactDims {
        ContactDims { n_q: 5, n_u: 4, n_c: 3 }
    }

    fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(5, 5);
        m[(0, 0)] = self.mass;
        m[(1, 1)] = self.mass;
        m[(2, 2)] = self.inertia();
        for i in 0..2 {
            let j = self.finger_jacobian(q, i);
            m += j.transpose() * j * self.finger_mass;
        }
        m
    }

    fn bias(&self, q: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(5);
        c[1] = self.mass * self.gravity;
        let a = q[2];
        let ad = v[2];
        for i in 0..2 {
            let s = Vector2::new(Self::finger_side(i) * self.half_width, q[3 + i]);
            let fd = v[3 + i];
            // J̇ q̇ for p = (x, y) + R(α) s(f)
            let jdot_v = -(rot(a) * s) * ad * ad + rot_da(a) * Vector2::new(0.0, 1.0) * (2.0 * ad * fd);
            let j = self.finger_jacobian(q, i);
            let jd = DVector::from_vec(vec![jdot_v[0], jdot_v[1]]);
            c += j.transpose() * jd * self.finger_mass;
        }
        c
    }

    fn input_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let a = q[2];
        let tangent = rot(a) * Vector2::new(0.0, 1.0);
        let normal = rot(a) * Vector2::new(1.0, 0.0);
        let mut b = DMatrix::zeros(5, 4);
        for i in 0..2 {
            let j = self.finger_jacobian(q, i);
            let t = DVector::from_vec(vec![tangent[0], tangent[1]]);
            // Each finger pushes into the box: +x_b on the left face, -x_b on the right.
            let n = DVector::from_vec(vec![normal[0], normal[1]]) * -Self::finger_side(i);
            b.set_column(i, &(j.transpose() * t));
            b.set_column(2 + i, &(j.transpose() * n));
        }
        b
    }

    fn normal_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let (s, c) = q[2].sin_cos();
        let mut j = DMatrix::zeros(3, 5);
        j[(2, 1)] = 1.0;
        j[(2, 2)] = self.half_height * s - self.half_width * c;
        j
    }

    fn tangent_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let (s, c) = q[2].sin_cos();
        let mut j = DMatrix::zeros(6, 5);
        for i in 0..2 {
            j[(2 * i, 3 + i)] = 1.0;
            j[(2 * i + 1, 3 + i)] = -1.0;
        }
        let corner_x = self.half_width * s + self.half_height * c;
        j[(4, 0)] = 1.0;
        j[(4, 2)] = corner_x;
        j[(5, 0)] = -1.0;
        j[(5, 2)] = -corner_x;
        j
    }

    fn signed_distance(&self, q: &DVector<f64>) -> DVector<f64> {
        let (s, c) = q[2].sin_cos();
        DVector::from_vec(vec![0.0, 0.0, q[1] - self.half_width * s - self.half_height * c])
    }

    fn friction(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.mu_fingers, self.mu_fingers, self.mu_ground])
    }

    fn commanded_normal(&self, contact: usize) -> Option<usize> {
        (contact < 2).then_some(2 + contact)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{linearize_stewart_trinkle, stewart_trinkle_step, ContactLayout};
    use crate::lcs::lcs_step;
    use std::f64::consts::FRAC_PI_4;

    fn resting(alpha: f64, m: &PivotingBox) -> DVector<f64> {
        let (s, c) = alpha.sin_cos();
        let y = m.half_width * s + m.half_height * c;
        DVector::from_vec(vec![0.0, y, alpha, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    }

    #[test]
    fn dimensions_and_layout() {
        let m = PivotingBox::default();
        let layout = ContactLayout::of(&m).unwrap();
        assert_eq!(layout.n_lambda(), 10);
        let lcs = linearize_stewart_trinkle(&m, &m.initial_state(), &DVector::zeros(4), m.dt).unwrap();
        assert_eq!(lcs.dims(), m.lcs_dims());
        m.controller_params().validate(m.lcs_dims()).unwrap();
    }

    #[test]
    fn balanced_on_corner_carries_full_weight() {
        let m = PivotingBox::default();
        let x = resting(FRAC_PI_4, &m);
        let (next, lambda) = stewart_trinkle_step(&m, &x, &DVector::zeros(4), m.dt).unwrap();
        let n = ContactLayout::of(&m).unwrap().normal_offset();
        assert!((lambda[n] - m.mass * m.gravity).abs() < 1e-6);
        assert!((next - x).amax() < 1e-9);
    }

    #[test]
    fn flat_box_corner_force_matches_effective_mass() {
        // Only the (-w, -h) corner touches; at α = 0 its force also tips the
        // box, so the impulse follows the contact's effective mass, not m g.
        let m = PivotingBox::default();
        let x = resting(0.0, &m);
        let q = x.rows(0, 5).into_owned();
        let minv = m.mass_matrix(&q).try_inverse().unwrap();
        let jn = DVector::from_vec(vec![0.0, 1.0, -m.half_width, 0.0, 0.0]);
        let jt = DVector::from_vec(vec![1.0, 0.0, m.half_height, 0.0, 0.0]);
        let gravity = DVector::from_vec(vec![0.0, -m.mass * m.gravity, 0.0, 0.0, 0.0]);
        // sticking contact: both corner velocity components vanish after the step
        let j = DMatrix::from_columns(&[jn.clone(), jt.clone()]);
        let w = j.transpose() * &minv * &j;
        let f = w.try_inverse().unwrap() * (-(j.transpose() * &minv * &gravity));
        assert!(f[1].abs() <= m.mu_ground * f[0]);
        let (_, lambda) = stewart_trinkle_step(&m, &x, &DVector::zeros(4), m.dt).unwrap();
        let layout = ContactLayout::of(&m).unwrap();
        let n = layout.normal_offset();
        let t = layout.tangent_index(2, 0);
        assert!((lambda[n] - f[0]).abs() < 1e-6);
        assert!((lambda[t] - lambda[t + 1] - f[1]).abs() < 1e-6);
        assert!(lambda[n] < m.mass * m.gravity);
    }

    #[test]
    fn balanced_box_stays_at_rest() {
        let m = PivotingBox {
            dt: 0.01,
            ..PivotingBox::default()
        };
        let start = resting(FRAC_PI_4, &m);
        let mut x = start.clone();
        for _ in 0..100 {
            x = stewart_trinkle_step(&m, &x, &DVector::zeros(4), m.dt).unwrap().0;
        }
        assert!((x - start).amax() < 1e-8);
    }

    #[test]
    fn linearization_reproduces_nonlinear_step() {
        let m = PivotingBox::default();
        let x = m.initial_state();
        let u = DVector::from_vec(vec![0.5, -0.3, 2.0, 1.0]);
        let lcs = linearize_stewart_trinkle(&m, &x, &u, m.dt).unwrap();
        let (a, la) = lcs_step(&lcs, &x, &u).unwrap();
        let (b, lb) = stewart_trinkle_step(&m, &x, &u, m.dt).unwrap();
        assert!((a - b).amax() < 1e-6);
        assert!((la - lb).amax() < 1e-5);
    }

    #[test]
    fn target_is_balanced_midpoint() {
        let m = PivotingBox::default();
        let t = m.target_state();
        assert!((t[2] - FRAC_PI_4).abs() < 1e-15);
        assert!((t[1] - 2f64.sqrt()).abs() < 1e-15);
        assert!(PivotingBox { mass: -1.0, ..m }.validate().is_err());
    }
}
