//! Linear complementarity systems.
//!
//! ```text
//! x_{k+1} = A x_k + B u_k + D λ_k + d
//! 0 ≤ λ_k ⊥ E x_k + F λ_k + H u_k + c ≥ 0
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcp::{lcp_solve_lemke, LcpInstance, LcpSolution, DEFAULT_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct Lcs {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Affine drift term `d`.
    pub drift: DVector<f64>,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Discretization step in seconds.
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LcsDims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_lambda: usize,
}

impl LcsDims {
    /// Length of a stacked `(x, λ, u)` vector.
    pub fn n_z(&self) -> usize {
        self.n_x + self.n_lambda + self.n_u
    }
}

impl Lcs {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        drift: DVector<f64>,
        e: DMatrix<f64>,
        f: DMatrix<f64>,
        h: DMatrix<f64>,
        c: DVector<f64>,
        dt: f64,
    ) -> Result<Self> {
        let lcs = Self {
            a,
            b,
            d,
            drift,
            e,
            f,
            h,
            c,
            dt,
        };
        lcs.validate()?;
        Ok(lcs)
    }

    pub fn validate(&self) -> Result<()> {
        let n_x = self.a.nrows();
        let n_u = self.b.ncols();
        let n_l = self.d.ncols();
        let check = |name: &str, m: &DMatrix<f64>, r: usize, c: usize| -> Result<()> {
            if m.nrows() != r || m.ncols() != c {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(())
        };
        check("A", &self.a, n_x, n_x)?;
        check("B", &self.b, n_x, n_u)?;
        check("D", &self.d, n_x, n_l)?;
        check("E", &self.e, n_l, n_x)?;
        check("F", &self.f, n_l, n_l)?;
        check("H", &self.h, n_l, n_u)?;
        if self.drift.len() != n_x {
            return Err(Error::Dimension(format!(
                "d has length {}, expected {n_x}",
                self.drift.len()
            )));
        }
        if self.c.len() != n_l {
            return Err(Error::Dimension(format!(
                "c has length {}, expected {n_l}",
                self.c.len()
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        let all_finite = [&self.a, &self.b, &self.d, &self.e, &self.f, &self.h]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
            && self.drift.iter().chain(self.c.iter()).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("LCS matrices".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> LcsDims {
        LcsDims {
            n_x: self.a.nrows(),
            n_u: self.b.ncols(),
            n_lambda: self.d.ncols(),
        }
    }

    /// The contact LCP `LCP(E x + H u + c, F)` at a given state and input.
    pub fn contact_lcp(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Option<LcpInstance>> {
        self.check_xu(x, u)?;
        if self.dims().n_lambda == 0 {
            return Ok(None);
        }
        let q = &self.e * x + &self.h * u + &self.c;
        LcpInstance::new(q, self.f.clone()).map(Some)
    }

    /// `A x + B u + D λ + d`.
    pub fn next_state(&self, x: &DVector<f64>, u: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.d * lambda + &self.drift
    }

    /// Complementarity slack `E x + F λ + H u + c`.
    pub fn slack(&self, x: &DVector<f64>, lambda: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.e * x + &self.f * lambda + &self.h * u + &self.c
    }

    fn check_xu(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        let dims = self.dims();
        if x.len() != dims.n_x || u.len() != dims.n_u {
            return Err(Error::Dimension(format!(
                "state/input lengths ({}, {}) do not match LCS ({}, {})",
                x.len(),
                u.len(),
                dims.n_x,
                dims.n_u
            )));
        }
        Ok(())
    }
}

/// Per-step access to the LCS used along a horizon. A single [`Lcs`] is
/// time-invariant; a slice of them is time-varying.
pub trait LcsStages: Sync {
    fn stage(&self, k: usize) -> &Lcs;
}

impl LcsStages for Lcs {
    fn stage(&self, _k: usize) -> &Lcs {
        self
    }
}

impl LcsStages for [Lcs] {
    fn stage(&self, k: usize) -> &Lcs {
        &self[k.min(self.len() - 1)]
    }
}

impl LcsStages for Vec<Lcs> {
    fn stage(&self, k: usize) -> &Lcs {
        self.as_slice().stage(k)
    }
}

/// Validates that every stage of a time-varying LCS shares the same dims.
pub fn validate_stages(stages: &[Lcs]) -> Result<LcsDims> {
    let first = stages
        .first()
        .ok_or_else(|| Error::Dimension("empty LCS sequence".into()))?;
    let dims = first.dims();
    for (k, s) in stages.iter().enumerate() {
        s.validate()?;
        if s.dims() != dims {
            return Err(Error::Dimension(format!("stage {k} has dims {:?}, expected {dims:?}", s.dims())));
        }
    }
    Ok(dims)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub forces: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.inputs.len() + 1 && self.forces.len() == self.inputs.len()
    }
}

/// Solves the contact LCP with Lemke's method and checks the certificate.
pub fn solve_contact_lcp(inst: &LcpInstance) -> LcpSolution {
    let m = inst.size();
    lcp_solve_lemke(inst, DEFAULT_TOL, 50 * m + 100)
}

/// One step of the LCS: `(x_{k+1}, λ_k) = L(x_k, u_k)`.
pub fn lcs_step(lcs: &Lcs, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let lambda = match lcs.contact_lcp(x, u)? {
        None => DVector::zeros(0),
        Some(inst) => {
            let sol = solve_contact_lcp(&inst);
            if !sol.is_solved() {
                return Err(Error::StepFailure {
                    x: x.iter().copied().collect(),
                    u: u.iter().copied().collect(),
                    status: sol.status,
                });
            }
            sol.lambda
        }
    };
    let next = lcs.next_state(x, u, &lambda);
    Ok((next, lambda))
}

pub fn lcs_rollout<S: LcsStages + ?Sized>(
    lcs: &S,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
) -> Result<Trajectory> {
    if inputs.is_empty() {
        return Err(Error::InvalidParameter("rollout needs at least one input".into()));
    }
    let mut traj = Trajectory {
        states: vec![x0.clone()],
        inputs: Vec::with_capacity(inputs.len()),
        forces: Vec::with_capacity(inputs.len()),
    };
    let mut x = x0.clone();
    for (k, u) in inputs.iter().enumerate() {
        let (next, lambda) = lcs_step(lcs.stage(k), &x, u).map_err(|e| Error::Rollout {
            step: k,
            source: Box::new(e),
        })?;
        traj.inputs.push(u.clone());
        traj.forces.push(lambda);
        traj.states.push(next.clone());
        x = next;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_block() -> Lcs {
        Lcs::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            DVector::from_element(1, 0.0),
            0.1,
        )
        .unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn identity_dynamics_inactive_contact() {
        let lcs = Lcs::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
            DVector::zeros(2),
            DMatrix::zeros(1, 2),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            v(&[0.5]),
            0.01,
        )
        .unwrap();
        let (next, lambda) = lcs_step(&lcs, &v(&[0.3, -0.7]), &v(&[2.0])).unwrap();
        assert_eq!(next, v(&[0.3, -0.7]));
        assert_eq!(lambda, v(&[0.0]));
        let traj = lcs_rollout(&lcs, &v(&[1.0, 2.0]), &vec![v(&[0.0]); 5]).unwrap();
        assert!(traj.is_consistent());
        assert!(traj.states.iter().all(|s| *s == v(&[1.0, 2.0])));
    }

    #[test]
    fn scalar_block_from_rest() {
        let (next, lambda) = lcs_step(&scalar_block(), &v(&[0.0]), &v(&[0.0])).unwrap();
        assert_eq!(lambda, v(&[0.0]));
        assert_eq!(next, v(&[-1.0]));
    }

    #[test]
    fn scalar_block_penetrating() {
        let (next, lambda) = lcs_step(&scalar_block(), &v(&[-2.0]), &v(&[0.0])).unwrap();
        assert!((lambda[0] - 2.0).abs() < 1e-12);
        assert!((next[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_step_rollout_matches_step() {
        let lcs = scalar_block();
        let traj = lcs_rollout(&lcs, &v(&[-2.0]), &[v(&[0.0])]).unwrap();
        let (next, lambda) = lcs_step(&lcs, &v(&[-2.0]), &v(&[0.0])).unwrap();
        assert_eq!(traj.states[1], next);
        assert_eq!(traj.forces[0], lambda);
    }

    #[test]
    fn step_failure_carries_state() {
        let mut lcs = scalar_block();
        lcs.f[(0, 0)] = -1.0;
        lcs.c[0] = -1.0;
        match lcs_step(&lcs, &v(&[0.0]), &v(&[0.0])) {
            Err(Error::StepFailure { x, .. }) => assert_eq!(x, vec![0.0]),
            other => panic!("unexpected {other:?}"),
        }
        match lcs_rollout(&lcs, &v(&[0.0]), &[v(&[0.0])]) {
            Err(Error::Rollout { step: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_checks() {
        let mut lcs = scalar_block();
        lcs.e = DMatrix::zeros(2, 1);
        assert!(lcs.validate().is_err());
        let lcs = scalar_block();
        assert!(lcs_step(&lcs, &v(&[0.0, 1.0]), &v(&[0.0])).is_err());
        let mut bad = scalar_block();
        bad.dt = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn time_varying_rollout_uses_each_stage() {
        let mut s1 = scalar_block();
        s1.drift[0] = -0.5;
        let stages = vec![scalar_block(), s1];
        assert!(validate_stages(&stages).is_ok());
        let traj = lcs_rollout(&stages, &v(&[0.0]), &[v(&[0.0]), v(&[0.0])]).unwrap();
        // Step 0 drifts to -1; step 1 pushes back to 0 then drifts by -0.5.
        assert!((traj.states[2][0] + 0.5).abs() < 1e-12);
    }
}
