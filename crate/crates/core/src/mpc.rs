//! Shared pieces of the hybrid MPC problem: the quadratic cost, the convex
//! per-step constraint set, and horizon condensing.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lcs::{lcs_rollout, LcsDims, LcsStages, Trajectory};

/// `Σ_k (x_k - r_k)ᵀ Q_k (x_k - r_k) + u_kᵀ R_k u_k + (x_N - r_N)ᵀ Q_N (x_N - r_N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub q_terminal: DMatrix<f64>,
    /// Optional tracking reference `x_ref,0 .. x_ref,N` (length N + 1).
    pub x_ref: Option<Vec<DVector<f64>>>,
}

impl CostSpec {
    /// Same `Q`, `R` at every step.
    pub fn uniform(q: DMatrix<f64>, r: DMatrix<f64>, q_terminal: DMatrix<f64>, horizon: usize) -> Self {
        Self {
            q: vec![q; horizon],
            r: vec![r; horizon],
            q_terminal,
            x_ref: None,
        }
    }

    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    pub fn with_reference(mut self, x_ref: DVector<f64>) -> Self {
        self.x_ref = Some(vec![x_ref; self.q.len() + 1]);
        self
    }

    pub fn reference(&self, k: usize, n_x: usize) -> DVector<f64> {
        match &self.x_ref {
            Some(r) => r[k.min(r.len() - 1)].clone(),
            None => DVector::zeros(n_x),
        }
    }

    pub fn validate(&self, dims: LcsDims) -> Result<()> {
        let n = self.q.len();
        if n == 0 {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        if self.r.len() != n {
            return Err(Error::Dimension(format!("{} Q matrices but {} R matrices", n, self.r.len())));
        }
        for (k, q) in self.q.iter().enumerate() {
            check_square(q, dims.n_x, &format!("Q[{k}]"))?;
            check_definite(q, false, &format!("Q[{k}]"))?;
        }
        for (k, r) in self.r.iter().enumerate() {
            check_square(r, dims.n_u, &format!("R[{k}]"))?;
            check_definite(r, dims.n_u > 0, &format!("R[{k}]"))?;
        }
        check_square(&self.q_terminal, dims.n_x, "Q_N")?;
        check_definite(&self.q_terminal, false, "Q_N")?;
        if let Some(r) = &self.x_ref {
            if r.len() != n + 1 || r.iter().any(|x| x.len() != dims.n_x) {
                return Err(Error::Dimension("x_ref must hold N + 1 states".into()));
            }
        }
        Ok(())
    }

    /// Cost of a trajectory with `N` inputs and `N + 1` states.
    pub fn evaluate(&self, traj: &Trajectory) -> f64 {
        let n_x = traj.states[0].len();
        let mut total = 0.0;
        for k in 0..traj.inputs.len() {
            let e = &traj.states[k] - self.reference(k, n_x);
            let q = &self.q[k.min(self.q.len() - 1)];
            let r = &self.r[k.min(self.r.len() - 1)];
            total += e.dot(&(q * &e)) + traj.inputs[k].dot(&(r * &traj.inputs[k]));
        }
        let last = traj.inputs.len();
        let e = &traj.states[last] - self.reference(last, n_x);
        total + e.dot(&(&self.q_terminal * &e))
    }
}

pub(crate) fn check_square(m: &DMatrix<f64>, n: usize, name: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Dimension(format!("{name} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols())));
    }
    Ok(())
}

pub(crate) fn check_definite(m: &DMatrix<f64>, strict: bool, name: &str) -> Result<()> {
    if m.nrows() == 0 {
        return Ok(());
    }
    let scale = 1.0f64.max(m.amax());
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::InvalidParameter(format!("{name} is not symmetric")));
    }
    let min = m.clone().symmetric_eigenvalues().min();
    if strict && min <= 0.0 {
        return Err(Error::InvalidParameter(format!("{name} is not positive definite")));
    }
    if !strict && min < -1e-9 * scale {
        return Err(Error::InvalidParameter(format!("{name} is not positive semidefinite")));
    }
    Ok(())
}

/// Convex constraints applied to every stacked `z_k = (x_k, λ_k, u_k)`.
///
/// State components of `z_0` are the measured initial condition, so bounds on
/// them and general rows touching them are not enforced at `k = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConstraints {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub rows: DMatrix<f64>,
    pub row_lower: DVector<f64>,
    pub row_upper: DVector<f64>,
}

impl StageConstraints {
    pub fn unbounded(n_z: usize) -> Self {
        Self {
            lower: DVector::from_element(n_z, f64::NEG_INFINITY),
            upper: DVector::from_element(n_z, f64::INFINITY),
            rows: DMatrix::zeros(0, n_z),
            row_lower: DVector::zeros(0),
            row_upper: DVector::zeros(0),
        }
    }

    pub fn bound(mut self, index: usize, lo: f64, hi: f64) -> Self {
        self.lower[index] = lo;
        self.upper[index] = hi;
        self
    }

    pub fn n_z(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self, n_z: usize) -> Result<()> {
        if self.lower.len() != n_z || self.upper.len() != n_z {
            return Err(Error::Dimension(format!("bounds must have length n_z = {n_z}")));
        }
        let m = self.rows.nrows();
        if self.rows.ncols() != n_z || self.row_lower.len() != m || self.row_upper.len() != m {
            return Err(Error::Dimension("general constraint rows have inconsistent shape".into()));
        }
        let bad = self
            .lower
            .iter()
            .zip(self.upper.iter())
            .chain(self.row_lower.iter().zip(self.row_upper.iter()))
            .any(|(l, u)| l > u || l.is_nan() || u.is_nan());
        if bad {
            return Err(Error::InvalidParameter("constraint lower bound exceeds upper bound".into()));
        }
        Ok(())
    }

    /// Rows `(a, lo, hi)` over `z_k` that apply at step `k`.
    pub fn rows_for_step(&self, k: usize, n_x: usize) -> Vec<(DVector<f64>, f64, f64)> {
        let n_z = self.n_z();
        let mut out = Vec::new();
        for i in 0..n_z {
            if (k == 0 && i < n_x) || (self.lower[i].is_infinite() && self.upper[i].is_infinite()) {
                continue;
            }
            let mut a = DVector::zeros(n_z);
            a[i] = 1.0;
            out.push((a, self.lower[i], self.upper[i]));
        }
        for j in 0..self.rows.nrows() {
            let row = self.rows.row(j).transpose();
            if k == 0 && row.rows(0, n_x).amax() > 0.0 {
                continue;
            }
            out.push((row, self.row_lower[j], self.row_upper[j]));
        }
        out
    }

    /// Largest violation of the constraints by `z` at step `k`.
    pub fn violation(&self, k: usize, n_x: usize, z: &DVector<f64>) -> f64 {
        self.rows_for_step(k, n_x)
            .iter()
            .map(|(a, lo, hi)| {
                let v = a.dot(z);
                (lo - v).max(v - hi).max(0.0)
            })
            .fold(0.0, f64::max)
    }
}

/// Affine parametrization of a horizon by its free variables
/// `v = (λ_0, u_0, …, λ_{N-1}, u_{N-1})`: `x_k = S_k v + s_k` for `k = 0..=N`.
#[derive(Debug, Clone)]
pub struct Condensed {
    pub dims: LcsDims,
    pub horizon: usize,
    pub state_maps: Vec<DMatrix<f64>>,
    pub state_offsets: Vec<DVector<f64>>,
}

impl Condensed {
    pub fn build<S: LcsStages + ?Sized>(lcs: &S, dims: LcsDims, horizon: usize, x0: &DVector<f64>) -> Self {
        let nv = horizon * (dims.n_lambda + dims.n_u);
        let mut maps = vec![DMatrix::zeros(dims.n_x, nv)];
        let mut offsets = vec![x0.clone()];
        for k in 0..horizon {
            let st = lcs.stage(k);
            let mut next = &st.a * &maps[k];
            let base = k * (dims.n_lambda + dims.n_u);
            next.columns_mut(base, dims.n_lambda).copy_from(&st.d);
            next.columns_mut(base + dims.n_lambda, dims.n_u).copy_from(&st.b);
            maps.push(next);
            offsets.push(&st.a * &offsets[k] + &st.drift);
        }
        Self {
            dims,
            horizon,
            state_maps: maps,
            state_offsets: offsets,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.horizon * (self.dims.n_lambda + self.dims.n_u)
    }

    pub fn lambda_index(&self, k: usize, i: usize) -> usize {
        k * (self.dims.n_lambda + self.dims.n_u) + i
    }

    pub fn input_index(&self, k: usize, i: usize) -> usize {
        k * (self.dims.n_lambda + self.dims.n_u) + self.dims.n_lambda + i
    }

    /// Linear map from `v` to `z_k = (x_k, λ_k, u_k)` and its offset.
    pub fn stage_map(&self, k: usize) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dims;
        let n_z = d.n_z();
        let mut m = DMatrix::zeros(n_z, self.n_vars());
        m.rows_mut(0, d.n_x).copy_from(&self.state_maps[k]);
        for i in 0..d.n_lambda {
            m[(d.n_x + i, self.lambda_index(k, i))] = 1.0;
        }
        for i in 0..d.n_u {
            m[(d.n_x + d.n_lambda + i, self.input_index(k, i))] = 1.0;
        }
        let mut off = DVector::zeros(n_z);
        off.rows_mut(0, d.n_x).copy_from(&self.state_offsets[k]);
        (m, off)
    }

    /// Quadratic cost in `v`: returns `(P, r, constant)` for `½ vᵀ P v + rᵀ v + constant`.
    pub fn cost(&self, cost: &CostSpec) -> (DMatrix<f64>, DVector<f64>, f64) {
        let d = self.dims;
        let nv = self.n_vars();
        let mut p = DMatrix::zeros(nv, nv);
        let mut r = DVector::zeros(nv);
        let mut constant = 0.0;
        for k in 0..=self.horizon {
            let q = if k == self.horizon { &cost.q_terminal } else { &cost.q[k] };
            let s = &self.state_maps[k];
            let e = &self.state_offsets[k] - cost.reference(k, d.n_x);
            let qs = q * s;
            p += s.transpose() * &qs * 2.0;
            r += qs.transpose() * &e * 2.0;
            constant += e.dot(&(q * &e));
            if k < self.horizon {
                let base = self.input_index(k, 0);
                let rk = &cost.r[k];
                for i in 0..d.n_u {
                    for j in 0..d.n_u {
                        p[(base + i, base + j)] += 2.0 * rk[(i, j)];
                    }
                }
            }
        }
        (p, r, constant)
    }

    /// Expands `v` into a trajectory with states from the affine maps.
    pub fn trajectory(&self, v: &DVector<f64>) -> Trajectory {
        let d = self.dims;
        let mut traj = Trajectory::default();
        for k in 0..=self.horizon {
            traj.states.push(&self.state_maps[k] * v + &self.state_offsets[k]);
        }
        for k in 0..self.horizon {
            traj.forces.push(v.rows(self.lambda_index(k, 0), d.n_lambda).into_owned());
            traj.inputs.push(v.rows(self.input_index(k, 0), d.n_u).into_owned());
        }
        traj
    }
}

/// Cost of applying `inputs` open loop from `x0` through the true LCS.
pub fn rollout_cost<S: LcsStages + ?Sized>(
    lcs: &S,
    cost: &CostSpec,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
) -> Result<(f64, Trajectory)> {
    let traj = lcs_rollout(lcs, x0, inputs)?;
    Ok((cost.evaluate(&traj), traj))
}

/// Stabilizing solution of the discrete algebraic Riccati equation
/// `P = Q + AᵀPA - AᵀPB (R + BᵀPB)⁻¹ BᵀPA`, by fixed-point iteration.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    for _ in 0..100_000 {
        let btp = b.transpose() * &p;
        let gain = (r + &btp * b)
            .cholesky()
            .ok_or_else(|| Error::Singular("R + BᵀPB".into()))?
            .solve(&(&btp * a));
        let mut next = q + a.transpose() * &p * a - a.transpose() * &p * b * gain;
        next = (&next + next.transpose()) * 0.5;
        let change = (&next - &p).amax();
        p = next;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Riccati iteration diverged".into()));
        }
        if change <= 1e-11 * (1.0 + p.amax()) {
            return Ok(p);
        }
    }
    Err(Error::InvalidParameter("Riccati iteration did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lcs::Lcs;

    fn double_integrator() -> Lcs {
        let dt = 0.1;
        Lcs::new(
            DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, dt]),
            DMatrix::from_column_slice(2, 1, &[0.0, dt]),
            DVector::from_vec(vec![0.0, -0.05]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            DVector::from_element(1, 0.2),
            dt,
        )
        .unwrap()
    }

    #[test]
    fn dare_satisfies_riccati_equation() {
        let lcs = double_integrator();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let r = DMatrix::from_element(1, 1, 0.5);
        let p = solve_dare(&lcs.a, &lcs.b, &q, &r).unwrap();
        let (a, b) = (&lcs.a, &lcs.b);
        let inner = (&r + b.transpose() * &p * b).try_inverse().unwrap();
        let rhs = &q + a.transpose() * &p * a - a.transpose() * &p * b * inner * b.transpose() * &p * a;
        assert!((&p - rhs).amax() < 1e-8);
        assert!(p.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn condensed_states_match_direct_propagation() {
        let lcs = double_integrator();
        let dims = lcs.dims();
        let x0 = DVector::from_vec(vec![0.3, -0.2]);
        let cond = Condensed::build(&lcs, dims, 4, &x0);
        let v = DVector::from_fn(cond.n_vars(), |i, _| 0.1 * i as f64 - 0.2);
        let traj = cond.trajectory(&v);
        let mut x = x0.clone();
        for k in 0..4 {
            assert!((&traj.states[k] - &x).amax() < 1e-12);
            x = lcs.next_state(&x, &traj.inputs[k], &traj.forces[k]);
        }
        assert!((&traj.states[4] - &x).amax() < 1e-12);
    }

    #[test]
    fn condensed_cost_matches_evaluation() {
        let lcs = double_integrator();
        let dims = lcs.dims();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        let cost = CostSpec::uniform(q.clone(), DMatrix::from_element(1, 1, 0.3), q * 4.0, 3)
            .with_reference(DVector::from_vec(vec![0.1, 0.0]));
        let cond = Condensed::build(&lcs, dims, 3, &DVector::from_vec(vec![-0.4, 0.1]));
        let v = DVector::from_fn(cond.n_vars(), |i, _| ((i * 7) % 5) as f64 * 0.1 - 0.2);
        let (p, r, c) = cond.cost(&cost);
        let quad = 0.5 * v.dot(&(&p * &v)) + r.dot(&v) + c;
        assert!((quad - cost.evaluate(&cond.trajectory(&v))).abs() < 1e-10);
    }

    #[test]
    fn stage_constraints_skip_measured_state() {
        let cons = StageConstraints::unbounded(4).bound(0, -1.0, 1.0).bound(3, 0.0, 2.0);
        assert_eq!(cons.rows_for_step(0, 2).len(), 1);
        assert_eq!(cons.rows_for_step(1, 2).len(), 2);
        let z = DVector::from_vec(vec![1.5, 0.0, 0.0, -0.25]);
        assert!((cons.violation(1, 2, &z) - 0.5).abs() < 1e-15);
        assert!((cons.violation(0, 2, &z) - 0.25).abs() < 1e-15);
        assert!(StageConstraints::unbounded(4).bound(1, 1.0, 0.0).validate(4).is_err());
    }

    #[test]
    fn cost_validation_rejects_indefinite_weights() {
        let dims = double_integrator().dims();
        let bad = CostSpec::uniform(
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0])),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            2,
        );
        assert!(bad.validate(dims).is_err());
        let zero_r = CostSpec::uniform(DMatrix::identity(2, 2), DMatrix::zeros(1, 1), DMatrix::identity(2, 2), 2);
        assert!(zero_r.validate(dims).is_err());
    }
}
