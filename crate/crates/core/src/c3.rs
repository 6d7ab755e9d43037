//! Consensus complementarity control.
//!
//! Each iteration solves a convex QP over dynamics-feasible trajectories
//! (the quadratic step), projects every `z_k + w_k` onto the complementarity
//! set of step `k`, updates the scaled duals and grows the penalty.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcp::{lcp_solve_lemke, LcpInstance, DEFAULT_TOL};
use crate::lcs::{Lcs, LcsDims, LcsStages, Trajectory};
use crate::miqp::{solve_bcqp_bnb, Bcqp, BnbSettings};
use crate::mpc::{check_definite, check_square, CostSpec, StageConstraints};
use crate::qp::{solve_equality_qp, DualActiveSet, QpProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Miqp,
    Lcp,
    Admm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmProjectionSettings {
    pub inner_iters: usize,
    pub inner_rho: f64,
    pub bisection_tol: f64,
}

impl Default for AdmmProjectionSettings {
    fn default() -> Self {
        Self {
            inner_iters: 40,
            inner_rho: 1.0,
            bisection_tol: 1e-8,
        }
    }
}

/// How the quadratic step is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuadraticSolver {
    /// Riccati recursion without convex constraints, dual active set with them.
    #[default]
    Auto,
    /// Dense KKT factorization; only valid without convex constraints.
    DenseKkt,
}

#[derive(Debug, Clone)]
pub struct C3Params {
    pub cost: CostSpec,
    /// Consensus weights `G_k`, one per step.
    pub g: Vec<DMatrix<f64>>,
    /// Projection metric.
    pub u: DMatrix<f64>,
    pub s: usize,
    pub rho: f64,
    pub rho_s: f64,
    pub projection: Projection,
    pub big_m: f64,
    pub constraints: Option<StageConstraints>,
    pub delta0: Option<Vec<DVector<f64>>>,
    pub w0: Option<Vec<DVector<f64>>>,
    pub admm: AdmmProjectionSettings,
    pub bnb: BnbSettings,
    pub quadratic: QuadraticSolver,
    /// Run the per-step projections on the rayon pool.
    pub parallel: bool,
}

impl C3Params {
    /// Defaults with `G_k = I`, `U = I`, zero initial copies and duals.
    pub fn new(cost: CostSpec, dims: LcsDims, projection: Projection) -> Self {
        let n = cost.horizon();
        let nz = dims.n_z();
        Self {
            cost,
            g: vec![DMatrix::identity(nz, nz); n],
            u: DMatrix::identity(nz, nz),
            s: 10,
            rho: 0.1,
            rho_s: 2.0,
            projection,
            big_m: 1000.0,
            constraints: None,
            delta0: None,
            w0: None,
            admm: AdmmProjectionSettings::default(),
            bnb: BnbSettings::default(),
            quadratic: QuadraticSolver::Auto,
            parallel: false,
        }
    }

    pub fn horizon(&self) -> usize {
        self.cost.horizon()
    }

    /// `U = diag(1 … 1, w … w, 1 … 1)` with weight `w` on the λ block.
    pub fn lambda_weighted_metric(dims: LcsDims, weight: f64) -> DMatrix<f64> {
        let mut u = DMatrix::identity(dims.n_z(), dims.n_z());
        for i in 0..dims.n_lambda {
            u[(dims.n_x + i, dims.n_x + i)] = weight;
        }
        u
    }

    pub fn validate(&self, dims: LcsDims) -> Result<()> {
        self.cost.validate(dims)?;
        let n = self.horizon();
        let nz = dims.n_z();
        if self.g.len() != n {
            return Err(Error::Dimension(format!("{} G matrices for horizon {n}", self.g.len())));
        }
        for (k, g) in self.g.iter().enumerate() {
            check_square(g, nz, &format!("G[{k}]"))?;
            check_definite(g, true, &format!("G[{k}]"))?;
        }
        check_square(&self.u, nz, "U")?;
        check_definite(&self.u, false, "U")?;
        if self.s == 0 {
            return Err(Error::InvalidParameter("s must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.rho_s >= 1.0 && self.rho_s.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho_s must be at least 1, got {}", self.rho_s)));
        }
        if !(self.big_m > 0.0 && self.big_m.is_finite()) {
            return Err(Error::InvalidParameter(format!("big_m must be positive, got {}", self.big_m)));
        }
        if self.admm.inner_iters == 0 {
            return Err(Error::InvalidParameter("ADMM projection needs at least one inner iteration".into()));
        }
        if !(self.admm.inner_rho > 0.0) || !(self.admm.bisection_tol > 0.0) {
            return Err(Error::InvalidParameter("ADMM projection penalty and tolerance must be positive".into()));
        }
        if let Some(c) = &self.constraints {
            c.validate(nz)?;
            if self.quadratic == QuadraticSolver::DenseKkt {
                return Err(Error::InvalidParameter("the dense KKT quadratic step cannot handle convex constraints".into()));
            }
        }
        for (name, seq) in [("delta0", &self.delta0), ("w0", &self.w0)] {
            if let Some(seq) = seq {
                if seq.len() != n || seq.iter().any(|v| v.len() != nz) {
                    return Err(Error::Dimension(format!("{name} must hold {n} vectors of length {nz}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationDiagnostics {
    /// `max_k ‖z_k - δ_k‖∞` after the projection.
    pub primal_residual: f64,
    /// Complementarity violation of the quadratic-step iterate `z`.
    pub complementarity: f64,
    /// Worst complementarity residual of ADMM projection outputs, if used.
    pub projection_residual: Option<f64>,
    pub quadratic_us: f64,
    pub projection_us: f64,
    pub dual_us: f64,
}

#[derive(Debug, Clone)]
pub struct C3Result {
    pub u0: DVector<f64>,
    /// Plan read off the final `z`; the last state is propagated through the
    /// affine dynamics with the final `λ` and `u`.
    pub plan: Trajectory,
    pub z: Vec<DVector<f64>>,
    pub delta: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub rho_final: f64,
    pub diagnostics: Vec<IterationDiagnostics>,
}

impl C3Result {
    /// `(δ, w)` shifted one step forward, repeating the last entry, for a
    /// solve starting at penalty `rho_next`. `w` is rescaled so the unscaled
    /// multipliers `ρ w` carry over.
    pub fn shifted_warm_start(&self, rho_next: f64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let shift = |v: &[DVector<f64>]| {
            let mut out: Vec<DVector<f64>> = v[1..].to_vec();
            out.push(v[v.len() - 1].clone());
            out
        };
        let scale = self.rho_final / rho_next;
        let w = shift(&self.w).into_iter().map(|wk| wk * scale).collect();
        (shift(&self.delta), w)
    }
}

/// Largest of `max_i |λ_i y_i|`, `max_i(-λ_i)` and `max_i(-y_i)` for one
/// stacked `z_k = (x, λ, u)`.
pub fn complementarity_violation(lcs: &Lcs, z: &DVector<f64>) -> f64 {
    let d = lcs.dims();
    if d.n_lambda == 0 {
        return 0.0;
    }
    let (x, lam, u) = split_z(z, d);
    let y = lcs.slack(&x, &lam, &u);
    let mut out = 0.0f64;
    for i in 0..d.n_lambda {
        out = out.max((lam[i] * y[i]).abs()).max(-lam[i]).max(-y[i]);
    }
    out
}

fn split_z(z: &DVector<f64>, d: LcsDims) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    (
        z.rows(0, d.n_x).into_owned(),
        z.rows(d.n_x, d.n_lambda).into_owned(),
        z.rows(d.n_x + d.n_lambda, d.n_u).into_owned(),
    )
}

/// Stage `k` cost in `½ zᵀ P z + rᵀ z` form, including the consensus penalty
/// and, at the last step, the terminal term on `A x + B u + D λ + d`.
fn stage_blocks<S: LcsStages + ?Sized>(
    lcs: &S,
    cost: &CostSpec,
    k: usize,
    g: &DMatrix<f64>,
    target: &DVector<f64>,
    rho: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let st = lcs.stage(k);
    let d = st.dims();
    let n = cost.horizon();
    let nz = d.n_z();
    let mut p = g * (2.0 * rho);
    let mut r = -(g * target) * (2.0 * rho);
    let q = &cost.q[k];
    let xr = cost.reference(k, d.n_x);
    let mut pxx = p.view_mut((0, 0), (d.n_x, d.n_x));
    pxx += q * 2.0;
    let mut rx = r.rows_mut(0, d.n_x);
    rx -= q * &xr * 2.0;
    let ui = d.n_x + d.n_lambda;
    let mut puu = p.view_mut((ui, ui), (d.n_u, d.n_u));
    puu += &cost.r[k] * 2.0;
    if k + 1 == n {
        let t = transition(st);
        let qn = &cost.q_terminal;
        let off = &st.drift - cost.reference(n, d.n_x);
        p += t.transpose() * qn * &t * 2.0;
        r += t.transpose() * (qn * off) * 2.0;
    }
    debug_assert_eq!(p.nrows(), nz);
    (p, r)
}

/// `[A D B]`, mapping `z_k` to `x_{k+1} - d`.
fn transition(st: &Lcs) -> DMatrix<f64> {
    let d = st.dims();
    let mut t = DMatrix::zeros(d.n_x, d.n_z());
    t.columns_mut(0, d.n_x).copy_from(&st.a);
    t.columns_mut(d.n_x, d.n_lambda).copy_from(&st.d);
    t.columns_mut(d.n_x + d.n_lambda, d.n_u).copy_from(&st.b);
    t
}

/// The quadratic step as one dense QP over `(z_0, …, z_{N-1})`.
pub fn quadratic_step_problem<S: LcsStages + ?Sized>(
    lcs: &S,
    params: &C3Params,
    x0: &DVector<f64>,
    delta: &[DVector<f64>],
    w: &[DVector<f64>],
    rho: f64,
) -> QpProblem {
    let d = lcs.stage(0).dims();
    let n = params.horizon();
    let nz = d.n_z();
    let nv = n * nz;
    let mut p = DMatrix::zeros(nv, nv);
    let mut r = DVector::zeros(nv);
    for k in 0..n {
        let (pk, rk) = stage_blocks(lcs, &params.cost, k, &params.g[k], &(&delta[k] - &w[k]), rho);
        p.view_mut((k * nz, k * nz), (nz, nz)).copy_from(&pk);
        r.rows_mut(k * nz, nz).copy_from(&rk);
    }
    let m_eq = d.n_x * n;
    let mut a_eq = DMatrix::zeros(m_eq, nv);
    let mut b_eq = DVector::zeros(m_eq);
    for i in 0..d.n_x {
        a_eq[(i, i)] = 1.0;
    }
    b_eq.rows_mut(0, d.n_x).copy_from(x0);
    for k in 0..n.saturating_sub(1) {
        let st = lcs.stage(k);
        let row = (k + 1) * d.n_x;
        a_eq.view_mut((row, k * nz), (d.n_x, nz)).copy_from(&(-transition(st)));
        for i in 0..d.n_x {
            a_eq[(row + i, (k + 1) * nz + i)] = 1.0;
        }
        b_eq.rows_mut(row, d.n_x).copy_from(&st.drift);
    }
    let mut qp = QpProblem::new(p, r).with_equalities(a_eq, b_eq);
    if let Some(c) = &params.constraints {
        let rows: Vec<_> = (0..n)
            .flat_map(|k| c.rows_for_step(k, d.n_x).into_iter().map(move |row| (k, row)))
            .collect();
        let mut a_in = DMatrix::zeros(rows.len(), nv);
        let mut lb = DVector::zeros(rows.len());
        let mut ub = DVector::zeros(rows.len());
        for (i, (k, (a, lo, hi))) in rows.into_iter().enumerate() {
            a_in.view_mut((i, k * nz), (1, nz)).copy_from(&a.transpose());
            lb[i] = lo;
            ub[i] = hi;
        }
        qp = qp.with_inequalities(a_in, lb, ub);
    }
    qp
}

/// Minimizes the cost plus the consensus penalty over dynamics-feasible
/// trajectories (and the convex set, if any).
pub fn quadratic_step<S: LcsStages + ?Sized>(
    lcs: &S,
    params: &C3Params,
    x0: &DVector<f64>,
    delta: &[DVector<f64>],
    w: &[DVector<f64>],
    rho: f64,
) -> Result<Vec<DVector<f64>>> {
    let d = lcs.stage(0).dims();
    let n = params.horizon();
    if delta.len() != n || w.len() != n {
        return Err(Error::Dimension("δ and w must have one entry per step".into()));
    }
    if !(rho >= 0.0) {
        return Err(Error::InvalidParameter(format!("rho must be non-negative, got {rho}")));
    }
    let constrained = params.constraints.as_ref().map_or(false, |c| {
        (0..n).any(|k| !c.rows_for_step(k, d.n_x).is_empty())
    });
    let split = |z: &DVector<f64>| (0..n).map(|k| z.rows(k * d.n_z(), d.n_z()).into_owned()).collect();
    if constrained {
        let qp = quadratic_step_problem(lcs, params, x0, delta, w, rho);
        let sol = DualActiveSet::new(&qp.p)?.solve(&qp)?;
        return Ok(split(&sol.z));
    }
    if params.quadratic == QuadraticSolver::Auto {
        if let Some(z) = riccati_step(lcs, params, x0, delta, w, rho) {
            return Ok(z);
        }
    }
    let qp = quadratic_step_problem(lcs, params, x0, delta, w, rho);
    let sol = solve_equality_qp(&qp, 1e-6)?;
    Ok(split(&sol.z))
}

/// Backward Riccati recursion over stages `z_k = (x_k, v_k)`, `v_k = (λ_k, u_k)`.
/// Returns `None` if some stage Hessian in `v` is not positive definite.
fn riccati_step<S: LcsStages + ?Sized>(
    lcs: &S,
    params: &C3Params,
    x0: &DVector<f64>,
    delta: &[DVector<f64>],
    w: &[DVector<f64>],
    rho: f64,
) -> Option<Vec<DVector<f64>>> {
    let d = lcs.stage(0).dims();
    let n = params.horizon();
    let nx = d.n_x;
    let nv = d.n_lambda + d.n_u;
    let mut gains: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(n);
    let mut s_next: Option<(DMatrix<f64>, DVector<f64>)> = None;
    for k in (0..n).rev() {
        let (mut h, mut hz) = stage_blocks(lcs, &params.cost, k, &params.g[k], &(&delta[k] - &w[k]), rho);
        if let Some((s_mat, s_vec)) = &s_next {
            let st = lcs.stage(k);
            let t = transition(st);
            let st_s = t.transpose() * s_mat;
            h += &st_s * &t;
            hz += t.transpose() * (s_mat * &st.drift + s_vec);
        }
        let hxx = h.view((0, 0), (nx, nx));
        let hxv = h.view((0, nx), (nx, nv));
        let hvv = h.view((nx, nx), (nv, nv)).into_owned();
        let chol = hvv.cholesky()?;
        let gain = -chol.solve(&hxv.transpose());
        let ff = -chol.solve(&hz.rows(nx, nv).into_owned());
        let mut s_mat = hxx + hxv * &gain;
        s_mat = (&s_mat + s_mat.transpose()) * 0.5;
        let s_vec = hz.rows(0, nx) + hxv * &ff;
        gains.push((gain, ff));
        s_next = Some((s_mat, s_vec));
    }
    gains.reverse();
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(n);
    for (k, (gain, ff)) in gains.iter().enumerate() {
        let v = gain * &x + ff;
        let mut z = DVector::zeros(nx + nv);
        z.rows_mut(0, nx).copy_from(&x);
        z.rows_mut(nx, nv).copy_from(&v);
        if k + 1 < n {
            let st = lcs.stage(k);
            x = transition(st) * &z + &st.drift;
        }
        out.push(z);
    }
    Some(out)
}

/// Exact projection onto the complementarity set of `lcs` in the `U` metric,
/// by branch-and-bound over the big-M formulation.
pub fn project_miqp(
    target: &DVector<f64>,
    lcs: &Lcs,
    u: &DMatrix<f64>,
    big_m: f64,
    settings: &BnbSettings,
) -> Result<DVector<f64>> {
    let d = lcs.dims();
    check_target(target, d)?;
    if d.n_lambda == 0 {
        return Ok(target.clone());
    }
    let p = (u + u.transpose()) * 1.0;
    let r = -(&p * target);
    let mut y_rows = DMatrix::zeros(d.n_lambda, d.n_z());
    y_rows.columns_mut(0, d.n_x).copy_from(&lcs.e);
    y_rows.columns_mut(d.n_x, d.n_lambda).copy_from(&lcs.f);
    y_rows.columns_mut(d.n_x + d.n_lambda, d.n_u).copy_from(&lcs.h);
    let problem = Bcqp {
        qp: QpProblem::new(p, r),
        constant: target.dot(&(u * target)),
        y_rows,
        y_offset: lcs.c.clone(),
        pairs: (0..d.n_lambda).map(|i| (d.n_x + i, i)).collect(),
        big_m,
    };
    Ok(solve_bcqp_bnb(&problem, settings)?.z)
}

/// Copies `x` and `u` from the target and solves the contact LCP for `λ`.
pub fn project_lcp(target: &DVector<f64>, lcs: &Lcs) -> Result<DVector<f64>> {
    let d = lcs.dims();
    check_target(target, d)?;
    let mut out = target.clone();
    if d.n_lambda == 0 {
        return Ok(out);
    }
    let (x, _, u) = split_z(target, d);
    let inst = LcpInstance::new(&lcs.e * &x + &lcs.h * &u + &lcs.c, lcs.f.clone())?;
    let sol = lcp_solve_lemke(&inst, DEFAULT_TOL, 50 * d.n_lambda + 100);
    if !sol.is_solved() {
        return Err(Error::Lcp { status: sol.status });
    }
    out.rows_mut(d.n_x, d.n_lambda).copy_from(&sol.lambda);
    Ok(out)
}

fn check_target(target: &DVector<f64>, d: LcsDims) -> Result<()> {
    if target.len() != d.n_z() {
        return Err(Error::Dimension(format!("target has length {}, expected {}", target.len(), d.n_z())));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdmmProjection {
    pub delta: DVector<f64>,
    /// Complementarity violation of `delta`.
    pub residual: f64,
    /// Inner iterations where the multiplier could not be bracketed.
    pub bracket_failures: usize,
}

/// Data for the inner ADMM projection that does not depend on the target.
#[derive(Debug, Clone)]
pub struct AdmmProjector {
    dims: LcsDims,
    settings: AdmmProjectionSettings,
    u: DMatrix<f64>,
    box_solver: DualActiveSet,
    /// Rows `λ ≥ 0` and `E x + F λ + H u + c ≥ 0` over `z`.
    rows: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    /// `zᵀ S z + bᵀ z = λᵀ(E x + F λ + H u + c)`, with `S = V diag(Λ) Vᵀ`.
    eig_vectors: DMatrix<f64>,
    eig_values: DVector<f64>,
    b: DVector<f64>,
}

impl AdmmProjector {
    pub fn new(lcs: &Lcs, u: &DMatrix<f64>, settings: AdmmProjectionSettings) -> Result<Self> {
        let d = lcs.dims();
        if settings.inner_iters == 0 {
            return Err(Error::InvalidParameter("ADMM projection needs at least one inner iteration".into()));
        }
        let nz = d.n_z();
        let (nx, nl) = (d.n_x, d.n_lambda);
        let mut p = (u + u.transpose()) * 1.0;
        for i in 0..nz {
            p[(i, i)] += 2.0 * settings.inner_rho;
        }
        let box_solver = DualActiveSet::new(&p)?;
        let mut rows = DMatrix::zeros(2 * nl, nz);
        let mut lower = DVector::zeros(2 * nl);
        for i in 0..nl {
            rows[(i, nx + i)] = 1.0;
        }
        rows.view_mut((nl, 0), (nl, nx)).copy_from(&lcs.e);
        rows.view_mut((nl, nx), (nl, nl)).copy_from(&lcs.f);
        rows.view_mut((nl, nx + nl), (nl, d.n_u)).copy_from(&lcs.h);
        lower.rows_mut(nl, nl).copy_from(&(-&lcs.c));
        let upper = DVector::from_element(2 * nl, f64::INFINITY);

        // λᵀ(E x + F λ + H u) = zᵀ N z with N holding [E F H] in the λ rows.
        let mut n_mat = DMatrix::zeros(nz, nz);
        n_mat.rows_mut(nx, nl).copy_from(&rows.rows(nl, nl));
        let s = (&n_mat + n_mat.transpose()) * 0.5;
        let eig = SymmetricEigen::new(s);
        let mut b = DVector::zeros(nz);
        b.rows_mut(nx, nl).copy_from(&lcs.c);
        Ok(Self {
            dims: d,
            settings,
            u: u.clone(),
            box_solver,
            rows,
            lower,
            upper,
            eig_vectors: eig.eigenvectors,
            eig_values: eig.eigenvalues,
            b,
        })
    }

    fn quadric(&self, z: &DVector<f64>) -> f64 {
        let zt = self.eig_vectors.transpose() * z;
        zt.iter().zip(self.eig_values.iter()).map(|(a, l)| l * a * a).sum::<f64>() + self.b.dot(z)
    }

    /// Euclidean projection onto `{z : zᵀ S z + bᵀ z = 0}` by bisection on the
    /// multiplier of `‖z - p‖² + ν (zᵀ S z + bᵀ z)`.
    fn project_quadric(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let pt = self.eig_vectors.transpose() * p;
        let bt = self.eig_vectors.transpose() * &self.b;
        let lam = &self.eig_values;
        let point = |nu: f64| DVector::from_fn(pt.len(), |i, _| (pt[i] - 0.5 * nu * bt[i]) / (1.0 + nu * lam[i]));
        let value = |zt: &DVector<f64>| {
            zt.iter()
                .zip(lam.iter())
                .zip(bt.iter())
                .map(|((z, l), b)| l * z * z + b * z)
                .sum::<f64>()
        };
        let g0 = value(&pt);
        if g0.abs() <= self.settings.bisection_tol {
            return Some(p.clone());
        }
        let lmax = lam.max();
        let lmin = lam.min();
        let hi_limit = if lmin < 0.0 { -1.0 / lmin } else { f64::INFINITY };
        let lo_limit = if lmax > 0.0 { -1.0 / lmax } else { f64::NEG_INFINITY };
        // The constraint value decreases in ν; look on the side that fixes g0's sign.
        let (mut lo, mut hi) = if g0 > 0.0 {
            let mut hi = 0.0f64;
            let mut step = 1.0f64;
            loop {
                let cand = if hi_limit.is_finite() { hi + (hi_limit - hi) * 0.5 } else { hi + step };
                step *= 2.0;
                if value(&point(cand)) < 0.0 {
                    break (hi, cand);
                }
                hi = cand;
                if step > 1e12 || (hi_limit - hi).abs() < 1e-14 * (1.0 + hi_limit.abs()) {
                    return None;
                }
            }
        } else {
            let mut lo = 0.0f64;
            let mut step = 1.0f64;
            loop {
                let cand = if lo_limit.is_finite() { lo + (lo_limit - lo) * 0.5 } else { lo - step };
                step *= 2.0;
                if value(&point(cand)) > 0.0 {
                    break (cand, lo);
                }
                lo = cand;
                if step > 1e12 || (lo - lo_limit).abs() < 1e-14 * (1.0 + lo_limit.abs()) {
                    return None;
                }
            }
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let g = value(&point(mid));
            if g.abs() <= self.settings.bisection_tol || (hi - lo) <= 1e-15 * (1.0 + mid.abs()) {
                lo = mid;
                hi = mid;
                break;
            }
            if g > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(&self.eig_vectors * point(0.5 * (lo + hi)))
    }

    /// Inner consensus ADMM between the polyhedron `K` and the quadric.
    pub fn project(&self, target: &DVector<f64>, lcs: &Lcs) -> Result<AdmmProjection> {
        check_target(target, self.dims)?;
        let nz = self.dims.n_z();
        let rho = self.settings.inner_rho;
        let ut = (&self.u + self.u.transpose()) * target;
        let mut omega = target.clone();
        let mut mu = DVector::zeros(nz);
        let mut delta = target.clone();
        let mut failures = 0;
        let template = QpProblem::new(DMatrix::zeros(0, 0), DVector::zeros(nz)).with_inequalities(
            self.rows.clone(),
            self.lower.clone(),
            self.upper.clone(),
        );
        for _ in 0..self.settings.inner_iters {
            let mut qp = template.clone();
            qp.r = -(&ut + (&omega - &mu) * (2.0 * rho));
            delta = self.box_solver.solve(&qp)?.z;
            let p = &delta + &mu;
            match self.project_quadric(&p) {
                Some(o) => omega = o,
                None => {
                    failures += 1;
                    omega = p.clone();
                }
            }
            mu += &delta - &omega;
        }
        debug_assert!(self.quadric(&omega).is_finite());
        Ok(AdmmProjection {
            residual: complementarity_violation(lcs, &delta),
            delta,
            bracket_failures: failures,
        })
    }
}

/// Approximate projection by inner ADMM; carries its own residual.
pub fn project_admm(
    target: &DVector<f64>,
    lcs: &Lcs,
    u: &DMatrix<f64>,
    settings: &AdmmProjectionSettings,
) -> Result<AdmmProjection> {
    if lcs.dims().n_lambda == 0 {
        check_target(target, lcs.dims())?;
        return Ok(AdmmProjection {
            delta: target.clone(),
            residual: 0.0,
            bracket_failures: 0,
        });
    }
    AdmmProjector::new(lcs, u, *settings)?.project(target, lcs)
}

enum Projector {
    Lcp,
    Miqp,
    Admm(Vec<Option<AdmmProjector>>),
}

/// Runs the C3 iterations from `x0` and returns `u_0` of the final `z`.
pub fn c3_solve<S: LcsStages + ?Sized>(lcs: &S, params: &C3Params, x0: &DVector<f64>) -> Result<C3Result> {
    let d = lcs.stage(0).dims();
    let n = params.horizon();
    for k in 0..n {
        if lcs.stage(k).dims() != d {
            return Err(Error::Dimension(format!("stage {k} dims differ from stage 0")));
        }
    }
    params.validate(d)?;
    if x0.len() != d.n_x {
        return Err(Error::Dimension(format!("x0 has length {}, expected {}", x0.len(), d.n_x)));
    }
    let nz = d.n_z();
    let mut delta = params.delta0.clone().unwrap_or_else(|| vec![DVector::zeros(nz); n]);
    let mut w = params.w0.clone().unwrap_or_else(|| vec![DVector::zeros(nz); n]);
    let mut rho = params.rho;

    let projector = match params.projection {
        Projection::Lcp => Projector::Lcp,
        Projection::Miqp => Projector::Miqp,
        Projection::Admm => {
            let mut per_step = Vec::with_capacity(n);
            for k in 0..n {
                per_step.push(if d.n_lambda == 0 {
                    None
                } else {
                    Some(AdmmProjector::new(lcs.stage(k), &params.u, params.admm)?)
                });
            }
            Projector::Admm(per_step)
        }
    };

    let project = |k: usize, target: &DVector<f64>| -> Result<(DVector<f64>, Option<f64>)> {
        let st = lcs.stage(k);
        match &projector {
            Projector::Lcp => project_lcp(target, st).map(|v| (v, None)),
            Projector::Miqp => project_miqp(target, st, &params.u, params.big_m, &params.bnb).map(|v| (v, None)),
            Projector::Admm(per_step) => match &per_step[k] {
                None => Ok((target.clone(), Some(0.0))),
                Some(p) => p.project(target, st).map(|a| (a.delta, Some(a.residual))),
            },
        }
    };

    let mut z = Vec::new();
    let mut diagnostics = Vec::with_capacity(params.s);
    for iteration in 1..=params.s {
        let wrap = |step: Option<usize>| {
            move |e: Error| Error::Solver {
                iteration,
                step,
                source: Box::new(e),
            }
        };
        let t0 = Instant::now();
        z = quadratic_step(lcs, params, x0, &delta, &w, rho).map_err(wrap(None))?;
        let t1 = Instant::now();
        let targets: Vec<DVector<f64>> = z.iter().zip(w.iter()).map(|(zk, wk)| zk + wk).collect();
        let projected: Vec<Result<(DVector<f64>, Option<f64>)>> = if params.parallel {
            targets.par_iter().enumerate().map(|(k, t)| project(k, t)).collect()
        } else {
            targets.iter().enumerate().map(|(k, t)| project(k, t)).collect()
        };
        let mut projection_residual: Option<f64> = None;
        for (k, res) in projected.into_iter().enumerate() {
            let (dk, r) = res.map_err(wrap(Some(k)))?;
            delta[k] = dk;
            if let Some(r) = r {
                projection_residual = Some(projection_residual.unwrap_or(0.0).max(r));
            }
        }
        let t2 = Instant::now();
        let mut primal = 0.0f64;
        for k in 0..n {
            let diff = &z[k] - &delta[k];
            primal = primal.max(diff.amax());
            w[k] += diff;
        }
        rho *= params.rho_s;
        for wk in w.iter_mut() {
            *wk /= params.rho_s;
        }
        let t3 = Instant::now();
        let complementarity = (0..n)
            .map(|k| complementarity_violation(lcs.stage(k), &z[k]))
            .fold(0.0, f64::max);
        diagnostics.push(IterationDiagnostics {
            primal_residual: primal,
            complementarity,
            projection_residual,
            quadratic_us: (t1 - t0).as_secs_f64() * 1e6,
            projection_us: (t2 - t1).as_secs_f64() * 1e6,
            dual_us: (t3 - t2).as_secs_f64() * 1e6,
        });
    }

    let plan = plan_from_z(lcs, &z, d);
    Ok(C3Result {
        u0: plan.inputs[0].clone(),
        plan,
        z,
        delta,
        w,
        rho_final: rho,
        diagnostics,
    })
}

fn plan_from_z<S: LcsStages + ?Sized>(lcs: &S, z: &[DVector<f64>], d: LcsDims) -> Trajectory {
    let mut traj = Trajectory::default();
    for zk in z {
        let (x, lam, u) = split_z(zk, d);
        traj.states.push(x);
        traj.forces.push(lam);
        traj.inputs.push(u);
    }
    let last = z.len() - 1;
    let st = lcs.stage(last);
    let next = transition(st) * &z[last] + &st.drift;
    traj.states.push(next);
    traj
}
