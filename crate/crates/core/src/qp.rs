//! Dense convex quadratic programs.
//!
//! ```text
//! minimize    ½ zᵀ P z + rᵀ z
//! subject to  A_eq z = b_eq
//!             lb ≤ A_in z ≤ ub
//! ```
//!
//! Multipliers follow the convention `P z + r + A_eqᵀ ν + A_inᵀ y = 0`, with
//! `y_i > 0` when the upper bound of row `i` is active and `y_i < 0` when the
//! lower bound is.
//!
//! Three solvers live here:
//! * [`solve_equality_qp`] factors the KKT system directly;
//! * [`solve_convex_qp`] is an operator-splitting (ADMM) method for PSD `P`
//!   with a final active-set polish;
//! * [`DualActiveSet`] is the Goldfarb–Idnani dual method for strictly convex
//!   `P`. It is exact up to rounding and is what branch-and-bound nodes and the
//!   constrained quadratic step use.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub r: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub nu: DVector<f64>,
    pub y: DVector<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    /// Sign violation of inequality multipliers relative to the bound they sit on.
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

impl QpProblem {
    /// Unconstrained problem of size `n`.
    pub fn new(p: DMatrix<f64>, r: DVector<f64>) -> Self {
        let n = r.len();
        Self {
            p,
            r,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            lb: DVector::zeros(0),
            ub: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }

    pub fn with_inequalities(mut self, a_in: DMatrix<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        self.a_in = a_in;
        self.lb = lb;
        self.ub = ub;
        self
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.r.dot(z)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(Error::Dimension(format!("P is {}x{}, expected {n}x{n}", self.p.nrows(), self.p.ncols())));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(Error::Dimension("equality block has inconsistent shape".into()));
        }
        let m = self.a_in.nrows();
        if self.a_in.ncols() != n || self.lb.len() != m || self.ub.len() != m {
            return Err(Error::Dimension("inequality block has inconsistent shape".into()));
        }
        if self.lb.iter().zip(self.ub.iter()).any(|(l, u)| l > u) {
            return Err(Error::InvalidParameter("lb > ub in some row".into()));
        }
        let scale = 1.0f64.max(self.p.amax());
        if (&self.p - self.p.transpose()).amax() > 1e-9 * scale {
            return Err(Error::InvalidParameter("P is not symmetric".into()));
        }
        if n > 0 {
            let sym = (&self.p + self.p.transpose()) * 0.5;
            let min_eig = sym.symmetric_eigenvalues().min();
            if min_eig < -1e-9 * scale {
                return Err(Error::InvalidParameter(format!("P is not PSD (min eigenvalue {min_eig:.3e})")));
            }
        }
        Ok(())
    }

    pub fn kkt_residuals(&self, sol: &QpSolution) -> KktResiduals {
        let z = &sol.z;
        let mut grad = &self.p * z + &self.r;
        if self.a_eq.nrows() > 0 {
            grad += self.a_eq.transpose() * &sol.nu;
        }
        if self.a_in.nrows() > 0 {
            grad += self.a_in.transpose() * &sol.y;
        }
        let mut primal = 0.0f64;
        if self.a_eq.nrows() > 0 {
            primal = primal.max((&self.a_eq * z - &self.b_eq).amax());
        }
        let mut dual = 0.0f64;
        let mut comp = 0.0f64;
        if self.a_in.nrows() > 0 {
            let az = &self.a_in * z;
            for i in 0..az.len() {
                primal = primal.max(self.lb[i] - az[i]).max(az[i] - self.ub[i]);
                let y = sol.y[i];
                if y > 0.0 {
                    if self.ub[i].is_infinite() {
                        dual = dual.max(y);
                    } else {
                        comp = comp.max(y * (self.ub[i] - az[i]).abs());
                    }
                } else if y < 0.0 {
                    if self.lb[i].is_infinite() {
                        dual = dual.max(-y);
                    } else {
                        comp = comp.max(-y * (az[i] - self.lb[i]).abs());
                    }
                }
            }
        }
        KktResiduals {
            stationarity: grad.amax(),
            primal,
            dual,
            complementarity: comp,
        }
    }
}

/// Solves an equality-constrained QP through its KKT system.
pub fn solve_equality_qp(p: &QpProblem, tol: f64) -> Result<QpSolution> {
    if p.a_in.nrows() > 0 {
        return Err(Error::InvalidParameter("solve_equality_qp given inequality rows".into()));
    }
    let n = p.n();
    let m = p.a_eq.nrows();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.p);
    kkt.view_mut((n, 0), (m, n)).copy_from(&p.a_eq);
    kkt.view_mut((0, n), (n, m)).copy_from(&p.a_eq.transpose());
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-&p.r));
    rhs.rows_mut(n, m).copy_from(&p.b_eq);
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("KKT matrix".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("KKT matrix".into()));
    }
    let out = QpSolution {
        z: sol.rows(0, n).into_owned(),
        nu: sol.rows(n, m).into_owned(),
        y: DVector::zeros(0),
        iterations: 1,
    };
    let res = p.kkt_residuals(&out);
    let scale = 1.0 + p.r.amax() + p.b_eq.amax();
    if res.max() > tol * scale {
        return Err(Error::Singular(format!("KKT residual {:.3e} exceeds tolerance", res.max())));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplittingSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub polish: bool,
}

impl Default for SplittingSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            max_iters: 4000,
            tol: 1e-6,
            polish: true,
        }
    }
}

/// Operator-splitting solver for convex QPs with a PSD cost.
///
/// Equality rows are folded in as `b_eq ≤ A_eq z ≤ b_eq`. The penalty is fixed
/// so the iteration sequence is a deterministic function of the input.
pub fn solve_convex_qp(p: &QpProblem, settings: &SplittingSettings) -> Result<QpSolution> {
    let n = p.n();
    let m_eq = p.a_eq.nrows();
    let m_in = p.a_in.nrows();
    let m = m_eq + m_in;
    let mut a = DMatrix::zeros(m, n);
    a.view_mut((0, 0), (m_eq, n)).copy_from(&p.a_eq);
    a.view_mut((m_eq, 0), (m_in, n)).copy_from(&p.a_in);
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    l.rows_mut(0, m_eq).copy_from(&p.b_eq);
    u.rows_mut(0, m_eq).copy_from(&p.b_eq);
    l.rows_mut(m_eq, m_in).copy_from(&p.lb);
    u.rows_mut(m_eq, m_in).copy_from(&p.ub);

    let rho: DVector<f64> = DVector::from_fn(m, |i, _| {
        if l[i] == u[i] {
            1e3 * settings.rho
        } else if l[i].is_infinite() && u[i].is_infinite() {
            1e-6
        } else {
            settings.rho
        }
    });

    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.p);
    for i in 0..n {
        kkt[(i, i)] += settings.sigma;
    }
    kkt.view_mut((n, 0), (m, n)).copy_from(&a);
    kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    for i in 0..m {
        kkt[(n + i, n + i)] = -1.0 / rho[i];
    }
    let lu = kkt.lu();

    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(m);
    let mut y = DVector::zeros(m);
    let mut rhs = DVector::zeros(n + m);
    let alpha = settings.alpha;
    let eps = settings.tol;
    let mut last_prim = f64::INFINITY;
    let mut last_dual = f64::INFINITY;

    for iter in 1..=settings.max_iters {
        for i in 0..n {
            rhs[i] = settings.sigma * x[i] - p.r[i];
        }
        for i in 0..m {
            rhs[n + i] = z[i] - y[i] / rho[i];
        }
        let sol = lu.solve(&rhs).ok_or_else(|| Error::Singular("splitting KKT".into()))?;
        let x_tilde = sol.rows(0, n);
        let nu = sol.rows(n, m);
        let z_tilde = DVector::from_fn(m, |i, _| z[i] + (nu[i] - y[i]) / rho[i]);
        let x_new = x_tilde * alpha + &x * (1.0 - alpha);
        let z_relax = &z_tilde * alpha + &z * (1.0 - alpha);
        let z_new: DVector<f64> = DVector::from_fn(m, |i, _| {
            let v: f64 = z_relax[i] + y[i] / rho[i];
            v.clamp(l[i], u[i])
        });
        let y_prev = y.clone();
        for i in 0..m {
            y[i] += rho[i] * (z_relax[i] - z_new[i]);
        }
        x = x_new;
        z = z_new;

        let ax = &a * &x;
        let px = &p.p * &x;
        let aty = a.transpose() * &y;
        let prim = (&ax - &z).amax();
        let dual = (&px + &p.r + &aty).amax();
        last_prim = prim;
        last_dual = dual;
        let prim_tol = eps + eps * ax.amax().max(z.amax());
        let dual_tol = eps + eps * px.amax().max(aty.amax()).max(p.r.amax());
        if prim <= prim_tol && dual <= dual_tol {
            let mut out = split_solution(&x, &y, m_eq, iter);
            if settings.polish {
                if let Some(polished) = polish(p, &out) {
                    if p.kkt_residuals(&polished).max() <= p.kkt_residuals(&out).max() {
                        out = polished;
                    }
                }
            }
            return Ok(out);
        }

        // Primal infeasibility certificate.
        let dy = &y - &y_prev;
        let dy_norm = dy.amax();
        if dy_norm > 1e-12 {
            let eps_inf = 1e-7 * dy_norm;
            let at_dy = a.transpose() * &dy;
            let mut support = 0.0;
            let mut finite = true;
            for i in 0..m {
                if dy[i] > 0.0 {
                    if u[i].is_infinite() {
                        finite = false;
                        break;
                    }
                    support += u[i] * dy[i];
                } else if dy[i] < 0.0 {
                    if l[i].is_infinite() {
                        finite = false;
                        break;
                    }
                    support += l[i] * dy[i];
                }
            }
            if finite && at_dy.amax() <= eps_inf && support < -eps_inf {
                return Err(Error::Infeasible);
            }
        }
    }

    let out = split_solution(&x, &y, m_eq, settings.max_iters);
    if settings.polish {
        if let Some(polished) = polish(p, &out) {
            if p.kkt_residuals(&polished).max() <= settings.tol {
                return Ok(polished);
            }
        }
    }
    Err(Error::MaxIters {
        iterations: settings.max_iters,
        best: x.iter().copied().collect(),
        primal_residual: last_prim,
        dual_residual: last_dual,
    })
}

fn split_solution(x: &DVector<f64>, y: &DVector<f64>, m_eq: usize, iterations: usize) -> QpSolution {
    let m_in = y.len() - m_eq;
    QpSolution {
        z: x.clone(),
        nu: y.rows(0, m_eq).into_owned(),
        y: y.rows(m_eq, m_in).into_owned(),
        iterations,
    }
}

/// Guesses the active set from the multiplier signs and re-solves the
/// resulting equality-constrained KKT system.
fn polish(p: &QpProblem, approx: &QpSolution) -> Option<QpSolution> {
    let n = p.n();
    let m_eq = p.a_eq.nrows();
    let mut rows: Vec<(DVector<f64>, f64, Option<(usize, bool)>)> = Vec::new();
    for i in 0..m_eq {
        rows.push((p.a_eq.row(i).transpose(), p.b_eq[i], None));
    }
    let az = &p.a_in * &approx.z;
    for i in 0..p.a_in.nrows() {
        let y = approx.y[i];
        let tol = 1e-7 * (1.0 + y.abs());
        if p.lb[i] == p.ub[i] {
            rows.push((p.a_in.row(i).transpose(), p.lb[i], Some((i, true))));
        } else if y < -tol || (y <= 0.0 && (az[i] - p.lb[i]).abs() < 1e-9 && p.lb[i].is_finite()) {
            rows.push((p.a_in.row(i).transpose(), p.lb[i], Some((i, false))));
        } else if y > tol || (y >= 0.0 && (p.ub[i] - az[i]).abs() < 1e-9 && p.ub[i].is_finite()) {
            rows.push((p.a_in.row(i).transpose(), p.ub[i], Some((i, true))));
        }
    }
    let k = rows.len();
    let delta = 1e-11;
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.p);
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&p.r));
    for (j, (row, b, _)) in rows.iter().enumerate() {
        for c in 0..n {
            kkt[(n + j, c)] = row[c];
            kkt[(c, n + j)] = row[c];
        }
        kkt[(n + j, n + j)] = -delta;
        rhs[n + j] = *b;
    }
    let mut exact = kkt.clone();
    for i in 0..n {
        exact[(i, i)] -= delta;
    }
    for j in 0..k {
        exact[(n + j, n + j)] = 0.0;
    }
    let lu = kkt.lu();
    let mut sol = lu.solve(&rhs)?;
    // Iterative refinement against the unregularized system.
    for _ in 0..3 {
        let resid = &rhs - &exact * &sol;
        sol += lu.solve(&resid)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut out = QpSolution {
        z: sol.rows(0, n).into_owned(),
        nu: DVector::zeros(m_eq),
        y: DVector::zeros(p.a_in.nrows()),
        iterations: approx.iterations,
    };
    for (j, (_, _, tag)) in rows.iter().enumerate() {
        let mult = sol[n + j];
        match tag {
            None => out.nu[j] = mult,
            Some((i, _)) => out.y[*i] = mult,
        }
    }
    Some(out)
}

/// One linear constraint `nᵀz ≥ b` (or `= b`) in the dual active-set solver.
#[derive(Debug, Clone)]
struct Constraint {
    normal: DVector<f64>,
    bound: f64,
    equality: bool,
    /// Row in the originating problem and whether it encodes an upper bound.
    origin: Origin,
}

#[derive(Debug, Clone, Copy)]
enum Origin {
    Eq(usize),
    Lower(usize),
    Upper(usize),
}

/// Goldfarb–Idnani dual active-set solver for strictly convex QPs.
///
/// The Cholesky factor of `P` is computed once so the same instance can be
/// reused for many problems sharing the quadratic term (branch-and-bound
/// nodes, inner ADMM iterations).
#[derive(Debug, Clone)]
pub struct DualActiveSet {
    /// `L⁻ᵀ` where `P = L Lᵀ`.
    j0: DMatrix<f64>,
    n: usize,
}

impl DualActiveSet {
    pub fn new(p: &DMatrix<f64>) -> Result<Self> {
        let n = p.nrows();
        let chol = p
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("QP cost is not positive definite".into()))?;
        let l = chol.l();
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Singular("Cholesky factor".into()))?;
        Ok(Self {
            j0: l_inv.transpose(),
            n,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Solves the problem with this instance's `P` and the given linear term
    /// and constraints.
    pub fn solve(&self, p: &QpProblem) -> Result<QpSolution> {
        let n = self.n;
        if p.n() != n {
            return Err(Error::Dimension(format!("QP has {} variables, solver was built for {n}", p.n())));
        }
        let mut cons = Vec::with_capacity(p.a_eq.nrows() + 2 * p.a_in.nrows());
        for i in 0..p.a_eq.nrows() {
            cons.push(Constraint {
                normal: p.a_eq.row(i).transpose(),
                bound: p.b_eq[i],
                equality: true,
                origin: Origin::Eq(i),
            });
        }
        for i in 0..p.a_in.nrows() {
            let row = p.a_in.row(i).transpose();
            if p.lb[i] == p.ub[i] {
                cons.push(Constraint {
                    normal: row,
                    bound: p.lb[i],
                    equality: true,
                    origin: Origin::Lower(i),
                });
                continue;
            }
            if p.lb[i].is_finite() {
                cons.push(Constraint {
                    normal: row.clone(),
                    bound: p.lb[i],
                    equality: false,
                    origin: Origin::Lower(i),
                });
            }
            if p.ub[i].is_finite() {
                cons.push(Constraint {
                    normal: -row,
                    bound: -p.ub[i],
                    equality: false,
                    origin: Origin::Upper(i),
                });
            }
        }
        let (z, active, mult, iterations) = self.run(&p.r, &cons)?;
        let mut out = QpSolution {
            z,
            nu: DVector::zeros(p.a_eq.nrows()),
            y: DVector::zeros(p.a_in.nrows()),
            iterations,
        };
        for (&c, &u) in active.iter().zip(mult.iter()) {
            // Stationarity here reads P z + r = Σ u_i n_i.
            match cons[c].origin {
                Origin::Eq(i) => out.nu[i] = -u,
                Origin::Lower(i) => out.y[i] -= u,
                Origin::Upper(i) => out.y[i] += u,
            }
        }
        Ok(out)
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, r: &DVector<f64>, cons: &[Constraint]) -> Result<(DVector<f64>, Vec<usize>, Vec<f64>, usize)> {
        let n = self.n;
        let mut j = self.j0.clone();
        let mut rmat = DMatrix::<f64>::zeros(n, n);
        // Unconstrained minimizer  x = -P⁻¹ r = -J Jᵀ r.
        let mut x = -(&j * (j.transpose() * r));
        let mut active: Vec<usize> = Vec::new();
        let mut mult: Vec<f64> = Vec::new();
        // Equalities may enter with flipped orientation.
        let mut flipped = vec![false; cons.len()];
        let mut is_active = vec![false; cons.len()];
        let max_steps = 10 * (cons.len() + n) + 100;
        let mut steps = 0;

        loop {
            // Pick the next constraint to add.
            let mut chosen: Option<usize> = None;
            for (i, c) in cons.iter().enumerate() {
                if c.equality && !is_active[i] {
                    chosen = Some(i);
                    break;
                }
            }
            if chosen.is_none() {
                let mut worst = 0.0;
                for (i, c) in cons.iter().enumerate() {
                    if is_active[i] {
                        continue;
                    }
                    let s = c.normal.dot(&x) - c.bound;
                    let tol = 1e-9 * (1.0 + c.bound.abs() + c.normal.amax() * x.amax());
                    if s < -tol && s < worst {
                        worst = s;
                        chosen = Some(i);
                    }
                }
            }
            let Some(p_idx) = chosen else {
                return Ok((x, active, mult, steps));
            };
            let c = &cons[p_idx];
            let s0 = c.normal.dot(&x) - c.bound;
            let sign = if c.equality && s0 > 0.0 { -1.0 } else { 1.0 };
            flipped[p_idx] = sign < 0.0;
            let np = &c.normal * sign;
            let bp = c.bound * sign;
            let mut u_plus = 0.0;

            loop {
                steps += 1;
                if steps > max_steps {
                    return Err(Error::MaxIters {
                        iterations: steps,
                        best: x.iter().copied().collect(),
                        primal_residual: f64::NAN,
                        dual_residual: f64::NAN,
                    });
                }
                let q = active.len();
                let d = j.transpose() * &np;
                let d2_norm2: f64 = d.rows(q, n - q).norm_squared();
                let dependent = d2_norm2 <= 1e-20 * d.norm_squared().max(1e-300);
                let z = if dependent {
                    DVector::zeros(n)
                } else {
                    j.columns(q, n - q) * d.rows(q, n - q)
                };
                let rvec = if q > 0 {
                    rmat.view((0, 0), (q, q))
                        .into_owned()
                        .solve_upper_triangular(&d.rows(0, q).into_owned())
                        .ok_or_else(|| Error::Singular("active-set factor".into()))?
                } else {
                    DVector::zeros(0)
                };

                let mut t1 = f64::INFINITY;
                let mut drop_k: Option<usize> = None;
                for (k, &ci) in active.iter().enumerate() {
                    if !cons[ci].equality && rvec[k] > 0.0 {
                        let ratio = mult[k] / rvec[k];
                        if ratio < t1 {
                            t1 = ratio;
                            drop_k = Some(k);
                        }
                    }
                }
                let t2 = if dependent {
                    f64::INFINITY
                } else {
                    let s = np.dot(&x) - bp;
                    (-s / d2_norm2).max(0.0)
                };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(Error::Infeasible);
                }
                if t2.is_infinite() {
                    for k in 0..q {
                        mult[k] -= t * rvec[k];
                    }
                    u_plus += t;
                    let k = drop_k.expect("finite t1 implies a drop candidate");
                    self.drop(&mut j, &mut rmat, &mut active, &mut mult, &mut is_active, k);
                    continue;
                }
                x += &z * t;
                for k in 0..q {
                    mult[k] -= t * rvec[k];
                }
                u_plus += t;
                if t2 <= t1 {
                    let mut d = d;
                    self.add(&mut j, &mut rmat, &mut d, q);
                    active.push(p_idx);
                    mult.push(u_plus);
                    is_active[p_idx] = true;
                    break;
                }
                let k = drop_k.expect("partial step implies a drop candidate");
                self.drop(&mut j, &mut rmat, &mut active, &mut mult, &mut is_active, k);
            }

            // Keep equality multipliers oriented against the original normal.
            if flipped[p_idx] {
                let last = mult.len() - 1;
                mult[last] = -mult[last];
                let col = active.len() - 1;
                for row in 0..=col {
                    rmat[(row, col)] = -rmat[(row, col)];
                }
                flipped[p_idx] = false;
            }
        }
    }

    fn add(&self, j: &mut DMatrix<f64>, rmat: &mut DMatrix<f64>, d: &mut DVector<f64>, q: usize) {
        let n = self.n;
        let mut i = n - 1;
        while i > q {
            let (a, b) = (d[i - 1], d[i]);
            if b != 0.0 {
                let h = a.hypot(b);
                let (c, s) = (a / h, b / h);
                d[i - 1] = h;
                d[i] = 0.0;
                rotate_columns(j, i - 1, i, c, s);
            }
            i -= 1;
        }
        for row in 0..=q {
            rmat[(row, q)] = d[row];
        }
    }

    fn drop(
        &self,
        j: &mut DMatrix<f64>,
        rmat: &mut DMatrix<f64>,
        active: &mut Vec<usize>,
        mult: &mut Vec<f64>,
        is_active: &mut [bool],
        k: usize,
    ) {
        let q = active.len();
        for col in k..q - 1 {
            for row in 0..q {
                rmat[(row, col)] = rmat[(row, col + 1)];
            }
        }
        for row in 0..q {
            rmat[(row, q - 1)] = 0.0;
        }
        for col in k..q - 1 {
            let (a, b) = (rmat[(col, col)], rmat[(col + 1, col)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for cc in col..q - 1 {
                let (ra, rb) = (rmat[(col, cc)], rmat[(col + 1, cc)]);
                rmat[(col, cc)] = c * ra + s * rb;
                rmat[(col + 1, cc)] = -s * ra + c * rb;
            }
            rotate_columns(j, col, col + 1, c, s);
        }
        is_active[active[k]] = false;
        active.remove(k);
        mult.remove(k);
    }
}

fn rotate_columns(j: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for row in 0..j.nrows() {
        let (ja, jb) = (j[(row, a)], j[(row, b)]);
        j[(row, a)] = c * ja + s * jb;
        j[(row, b)] = -s * ja + c * jb;
    }
}

/// Solves a strictly convex QP with the dual active-set method.
pub fn solve_strictly_convex_qp(p: &QpProblem) -> Result<QpSolution> {
    DualActiveSet::new(&p.p)?.solve(p)
}

/// Proximal-point wrapper for QPs whose cost is only PSD: a short sequence of
/// strictly convex subproblems `min f(z) + ε/2 ‖z - z_j‖²` sharing one factor.
#[derive(Debug, Clone)]
pub struct ProximalQp {
    solver: DualActiveSet,
    eps: f64,
}

impl ProximalQp {
    pub fn new(p: &DMatrix<f64>) -> Result<Self> {
        let eps = 1e-7 * 1.0f64.max(p.diagonal().amax());
        let mut reg = p.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += eps;
        }
        Ok(Self {
            solver: DualActiveSet::new(&reg)?,
            eps,
        })
    }

    pub fn solve(&self, p: &QpProblem, max_outer: usize) -> Result<QpSolution> {
        let mut center = DVector::zeros(p.n());
        let mut sub = p.clone();
        let mut last: Option<QpSolution> = None;
        let mut total = 0;
        for _ in 0..max_outer.max(1) {
            sub.r = &p.r - &center * self.eps;
            let sol = self.solver.solve(&sub)?;
            total += sol.iterations;
            let step = (&sol.z - &center).amax();
            center = sol.z.clone();
            let done = step <= 1e-10 * (1.0 + sol.z.amax());
            last = Some(sol);
            if done {
                break;
            }
        }
        let mut sol = last.expect("at least one proximal step");
        sol.iterations = total;
        Ok(sol)
    }
}

/// Solves a QP whose cost is only PSD with [`ProximalQp`].
pub fn solve_psd_qp_prox(p: &QpProblem, max_outer: usize) -> Result<QpSolution> {
    ProximalQp::new(&p.p)?.solve(p, max_outer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dm(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn unconstrained_norm() {
        let p = QpProblem::new(DMatrix::identity(3, 3) * 2.0, DVector::zeros(3));
        let s = solve_equality_qp(&p, 1e-10).unwrap();
        assert_eq!(s.z, DVector::zeros(3));
    }

    #[test]
    fn equality_multiplier_sign() {
        let p = QpProblem::new(dm(1, 1, &[2.0]), dv(&[-2.0])).with_equalities(dm(1, 1, &[1.0]), dv(&[3.0]));
        let s = solve_equality_qp(&p, 1e-10).unwrap();
        assert_abs_diff_eq!(s.z[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.nu[0], -4.0, epsilon = 1e-12);
        let g = solve_strictly_convex_qp(&p).unwrap();
        assert_abs_diff_eq!(g.z[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.nu[0], -4.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_kkt_rejected() {
        let p = QpProblem::new(DMatrix::zeros(2, 2), DVector::zeros(2));
        assert!(matches!(solve_equality_qp(&p, 1e-9), Err(Error::Singular(_))));
    }

    #[test]
    fn box_clamp_scalar() {
        // (z-2)^2 = z^2 - 4z + 4
        let p = QpProblem::new(dm(1, 1, &[2.0]), dv(&[-4.0])).with_inequalities(dm(1, 1, &[1.0]), dv(&[0.0]), dv(&[1.0]));
        let s = solve_convex_qp(&p, &SplittingSettings::default()).unwrap();
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-6);
        let g = solve_strictly_convex_qp(&p).unwrap();
        assert_abs_diff_eq!(g.z[0], 1.0, epsilon = 1e-12);
        assert!(p.kkt_residuals(&g).max() < 1e-10);
    }

    #[test]
    fn box_clamp_separable() {
        let p = QpProblem::new(DMatrix::identity(2, 2) * 2.0, dv(&[-6.0, 6.0])).with_inequalities(
            DMatrix::identity(2, 2),
            dv(&[-1.0, -1.0]),
            dv(&[1.0, 1.0]),
        );
        let s = solve_convex_qp(&p, &SplittingSettings::default()).unwrap();
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.z[1], -1.0, epsilon = 1e-6);
        let g = solve_strictly_convex_qp(&p).unwrap();
        assert_abs_diff_eq!(g.z[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.z[1], -1.0, epsilon = 1e-12);
        assert!(g.y[0] > 0.0 && g.y[1] < 0.0);
    }

    #[test]
    fn infeasible_detected() {
        // z >= 1 and z <= -1 through two rows.
        let p = QpProblem::new(dm(1, 1, &[1.0]), dv(&[0.0])).with_inequalities(
            dm(2, 1, &[1.0, 1.0]),
            dv(&[1.0, f64::NEG_INFINITY]),
            dv(&[f64::INFINITY, -1.0]),
        );
        assert!(matches!(solve_strictly_convex_qp(&p), Err(Error::Infeasible)));
        assert!(matches!(solve_convex_qp(&p, &SplittingSettings::default()), Err(Error::Infeasible)));
    }

    #[test]
    fn psd_cost_with_bounds() {
        // Zero curvature in the second coordinate; bounds pin it.
        let p = QpProblem::new(dm(2, 2, &[2.0, 0.0, 0.0, 0.0]), dv(&[-2.0, 1.0])).with_inequalities(
            DMatrix::identity(2, 2),
            dv(&[-5.0, 0.0]),
            dv(&[5.0, 3.0]),
        );
        let s = solve_psd_qp_prox(&p, 50).unwrap();
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(s.z[1], 0.0, epsilon = 1e-8);
        let a = solve_convex_qp(&p, &SplittingSettings::default()).unwrap();
        assert_abs_diff_eq!(a.z[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(a.z[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn validation() {
        let p = QpProblem::new(dm(2, 2, &[1.0, 2.0, 0.0, 1.0]), DVector::zeros(2));
        assert!(p.validate().is_err());
        let p = QpProblem::new(dm(2, 2, &[1.0, 0.0, 0.0, -1.0]), DVector::zeros(2));
        assert!(p.validate().is_err());
        let p = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1)).with_inequalities(
            dm(1, 1, &[1.0]),
            dv(&[1.0]),
            dv(&[0.0]),
        );
        assert!(p.validate().is_err());
    }
}
