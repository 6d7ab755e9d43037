//! Linear complementarity problems.
//!
//! Find `λ ≥ 0` with `y = Fλ + q ≥ 0` and `λᵀy = 0`. Two solvers are provided:
//! Lemke's complementary pivoting method with a lexicographic ratio test, and
//! an exhaustive active-set enumeration used as a reference oracle for small
//! problems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default tolerance on complementarity and feasibility residuals.
pub const DEFAULT_TOL: f64 = 1e-7;

/// Largest problem the enumeration oracle accepts.
pub const MAX_ENUMERATION_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct LcpInstance {
    q: DVector<f64>,
    f: DMatrix<f64>,
}

impl LcpInstance {
    pub fn new(q: DVector<f64>, f: DMatrix<f64>) -> Result<Self> {
        let m = q.len();
        if m == 0 {
            return Err(Error::Dimension("LCP must have at least one row".into()));
        }
        if f.nrows() != m || f.ncols() != m {
            return Err(Error::Dimension(format!(
                "LCP matrix is {}x{} but q has length {m}",
                f.nrows(),
                f.ncols()
            )));
        }
        Ok(Self { q, f })
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn size(&self) -> usize {
        self.q.len()
    }

    /// `y = Fλ + q`.
    pub fn slack(&self, lambda: &DVector<f64>) -> DVector<f64> {
        &self.f * lambda + &self.q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcpStatus {
    Solved,
    /// Lemke's path left along an unbounded ray before `z0` left the basis.
    RayTermination,
    IterationLimit,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcpSolution {
    pub lambda: DVector<f64>,
    pub y: DVector<f64>,
    pub comp_residual: f64,
    pub feas_residual: f64,
    pub status: LcpStatus,
    pub pivots: usize,
}

impl LcpSolution {
    pub fn is_solved(&self) -> bool {
        self.status == LcpStatus::Solved
    }

    fn from_lambda(inst: &LcpInstance, lambda: DVector<f64>, tol: f64, pivots: usize) -> Self {
        let y = inst.slack(&lambda);
        let (comp, feas) = residual_of(&lambda, &y);
        let status = if comp <= tol && feas <= tol {
            LcpStatus::Solved
        } else {
            LcpStatus::Infeasible
        };
        Self {
            lambda,
            y,
            comp_residual: comp,
            feas_residual: feas,
            status,
            pivots,
        }
    }

    fn failed(inst: &LcpInstance, status: LcpStatus, pivots: usize) -> Self {
        let lambda = DVector::zeros(inst.size());
        let y = inst.q.clone();
        let (comp, feas) = residual_of(&lambda, &y);
        Self {
            lambda,
            y,
            comp_residual: comp,
            feas_residual: feas,
            status,
            pivots,
        }
    }
}

fn residual_of(lambda: &DVector<f64>, y: &DVector<f64>) -> (f64, f64) {
    let mut comp = 0.0f64;
    let mut feas = 0.0f64;
    for (l, s) in lambda.iter().zip(y.iter()) {
        comp = comp.max((l * s).abs());
        feas = feas.max(-l).max(-s);
    }
    (comp, feas)
}

/// Complementarity and feasibility residuals of a candidate `λ`.
///
/// `comp = max_i |λ_i y_i|`, `feas = max(0, max_i -λ_i, max_i -y_i)`.
pub fn lcp_residual(inst: &LcpInstance, lambda: &DVector<f64>) -> Result<(f64, f64)> {
    if lambda.len() != inst.size() {
        return Err(Error::Dimension(format!(
            "lambda has length {} but LCP has size {}",
            lambda.len(),
            inst.size()
        )));
    }
    Ok(residual_of(lambda, &inst.slack(lambda)))
}

/// Lemke's algorithm with covering vector `e = 1` and lexicographic
/// minimum-ratio pivoting.
pub fn lcp_solve_lemke(inst: &LcpInstance, tol: f64, max_pivots: usize) -> LcpSolution {
    let m = inst.size();
    if inst.q.iter().all(|&v| v >= 0.0) {
        return LcpSolution::from_lambda(inst, DVector::zeros(m), tol, 0);
    }

    // Tableau for  w - F z - e z0 = q.  Columns: w (0..m), z (m..2m), z0 (2m), rhs (2m+1).
    // The w-columns carry B^{-1}, which the lexicographic ratio test reads.
    let z0 = 2 * m;
    let rhs = 2 * m + 1;
    let mut t = DMatrix::<f64>::zeros(m, 2 * m + 2);
    for i in 0..m {
        t[(i, i)] = 1.0;
        for j in 0..m {
            t[(i, m + j)] = -inst.f[(i, j)];
        }
        t[(i, z0)] = -1.0;
        t[(i, rhs)] = inst.q[i];
    }
    let mut basis: Vec<usize> = (0..m).collect();

    // z0 enters; the row with the most negative q leaves (lexicographic on ties).
    let mut leaving_row = 0;
    for i in 1..m {
        let (a, b) = (t[(i, rhs)], t[(leaving_row, rhs)]);
        if a < b || (a == b && lex_less_row(&t, i, leaving_row, m, -1.0, -1.0)) {
            leaving_row = i;
        }
    }
    pivot(&mut t, leaving_row, z0);
    let mut leaving = basis[leaving_row];
    basis[leaving_row] = z0;
    let mut pivots = 1;

    loop {
        if pivots >= max_pivots {
            return LcpSolution::failed(inst, LcpStatus::IterationLimit, pivots);
        }
        let entering = complement(leaving, m);
        let Some(row) = lex_min_ratio(&t, entering, m) else {
            return LcpSolution::failed(inst, LcpStatus::RayTermination, pivots);
        };
        pivot(&mut t, row, entering);
        leaving = basis[row];
        basis[row] = entering;
        pivots += 1;
        if leaving == z0 {
            break;
        }
    }

    let mut lambda = DVector::zeros(m);
    for (row, &var) in basis.iter().enumerate() {
        if (m..2 * m).contains(&var) {
            lambda[var - m] = t[(row, rhs)].max(0.0);
        }
    }
    let support: Vec<usize> = (0..m).filter(|&i| basis.contains(&(m + i))).collect();
    if let Some(polished) = polish(inst, &support) {
        let cand = LcpSolution::from_lambda(inst, polished, tol, pivots);
        let raw = LcpSolution::from_lambda(inst, lambda.clone(), tol, pivots);
        if cand.comp_residual.max(cand.feas_residual) <= raw.comp_residual.max(raw.feas_residual)
        {
            return cand;
        }
        return raw;
    }
    LcpSolution::from_lambda(inst, lambda, tol, pivots)
}

fn complement(var: usize, m: usize) -> usize {
    if var < m {
        var + m
    } else {
        var - m
    }
}

fn pivot(t: &mut DMatrix<f64>, row: usize, col: usize) {
    let p = t[(row, col)];
    let ncols = t.ncols();
    for j in 0..ncols {
        t[(row, j)] /= p;
    }
    for i in 0..t.nrows() {
        if i == row {
            continue;
        }
        let factor = t[(i, col)];
        if factor != 0.0 {
            for j in 0..ncols {
                let v = t[(row, j)];
                t[(i, j)] -= factor * v;
            }
        }
    }
}

/// Compares rows `a` and `b` by the lexicographic key
/// `(rhs, B^{-1} row) / pivot-column entry`.
fn lex_less_row(t: &DMatrix<f64>, a: usize, b: usize, m: usize, da: f64, db: f64) -> bool {
    let rhs = 2 * m + 1;
    let key = |row: usize, d: f64, j: usize| -> f64 {
        if j == 0 {
            t[(row, rhs)] / d
        } else {
            t[(row, j - 1)] / d
        }
    };
    for j in 0..=m {
        let ka = key(a, da, j);
        let kb = key(b, db, j);
        let scale = 1.0f64.max(ka.abs()).max(kb.abs());
        if (ka - kb).abs() > 1e-12 * scale {
            return ka < kb;
        }
    }
    a < b
}

fn lex_min_ratio(t: &DMatrix<f64>, col: usize, m: usize) -> Option<usize> {
    const PIVOT_EPS: f64 = 1e-12;
    let mut best: Option<usize> = None;
    for i in 0..m {
        let d = t[(i, col)];
        if d <= PIVOT_EPS {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) if lex_less_row(t, i, b, m, d, t[(b, col)]) => Some(i),
            keep => keep,
        };
    }
    best
}

/// Re-solves `F_SS λ_S = -q_S` for the final support to strip pivoting noise.
fn polish(inst: &LcpInstance, support: &[usize]) -> Option<DVector<f64>> {
    let m = inst.size();
    let mut lambda = DVector::zeros(m);
    if support.is_empty() {
        return Some(lambda);
    }
    let k = support.len();
    let sub = DMatrix::from_fn(k, k, |i, j| inst.f[(support[i], support[j])]);
    let rhs = DVector::from_fn(k, |i, _| -inst.q[support[i]]);
    let sol = sub.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    for (i, &idx) in support.iter().enumerate() {
        lambda[idx] = sol[i].max(0.0);
    }
    Some(lambda)
}

/// Brute-force oracle: tries every active set in increasing bitmask order and
/// returns the first one that yields a feasible complementary pair.
pub fn lcp_solve_enumerate(inst: &LcpInstance, tol: f64) -> Result<LcpSolution> {
    let m = inst.size();
    if m > MAX_ENUMERATION_SIZE {
        return Err(Error::DimensionTooLarge {
            size: m,
            limit: MAX_ENUMERATION_SIZE,
        });
    }
    for mask in 0u32..(1u32 << m) {
        let support: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let lambda = if support.is_empty() {
            DVector::zeros(m)
        } else {
            let k = support.len();
            let sub = DMatrix::from_fn(k, k, |i, j| inst.f[(support[i], support[j])]);
            let lu = sub.lu();
            if lu.determinant().abs() < 1e-14 {
                continue;
            }
            let rhs = DVector::from_fn(k, |i, _| -inst.q[support[i]]);
            let Some(sol) = lu.solve(&rhs) else {
                continue;
            };
            let mut lambda = DVector::zeros(m);
            for (i, &idx) in support.iter().enumerate() {
                lambda[idx] = sol[i];
            }
            lambda
        };
        let cand = LcpSolution::from_lambda(inst, lambda, tol, 0);
        if cand.is_solved() {
            return Ok(cand);
        }
    }
    Ok(LcpSolution::failed(inst, LcpStatus::Infeasible, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn inst(q: &[f64], f: &[f64]) -> LcpInstance {
        let m = q.len();
        LcpInstance::new(DVector::from_row_slice(q), DMatrix::from_row_slice(m, m, f)).unwrap()
    }

    #[test]
    fn nonnegative_q_gives_zero() {
        let p = inst(&[1.0, 2.0], &[1.0, 0.0, 0.0, 1.0]);
        let s = lcp_solve_lemke(&p, DEFAULT_TOL, 100);
        assert!(s.is_solved());
        assert_eq!(s.lambda.as_slice(), &[0.0, 0.0]);
        assert_eq!(s.y.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn scalar_active() {
        let p = inst(&[-1.0], &[2.0]);
        let s = lcp_solve_lemke(&p, DEFAULT_TOL, 100);
        assert!(s.is_solved());
        assert_abs_diff_eq!(s.lambda[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.y[0], 0.0, epsilon = 1e-12);
        let e = lcp_solve_enumerate(&p, DEFAULT_TOL).unwrap();
        assert_abs_diff_eq!(e.lambda[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn two_by_two_fully_active() {
        let p = inst(&[-1.0, -1.0], &[2.0, 1.0, 1.0, 2.0]);
        let s = lcp_solve_lemke(&p, DEFAULT_TOL, 100);
        assert!(s.is_solved());
        assert_abs_diff_eq!(s.lambda[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.lambda[1], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.y.amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn enumerate_inactive() {
        let p = inst(&[1.0], &[1.0]);
        let s = lcp_solve_enumerate(&p, DEFAULT_TOL).unwrap();
        assert!(s.is_solved());
        assert_eq!(s.lambda[0], 0.0);
    }

    #[test]
    fn residual_examples() {
        let p = inst(&[1.0], &[1.0]);
        assert_eq!(lcp_residual(&p, &DVector::from_element(1, 0.0)).unwrap(), (0.0, 0.0));
        let p = inst(&[-1.0], &[2.0]);
        assert_eq!(lcp_residual(&p, &DVector::from_element(1, 0.0)).unwrap(), (0.0, 1.0));
        assert_eq!(lcp_residual(&p, &DVector::from_element(1, 1.0)).unwrap(), (1.0, 0.0));
        assert!(lcp_residual(&p, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn ray_termination_reported() {
        // y = -λ - 1 can never be nonnegative.
        let p = inst(&[-1.0], &[-1.0]);
        let s = lcp_solve_lemke(&p, DEFAULT_TOL, 100);
        assert_eq!(s.status, LcpStatus::RayTermination);
        let e = lcp_solve_enumerate(&p, DEFAULT_TOL).unwrap();
        assert_eq!(e.status, LcpStatus::Infeasible);
    }

    #[test]
    fn iteration_limit_reported() {
        let p = inst(&[-1.0, -1.0], &[2.0, 1.0, 1.0, 2.0]);
        let s = lcp_solve_lemke(&p, DEFAULT_TOL, 1);
        assert_eq!(s.status, LcpStatus::IterationLimit);
    }

    #[test]
    fn malformed_instances_rejected() {
        assert!(LcpInstance::new(DVector::zeros(0), DMatrix::zeros(0, 0)).is_err());
        assert!(LcpInstance::new(DVector::zeros(2), DMatrix::zeros(2, 3)).is_err());
        let big = LcpInstance::new(DVector::zeros(17), DMatrix::identity(17, 17)).unwrap();
        assert!(matches!(
            lcp_solve_enumerate(&big, DEFAULT_TOL),
            Err(Error::DimensionTooLarge { .. })
        ));
    }

    #[test]
    fn degenerate_stewart_trinkle_block() {
        // Friction block with a zero diagonal (not a P-matrix); Lemke still solves it.
        let f = [
            0.0, 1.0, -1.0, -1.0, //
            -1.0, 2.0, 0.5, -0.5, //
            1.0, 0.5, 1.0, 0.0, //
            1.0, -0.5, 0.0, 1.0,
        ];
        let p = inst(&[0.0, -1.0, 0.3, -0.2], &f);
        let s = lcp_solve_lemke(&p, DEFAULT_TOL, 100);
        assert!(s.is_solved(), "{s:?}");
    }
}
