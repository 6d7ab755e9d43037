//! Big-M branch-and-bound for complementarity-constrained QPs.
//!
//! A [`Bcqp`] is a convex QP plus pairs `0 ≤ z_i ⊥ (Y z + y_0)_j ≥ 0`. Each
//! pair carries a binary `s`: `s = 1` forces `z_i = 0, 0 ≤ y_j ≤ M`, `s = 0`
//! forces `y_j = 0, 0 ≤ z_i ≤ M`. Relaxed nodes keep both sides in `[0, M]`
//! and drop the product.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lcs::{LcsStages, Trajectory};
use crate::mpc::{Condensed, CostSpec, StageConstraints};
use crate::qp::{DualActiveSet, ProximalQp, QpProblem, QpSolution};

/// Binaries above this count are rejected.
pub const MAX_BINARIES: usize = 40;

/// Branch-and-bound treats `min(λ_i, y_j)` below this as complementary.
pub const COMPLEMENTARITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Bcqp {
    pub qp: QpProblem,
    pub constant: f64,
    pub y_rows: DMatrix<f64>,
    pub y_offset: DVector<f64>,
    /// `(variable index, row of y)`.
    pub pairs: Vec<(usize, usize)>,
    pub big_m: f64,
}

impl Bcqp {
    pub fn validate(&self) -> Result<()> {
        self.qp.validate()?;
        let n = self.qp.n();
        if self.y_rows.ncols() != n || self.y_rows.nrows() != self.y_offset.len() {
            return Err(Error::Dimension("complementarity rows have inconsistent shape".into()));
        }
        if !(self.big_m > 0.0 && self.big_m.is_finite()) {
            return Err(Error::InvalidParameter(format!("big-M must be positive, got {}", self.big_m)));
        }
        if self.pairs.len() > MAX_BINARIES {
            return Err(Error::DimensionTooLarge {
                size: self.pairs.len(),
                limit: MAX_BINARIES,
            });
        }
        let mut seen = vec![false; n];
        for &(i, j) in &self.pairs {
            if i >= n || j >= self.y_rows.nrows() {
                return Err(Error::Dimension(format!("pair ({i}, {j}) out of range")));
            }
            if seen[i] {
                return Err(Error::InvalidParameter(format!("variable {i} appears in two pairs")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        self.qp.objective(z) + self.constant
    }

    /// `y = Y z + y_0`.
    pub fn y(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.y_rows * z + &self.y_offset
    }

    /// The QP obtained by fixing every binary; `modes[p] = true` means `s = 1`
    /// (variable pinned to zero).
    pub fn fixed_qp(&self, modes: &[bool]) -> QpProblem {
        let fix: Vec<Option<bool>> = modes.iter().map(|&s| Some(s)).collect();
        self.node_problem(&self.stacked_rows(), &fix)
    }

    fn stacked_rows(&self) -> QpProblem {
        let base = &self.qp;
        let n = base.n();
        let m0 = base.a_in.nrows();
        let np = self.pairs.len();
        let mut a = DMatrix::zeros(m0 + 2 * np, n);
        a.rows_mut(0, m0).copy_from(&base.a_in);
        let mut lb = DVector::zeros(m0 + 2 * np);
        let mut ub = DVector::zeros(m0 + 2 * np);
        lb.rows_mut(0, m0).copy_from(&base.lb);
        ub.rows_mut(0, m0).copy_from(&base.ub);
        for (p, &(i, j)) in self.pairs.iter().enumerate() {
            a[(m0 + 2 * p, i)] = 1.0;
            a.row_mut(m0 + 2 * p + 1).copy_from(&self.y_rows.row(j));
        }
        base.clone().with_inequalities(a, lb, ub)
    }

    /// Sets the pair rows' bounds of `template` for the given partial fixing.
    fn node_problem(&self, template: &QpProblem, fix: &[Option<bool>]) -> QpProblem {
        let mut qp = template.clone();
        let m0 = self.qp.a_in.nrows();
        let big_m = self.big_m;
        for (p, &(_, j)) in self.pairs.iter().enumerate() {
            let off = self.y_offset[j];
            let (lam_hi, y_hi) = match fix[p] {
                None => (big_m, big_m),
                Some(true) => (0.0, big_m),
                Some(false) => (big_m, 0.0),
            };
            qp.lb[m0 + 2 * p] = 0.0;
            qp.ub[m0 + 2 * p] = lam_hi;
            qp.lb[m0 + 2 * p + 1] = -off;
            qp.ub[m0 + 2 * p + 1] = y_hi - off;
        }
        qp
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnbSettings {
    /// Prune nodes whose bound is within `tol · (1 + |incumbent|)` of the incumbent.
    pub tol: f64,
    /// Maximum number of node QP solves.
    pub node_limit: usize,
    /// Proximal iterations per node when the cost is only PSD.
    pub prox_iters: usize,
}

impl Default for BnbSettings {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            node_limit: 100_000,
            prox_iters: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnbStatus {
    Optimal,
    /// Stopped at the node limit; the incumbent is reported with its gap.
    NodeLimit,
}

#[derive(Debug, Clone)]
pub struct BnbSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub node_count: usize,
    pub status: BnbStatus,
    /// Incumbent minus the smallest open bound (zero when optimal).
    pub gap: f64,
    /// `modes[p] = true` when the variable of pair `p` is zero.
    pub modes: Vec<bool>,
}

enum NodeSolver {
    Strict(DualActiveSet),
    Prox(ProximalQp, usize),
}

impl NodeSolver {
    fn new(p: &DMatrix<f64>, prox_iters: usize) -> Result<Self> {
        match DualActiveSet::new(p) {
            Ok(s) if p.clone().symmetric_eigenvalues().min() > 1e-10 * 1.0f64.max(p.amax()) => Ok(Self::Strict(s)),
            _ => Ok(Self::Prox(ProximalQp::new(p)?, prox_iters)),
        }
    }

    /// `Ok(None)` for an infeasible node.
    fn solve(&self, qp: &QpProblem) -> Result<Option<QpSolution>> {
        let out = match self {
            Self::Strict(s) => s.solve(qp),
            Self::Prox(s, iters) => s.solve(qp, *iters),
        };
        match out {
            Ok(sol) => Ok(Some(sol)),
            Err(Error::Infeasible) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

struct Node {
    bound: f64,
    seq: usize,
    fix: Vec<Option<bool>>,
    z: DVector<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // Reversed so the max-heap pops the lowest bound, then the oldest node.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Global minimizer of a [`Bcqp`] by best-first branch-and-bound.
pub fn solve_bcqp_bnb(problem: &Bcqp, settings: &BnbSettings) -> Result<BnbSolution> {
    problem.validate()?;
    let solver = NodeSolver::new(&problem.qp.p, settings.prox_iters)?;
    let template = problem.stacked_rows();
    let np = problem.pairs.len();

    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    let mut node_count = 0usize;
    let mut incumbent: Option<(f64, DVector<f64>, Vec<Option<bool>>)> = None;

    let mut evaluate = |fix: Vec<Option<bool>>, heap: &mut BinaryHeap<Node>, node_count: &mut usize| -> Result<()> {
        *node_count += 1;
        let qp = problem.node_problem(&template, &fix);
        if let Some(sol) = solver.solve(&qp)? {
            heap.push(Node {
                bound: problem.objective(&sol.z),
                seq,
                fix,
                z: sol.z,
            });
            seq += 1;
        }
        Ok(())
    };

    evaluate(vec![None; np], &mut heap, &mut node_count)?;
    let prune = |bound: f64, inc: &Option<(f64, DVector<f64>, Vec<Option<bool>>)>| match inc {
        Some((best, _, _)) => bound >= best - settings.tol * (1.0 + best.abs()),
        None => false,
    };

    while let Some(node) = heap.pop() {
        if prune(node.bound, &incumbent) {
            continue;
        }
        let y = problem.y(&node.z);
        let mut branch: Option<(usize, f64)> = None;
        for (p, &(i, j)) in problem.pairs.iter().enumerate() {
            if node.fix[p].is_some() {
                continue;
            }
            let (lam, yv) = (node.z[i], y[j]);
            if lam.min(yv) <= COMPLEMENTARITY_TOL {
                continue;
            }
            let score = lam * yv;
            if branch.map_or(true, |(_, s)| score > s) {
                branch = Some((p, score));
            }
        }
        let Some((p, _)) = branch else {
            incumbent = Some((node.bound, node.z, node.fix));
            continue;
        };
        if node_count + 2 > settings.node_limit {
            heap.push(node);
            break;
        }
        for s in [true, false] {
            let mut fix = node.fix.clone();
            fix[p] = Some(s);
            evaluate(fix, &mut heap, &mut node_count)?;
        }
    }

    let open_bound = heap
        .iter()
        .filter(|n| !prune(n.bound, &incumbent))
        .map(|n| n.bound)
        .fold(f64::INFINITY, f64::min);
    let Some((objective, z, fix)) = incumbent else {
        if open_bound.is_finite() {
            return Err(Error::NodeLimit {
                limit: settings.node_limit,
                incumbent: None,
                gap: f64::INFINITY,
            });
        }
        return Err(Error::Infeasible);
    };
    let (status, gap) = if open_bound.is_finite() {
        (BnbStatus::NodeLimit, (objective - open_bound).max(0.0))
    } else {
        (BnbStatus::Optimal, 0.0)
    };

    let y = problem.y(&z);
    let limit = problem.big_m - 1e-6;
    if problem.pairs.iter().any(|&(i, j)| z[i] >= limit || y[j] >= limit) {
        return Err(Error::BigMViolated { big_m: problem.big_m });
    }
    let modes = problem
        .pairs
        .iter()
        .zip(fix.iter())
        .map(|(&(i, j), f)| f.unwrap_or(z[i] <= y[j]))
        .collect();
    Ok(BnbSolution {
        z,
        objective,
        node_count,
        status,
        gap,
        modes,
    })
}

#[derive(Debug, Clone)]
pub struct MiqpMpcSolution {
    pub trajectory: Trajectory,
    pub objective: f64,
    pub node_count: usize,
    pub status: BnbStatus,
    pub gap: f64,
}

/// The full hybrid MPC problem as one big-M MIQP over the condensed variables
/// `(λ_k, u_k)`, solved to global optimality (or the node limit).
pub fn mpc_miqp_full<S: LcsStages + ?Sized>(
    lcs: &S,
    cost: &CostSpec,
    x0: &DVector<f64>,
    constraints: Option<&StageConstraints>,
    big_m: f64,
    settings: &BnbSettings,
) -> Result<MiqpMpcSolution> {
    let problem = mpc_bcqp(lcs, cost, x0, constraints, big_m)?;
    let dims = lcs.stage(0).dims();
    let sol = solve_bcqp_bnb(&problem, settings)?;
    let condensed = Condensed::build(lcs, dims, cost.horizon(), x0);
    Ok(MiqpMpcSolution {
        trajectory: condensed.trajectory(&sol.z),
        objective: sol.objective,
        node_count: sol.node_count,
        status: sol.status,
        gap: sol.gap,
    })
}

/// Builds the condensed big-M problem solved by [`mpc_miqp_full`].
pub fn mpc_bcqp<S: LcsStages + ?Sized>(
    lcs: &S,
    cost: &CostSpec,
    x0: &DVector<f64>,
    constraints: Option<&StageConstraints>,
    big_m: f64,
) -> Result<Bcqp> {
    let dims = lcs.stage(0).dims();
    for k in 0..cost.horizon() {
        if lcs.stage(k).dims() != dims {
            return Err(Error::Dimension(format!("stage {k} dims differ from stage 0")));
        }
    }
    cost.validate(dims)?;
    if x0.len() != dims.n_x {
        return Err(Error::Dimension(format!("x0 has length {}, expected {}", x0.len(), dims.n_x)));
    }
    if let Some(c) = constraints {
        c.validate(dims.n_z())?;
    }
    let horizon = cost.horizon();
    let cond = Condensed::build(lcs, dims, horizon, x0);
    let (p, r, constant) = cond.cost(cost);
    let nv = cond.n_vars();

    let mut rows: Vec<(DVector<f64>, f64, f64)> = Vec::new();
    if let Some(c) = constraints {
        for k in 0..horizon {
            let (map, off) = cond.stage_map(k);
            for (a, lo, hi) in c.rows_for_step(k, dims.n_x) {
                let shift = a.dot(&off);
                rows.push(((map.transpose() * a), lo - shift, hi - shift));
            }
        }
    }
    let mut a_in = DMatrix::zeros(rows.len(), nv);
    let mut lb = DVector::zeros(rows.len());
    let mut ub = DVector::zeros(rows.len());
    for (i, (a, lo, hi)) in rows.into_iter().enumerate() {
        a_in.row_mut(i).copy_from(&a.transpose());
        lb[i] = lo;
        ub[i] = hi;
    }

    let nl = dims.n_lambda;
    let mut y_rows = DMatrix::zeros(horizon * nl, nv);
    let mut y_offset = DVector::zeros(horizon * nl);
    let mut pairs = Vec::with_capacity(horizon * nl);
    for k in 0..horizon {
        let st = lcs.stage(k);
        let (map, off) = cond.stage_map(k);
        let mut ez = DMatrix::zeros(nl, dims.n_z());
        ez.columns_mut(0, dims.n_x).copy_from(&st.e);
        ez.columns_mut(dims.n_x, nl).copy_from(&st.f);
        ez.columns_mut(dims.n_x + nl, dims.n_u).copy_from(&st.h);
        y_rows.rows_mut(k * nl, nl).copy_from(&(&ez * &map));
        y_offset.rows_mut(k * nl, nl).copy_from(&(&ez * &off + &st.c));
        for i in 0..nl {
            pairs.push((cond.lambda_index(k, i), k * nl + i));
        }
    }

    let problem = Bcqp {
        qp: QpProblem::new((&p + p.transpose()) * 0.5, r).with_inequalities(a_in, lb, ub),
        constant,
        y_rows,
        y_offset,
        pairs,
        big_m,
    };
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_projection(target: [f64; 2]) -> Bcqp {
        let p = DMatrix::identity(2, 2) * 2.0;
        let r = DVector::from_vec(vec![-2.0 * target[0], -2.0 * target[1]]);
        Bcqp {
            qp: QpProblem::new(p, r),
            constant: target[0] * target[0] + target[1] * target[1],
            y_rows: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            y_offset: DVector::zeros(1),
            pairs: vec![(1, 0)],
            big_m: 1000.0,
        }
    }

    #[test]
    fn scalar_projection_from_negative_orthant() {
        let sol = solve_bcqp_bnb(&scalar_projection([-1.0, -1.0]), &BnbSettings::default()).unwrap();
        assert!((sol.objective - 2.0).abs() < 1e-9);
        assert!(sol.z.amax() < 1e-9);
        assert!(sol.node_count <= 3);
        assert_eq!(sol.status, BnbStatus::Optimal);
    }

    #[test]
    fn scalar_projection_picks_inactive_branch() {
        let sol = solve_bcqp_bnb(&scalar_projection([1.0, 2.0]), &BnbSettings::default()).unwrap();
        assert!((sol.z[0] - 1.0).abs() < 1e-9 && sol.z[1].abs() < 1e-9);
        assert!((sol.objective - 4.0).abs() < 1e-9);
    }

    #[test]
    fn feasible_target_has_zero_cost() {
        let sol = solve_bcqp_bnb(&scalar_projection([3.0, 0.0]), &BnbSettings::default()).unwrap();
        assert!(sol.objective.abs() < 1e-12);
        assert_eq!(sol.node_count, 1);
    }

    #[test]
    fn small_big_m_is_reported() {
        let mut p = scalar_projection([5.0, 0.0]);
        p.big_m = 5.0;
        assert!(matches!(solve_bcqp_bnb(&p, &BnbSettings::default()), Err(Error::BigMViolated { .. })));
    }

    #[test]
    fn node_limit_without_incumbent_is_an_error() {
        let settings = BnbSettings {
            node_limit: 1,
            ..BnbSettings::default()
        };
        let out = solve_bcqp_bnb(&scalar_projection([1.0, 2.0]), &settings);
        assert!(matches!(out, Err(Error::NodeLimit { incumbent: None, .. })));
    }

    #[test]
    fn duplicated_pair_is_rejected() {
        let mut p = scalar_projection([1.0, 2.0]);
        p.y_rows = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        p.y_offset = DVector::zeros(2);
        p.pairs = vec![(1, 0), (1, 1)];
        assert!(p.validate().is_err());
    }
}
