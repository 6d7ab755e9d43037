//! Brute-force oracles and random instance generators shared by the
//! integration tests.
#![allow(dead_code)]

use c3_core::lcp::LcpInstance;
use c3_core::lcs::Lcs;
use c3_core::miqp::Bcqp;
use c3_core::mpc::CostSpec;
use c3_core::qp::{solve_strictly_convex_qp, QpProblem};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

/// Positive definite plus skew part: a P-matrix, so the LCP has exactly one
/// solution.
pub fn random_p_matrix_lcp<R: Rng>(rng: &mut R, m: usize) -> LcpInstance {
    let a = random_matrix(rng, m, m);
    let s = random_matrix(rng, m, m);
    let f = a.transpose() * &a + DMatrix::identity(m, m) * 0.1 + (&s - s.transpose());
    LcpInstance::new(random_vector(rng, m, 2.0), f).unwrap()
}

/// Strictly convex QP over `n` variables with `k ≤ n` complementarity pairs
/// `0 ≤ z_i ⊥ y_i ≥ 0`. `y_0 > 0` keeps the `z_i = 0` mode feasible.
pub fn random_bcqp<R: Rng>(rng: &mut R, n: usize, k: usize) -> Bcqp {
    let a = random_matrix(rng, n, n);
    let p = a.transpose() * &a + DMatrix::identity(n, n) * 0.5;
    let r = random_vector(rng, n, 3.0);
    let y_offset = DVector::from_fn(k, |_, _| rng.gen_range(0.1..2.0));
    Bcqp {
        qp: QpProblem::new(p, r),
        constant: rng.gen_range(-1.0..1.0),
        y_rows: random_matrix(rng, k, n),
        y_offset,
        pairs: (0..k).map(|i| (i, i)).collect(),
        big_m: 1000.0,
    }
}

/// Best objective over all `2^k` binary assignments, each a convex QP.
pub fn enumerate_bcqp(problem: &Bcqp) -> f64 {
    let k = problem.pairs.len();
    let mut best = f64::INFINITY;
    for mask in 0..(1usize << k) {
        let modes: Vec<bool> = (0..k).map(|p| mask & (1 << p) != 0).collect();
        let qp = problem.fixed_qp(&modes);
        let Ok(sol) = solve_strictly_convex_qp(&qp) else {
            continue;
        };
        let y = problem.y(&sol.z);
        let feasible = problem
            .pairs
            .iter()
            .zip(&modes)
            .all(|(&(i, j), &zero)| if zero { sol.z[i].abs() < 1e-7 && y[j] > -1e-7 } else { y[j].abs() < 1e-7 && sol.z[i] > -1e-7 });
        if feasible {
            best = best.min(problem.objective(&sol.z));
        }
    }
    best
}

/// Solves `min ½ wᵀ P w + rᵀ w` s.t. `A w = b` through its KKT system.
fn equality_qp(p: &DMatrix<f64>, r: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let (n, m) = (p.nrows(), a.nrows());
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(p);
    kkt.view_mut((n, 0), (m, n)).copy_from(a);
    kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-r));
    rhs.rows_mut(n, m).copy_from(b);
    let sol = kkt.clone().lu().solve(&rhs)?;
    ((&kkt * &sol - &rhs).amax() < 1e-8).then(|| sol.rows(0, n).into_owned())
}

/// Hybrid MPC optimum by brute force over contact modes, without condensing.
///
/// Variables are `(x_1 … x_N, λ_0 … λ_{N-1}, u_0 … u_{N-1})` with the dynamics as
/// equality rows. At each step the pair `0 ≤ λ ⊥ y ≥ 0` is active as
/// `λ = 0`, `y = 0` or both; every combination is an equality QP, kept when the
/// remaining inequalities hold. Only scalar `λ` is supported.
pub fn enumerate_mode_sequences(lcs: &Lcs, cost: &CostSpec, x0: &DVector<f64>) -> f64 {
    let d = lcs.dims();
    assert_eq!(d.n_lambda, 1);
    let n = cost.horizon();
    let (nx, nu) = (d.n_x, d.n_u);
    let nw = n * (nx + 1 + nu);
    let xi = |k: usize| (k - 1) * nx; // k ≥ 1
    let li = |k: usize| n * nx + k;
    let ui = |k: usize| n * nx + n + k * nu;

    let mut p = DMatrix::zeros(nw, nw);
    for k in 1..=n {
        let q = if k == n { &cost.q_terminal } else { &cost.q[k] };
        p.view_mut((xi(k), xi(k)), (nx, nx)).copy_from(&(q * 2.0));
    }
    for k in 0..n {
        p.view_mut((ui(k), ui(k)), (nu, nu)).copy_from(&(&cost.r[k] * 2.0));
    }
    let r = DVector::zeros(nw);
    let constant = x0.dot(&(&cost.q[0] * x0));

    // x_{k+1} - A x_k - D λ_k - B u_k = drift
    let mut dyn_rows = DMatrix::zeros(n * nx, nw);
    let mut dyn_rhs = DVector::zeros(n * nx);
    for k in 0..n {
        let rows = k * nx;
        for i in 0..nx {
            dyn_rows[(rows + i, xi(k + 1) + i)] = 1.0;
            dyn_rows[(rows + i, li(k))] = -lcs.d[(i, 0)];
            for j in 0..nu {
                dyn_rows[(rows + i, ui(k) + j)] = -lcs.b[(i, j)];
            }
            if k > 0 {
                for j in 0..nx {
                    dyn_rows[(rows + i, xi(k) + j)] = -lcs.a[(i, j)];
                }
            }
        }
        let mut rhs = lcs.drift.clone();
        if k == 0 {
            rhs += &lcs.a * x0;
        }
        dyn_rhs.rows_mut(rows, nx).copy_from(&rhs);
    }
    // y_k = a_k · w + y0_k
    let y_row = |k: usize| {
        let mut a = DVector::zeros(nw);
        let mut off = lcs.c[0];
        if k == 0 {
            off += (lcs.e.row(0) * x0)[0];
        } else {
            for j in 0..nx {
                a[xi(k) + j] = lcs.e[(0, j)];
            }
        }
        a[li(k)] = lcs.f[(0, 0)];
        for j in 0..nu {
            a[ui(k) + j] = lcs.h[(0, j)];
        }
        (a, off)
    };

    let mut best = f64::INFINITY;
    for code in 0..3usize.pow(n as u32) {
        let mut modes = Vec::with_capacity(n);
        let mut c = code;
        for _ in 0..n {
            modes.push(c % 3);
            c /= 3;
        }
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for (k, &mode) in modes.iter().enumerate() {
            if mode != 1 {
                let mut a = DVector::zeros(nw);
                a[li(k)] = 1.0;
                rows.push(a);
                rhs.push(0.0);
            }
            if mode != 0 {
                let (a, off) = y_row(k);
                rows.push(a);
                rhs.push(-off);
            }
        }
        let m = dyn_rows.nrows() + rows.len();
        let mut a = DMatrix::zeros(m, nw);
        a.rows_mut(0, dyn_rows.nrows()).copy_from(&dyn_rows);
        for (i, row) in rows.iter().enumerate() {
            a.row_mut(dyn_rows.nrows() + i).copy_from(&row.transpose());
        }
        let mut b = DVector::zeros(m);
        b.rows_mut(0, dyn_rhs.len()).copy_from(&dyn_rhs);
        for (i, v) in rhs.iter().enumerate() {
            b[dyn_rhs.len() + i] = *v;
        }
        let Some(w) = equality_qp(&p, &r, &a, &b) else {
            continue;
        };
        let ok = (0..n).all(|k| {
            let (a, off) = y_row(k);
            w[li(k)] >= -1e-9 && a.dot(&w) + off >= -1e-9
        });
        if ok {
            best = best.min(0.5 * w.dot(&(&p * &w)) + r.dot(&w) + constant);
        }
    }
    best
}

/// Double integrator `(position, velocity)` above a compliant floor at
/// `position = -gap`, with gravity-like drift.
pub fn tiny_lcs<R: Rng>(rng: &mut R) -> Lcs {
    let dt = 0.1;
    Lcs::new(
        DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
        DMatrix::from_column_slice(2, 1, &[0.5 * dt * dt, dt]),
        DMatrix::from_column_slice(2, 1, &[0.5 * dt * dt, dt]),
        DVector::from_vec(vec![-0.5 * dt * dt * 9.81, -dt * 9.81]),
        DMatrix::from_row_slice(1, 2, &[1.0, rng.gen_range(0.0..0.2)]),
        DMatrix::from_element(1, 1, rng.gen_range(0.01..0.5)),
        DMatrix::from_element(1, 1, rng.gen_range(-0.05..0.05)),
        DVector::from_element(1, rng.gen_range(0.0..0.3)),
        dt,
    )
    .unwrap()
}

pub fn tiny_cost<R: Rng>(rng: &mut R, horizon: usize) -> CostSpec {
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![rng.gen_range(1.0..10.0), rng.gen_range(0.1..2.0)]));
    let r = DMatrix::from_element(1, 1, rng.gen_range(0.01..1.0));
    CostSpec::uniform(q.clone(), r, q * 2.0, horizon)
}
