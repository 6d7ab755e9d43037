//! Nonlinear multi-contact models and their Stewart–Trinkle LCS approximation.
//!
//! A model provides `M(q) v̇ + C(q, v) = B(q) u + J(q)ᵀ λ` with `n_v = n_q`.
//! The state is `x = (q, v)` and complementarity variables are stacked as
//! `(γ, λⁿ, λᵗ)`.
//!
//! A contact may have a *commanded* normal force: its normal force is an input
//! `u_j` rather than a complementarity variable. Such a contact contributes a
//! friction-cone row `μ u_j - E_t λᵗ ≥ 0` and its tangential rows, but no
//! normal row; the normal force acts on the dynamics through `B(q)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lcp::LcpInstance;
use crate::lcs::{solve_contact_lcp, Lcs};

/// Central-difference step for model Jacobians.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContactDims {
    pub n_q: usize,
    pub n_u: usize,
    pub n_c: usize,
}

pub trait MultiContactModel: Sync {
    fn dims(&self) -> ContactDims;
    fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64>;
    /// Coriolis, centrifugal and gravity terms.
    fn bias(&self, q: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;
    fn input_matrix(&self, q: &DVector<f64>) -> DMatrix<f64>;
    /// `n_c × n_q`; rows of commanded contacts are ignored.
    fn normal_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64>;
    /// `(n_c n_e) × n_q`, contact-major.
    fn tangent_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64>;
    /// `n_c` signed distances; entries of commanded contacts are ignored.
    fn signed_distance(&self, q: &DVector<f64>) -> DVector<f64>;
    fn friction(&self) -> DVector<f64>;

    fn num_edges(&self) -> usize {
        2
    }

    /// Input index carrying the normal force of `contact`, if commanded.
    fn commanded_normal(&self, _contact: usize) -> Option<usize> {
        None
    }
}

/// Row layout of the complementarity vector for a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContactLayout {
    pub n_c: usize,
    pub n_e: usize,
    /// Contacts with a complementarity normal force, in order.
    pub gap_contacts: Vec<usize>,
    /// `(contact, input index)` for commanded contacts.
    pub commanded: Vec<(usize, usize)>,
}

impl ContactLayout {
    pub fn of<M: MultiContactModel + ?Sized>(model: &M) -> Result<Self> {
        let dims = model.dims();
        let n_e = model.num_edges();
        if n_e < 2 {
            return Err(Error::InvalidParameter(format!("friction cone needs at least 2 edges, got {n_e}")));
        }
        let mu = model.friction();
        if mu.len() != dims.n_c || mu.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::InvalidParameter("friction coefficients must be n_c non-negative values".into()));
        }
        let mut gap = Vec::new();
        let mut commanded = Vec::new();
        for i in 0..dims.n_c {
            match model.commanded_normal(i) {
                Some(j) if j >= dims.n_u => {
                    return Err(Error::Dimension(format!("contact {i} commands input {j} of {}", dims.n_u)));
                }
                Some(j) => commanded.push((i, j)),
                None => gap.push(i),
            }
        }
        Ok(Self {
            n_c: dims.n_c,
            n_e,
            gap_contacts: gap,
            commanded,
        })
    }

    pub fn n_lambda(&self) -> usize {
        self.n_c + self.gap_contacts.len() + self.n_c * self.n_e
    }

    pub fn gamma_index(&self, contact: usize) -> usize {
        contact
    }

    pub fn normal_offset(&self) -> usize {
        self.n_c
    }

    pub fn tangent_index(&self, contact: usize, edge: usize) -> usize {
        self.n_c + self.gap_contacts.len() + contact * self.n_e + edge
    }
}

/// Geometry evaluated at one configuration.
struct ContactTerms {
    layout: ContactLayout,
    jn_gap: DMatrix<f64>,
    jt: DMatrix<f64>,
    phi_gap: DVector<f64>,
    mu: DVector<f64>,
    m_inv: DMatrix<f64>,
}

impl ContactTerms {
    fn at<M: MultiContactModel + ?Sized>(model: &M, q: &DVector<f64>) -> Result<Self> {
        let layout = ContactLayout::of(model)?;
        let dims = model.dims();
        let mass = model.mass_matrix(q);
        check_shape("M(q)", &mass, dims.n_q, dims.n_q)?;
        let m_inv = mass
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| mass.clone().try_inverse())
            .ok_or_else(|| Error::Singular("mass matrix".into()))?;
        let jn = model.normal_jacobian(q);
        check_shape("J_n", &jn, dims.n_c, dims.n_q)?;
        let jt = model.tangent_jacobian(q);
        check_shape("J_t", &jt, dims.n_c * layout.n_e, dims.n_q)?;
        let phi = model.signed_distance(q);
        if phi.len() != dims.n_c {
            return Err(Error::Dimension(format!("φ has length {}, expected {}", phi.len(), dims.n_c)));
        }
        let ng = layout.gap_contacts.len();
        let jn_gap = DMatrix::from_fn(ng, dims.n_q, |r, c| jn[(layout.gap_contacts[r], c)]);
        let phi_gap = DVector::from_fn(ng, |r, _| phi[layout.gap_contacts[r]]);
        for (name, ok) in [
            ("M(q)", all_finite(mass.iter())),
            ("J_n", all_finite(jn.iter())),
            ("J_t", all_finite(jt.iter())),
            ("φ", all_finite(phi.iter())),
        ] {
            if !ok {
                return Err(Error::NonFinite(name.into()));
            }
        }
        Ok(Self {
            mu: model.friction(),
            layout,
            jn_gap,
            jt,
            phi_gap,
            m_inv,
        })
    }

    /// Velocity change per unit λ: `Δt M⁻¹ [0 | J_nᵀ | J_tᵀ]`.
    fn velocity_map(&self, dt: f64) -> DMatrix<f64> {
        let l = &self.layout;
        let n_q = self.m_inv.nrows();
        let mut jt_all = DMatrix::zeros(n_q, l.n_lambda());
        jt_all
            .columns_mut(l.normal_offset(), l.gap_contacts.len())
            .copy_from(&self.jn_gap.transpose());
        jt_all
            .columns_mut(l.tangent_index(0, 0), l.n_c * l.n_e)
            .copy_from(&self.jt.transpose());
        &self.m_inv * jt_all * dt
    }

    /// Slack `F₀ λ + K v⁺ + c₀ + H₀ u`, without the configuration term.
    /// Returns `(F₀, K, c₀, H₀)`.
    fn slack_blocks(&self, n_u: usize, dt: f64) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
        let l = &self.layout;
        let nl = l.n_lambda();
        let n_q = self.m_inv.nrows();
        let ng = l.gap_contacts.len();
        let mut f0 = DMatrix::zeros(nl, nl);
        let mut k = DMatrix::zeros(nl, n_q);
        let mut c0 = DVector::zeros(nl);
        let mut h0 = DMatrix::zeros(nl, n_u);
        for (g, &i) in l.gap_contacts.iter().enumerate() {
            f0[(l.gamma_index(i), l.normal_offset() + g)] = self.mu[i];
            k.row_mut(l.normal_offset() + g).copy_from(&(self.jn_gap.row(g) * dt));
            c0[l.normal_offset() + g] = self.phi_gap[g];
        }
        for &(i, j) in &l.commanded {
            h0[(l.gamma_index(i), j)] = self.mu[i];
        }
        for i in 0..l.n_c {
            for e in 0..l.n_e {
                let t = l.tangent_index(i, e);
                f0[(l.gamma_index(i), t)] = -1.0;
                f0[(t, l.gamma_index(i))] = 1.0;
                k.row_mut(t).copy_from(&self.jt.row(i * l.n_e + e));
            }
        }
        debug_assert_eq!(ng + l.n_c * (1 + l.n_e), nl);
        (f0, k, c0, h0)
    }
}

fn check_shape(name: &str, m: &DMatrix<f64>, r: usize, c: usize) -> Result<()> {
    if m.nrows() != r || m.ncols() != c {
        return Err(Error::Dimension(format!("{name} is {}x{}, expected {r}x{c}", m.nrows(), m.ncols())));
    }
    Ok(())
}

fn all_finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
    it.all(|v| v.is_finite())
}

fn split_state(x: &DVector<f64>, n_q: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    if x.len() != 2 * n_q {
        return Err(Error::Dimension(format!("state has length {}, expected {}", x.len(), 2 * n_q)));
    }
    Ok((x.rows(0, n_q).into_owned(), x.rows(n_q, n_q).into_owned()))
}

/// `f(q, v, u) = M⁻¹(q) (B(q) u - C(q, v))`.
pub fn free_acceleration<M: MultiContactModel + ?Sized>(
    model: &M,
    q: &DVector<f64>,
    v: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    let dims = model.dims();
    let mass = model.mass_matrix(q);
    check_shape("M(q)", &mass, dims.n_q, dims.n_q)?;
    let b = model.input_matrix(q);
    check_shape("B(q)", &b, dims.n_q, dims.n_u)?;
    let bias = model.bias(q, v);
    let rhs = b * u - bias;
    if !all_finite(rhs.iter()) || !all_finite(mass.iter()) {
        return Err(Error::NonFinite("M, B or C".into()));
    }
    let acc = mass
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("mass matrix".into()))?;
    if !all_finite(acc.iter()) {
        return Err(Error::Singular("mass matrix".into()));
    }
    Ok(acc)
}

/// Central-difference Jacobian of `f` with respect to `(q, v, u)`.
pub fn acceleration_jacobian<M: MultiContactModel + ?Sized>(
    model: &M,
    q: &DVector<f64>,
    v: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n_q = q.len();
    let n_u = u.len();
    let mut jac = DMatrix::zeros(n_q, 2 * n_q + n_u);
    let mut point = DVector::zeros(2 * n_q + n_u);
    point.rows_mut(0, n_q).copy_from(q);
    point.rows_mut(n_q, n_q).copy_from(v);
    point.rows_mut(2 * n_q, n_u).copy_from(u);
    let eval = |p: &DVector<f64>| {
        free_acceleration(
            model,
            &p.rows(0, n_q).into_owned(),
            &p.rows(n_q, n_q).into_owned(),
            &p.rows(2 * n_q, n_u).into_owned(),
        )
    };
    for j in 0..point.len() {
        let mut plus = point.clone();
        let mut minus = point.clone();
        plus[j] += FD_STEP;
        minus[j] -= FD_STEP;
        let col = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
        jac.column_mut(j).copy_from(&col);
    }
    Ok(jac)
}

/// LCS approximation of the time-stepping scheme about `(q*, v*, u*)`.
///
/// Smooth terms are linearized; the normal rows use the first-order gap
/// `φ(q*) + J_n(q*)(q_k - q*) + Δt J_n(q*) v_{k+1}`, which reduces to
/// `φ(q*) + Δt J_n v_{k+1}` at `q_k = q*`.
pub fn linearize_stewart_trinkle<M: MultiContactModel + ?Sized>(
    model: &M,
    x_star: &DVector<f64>,
    u_star: &DVector<f64>,
    dt: f64,
) -> Result<Lcs> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let dims = model.dims();
    let (q, v) = split_state(x_star, dims.n_q)?;
    if u_star.len() != dims.n_u {
        return Err(Error::Dimension(format!("input has length {}, expected {}", u_star.len(), dims.n_u)));
    }
    let terms = ContactTerms::at(model, &q)?;
    let n_q = dims.n_q;
    let n_x = 2 * n_q;
    let n_u = dims.n_u;

    let f_star = free_acceleration(model, &q, &v, u_star)?;
    let jf = acceleration_jacobian(model, &q, &v, u_star)?;
    let mut point = DVector::zeros(2 * n_q + n_u);
    point.rows_mut(0, n_x).copy_from(x_star);
    point.rows_mut(n_x, n_u).copy_from(u_star);
    let d_v = &f_star - &jf * &point;

    // v⁺ = V_x x + V_u u + V_λ λ + V_0
    let mut v_x = jf.columns(0, n_x) * dt;
    for i in 0..n_q {
        v_x[(i, n_q + i)] += 1.0;
    }
    let v_u = jf.columns(n_x, n_u) * dt;
    let v_l = terms.velocity_map(dt);
    let v_0 = &d_v * dt;

    let stack = |top: DMatrix<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n_x, top.ncols());
        out.rows_mut(0, n_q).copy_from(&(&top * dt));
        out.rows_mut(n_q, n_q).copy_from(&top);
        out
    };
    let mut a = stack(v_x.clone());
    for i in 0..n_q {
        a[(i, i)] += 1.0;
    }
    let b = stack(v_u.clone());
    let d = stack(v_l.clone());
    let mut drift = DVector::zeros(n_x);
    drift.rows_mut(0, n_q).copy_from(&(&v_0 * dt));
    drift.rows_mut(n_q, n_q).copy_from(&v_0);

    let (f0, k, c0, h0) = terms.slack_blocks(n_u, dt);
    let l = &terms.layout;
    let mut e = &k * &v_x;
    let mut c = c0 + &k * &v_0;
    for g in 0..l.gap_contacts.len() {
        let row = l.normal_offset() + g;
        for j in 0..n_q {
            e[(row, j)] += terms.jn_gap[(g, j)];
        }
        c[row] -= terms.jn_gap.row(g).transpose().dot(&q);
    }
    let f = f0 + &k * &v_l;
    let h = h0 + &k * &v_u;
    Lcs::new(a, b, d, drift, e, f, h, c, dt)
}

/// One step of the nonlinear time-stepping scheme with geometry and dynamics
/// evaluated at the current configuration. Commanded normal forces are
/// clamped at zero.
pub fn stewart_trinkle_step<M: MultiContactModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let dims = model.dims();
    let (q, v) = split_state(x, dims.n_q)?;
    if u.len() != dims.n_u {
        return Err(Error::Dimension(format!("input has length {}, expected {}", u.len(), dims.n_u)));
    }
    let terms = ContactTerms::at(model, &q)?;
    let mut u = u.clone();
    for &(_, j) in &terms.layout.commanded {
        u[j] = u[j].max(0.0);
    }
    let v_free = &v + free_acceleration(model, &q, &v, &u)? * dt;
    let v_l = terms.velocity_map(dt);
    let (f0, k, c0, h0) = terms.slack_blocks(dims.n_u, dt);
    let lcp = LcpInstance::new(c0 + &k * &v_free + h0 * &u, f0 + &k * &v_l)?;
    let sol = solve_contact_lcp(&lcp);
    if !sol.is_solved() {
        return Err(Error::StepFailure {
            x: x.iter().copied().collect(),
            u: u.iter().copied().collect(),
            status: sol.status,
        });
    }
    let v_next = v_free + &v_l * &sol.lambda;
    let q_next = &q + &v_next * dt;
    let mut out = DVector::zeros(2 * dims.n_q);
    out.rows_mut(0, dims.n_q).copy_from(&q_next);
    out.rows_mut(dims.n_q, dims.n_q).copy_from(&v_next);
    Ok((out, sol.lambda))
}
