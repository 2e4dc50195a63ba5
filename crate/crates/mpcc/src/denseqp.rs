//! Dense linear algebra and a primal active-set solver for strictly convex
//! quadratic programs with equality and inequality constraints.
//!
//! The solver is a null-space method: at each working set it factors only the
//! reduced Hessian `ZᵀHZ`. The Hessian is expected to be positive definite
//! (callers convexify with [`nearest_pd`] first when needed); an indefinite
//! Hessian is tolerated as long as every reduced Hessian actually encountered
//! is positive definite, which is what classical SQP on degenerate MPCC
//! reformulations produces.
//!
//! Determinism: ties in the blocking-constraint ratio test are broken toward
//! the lowest index, and a Bland-style lowest-index rule takes over after ten
//! consecutive degenerate steps.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// QP data in the convention
///
/// ```text
/// minimize   1/2 xᵀ H x + cᵀ x
/// subject to A_eq x + b_eq  = 0
///            A_in x + b_in <= 0
/// ```
#[derive(Debug, Clone)]
pub struct QpData {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QpData {
    /// Unconstrained problem data.
    pub fn unconstrained(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        QpData {
            hessian,
            gradient,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.gradient.len()
    }

    /// Objective value at `x`.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.hessian * x)[(0, 0)] + self.gradient.dot(x)
    }
}

/// Terminal status of a QP solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    /// Not produced for strictly convex data; present for API completeness.
    Unbounded,
    DegenerateCycle,
}

/// Solution of a QP at [`QpStatus::Optimal`].
///
/// Multiplier complementarity is exact by construction: `in_multipliers[i]`
/// is zero for every `i` outside `active_set`.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub in_multipliers: DVector<f64>,
    /// Final working set (inequality indices), sorted.
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    pub working_set_changes: usize,
    /// Verified KKT residual of the returned triple.
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Error)]
pub enum QpError {
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("QP infeasible: minimal constraint violation {violation:e}")]
    Infeasible { violation: f64 },
    #[error("working set cycled without progress after {iterations} iterations")]
    DegenerateCycle { iterations: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hessian not symmetric: |H - Hᵀ|max = {asym:e}")]
    NotSymmetric { asym: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl QpError {
    /// The spec-level status this failure corresponds to.
    pub fn status(&self) -> QpStatus {
        match self {
            QpError::Infeasible { .. } => QpStatus::Infeasible,
            QpError::DegenerateCycle { .. } => QpStatus::DegenerateCycle,
            _ => QpStatus::Unbounded,
        }
    }
}

/// Solve `M x = rhs` for symmetric positive definite `M` by Cholesky.
///
/// Fails with the offending pivot index when `M` is not positive definite.
pub fn cholesky_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, QpError> {
    let l = cholesky_factor(m)?;
    Ok(cholesky_solve_factored(&l, rhs))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
fn cholesky_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>, QpError> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(QpError::Dimension(format!("{}x{} matrix is not square", n, m.ncols())));
    }
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 {
            return Err(QpError::NotPositiveDefinite { pivot: j });
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / dj;
        }
    }
    Ok(l)
}

fn cholesky_solve_factored(l: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = rhs.clone();
    for i in 0..n {
        for k in 0..i {
            let v = y[k];
            y[i] -= l[(i, k)] * v;
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let v = y[k];
            y[i] -= l[(k, i)] * v;
        }
        y[i] /= l[(i, i)];
    }
    y
}

/// Shift a symmetric matrix onto the positive definite cone: returns
/// `M + σI` with `σ = max(0, floor − λ_min(M))`, so the result has smallest
/// eigenvalue at least `floor`.
pub fn nearest_pd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let lambda_min = min_eigenvalue(m);
    let sigma = (floor - lambda_min).max(0.0);
    if sigma == 0.0 {
        return m.clone();
    }
    let n = m.nrows();
    m + DMatrix::identity(n, n) * sigma
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Spectral (2-) norm of a symmetric matrix.
pub fn symmetric_two_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, &b| a.max(b.abs()))
}

/// Orthonormal basis pair for the row space and null space of `a`, built by
/// modified Gram-Schmidt with re-orthogonalization. Returns
/// `(row_basis, null_basis)`; `row_basis.len()` is the numerical rank.
///
/// Axis-aligned rows produce an exactly axis-aligned null basis, which keeps
/// steps on fixed coordinates exactly zero.
pub fn rowspace_and_null(a: &DMatrix<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n = a.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut rank_vecs = 0usize;
    let orthogonalize = |v: &mut DVector<f64>, basis: &Vec<DVector<f64>>| {
        for _ in 0..2 {
            for q in basis.iter() {
                let d = q.dot(v);
                if d != 0.0 {
                    *v -= q * d;
                }
            }
        }
    };
    for i in 0..a.nrows() {
        let row: DVector<f64> = a.row(i).transpose();
        // Dependence is judged relative to the row's own magnitude, so a
        // tiny but well-defined forcing row keeps its direction.
        let scale = row.norm();
        let mut v = row;
        orthogonalize(&mut v, &basis);
        let norm = v.norm();
        if scale > 0.0 && norm > 1e-12 * scale {
            basis.push(v / norm);
            rank_vecs += 1;
        }
    }
    let rank = rank_vecs;
    for i in 0..n {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        orthogonalize(&mut v, &basis);
        let norm = v.norm();
        if norm > 1e-10 {
            basis.push(v / norm);
        }
    }
    let null_basis = basis.split_off(rank);
    (basis, null_basis)
}

const DEGENERATE_STEPS_BEFORE_BLAND: usize = 10;

/// Solve the QP by a primal active-set method.
///
/// `warm_active` seeds the initial working set with inequality indices that
/// are active at the starting point; stale or dependent entries are dropped.
/// Equality constraints stay in the working set permanently. Infeasibility is
/// detected by a phase-1 subproblem. The result is deterministic in the
/// inputs.
pub fn solve_qp(data: &QpData, warm_active: Option<&[usize]>) -> Result<QpSolution, QpError> {
    let n = data.num_vars();
    if data.hessian.nrows() != n || data.hessian.ncols() != n {
        return Err(QpError::Dimension("hessian size does not match gradient".into()));
    }
    if data.a_eq.nrows() != data.b_eq.len() || data.a_in.nrows() != data.b_in.len() {
        return Err(QpError::Dimension("constraint matrix/vector row mismatch".into()));
    }
    if (data.a_eq.nrows() > 0 && data.a_eq.ncols() != n)
        || (data.a_in.nrows() > 0 && data.a_in.ncols() != n)
    {
        return Err(QpError::Dimension("constraint column count does not match variables".into()));
    }
    let asym = (&data.hessian - data.hessian.transpose()).amax();
    if asym > 1e-12 * data.hessian.amax().max(1.0) {
        return Err(QpError::NotSymmetric { asym });
    }

    let feastol = 1e-9 * data.b_eq.amax().max(data.b_in.amax()).max(1.0);

    // Starting point: minimum-norm solution of the equalities, then phase-1
    // if some inequality is violated there.
    let x0 = if data.a_eq.nrows() > 0 {
        let (x, consistent) = min_norm_solution(&data.a_eq, &(-&data.b_eq));
        if !consistent {
            return Err(QpError::Infeasible {
                violation: (&data.a_eq * &x + &data.b_eq).amax(),
            });
        }
        x
    } else {
        DVector::zeros(n)
    };
    // A warm start projects onto the manifold where the warm working set
    // holds with equality; when that point is feasible the solve begins
    // there, which makes re-solves of perturbed data one-step cheap.
    if let Some(warm) = warm_active {
        if let Some((x_w, seed)) = warm_manifold_start(data, warm, feastol) {
            return solve_from_feasible_seeded(data, x_w, seed, feastol);
        }
    }
    let violation = max_violation(data, &x0);
    let x0 = if violation > feastol { phase_one(data, &x0)? } else { x0 };

    solve_from_feasible(data, x0, warm_active, feastol)
}

/// Try to start on the manifold spanned by the equalities plus the warm
/// working set. Returns the projected point and the sanitized working set,
/// or `None` when the manifold is inconsistent or infeasible.
fn warm_manifold_start(
    data: &QpData,
    warm: &[usize],
    feastol: f64,
) -> Option<(DVector<f64>, Vec<usize>)> {
    let n = data.num_vars();
    let m_eq = data.a_eq.nrows();
    let m_in = data.a_in.nrows();
    let mut seed: Vec<usize> = warm.iter().copied().filter(|&i| i < m_in).collect();
    seed.sort_unstable();
    seed.dedup();
    // Keep a maximal independent subset, lowest indices first.
    let mut kept: Vec<usize> = Vec::new();
    for i in seed {
        if m_eq + kept.len() + 1 > n {
            break;
        }
        let mut candidate = kept.clone();
        candidate.push(i);
        let a_act = stack_rows(data, &candidate);
        let (row_basis, _) = rowspace_and_null(&a_act);
        if row_basis.len() == m_eq + candidate.len() {
            kept = candidate;
        }
    }
    let a_act = stack_rows(data, &kept);
    let b_act = stack_consts(data, &kept);
    if a_act.nrows() == 0 {
        return None;
    }
    let (x_w, consistent) = min_norm_solution(&a_act, &(-&b_act));
    if !consistent || max_violation(data, &x_w) > feastol {
        return None;
    }
    Some((x_w, kept))
}

fn max_violation(data: &QpData, x: &DVector<f64>) -> f64 {
    if data.a_in.nrows() == 0 {
        return 0.0;
    }
    (&data.a_in * x + &data.b_in)
        .iter()
        .fold(0.0f64, |a, &v| a.max(v))
}

/// Minimum-norm least-squares solution of `A x = b`; the flag reports whether
/// the system is consistent to a scaled tolerance. The rank cutoff is
/// relative to the largest singular value, so uniformly tiny but well-posed
/// systems keep their solution.
fn min_norm_solution(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    if smax == 0.0 {
        return (DVector::zeros(a.ncols()), b.amax() <= 1e-12);
    }
    let eps = 1e-12 * smax;
    match svd.solve(b, eps) {
        Ok(x) => {
            let resid = (a * &x - b).amax();
            let consistent = resid <= 1e-9 * b.amax().max(1.0);
            (x, consistent)
        }
        Err(_) => (DVector::zeros(a.ncols()), b.amax() <= 1e-12),
    }
}

/// Phase-1 feasibility subproblem: minimize the violation bound `s` with a
/// small quadratic regularization, starting from the equality-feasible `x0`.
fn phase_one(data: &QpData, x0: &DVector<f64>) -> Result<DVector<f64>, QpError> {
    let n = data.num_vars();
    let m_in = data.a_in.nrows();
    let eps = 1e-6;
    let na = n + 1;
    let mut h = DMatrix::identity(na, na) * eps;
    h[(n, n)] = eps;
    let mut c = DVector::zeros(na);
    for i in 0..n {
        c[i] = -eps * x0[i];
    }
    c[n] = 1.0;

    let mut a_eq = DMatrix::zeros(data.a_eq.nrows(), na);
    a_eq.view_mut((0, 0), (data.a_eq.nrows(), n)).copy_from(&data.a_eq);
    let mut a_in = DMatrix::zeros(m_in + 1, na);
    a_in.view_mut((0, 0), (m_in, n)).copy_from(&data.a_in);
    for i in 0..m_in {
        a_in[(i, n)] = -1.0;
    }
    a_in[(m_in, n)] = -1.0; // -s <= 0
    let mut b_in = DVector::zeros(m_in + 1);
    b_in.rows_mut(0, m_in).copy_from(&data.b_in);

    let aux = QpData {
        hessian: h,
        gradient: c,
        a_eq,
        b_eq: data.b_eq.clone(),
        a_in,
        b_in,
    };
    let s0 = max_violation(data, x0).max(0.0) * (1.0 + 1e-12) + 1e-14;
    let mut y0 = DVector::zeros(na);
    y0.rows_mut(0, n).copy_from(x0);
    y0[n] = s0;
    let feastol = 1e-9 * data.b_in.amax().max(1.0);
    let sol = solve_from_feasible(&aux, y0, None, feastol)?;
    let s_star = sol.x[n];
    if s_star > 100.0 * feastol {
        return Err(QpError::Infeasible { violation: s_star });
    }
    Ok(sol.x.rows(0, n).into_owned())
}

fn solve_from_feasible(
    data: &QpData,
    x: DVector<f64>,
    warm_active: Option<&[usize]>,
    feastol: f64,
) -> Result<QpSolution, QpError> {
    let n = data.num_vars();
    let m_eq = data.a_eq.nrows();
    let m_in = data.a_in.nrows();

    // Seed the working set: warm indices that are active at x and keep the
    // stacked constraint matrix at full row rank.
    let mut working: Vec<usize> = Vec::new();
    if let Some(warm) = warm_active {
        let mut seed: Vec<usize> = warm.iter().copied().filter(|&i| i < m_in).collect();
        seed.sort_unstable();
        seed.dedup();
        for i in seed {
            let v = data.a_in.row(i).transpose().dot(&x) + data.b_in[i];
            if v.abs() > 1e-8 * data.b_in[i].abs().max(1.0) {
                continue;
            }
            let mut candidate = working.clone();
            candidate.push(i);
            let a_act = stack_rows(data, &candidate);
            let (row_basis, _) = rowspace_and_null(&a_act);
            if row_basis.len() == m_eq + candidate.len() && m_eq + candidate.len() <= n {
                working = candidate;
            }
        }
    }
    solve_from_feasible_seeded(data, x, working, feastol)
}

fn solve_from_feasible_seeded(
    data: &QpData,
    mut x: DVector<f64>,
    mut working: Vec<usize>,
    feastol: f64,
) -> Result<QpSolution, QpError> {
    let n = data.num_vars();
    let m_eq = data.a_eq.nrows();
    let m_in = data.a_in.nrows();
    let max_iter = 50 * (n + m_in).max(1);

    let mut degenerate_steps = 0usize;
    let mut ws_changes = 0usize;

    for iter in 0..max_iter {
        let a_act = stack_rows(data, &working);
        let b_act = stack_consts(data, &working);
        let (row_basis, null_basis) = rowspace_and_null(&a_act);
        if row_basis.len() < a_act.nrows() {
            return Err(QpError::Numerical(format!(
                "working set became rank deficient at iteration {iter}"
            )));
        }

        let y = eqp_solve(data, &a_act, &b_act, &null_basis)?;
        let p = &y - &x;

        if p.amax() <= 1e-12 * x.amax().max(1.0) {
            // Stationary on the current working set: check multipliers.
            let mults = active_multipliers(data, &x, &a_act)?;
            let mult_tol = 1e-9 * mults.amax().max(1.0);
            let mut drop_idx: Option<usize> = None;
            if degenerate_steps >= DEGENERATE_STEPS_BEFORE_BLAND {
                // Bland: lowest index with a negative multiplier.
                for (k, _) in working.iter().enumerate() {
                    if mults[m_eq + k] < -mult_tol {
                        drop_idx = Some(k);
                        break;
                    }
                }
            } else {
                let mut worst = -mult_tol;
                for (k, _) in working.iter().enumerate() {
                    if mults[m_eq + k] < worst {
                        worst = mults[m_eq + k];
                        drop_idx = Some(k);
                    }
                }
            }
            match drop_idx {
                None => {
                    return finish(data, x, &working, mults, ws_changes, feastol);
                }
                Some(k) => {
                    working.remove(k);
                    ws_changes += 1;
                    degenerate_steps += 1;
                    continue;
                }
            }
        }

        // Ratio test against constraints outside the working set; ties go to
        // the lowest index.
        let mut alpha = 1.0f64;
        let mut blocker: Option<usize> = None;
        for i in 0..m_in {
            if working.contains(&i) {
                continue;
            }
            let row = data.a_in.row(i).transpose();
            let d = row.dot(&p);
            let dir_tol = 1e-11 * row.amax().max(1.0) * p.amax().max(1.0);
            if d > dir_tol {
                let room = -(row.dot(&x) + data.b_in[i]);
                let ai = (room / d).max(0.0);
                if ai < alpha - 1e-14 {
                    alpha = ai;
                    blocker = Some(i);
                }
            }
        }

        x += &p * alpha;
        match blocker {
            Some(i) => {
                let pos = working.binary_search(&i).unwrap_or_else(|e| e);
                working.insert(pos, i);
                ws_changes += 1;
                if alpha <= 1e-14 {
                    degenerate_steps += 1;
                } else {
                    degenerate_steps = 0;
                }
            }
            None => {
                degenerate_steps = 0;
            }
        }
    }

    Err(QpError::DegenerateCycle { iterations: max_iter })
}

fn stack_rows(data: &QpData, working: &[usize]) -> DMatrix<f64> {
    let n = data.num_vars();
    let m_eq = data.a_eq.nrows();
    let mut a = DMatrix::zeros(m_eq + working.len(), n);
    if m_eq > 0 {
        a.view_mut((0, 0), (m_eq, n)).copy_from(&data.a_eq);
    }
    for (k, &i) in working.iter().enumerate() {
        a.row_mut(m_eq + k).copy_from(&data.a_in.row(i));
    }
    a
}

fn stack_consts(data: &QpData, working: &[usize]) -> DVector<f64> {
    let m_eq = data.a_eq.nrows();
    let mut b = DVector::zeros(m_eq + working.len());
    b.rows_mut(0, m_eq).copy_from(&data.b_eq);
    for (k, &i) in working.iter().enumerate() {
        b[m_eq + k] = data.b_in[i];
    }
    b
}

/// Minimize the QP objective subject to `A_act y + b_act = 0`, assuming full
/// row rank. Only the reduced Hessian on the null space is factored.
fn eqp_solve(
    data: &QpData,
    a_act: &DMatrix<f64>,
    b_act: &DVector<f64>,
    null_basis: &[DVector<f64>],
) -> Result<DVector<f64>, QpError> {
    let n = data.num_vars();
    let y_p = if a_act.nrows() == 0 {
        DVector::zeros(n)
    } else {
        let gram = a_act * a_act.transpose();
        let u = cholesky_solve(&gram, &(-b_act))
            .map_err(|_| QpError::Numerical("singular working-set Gram matrix".into()))?;
        a_act.transpose() * u
    };
    if null_basis.is_empty() {
        return Ok(y_p);
    }
    let k = null_basis.len();
    let mut z = DMatrix::zeros(n, k);
    for (j, q) in null_basis.iter().enumerate() {
        z.column_mut(j).copy_from(q);
    }
    let h_red = z.transpose() * &data.hessian * &z;
    let g_red = z.transpose() * (&data.hessian * &y_p + &data.gradient);
    let d = cholesky_solve(&h_red, &(-g_red))?;
    Ok(y_p + z * d)
}

/// Multipliers of the active rows from the stationarity system
/// `Hx + c + A_actᵀ m = 0` (least-squares for safety; `A_act` has full row
/// rank along the iteration).
fn active_multipliers(
    data: &QpData,
    x: &DVector<f64>,
    a_act: &DMatrix<f64>,
) -> Result<DVector<f64>, QpError> {
    if a_act.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let rhs = -(&data.hessian * x + &data.gradient);
    let (m, _) = min_norm_solution(&a_act.transpose(), &rhs);
    Ok(m)
}

fn finish(
    data: &QpData,
    x: DVector<f64>,
    working: &[usize],
    mults: DVector<f64>,
    ws_changes: usize,
    feastol: f64,
) -> Result<QpSolution, QpError> {
    let m_eq = data.a_eq.nrows();
    let m_in = data.a_in.nrows();
    let eq_multipliers = mults.rows(0, m_eq).into_owned();
    let mut in_multipliers = DVector::zeros(m_in);
    for (k, &i) in working.iter().enumerate() {
        in_multipliers[i] = mults[m_eq + k].max(0.0);
    }

    // Verify the KKT system before handing the solution out.
    let mut r = (&data.hessian * &x
        + &data.gradient
        + data.a_eq.transpose() * &eq_multipliers
        + data.a_in.transpose() * &in_multipliers)
        .amax();
    if m_eq > 0 {
        r = r.max((&data.a_eq * &x + &data.b_eq).amax());
    }
    for i in 0..m_in {
        let v = data.a_in.row(i).transpose().dot(&x) + data.b_in[i];
        r = r.max(v.max(0.0));
        r = r.max((in_multipliers[i] * v).abs());
    }
    let scale = data.hessian.amax().max(data.gradient.amax()).max(1.0);
    if r > (1e-8 * scale).max(100.0 * feastol) {
        return Err(QpError::Numerical(format!("KKT residual {r:e} too large at optimum")));
    }
    Ok(QpSolution {
        x,
        eq_multipliers,
        in_multipliers,
        active_set: working.to_vec(),
        status: QpStatus::Optimal,
        working_set_changes: ws_changes,
        kkt_residual: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn qp(
        h: DMatrix<f64>,
        c: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> QpData {
        QpData { hessian: h, gradient: c, a_eq, b_eq, a_in, b_in }
    }

    #[test]
    fn cholesky_identity_and_diagonal() {
        let x = cholesky_solve(&DMatrix::identity(2, 2), &dvector![3.0, -2.0]).unwrap();
        assert_eq!(x, dvector![3.0, -2.0]);
        let x = cholesky_solve(&dmatrix![5.0, 0.0; 0.0, 10.0], &dvector![5.0, 10.0]).unwrap();
        assert!((x - dvector![1.0, 1.0]).amax() < 1e-14);
    }

    #[test]
    fn cholesky_reports_pivot_on_indefinite() {
        let m = dmatrix![1.0, 0.0; 0.0, -1.0];
        match cholesky_solve(&m, &dvector![1.0, 1.0]) {
            Err(QpError::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cholesky_residual_on_random_spd() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 6;
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let m = &a * a.transpose() + DMatrix::identity(n, n) * 0.5;
            let rhs = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let x = cholesky_solve(&m, &rhs).unwrap();
            let resid = (&m * &x - &rhs).amax();
            assert!(resid <= 1e-10 * rhs.amax().max(1.0), "residual {resid}");
        }
    }

    #[test]
    fn nearest_pd_keeps_pd_and_shifts_indefinite() {
        let m = dmatrix![2.0, 0.0; 0.0, 14.0];
        assert_eq!(nearest_pd(&m, 1e-6), m);
        let m = dmatrix![-1.0, 0.0; 0.0, 3.0];
        let out = nearest_pd(&m, 1e-6);
        let sigma = 1.0 + 1e-6;
        assert!((out[(0, 0)] - (-1.0 + sigma)).abs() < 1e-12);
        assert!((out[(1, 1)] - (3.0 + sigma)).abs() < 1e-12);
        assert!(min_eigenvalue(&out) >= 1e-6 - 1e-12);
    }

    #[test]
    fn nearest_pd_floor_holds_on_random_symmetric() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 5;
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-2.0..2.0));
            let m = (&a + a.transpose()) * 0.5;
            let out = nearest_pd(&m, 1e-6);
            assert!(min_eigenvalue(&out) >= 1e-6 - 1e-10);
        }
    }

    #[test]
    fn unconstrained_newton_step() {
        let data = qp(
            DMatrix::identity(2, 2) * 2.0,
            dvector![2.0, 0.0],
            DMatrix::zeros(0, 2),
            dvector![],
            DMatrix::zeros(0, 2),
            dvector![],
        );
        let sol = solve_qp(&data, None).unwrap();
        assert!((sol.x - dvector![-1.0, 0.0]).amax() < 1e-12);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn leyffer_branch_qp_at_half() {
        // min -2 dw1 + (2t+3t^2) dw2 + dw1^2 + (1+3t) dw2^2
        // s.t. dw1 = 0, -(t + dw2) <= 0, at t = 0.5
        let t: f64 = 0.5;
        let data = qp(
            dmatrix![2.0, 0.0; 0.0, 2.0*(1.0+3.0*t)],
            dvector![-2.0, 2.0 * t + 3.0 * t * t],
            dmatrix![1.0, 0.0],
            dvector![0.0],
            dmatrix![0.0, -1.0],
            dvector![-t],
        );
        let sol = solve_qp(&data, None).unwrap();
        assert!((sol.x[0]).abs() < 1e-15);
        assert!((sol.x[1] - (-0.35)).abs() < 1e-12);
    }

    #[test]
    fn equality_projection_is_exact_on_axis_rows() {
        // Fixing the second coordinate keeps the first exactly on the axis.
        let data = qp(
            dmatrix![2.0, 0.0; 0.0, 14.0],
            dvector![-2.0, 16.0],
            dmatrix![0.0, 1.0],
            dvector![2.0],
            dmatrix![-1.0, 0.0],
            dvector![0.0],
        );
        let sol = solve_qp(&data, None).unwrap();
        assert_eq!(sol.x[1], -2.0);
        assert!((sol.x[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn detects_infeasible_inequalities() {
        // x <= -1 and -x <= -1 cannot hold together.
        let data = qp(
            DMatrix::identity(1, 1),
            dvector![0.0],
            DMatrix::zeros(0, 1),
            dvector![],
            dmatrix![1.0; -1.0],
            dvector![1.0, 1.0],
        );
        match solve_qp(&data, None) {
            Err(QpError::Infeasible { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn phase_one_finds_interior_start() {
        // Feasible set x in [1, 2]; start guess 0 violates x >= 1.
        let data = qp(
            DMatrix::identity(1, 1) * 2.0,
            dvector![0.0],
            DMatrix::zeros(0, 1),
            dvector![],
            dmatrix![1.0; -1.0],
            dvector![-2.0, 1.0],
        );
        let sol = solve_qp(&data, None).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-9);
        assert!(sol.in_multipliers[1] >= 0.0);
    }

    #[test]
    fn degenerate_antiparallel_rows_are_handled() {
        // -x1 <= 0 and t*x1 <= 0 force x1 = 0; rows are antiparallel.
        let t = 0.5;
        let data = qp(
            dmatrix![2.0, 0.0; 0.0, 7.0],
            dvector![-2.0, 3.0],
            DMatrix::zeros(0, 2),
            dvector![],
            dmatrix![-1.0, 0.0; 0.0, -1.0; t, 0.0],
            dvector![0.0, -0.5, 0.0],
        );
        let sol = solve_qp(&data, None).unwrap();
        assert!(sol.x[0].abs() < 1e-12);
        assert!((sol.x[1] - (-3.0 / 7.0)).abs() < 1e-12);
        // The binding multiplier sits on one of the two dependent rows.
        assert!(sol.in_multipliers[0] > 0.0 || sol.in_multipliers[2] > 0.0);
    }

    #[test]
    fn indefinite_hessian_ok_when_reduced_is_pd() {
        // Full Hessian indefinite; on the null space of the forced equality
        // x1 = 0 the reduced Hessian is positive.
        let data = qp(
            dmatrix![2.0, 3.0; 3.0, 4.0],
            dvector![-2.0, 1.0],
            dmatrix![1.0, 0.0],
            dvector![0.0],
            DMatrix::zeros(0, 2),
            dvector![],
        );
        assert!(min_eigenvalue(&data.hessian) < 0.0);
        let sol = solve_qp(&data, None).unwrap();
        assert_eq!(sol.x[0], 0.0);
        assert!((sol.x[1] - (-0.25)).abs() < 1e-12);
    }

    #[test]
    fn warm_start_reconverges_in_at_most_one_change() {
        let data = qp(
            dmatrix![2.0, 0.0; 0.0, 2.0],
            dvector![-2.0, -4.0],
            DMatrix::zeros(0, 2),
            dvector![],
            dmatrix![1.0, 1.0; -1.0, 0.0],
            dvector![-1.0, 0.0],
        );
        let sol = solve_qp(&data, None).unwrap();
        let mut perturbed = data.clone();
        perturbed.gradient[0] += 1e-10;
        perturbed.b_in[0] += 1e-10;
        let warm = solve_qp(&perturbed, Some(&sol.active_set)).unwrap();
        assert!(warm.working_set_changes <= 1);
        assert!((warm.x - sol.x).amax() < 1e-8);
    }

    #[test]
    fn kkt_residual_is_verified_at_return() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.gen_range(1..=4);
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &a * a.transpose() + DMatrix::identity(n, n);
            let c = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let m = rng.gen_range(0..=3);
            let a_in = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            let b_in = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..0.5));
            let data = qp(h, c, DMatrix::zeros(0, n), dvector![], a_in, b_in);
            match solve_qp(&data, None) {
                Ok(sol) => assert!(sol.kkt_residual <= 1e-10),
                Err(QpError::Infeasible { .. }) => {}
                Err(e) => panic!("unexpected {e:?}"),
            }
        }
    }
}
