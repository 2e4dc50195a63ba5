//! Independent reference solvers used by the benchmark suite and the oracle
//! tests. The solution path is deliberately different from the production
//! solvers: QPs are solved by enumerating active subsets and factoring the
//! KKT saddle system, never by the active-set iteration in [`crate::denseqp`].

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::Rng;

use crate::denseqp::QpData;
use crate::model::{BranchAssignment, BranchSide};
use crate::qpcc::QpccData;

/// A QP solution found by subset enumeration.
#[derive(Debug, Clone)]
pub struct EnumeratedQp {
    pub x: DVector<f64>,
    pub objective: f64,
    pub eq_multipliers: DVector<f64>,
    pub in_multipliers: DVector<f64>,
    /// The active subset whose KKT system produced the minimizer.
    pub active_subset: Vec<usize>,
}

/// Solve the strictly convex QP by brute force: for every subset of the
/// inequality constraints, solve the equality-constrained KKT saddle system
/// and keep the KKT-feasible point of least objective. Returns `None` when
/// no subset certifies (the QP is infeasible).
pub fn qp_solve_by_enumeration(data: &QpData) -> Option<EnumeratedQp> {
    let n = data.num_vars();
    let m_eq = data.a_eq.nrows();
    let m_in = data.a_in.nrows();
    let scale = data.b_eq.amax().max(data.b_in.amax()).max(1.0);
    let feastol = 1e-8 * scale;
    let mut best: Option<EnumeratedQp> = None;
    for bits in 0..(1usize << m_in) {
        let subset: Vec<usize> = (0..m_in).filter(|i| bits >> i & 1 == 1).collect();
        let k = m_eq + subset.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&data.hessian);
        let mut rhs = DVector::zeros(n + k);
        for i in 0..n {
            rhs[i] = -data.gradient[i];
        }
        for j in 0..m_eq {
            for i in 0..n {
                kkt[(i, n + j)] = data.a_eq[(j, i)];
                kkt[(n + j, i)] = data.a_eq[(j, i)];
            }
            rhs[n + j] = -data.b_eq[j];
        }
        for (s, &row) in subset.iter().enumerate() {
            for i in 0..n {
                kkt[(i, n + m_eq + s)] = data.a_in[(row, i)];
                kkt[(n + m_eq + s, i)] = data.a_in[(row, i)];
            }
            rhs[n + m_eq + s] = -data.b_in[row];
        }
        let sol = match kkt.lu().solve(&rhs) {
            Some(s) => s,
            None => continue,
        };
        let x = sol.rows(0, n).into_owned();
        // Reject spurious solutions of singular-but-consistent systems.
        let mut lhs_ok = true;
        for j in 0..m_eq {
            let v = data.a_eq.row(j).transpose().dot(&x) + data.b_eq[j];
            lhs_ok &= v.abs() <= feastol;
        }
        if !lhs_ok {
            continue;
        }
        let mut feasible = true;
        for i in 0..m_in {
            let v = data.a_in.row(i).transpose().dot(&x) + data.b_in[i];
            feasible &= v <= feastol;
        }
        if !feasible {
            continue;
        }
        let mut in_multipliers = DVector::zeros(m_in);
        let mut signs_ok = true;
        for (s, &row) in subset.iter().enumerate() {
            let mu = sol[n + m_eq + s];
            signs_ok &= mu >= -1e-9;
            in_multipliers[row] = mu.max(0.0);
        }
        if !signs_ok {
            continue;
        }
        let objective = data.objective(&x);
        let replace = match &best {
            None => true,
            Some(b) => objective < b.objective - 1e-14,
        };
        if replace {
            best = Some(EnumeratedQp {
                x,
                objective,
                eq_multipliers: sol.rows(n, m_eq).into_owned(),
                in_multipliers,
                active_subset: subset,
            });
        }
    }
    best
}

/// A QPCC candidate found by the double-enumeration oracle.
#[derive(Debug, Clone)]
pub struct OracleCandidate {
    pub step: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub xi: DVector<f64>,
    pub nu: DVector<f64>,
    pub biactive: Vec<usize>,
    pub objective: f64,
    pub s_stationary: bool,
}

/// Enumerate the branches of the QPCC and solve every branch QP by subset
/// enumeration; deduplicate and flag exactly like the production path, but
/// through this independent solver.
pub fn qpcc_solve_by_enumeration(d: &QpccData, sign_tol: f64) -> Vec<OracleCandidate> {
    let n = d.num_vars();
    let m = d.num_pairs();
    let m_eq = d.eq_rows.nrows();
    let m_in = d.in_rows.nrows();
    let mut candidates: Vec<OracleCandidate> = Vec::new();
    for a in BranchAssignment::enumerate(m) {
        // Assemble the branch QP (same convention as the production path:
        // g rows first, then one inequality row per pair).
        let mut a_eq = DMatrix::zeros(m_eq + m, n);
        let mut b_eq = DVector::zeros(m_eq + m);
        if m_eq > 0 {
            a_eq.view_mut((0, 0), (m_eq, n)).copy_from(&d.eq_rows);
            b_eq.rows_mut(0, m_eq).copy_from(&d.eq_consts);
        }
        let mut a_in = DMatrix::zeros(m_in + m, n);
        let mut b_in = DVector::zeros(m_in + m);
        if m_in > 0 {
            a_in.view_mut((0, 0), (m_in, n)).copy_from(&d.in_rows);
            b_in.rows_mut(0, m_in).copy_from(&d.in_consts);
        }
        for (i, (pair, side)) in d.pairs.iter().zip(&a.0).enumerate() {
            let (eq_row, eq_c, in_row, in_c) = match side {
                BranchSide::FixG => (&pair.g_row, pair.g_const, &pair.h_row, pair.h_const),
                BranchSide::FixH => (&pair.h_row, pair.h_const, &pair.g_row, pair.g_const),
            };
            a_eq.row_mut(m_eq + i).copy_from(&eq_row.transpose());
            b_eq[m_eq + i] = eq_c;
            a_in.row_mut(m_in + i).copy_from(&(-in_row).transpose());
            b_in[m_in + i] = -in_c;
        }
        let qp = QpData {
            hessian: d.hessian.clone(),
            gradient: d.gradient.clone(),
            a_eq,
            b_eq,
            a_in,
            b_in,
        };
        let sol = match qp_solve_by_enumeration(&qp) {
            Some(s) => s,
            None => continue,
        };

        let lambda = sol.eq_multipliers.rows(0, m_eq).into_owned();
        let mu = sol.in_multipliers.rows(0, m_in).into_owned();
        let mut xi = DVector::zeros(m);
        let mut nu = DVector::zeros(m);
        let mut biactive = Vec::new();
        let mut s_stationary = true;
        for (i, (pair, side)) in d.pairs.iter().zip(&a.0).enumerate() {
            let eq_mult = sol.eq_multipliers[m_eq + i];
            let in_mult = sol.in_multipliers[m_in + i];
            match side {
                BranchSide::FixG => {
                    xi[i] = -eq_mult;
                    nu[i] = in_mult;
                }
                BranchSide::FixH => {
                    nu[i] = -eq_mult;
                    xi[i] = in_mult;
                }
            }
            let free_val = {
                let (row, c) = match side {
                    BranchSide::FixG => (&pair.h_row, pair.h_const),
                    BranchSide::FixH => (&pair.g_row, pair.g_const),
                };
                row.dot(&sol.x) + c
            };
            let in_subset = sol.active_subset.contains(&(m_in + i));
            if in_subset || free_val <= 0.0 {
                biactive.push(i);
                if xi[i] < -sign_tol || nu[i] < -sign_tol {
                    s_stationary = false;
                }
            }
        }
        let cand = OracleCandidate {
            step: sol.x,
            lambda,
            mu,
            xi,
            nu,
            biactive,
            objective: sol.objective,
            s_stationary,
        };
        match candidates.iter_mut().find(|c| (&c.step - &cand.step).amax() <= 1e-9) {
            None => candidates.push(cand),
            Some(existing) => {
                if cand.biactive.len() < existing.biactive.len() {
                    *existing = cand;
                }
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.objective.partial_cmp(&b.objective).unwrap().then_with(|| {
            for (x, y) in a.step.iter().zip(b.step.iter()) {
                match x.partial_cmp(y).unwrap() {
                    std::cmp::Ordering::Equal => continue,
                    ord => return ord,
                }
            }
            std::cmp::Ordering::Equal
        })
    });
    candidates
}

/// Random symmetric positive definite matrix with moderate conditioning.
pub fn random_spd(rng: &mut StdRng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * rng.gen_range(0.3..1.0)
}

/// Random strictly convex QP with up to `max_in` inequality rows.
pub fn random_qp(rng: &mut StdRng, max_n: usize, max_in: usize) -> QpData {
    let n = rng.gen_range(1..=max_n);
    let m_in = rng.gen_range(0..=max_in);
    QpData {
        hessian: random_spd(rng, n),
        gradient: DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0)),
        a_eq: DMatrix::zeros(0, n),
        b_eq: DVector::zeros(0),
        a_in: DMatrix::from_fn(m_in, n, |_, _| rng.gen_range(-1.0..1.0)),
        b_in: DVector::from_fn(m_in, |_, _| rng.gen_range(-1.2..0.4)),
    }
}

/// Random QPCC subproblem data with `1..=max_pairs` linearized pairs and up
/// to two extra inequality rows. Pair constants are nonnegative, with a
/// fifth of them exactly zero to exercise degenerate corners.
pub fn random_qpcc(rng: &mut StdRng, max_n: usize, max_pairs: usize) -> QpccData {
    let n = rng.gen_range(1..=max_n);
    let m = rng.gen_range(1..=max_pairs.min(n));
    let m_g = rng.gen_range(0..=2usize);
    let mut pairs = Vec::with_capacity(m);
    for _ in 0..m {
        let mut g_const = rng.gen_range(0.0..1.2);
        let mut h_const = rng.gen_range(0.0..1.2);
        if rng.gen_bool(0.2) {
            g_const = 0.0;
        } else if rng.gen_bool(0.25) {
            h_const = 0.0;
        }
        pairs.push(crate::qpcc::PairRows {
            g_row: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            g_const,
            h_row: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            h_const,
        });
    }
    QpccData {
        hessian: random_spd(rng, n),
        gradient: DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0)),
        eq_rows: DMatrix::zeros(0, n),
        eq_consts: DVector::zeros(0),
        in_rows: DMatrix::from_fn(m_g, n, |_, _| rng.gen_range(-1.0..1.0)),
        in_consts: DVector::from_fn(m_g, |_, _| rng.gen_range(-1.5..0.2)),
        pairs,
    }
}
