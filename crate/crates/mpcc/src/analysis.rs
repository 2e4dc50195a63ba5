//! Stationarity classification (W/A/C/M/S and B via branch enumeration),
//! constraint-qualification and second-order checks, convergence-order
//! estimation, and active-set stabilization reporting over solve traces.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::denseqp::{rowspace_and_null, symmetric_two_norm};
use crate::expr::EvalError;
use crate::model::{ComplementarityPartition, MpccProblem, PrimalDualPoint};
use crate::solver::SolveTrace;

/// The multiplier-based stationarity hierarchy, weakest to strongest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum StationarityClass {
    NotStationary,
    W,
    A,
    C,
    M,
    S,
}

impl std::fmt::Display for StationarityClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StationarityClass::NotStationary => "not-stationary",
            StationarityClass::W => "W",
            StationarityClass::A => "A",
            StationarityClass::C => "C",
            StationarityClass::M => "M",
            StationarityClass::S => "S",
        };
        f.write_str(s)
    }
}

/// Sign diagnostics for one biactive pair.
#[derive(Debug, Clone, Serialize)]
pub struct BiactiveDiagnostic {
    pub index: usize,
    pub xi: f64,
    pub nu: f64,
    pub passes_s: bool,
    pub passes_m: bool,
    pub passes_c: bool,
    pub passes_a: bool,
}

/// Output of [`classify_stationarity`].
#[derive(Debug, Clone, Serialize)]
pub struct StationarityReport {
    pub class: StationarityClass,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub xi: Vec<f64>,
    pub nu: Vec<f64>,
    pub biactive: Vec<BiactiveDiagnostic>,
    /// Residual of the stationarity linear system at the solved multipliers.
    pub residual: f64,
    pub mpcc_licq: bool,
    /// The active-gradient system was rank deficient; multipliers are the
    /// minimum-norm solution and the classification is best-effort.
    pub rank_deficient: bool,
    pub b_stationary: Option<bool>,
}

impl StationarityReport {
    /// The multipliers as a primal-dual point at `w`.
    pub fn point(&self, w: &[f64]) -> PrimalDualPoint {
        PrimalDualPoint {
            w: DVector::from_row_slice(w),
            lambda: DVector::from_row_slice(&self.lambda),
            mu: DVector::from_row_slice(&self.mu),
            xi: DVector::from_row_slice(&self.xi),
            nu: DVector::from_row_slice(&self.nu),
        }
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("point infeasible: violation {violation:e} exceeds tolerance {tol:e}")]
    Infeasible { violation: f64, tol: f64 },
    #[error("{0}")]
    Partition(#[from] crate::model::PartitionError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("degenerate pair count {count} exceeds the enumeration cap {cap}")]
    CapExceeded { count: usize, cap: usize },
    #[error("error sequence must have at least {min} strictly positive entries, got {got}")]
    BadErrorSequence { min: usize, got: usize },
    #[error("reference point is not S-stationary (classified {class})")]
    ReferenceNotS { class: StationarityClass },
}

/// Solve the stationarity system in the multipliers of the active
/// constraints and classify the point in the W/A/C/M/S hierarchy.
///
/// Multipliers are obtained by a minimum-norm least-squares solve of
/// `∇f + ∇h λ + ∇g_A μ − ∇G_act ξ − ∇H_act ν = 0`; under MPCC-LICQ this is
/// the unique multiplier vector. The M-test treats `ξν = 0` up to
/// `tol·max(1, |ξ|, |ν|)` so roundoff-sized products do not masquerade as
/// strict positivity.
pub fn classify_stationarity(
    p: &MpccProblem,
    w: &[f64],
    tol: f64,
) -> Result<StationarityReport, AnalysisError> {
    let violation = p.feasibility_violation(w)?;
    if violation > tol {
        return Err(AnalysisError::Infeasible { violation, tol });
    }
    let part = p.complementarity_partition(w, tol)?;
    let active_g: Vec<usize> = (0..p.num_inequalities())
        .filter_map(|i| {
            let v = p.inequalities[i].value(w).ok()?;
            (v.abs() <= tol).then_some(i)
        })
        .collect();
    let g_active = |i: usize| part.i_zero_plus.contains(&i) || part.i_zero_zero.contains(&i);
    let h_active = |i: usize| part.i_plus_zero.contains(&i) || part.i_zero_zero.contains(&i);

    // Column layout: λ | μ_A | ξ_act | ν_act.
    let n = p.num_vars();
    let m = p.num_pairs();
    let xi_cols: Vec<usize> = (0..m).filter(|&i| g_active(i)).collect();
    let nu_cols: Vec<usize> = (0..m).filter(|&i| h_active(i)).collect();
    let ncols = p.num_equalities() + active_g.len() + xi_cols.len() + nu_cols.len();
    let mut a = DMatrix::zeros(n, ncols);
    let mut col = 0;
    for e in &p.equalities {
        a.column_mut(col).copy_from(&e.gradient(w)?);
        col += 1;
    }
    for &i in &active_g {
        a.column_mut(col).copy_from(&p.inequalities[i].gradient(w)?);
        col += 1;
    }
    for &i in &xi_cols {
        a.column_mut(col).copy_from(&(-p.pairs[i].0.gradient(w)?));
        col += 1;
    }
    for &i in &nu_cols {
        a.column_mut(col).copy_from(&(-p.pairs[i].1.gradient(w)?));
        col += 1;
    }
    let grad_f = p.objective.gradient(w)?;
    let (sol, residual, rank) = if ncols == 0 {
        (DVector::zeros(0), grad_f.amax(), 0)
    } else {
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.amax();
        let eps = 1e-12 * smax.max(1.0);
        let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
        let sol = svd.solve(&(-&grad_f), eps).unwrap_or_else(|_| DVector::zeros(ncols));
        let residual = (&a * &sol + &grad_f).amax();
        (sol, residual, rank)
    };
    let rank_deficient = rank < ncols;

    let mut lambda = vec![0.0; p.num_equalities()];
    let mut mu = vec![0.0; p.num_inequalities()];
    let mut xi = vec![0.0; m];
    let mut nu = vec![0.0; m];
    let mut col = 0;
    for l in lambda.iter_mut() {
        *l = sol[col];
        col += 1;
    }
    for &i in &active_g {
        mu[i] = sol[col];
        col += 1;
    }
    for &i in &xi_cols {
        xi[i] = sol[col];
        col += 1;
    }
    for &i in &nu_cols {
        nu[i] = sol[col];
        col += 1;
    }

    let scale = grad_f.amax().max(1.0);
    let solvable = residual <= tol.max(1e-10) * scale;
    let mu_ok = active_g.iter().all(|&i| mu[i] >= -tol);

    let mut biactive = Vec::new();
    let mut s_ok = true;
    let mut m_ok = true;
    let mut c_ok = true;
    let mut a_ok = true;
    for &i in &part.i_zero_zero {
        let (x, v) = (xi[i], nu[i]);
        let scaling = x.abs().max(v.abs()).max(1.0);
        let ps = x >= -tol && v >= -tol;
        let pm = (x > tol && v > tol) || (x * v).abs() <= tol * scaling;
        let pc = x * v >= -tol * scaling;
        let pa = x >= -tol || v >= -tol;
        s_ok &= ps;
        m_ok &= pm;
        c_ok &= pc;
        a_ok &= pa;
        biactive.push(BiactiveDiagnostic {
            index: i,
            xi: x,
            nu: v,
            passes_s: ps,
            passes_m: pm,
            passes_c: pc,
            passes_a: pa,
        });
    }
    let class = if !(solvable && mu_ok) {
        StationarityClass::NotStationary
    } else if s_ok {
        StationarityClass::S
    } else if m_ok {
        StationarityClass::M
    } else if c_ok {
        StationarityClass::C
    } else if a_ok {
        StationarityClass::A
    } else {
        StationarityClass::W
    };
    // Hierarchy: every class passes all weaker tests.
    debug_assert!(class < StationarityClass::S || (m_ok && c_ok && a_ok));
    debug_assert!(class < StationarityClass::M || (c_ok && a_ok));
    debug_assert!(class < StationarityClass::C || a_ok);

    let licq = check_mpcc_licq(p, w, tol)?;
    Ok(StationarityReport {
        class,
        lambda,
        mu,
        xi,
        nu,
        biactive,
        residual,
        mpcc_licq: licq.holds,
        rank_deficient,
        b_stationary: None,
    })
}

/// Certificate for one branch in the B-stationarity check.
#[derive(Debug, Clone, Serialize)]
pub struct BranchCertificate {
    /// Degenerate pairs assigned to the G-side (`G_i = 0` equality) in this
    /// branch; the remaining degenerate pairs sit on the H-side.
    pub g_side_degenerate: Vec<usize>,
    pub certified: bool,
    /// Pairs whose multiplier sign condition fails in this branch.
    pub violations: Vec<usize>,
}

/// Output of [`check_b_stationarity`].
#[derive(Debug, Clone, Serialize)]
pub struct BStationarityReport {
    pub b_stationary: bool,
    pub certificates: Vec<BranchCertificate>,
    pub rank_deficient: bool,
}

/// B-stationarity via branch enumeration: the point must be stationary for
/// every branch NLP over the degenerate pairs. Under MPCC-LICQ the
/// multipliers are branch-independent (multiplier uniqueness), so the shared
/// stationarity system is solved once and each branch contributes its sign
/// conditions.
pub fn check_b_stationarity(
    p: &MpccProblem,
    w: &[f64],
    tol: f64,
    cap: usize,
) -> Result<BStationarityReport, AnalysisError> {
    let report = classify_stationarity(p, w, tol)?;
    let part = p.complementarity_partition(w, tol)?;
    let deg = &part.i_zero_zero;
    if deg.len() > cap {
        return Err(AnalysisError::CapExceeded { count: deg.len(), cap });
    }
    let stationary_base = report.class != StationarityClass::NotStationary;
    let mut certificates = Vec::new();
    let mut all = stationary_base;
    for bits in 0..(1usize << deg.len()) {
        let g_side: Vec<usize> =
            deg.iter().enumerate().filter(|(j, _)| bits >> j & 1 == 0).map(|(_, &i)| i).collect();
        let mut violations = Vec::new();
        for (j, &i) in deg.iter().enumerate() {
            let on_g_side = bits >> j & 1 == 0;
            // G-side branch: H_i >= 0 is an active inequality, so ν_i >= 0;
            // H-side branch symmetrically requires ξ_i >= 0.
            let ok = if on_g_side { report.nu[i] >= -tol } else { report.xi[i] >= -tol };
            if !ok {
                violations.push(i);
            }
        }
        let certified = stationary_base && violations.is_empty();
        all &= certified;
        certificates.push(BranchCertificate { g_side_degenerate: g_side, certified, violations });
    }
    Ok(BStationarityReport {
        b_stationary: all,
        certificates,
        rank_deficient: report.rank_deficient,
    })
}

/// Output of [`check_mpcc_licq`].
#[derive(Debug, Clone, Serialize)]
pub struct LicqReport {
    pub holds: bool,
    pub rank: usize,
    pub num_gradients: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// MPCC-LICQ: linear independence of the gradients of all equalities, active
/// inequalities, and the active pair sides (`G_i` for `i ∈ I0+ ∪ I00`, `H_i`
/// for `i ∈ I+0 ∪ I00`) — the LICQ of the relaxed NLP.
pub fn check_mpcc_licq(p: &MpccProblem, w: &[f64], tol: f64) -> Result<LicqReport, AnalysisError> {
    let part = p.complementarity_partition(w, tol)?;
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for e in &p.equalities {
        cols.push(e.gradient(w)?);
    }
    for e in &p.inequalities {
        if e.value(w)?.abs() <= tol {
            cols.push(e.gradient(w)?);
        }
    }
    for i in 0..p.num_pairs() {
        if part.i_zero_plus.contains(&i) || part.i_zero_zero.contains(&i) {
            cols.push(p.pairs[i].0.gradient(w)?);
        }
    }
    for i in 0..p.num_pairs() {
        if part.i_plus_zero.contains(&i) || part.i_zero_zero.contains(&i) {
            cols.push(p.pairs[i].1.gradient(w)?);
        }
    }
    if cols.is_empty() {
        return Ok(LicqReport { holds: true, rank: 0, num_gradients: 0, sigma_min: 0.0, sigma_max: 0.0 });
    }
    let n = p.num_vars();
    let mut a = DMatrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        a.column_mut(j).copy_from(c);
    }
    let svd = a.svd(false, false);
    let sigma_max = svd.singular_values.amax();
    let sigma_min = svd.singular_values.iter().fold(f64::INFINITY, |acc, &s| acc.min(s));
    let rank = svd.singular_values.iter().filter(|&&s| s > tol * sigma_max.max(1.0)).count();
    Ok(LicqReport {
        holds: rank == cols.len(),
        rank,
        num_gradients: cols.len(),
        sigma_min,
        sigma_max,
    })
}

/// Output of [`check_mpcc_ssosc`].
#[derive(Debug, Clone, Serialize)]
pub struct SsoscReport {
    pub holds: bool,
    /// Minimum reduced-Hessian eigenvalue per branch; `None` when the strong
    /// critical subspace of the branch is trivial.
    pub branch_min_eigenvalues: Vec<Option<f64>>,
}

/// MPCC-SSOSC at an S-stationary point with multipliers `z`: for every
/// branch over the degenerate pairs, the Hessian of the MPCC-Lagrangian must
/// be positive definite on the branch's strong critical subspace.
pub fn check_mpcc_ssosc(
    p: &MpccProblem,
    z: &PrimalDualPoint,
    tol: f64,
) -> Result<SsoscReport, AnalysisError> {
    let w = z.w.as_slice();
    let part = p.complementarity_partition(w, tol)?;
    let deg = &part.i_zero_zero;
    let hess = p.lagrangian_hessian(z)?;
    let thr = tol * symmetric_two_norm(&hess).max(1.0);
    let n = p.num_vars();
    let mut holds = true;
    let mut branch_min = Vec::new();
    for bits in 0..(1usize << deg.len()) {
        let mut rows: Vec<DVector<f64>> = Vec::new();
        for e in &p.equalities {
            rows.push(e.gradient(w)?);
        }
        for (i, e) in p.inequalities.iter().enumerate() {
            if e.value(w)?.abs() <= tol && z.mu[i] > tol {
                rows.push(e.gradient(w)?);
            }
        }
        for &i in &part.i_zero_plus {
            rows.push(p.pairs[i].0.gradient(w)?);
        }
        for &i in &part.i_plus_zero {
            rows.push(p.pairs[i].1.gradient(w)?);
        }
        for (j, &i) in deg.iter().enumerate() {
            let on_g_side = bits >> j & 1 == 0;
            if on_g_side {
                // G_i = 0 fixed; H_i is active inequality, hardened when ν_i > 0.
                rows.push(p.pairs[i].0.gradient(w)?);
                if z.nu[i] > tol {
                    rows.push(p.pairs[i].1.gradient(w)?);
                }
            } else {
                rows.push(p.pairs[i].1.gradient(w)?);
                if z.xi[i] > tol {
                    rows.push(p.pairs[i].0.gradient(w)?);
                }
            }
        }
        let mut a = DMatrix::zeros(rows.len(), n);
        for (r, v) in rows.iter().enumerate() {
            a.row_mut(r).copy_from(&v.transpose());
        }
        let (_, null_basis) = rowspace_and_null(&a);
        if null_basis.is_empty() {
            branch_min.push(None);
            continue;
        }
        let mut zb = DMatrix::zeros(n, null_basis.len());
        for (j, q) in null_basis.iter().enumerate() {
            zb.column_mut(j).copy_from(q);
        }
        let reduced = zb.transpose() * &hess * &zb;
        let min_eig = crate::denseqp::min_eigenvalue(&reduced);
        holds &= min_eig > thr;
        branch_min.push(Some(min_eig));
    }
    Ok(SsoscReport { holds, branch_min_eigenvalues: branch_min })
}

/// Output of [`check_ulsc_pulsc`].
#[derive(Debug, Clone, Serialize)]
pub struct UlscReport {
    pub ulsc: bool,
    pub pulsc: bool,
    /// Degenerate pairs with at least one strictly positive multiplier.
    pub i00_plus: Vec<usize>,
    /// Degenerate pairs with both multipliers at zero.
    pub i00_zero: Vec<usize>,
}

/// Upper-level strict complementarity and its partial variant at an
/// S-stationary point, together with the `I00^+ / I00^0` split.
pub fn check_ulsc_pulsc(
    report: &StationarityReport,
    part: &ComplementarityPartition,
    tol: f64,
) -> UlscReport {
    let mut ulsc = true;
    let mut pulsc = true;
    let mut i00_plus = Vec::new();
    let mut i00_zero = Vec::new();
    for &i in &part.i_zero_zero {
        let (x, v) = (report.xi[i], report.nu[i]);
        ulsc &= x > tol && v > tol;
        pulsc &= x > tol || v > tol;
        if x > tol || v > tol {
            i00_plus.push(i);
        } else {
            i00_zero.push(i);
        }
    }
    UlscReport { ulsc, pulsc, i00_plus, i00_zero }
}

/// Convergence-order classification of an error sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OrderClass {
    Linear,
    Superlinear,
    Quadratic,
    Inconclusive,
}

/// Per-step ratios of an error sequence.
#[derive(Debug, Clone, Serialize)]
pub struct RatioRow {
    pub k: usize,
    /// `e_{k+1} / e_k`
    pub rho: f64,
    /// `e_{k+1} / e_k²`
    pub q: f64,
}

/// Output of [`estimate_order`].
#[derive(Debug, Clone, Serialize)]
pub struct OrderEstimate {
    pub classification: OrderClass,
    pub linear_rate: Option<f64>,
    pub quadratic_constant: Option<f64>,
    pub ratios: Vec<RatioRow>,
}

/// Classify the convergence order of a strictly positive error sequence.
///
/// Thresholds (artifact conventions; the underlying definitions are
/// asymptotic): the superlinear regime is the maximal suffix with
/// `ρ_k = e_{k+1}/e_k ≤ 0.1`. With at least two such ratios decaying by an
/// overall factor two, growth of `q_k = e_{k+1}/e_k²` by more than 10x
/// separates superlinear from (at-least-)quadratic. Otherwise the last four
/// ratios must sit in `(0.01, 1)` within ±20% of their mean to classify as
/// linear, with the mean as the fitted rate.
pub fn estimate_order(errors: &[f64]) -> Result<OrderEstimate, AnalysisError> {
    let errors: Vec<f64> = errors.iter().copied().take_while(|&e| e > 0.0).collect();
    if errors.len() < 4 {
        return Err(AnalysisError::BadErrorSequence { min: 4, got: errors.len() });
    }
    let ratios: Vec<RatioRow> = errors
        .windows(2)
        .enumerate()
        .map(|(k, wdw)| RatioRow { k, rho: wdw[1] / wdw[0], q: wdw[1] / (wdw[0] * wdw[0]) })
        .collect();

    // Superlinear regime: maximal suffix with rho <= 0.1.
    let suffix_start = ratios
        .iter()
        .rposition(|r| r.rho > 0.1)
        .map(|i| i + 1)
        .unwrap_or(0);
    let suffix = &ratios[suffix_start..];
    if suffix.len() >= 2 && suffix.last().unwrap().rho <= 0.5 * suffix[0].rho {
        let q_first = suffix[0].q;
        let q_last = suffix.last().unwrap().q;
        if q_last >= 10.0 * q_first {
            return Ok(OrderEstimate {
                classification: OrderClass::Superlinear,
                linear_rate: None,
                quadratic_constant: None,
                ratios,
            });
        }
        let mut qs: Vec<f64> = suffix.iter().map(|r| r.q).collect();
        qs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let constant = qs[qs.len() / 2];
        return Ok(OrderEstimate {
            classification: OrderClass::Quadratic,
            linear_rate: None,
            quadratic_constant: Some(constant),
            ratios,
        });
    }

    // Linear: the last up-to-four ratios stabilize in (0.01, 1) within ±20%.
    let tail_len = ratios.len().min(4);
    let tail = &ratios[ratios.len() - tail_len..];
    let mean = tail.iter().map(|r| r.rho).sum::<f64>() / tail_len as f64;
    let in_band = tail
        .iter()
        .all(|r| r.rho > 0.01 && r.rho < 1.0 && (r.rho - mean).abs() <= 0.2 * mean);
    if in_band {
        return Ok(OrderEstimate {
            classification: OrderClass::Linear,
            linear_rate: Some(mean),
            quadratic_constant: None,
            ratios,
        });
    }
    Ok(OrderEstimate {
        classification: OrderClass::Inconclusive,
        linear_rate: None,
        quadratic_constant: None,
        ratios,
    })
}

/// Least-squares fit of the contraction inequality
/// `e_{k+1} = α e_k + β e_{k+1}²` over the trailing pairs of an error
/// sequence (up to four pairs, pairs with a zero predecessor dropped).
pub fn fit_contraction(errors: &[f64]) -> Option<(f64, f64)> {
    let pairs: Vec<(f64, f64)> = errors
        .windows(2)
        .filter(|wdw| wdw[0] > 0.0)
        .map(|wdw| (wdw[0], wdw[1]))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let tail = &pairs[pairs.len().saturating_sub(4)..];
    let (mut sxx, mut sxu, mut suu, mut sxy, mut suy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(e, e1) in tail {
        let u = e1 * e1;
        sxx += e * e;
        sxu += e * u;
        suu += u * u;
        sxy += e * e1;
        suy += u * e1;
    }
    let det = sxx * suu - sxu * sxu;
    if det.abs() <= 1e-300 || suu == 0.0 {
        // Degenerate normal equations (e.g. all targets zero): slope fit.
        if sxx == 0.0 {
            return None;
        }
        return Some((sxy / sxx, 0.0));
    }
    let alpha = (sxy * suu - suy * sxu) / det;
    let beta = (sxx * suy - sxu * sxy) / det;
    Some((alpha, beta))
}

/// How an index attained its reference activity status along a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Identification {
    /// Held from this step record onward.
    Finite { first_record: usize },
    /// Never attained at any finite iterate of the trace.
    AsymptoticOnly,
    /// Attained and lost again; no stable suffix.
    NotStabilized,
}

/// Status of one inequality or pair index relative to the reference point.
#[derive(Debug, Clone, Serialize)]
pub struct IndexIdentification {
    pub index: usize,
    /// `"A+"`, `"A0"`, `"I0+"`, `"I+0"`, `"I00+"` or `"I000"`.
    pub reference_status: String,
    pub identification: Identification,
}

/// Per-step-record chain checks of the stabilization containments.
#[derive(Debug, Clone, Serialize)]
pub struct StabilizationRow {
    pub record: usize,
    pub inequality_chain_holds: bool,
    pub pair_chain_holds: bool,
}

/// Output of [`stabilization_report`].
#[derive(Debug, Clone, Serialize)]
pub struct StabilizationReport {
    /// First step record from which the inequality active-set containments
    /// hold for the rest of the trace.
    pub inequality_chain_from: Option<usize>,
    /// First step record from which all three pair-partition containments
    /// hold for the rest of the trace.
    pub pair_chain_from: Option<usize>,
    pub rows: Vec<StabilizationRow>,
    pub inequality_flags: Vec<IndexIdentification>,
    pub pair_flags: Vec<IndexIdentification>,
}

fn subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|i| b.contains(i))
}

fn stable_suffix_start(hits: &[bool]) -> Option<usize> {
    if hits.is_empty() || !*hits.last().unwrap() {
        return None;
    }
    let mut start = hits.len() - 1;
    while start > 0 && hits[start - 1] {
        start -= 1;
    }
    Some(start)
}

fn identification_of(hits: &[bool]) -> Identification {
    match stable_suffix_start(hits) {
        Some(first_record) => Identification::Finite { first_record },
        None => {
            if hits.iter().any(|&h| h) {
                Identification::NotStabilized
            } else {
                Identification::AsymptoticOnly
            }
        }
    }
}

/// Monitor the active-set stabilization of a solve trace against a
/// classifier-verified S-stationary reference.
///
/// Activity along the trace is read combinatorially from the subproblem
/// solutions stored in the trace (working sets and pair partitions), so the
/// report distinguishes finite identification from asymptotic-only
/// identification without tolerance artifacts near convergence. Step record
/// `j` describes the subproblem solved at iterate `j`.
pub fn stabilization_report(
    trace: &SolveTrace,
    p: &MpccProblem,
    reference: &PrimalDualPoint,
    tol: f64,
) -> Result<StabilizationReport, AnalysisError> {
    let ref_report = classify_stationarity(p, reference.w.as_slice(), tol)?;
    if ref_report.class != StationarityClass::S {
        return Err(AnalysisError::ReferenceNotS { class: ref_report.class });
    }
    let w_ref = reference.w.as_slice();
    let part_ref = p.complementarity_partition(w_ref, tol)?;
    let mut a_plus: Vec<usize> = Vec::new();
    let mut a_zero: Vec<usize> = Vec::new();
    for (i, e) in p.inequalities.iter().enumerate() {
        if e.value(w_ref)?.abs() <= tol {
            if reference.mu[i] > tol {
                a_plus.push(i);
            } else {
                a_zero.push(i);
            }
        }
    }
    let i00_plus: Vec<usize> = part_ref
        .i_zero_zero
        .iter()
        .copied()
        .filter(|&i| reference.xi[i] > tol || reference.nu[i] > tol)
        .collect();
    let i00_zero: Vec<usize> = part_ref
        .i_zero_zero
        .iter()
        .copied()
        .filter(|&i| !(reference.xi[i] > tol || reference.nu[i] > tol))
        .collect();

    let step_records: Vec<usize> =
        (0..trace.records.len()).filter(|&j| trace.records[j].step.is_some()).collect();

    let mut rows = Vec::new();
    let mut ineq_hits: Vec<Vec<bool>> = vec![Vec::new(); p.num_inequalities()];
    let mut pair_hits: Vec<Vec<bool>> = vec![Vec::new(); p.num_pairs()];
    let mut ineq_ok = Vec::new();
    let mut pair_ok = Vec::new();
    for (pos, &j) in step_records.iter().enumerate() {
        let rec = &trace.records[j];
        let active = &rec.g_active;
        // Strictness is judged with the multipliers the subproblem produced,
        // which live on the following record.
        let mu_next = trace.records.get(j + 1).map(|r| &r.mu);
        let a_plus_k: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| mu_next.map(|m| m[i] > tol).unwrap_or(false))
            .collect();
        let union: Vec<usize> = a_plus.iter().chain(a_zero.iter()).copied().collect();
        let ineq_chain =
            a_plus_k == a_plus && subset(&a_plus, active) && subset(active, &union);
        let pair_chain = match &rec.qp_partition {
            None => p.num_pairs() == 0,
            Some(part) => {
                let union0p: Vec<usize> =
                    part_ref.i_zero_plus.iter().chain(i00_zero.iter()).copied().collect();
                let unionp0: Vec<usize> =
                    part_ref.i_plus_zero.iter().chain(i00_zero.iter()).copied().collect();
                let union00: Vec<usize> = i00_plus.iter().chain(i00_zero.iter()).copied().collect();
                subset(&part_ref.i_zero_plus, &part.i_zero_plus)
                    && subset(&part.i_zero_plus, &union0p)
                    && subset(&part_ref.i_plus_zero, &part.i_plus_zero)
                    && subset(&part.i_plus_zero, &unionp0)
                    && subset(&i00_plus, &part.i_zero_zero)
                    && subset(&part.i_zero_zero, &union00)
            }
        };
        rows.push(StabilizationRow {
            record: pos,
            inequality_chain_holds: ineq_chain,
            pair_chain_holds: pair_chain,
        });
        ineq_ok.push(ineq_chain);
        pair_ok.push(pair_chain);
        for i in 0..p.num_inequalities() {
            ineq_hits[i].push(active.contains(&i));
        }
        for i in 0..p.num_pairs() {
            let hit = match &rec.qp_partition {
                None => false,
                Some(part) => {
                    if part_ref.i_zero_plus.contains(&i) {
                        part.i_zero_plus.contains(&i)
                    } else if part_ref.i_plus_zero.contains(&i) {
                        part.i_plus_zero.contains(&i)
                    } else {
                        part.i_zero_zero.contains(&i)
                    }
                }
            };
            pair_hits[i].push(hit);
        }
    }

    let inequality_flags = (0..p.num_inequalities())
        .filter_map(|i| {
            let status = if a_plus.contains(&i) {
                "A+"
            } else if a_zero.contains(&i) {
                "A0"
            } else {
                return None;
            };
            Some(IndexIdentification {
                index: i,
                reference_status: status.to_string(),
                identification: identification_of(&ineq_hits[i]),
            })
        })
        .collect();
    let pair_flags = (0..p.num_pairs())
        .map(|i| {
            let status = if part_ref.i_zero_plus.contains(&i) {
                "I0+"
            } else if part_ref.i_plus_zero.contains(&i) {
                "I+0"
            } else if i00_plus.contains(&i) {
                "I00+"
            } else {
                "I000"
            };
            IndexIdentification {
                index: i,
                reference_status: status.to_string(),
                identification: identification_of(&pair_hits[i]),
            }
        })
        .collect();

    Ok(StabilizationReport {
        inequality_chain_from: stable_suffix_start(&ineq_ok),
        pair_chain_from: stable_suffix_start(&pair_ok),
        rows,
        inequality_flags,
        pair_flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_model, NlpPoint, NlpProblem};
    use crate::solver::{sqp_solve, sqpcc_solve, SolveOptions, SolveStatus};
    use nalgebra::dvector;

    const LEYFFER: &str = "\
var w1, w2;
minimize (w1-1)^2 + w2^2 + w2^3;
subject to:
  comp w1 , w2;
";

    const EXAMPLE51: &str = "\
var w1, w2;
minimize w1 + w1^2 + w1^3 + (w2-1)^4 + (w2-1)^2;
subject to:
  comp w1 , w2;
";

    const EXAMPLE54: &str = "\
var w1, w2;
minimize w1^4 + w1^2 + w2^4 + w2^2;
subject to:
  comp w1 , w2;
";

    #[test]
    fn classify_leyffer_origin_as_m() {
        let p = parse_model(LEYFFER).unwrap();
        let r = classify_stationarity(&p, &[0.0, 0.0], 1e-8).unwrap();
        assert_eq!(r.class, StationarityClass::M);
        assert!((r.xi[0] - (-2.0)).abs() < 1e-10);
        assert!(r.nu[0].abs() < 1e-10);
        assert!(r.mpcc_licq);
    }

    #[test]
    fn classify_leyffer_minimizer_as_s() {
        let p = parse_model(LEYFFER).unwrap();
        let r = classify_stationarity(&p, &[1.0, 0.0], 1e-8).unwrap();
        assert_eq!(r.class, StationarityClass::S);
        assert!(r.nu[0].abs() < 1e-12);
        assert!(r.xi[0].abs() < 1e-12);
    }

    #[test]
    fn classify_example51_origin_by_the_derived_multipliers() {
        // The solved stationarity system gives (xi, nu) = (1, -6); the sign
        // rules then put the origin in class A.
        let p = parse_model(EXAMPLE51).unwrap();
        let r = classify_stationarity(&p, &[0.0, 0.0], 1e-8).unwrap();
        assert!((r.xi[0] - 1.0).abs() < 1e-10);
        assert!((r.nu[0] - (-6.0)).abs() < 1e-10);
        assert_eq!(r.class, StationarityClass::A);
    }

    #[test]
    fn classify_example54_origin_as_s_with_zero_multipliers() {
        let p = parse_model(EXAMPLE54).unwrap();
        let r = classify_stationarity(&p, &[0.0, 0.0], 1e-8).unwrap();
        assert_eq!(r.class, StationarityClass::S);
        assert!(r.xi[0].abs() < 1e-12 && r.nu[0].abs() < 1e-12);
        let part = p.complementarity_partition(&[0.0, 0.0], 1e-8).unwrap();
        let u = check_ulsc_pulsc(&r, &part, 1e-8);
        assert!(!u.ulsc && !u.pulsc);
        assert_eq!(u.i00_zero, vec![0]);
    }

    #[test]
    fn classify_rejects_infeasible_points() {
        let p = parse_model(LEYFFER).unwrap();
        assert!(matches!(
            classify_stationarity(&p, &[0.5, 0.5], 1e-8),
            Err(AnalysisError::Infeasible { .. })
        ));
    }

    #[test]
    fn b_stationarity_matches_the_paper_verdicts() {
        let p = parse_model(LEYFFER).unwrap();
        let r = check_b_stationarity(&p, &[1.0, 0.0], 1e-8, 16).unwrap();
        assert!(r.b_stationary);
        assert_eq!(r.certificates.len(), 1);

        let r = check_b_stationarity(&p, &[0.0, 0.0], 1e-8, 16).unwrap();
        assert!(!r.b_stationary);
        // The H-side branch demands xi >= 0 but the system forces xi = -2.
        let failing: Vec<_> = r.certificates.iter().filter(|c| !c.certified).collect();
        assert_eq!(failing.len(), 1);
        assert!(failing[0].g_side_degenerate.is_empty());

        let ex54 = parse_model(EXAMPLE54).unwrap();
        let r = check_b_stationarity(&ex54, &[0.0, 0.0], 1e-8, 16).unwrap();
        assert!(r.b_stationary);
        assert_eq!(r.certificates.len(), 2);
    }

    #[test]
    fn b_equals_s_under_licq_on_registry_points() {
        for (src, pts) in [
            (LEYFFER, vec![[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]]),
            (EXAMPLE51, vec![[0.0, 1.0], [0.0, 0.0], [2.0, 0.0]]),
            (EXAMPLE54, vec![[0.0, 0.0], [0.3, 0.0]]),
        ] {
            let p = parse_model(src).unwrap();
            for w in pts {
                let licq = check_mpcc_licq(&p, &w, 1e-8).unwrap();
                if !licq.holds {
                    continue;
                }
                let cls = classify_stationarity(&p, &w, 1e-8).unwrap();
                let b = check_b_stationarity(&p, &w, 1e-8, 16).unwrap();
                assert_eq!(
                    b.b_stationary,
                    cls.class == StationarityClass::S,
                    "mismatch at {w:?}: B = {}, class = {}",
                    b.b_stationary,
                    cls.class
                );
            }
        }
    }

    #[test]
    fn licq_on_examples_and_a_degenerate_model() {
        let p = parse_model(LEYFFER).unwrap();
        for w in [[1.0, 0.0], [0.0, 0.0], [0.0, 2.0], [3.0, 0.0]] {
            assert!(check_mpcc_licq(&p, &w, 1e-8).unwrap().holds);
        }
        let ex51 = parse_model(EXAMPLE51).unwrap();
        let r = check_mpcc_licq(&ex51, &[0.0, 0.0], 1e-8).unwrap();
        assert!(r.holds);
        assert_eq!(r.rank, 2);

        // g and -g both active: dependent gradients.
        let dup = parse_model("var x; minimize x^2; subject to: x <= 0; (-1)*x <= 0;").unwrap();
        let r = check_mpcc_licq(&dup, &[0.0], 1e-8).unwrap();
        assert!(!r.holds);
    }

    #[test]
    fn ssosc_verdicts() {
        let p = parse_model(LEYFFER).unwrap();
        let r = classify_stationarity(&p, &[1.0, 0.0], 1e-8).unwrap();
        let z = r.point(&[1.0, 0.0]);
        assert!(check_mpcc_ssosc(&p, &z, 1e-8).unwrap().holds);

        let ex54 = parse_model(EXAMPLE54).unwrap();
        let r = classify_stationarity(&ex54, &[0.0, 0.0], 1e-8).unwrap();
        let z = r.point(&[0.0, 0.0]);
        let rep = check_mpcc_ssosc(&ex54, &z, 1e-8).unwrap();
        assert!(rep.holds);
        for eig in rep.branch_min_eigenvalues.iter().flatten() {
            assert!((eig - 2.0).abs() < 1e-12);
        }

        let toy = parse_model(
            "var w1, w2; minimize (-1)*w1^2 + (-1)*w2^2;\nsubject to:\n  comp w1 , w2;",
        )
        .unwrap();
        let r = classify_stationarity(&toy, &[0.0, 0.0], 1e-8).unwrap();
        assert_eq!(r.class, StationarityClass::S);
        let z = r.point(&[0.0, 0.0]);
        assert!(!check_mpcc_ssosc(&toy, &z, 1e-8).unwrap().holds);
    }

    #[test]
    fn ulsc_vacuous_without_degenerate_pairs_and_split_otherwise() {
        let p = parse_model(LEYFFER).unwrap();
        let r = classify_stationarity(&p, &[1.0, 0.0], 1e-8).unwrap();
        let part = p.complementarity_partition(&[1.0, 0.0], 1e-8).unwrap();
        let u = check_ulsc_pulsc(&r, &part, 1e-8);
        assert!(u.ulsc && u.pulsc);

        // Synthetic report with xi = 1, nu = 0 on one biactive pair.
        let mut synth = r.clone();
        synth.xi = vec![1.0];
        synth.nu = vec![0.0];
        let part = ComplementarityPartition {
            i_zero_plus: vec![],
            i_plus_zero: vec![],
            i_zero_zero: vec![0],
            tol: 1e-8,
        };
        let u = check_ulsc_pulsc(&synth, &part, 1e-8);
        assert!(!u.ulsc && u.pulsc);
        assert_eq!(u.i00_plus, vec![0]);
    }

    #[test]
    fn estimate_order_canonical_sequences() {
        let r = estimate_order(&[1e-1, 1e-2, 1e-4, 1e-8, 1e-16]).unwrap();
        assert_eq!(r.classification, OrderClass::Quadratic);
        assert!((r.quadratic_constant.unwrap() - 1.0).abs() < 1e-12);

        let geo: Vec<f64> = (0..11).map(|k| 0.5f64.powi(k)).collect();
        let r = estimate_order(&geo).unwrap();
        assert_eq!(r.classification, OrderClass::Linear);
        assert!((r.linear_rate.unwrap() - 0.5).abs() < 0.025);

        // Secant-flavored superlinear: e_{k+1} = e_k * e_{k-1}.
        let mut e = vec![0.5f64, 0.3];
        for k in 2..10 {
            let v: f64 = e[k - 1] * e[k - 2];
            e.push(v);
        }
        let r = estimate_order(&e).unwrap();
        assert_eq!(r.classification, OrderClass::Superlinear);

        let r = estimate_order(&[1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.classification, OrderClass::Inconclusive);

        assert!(matches!(
            estimate_order(&[1.0, 0.5]),
            Err(AnalysisError::BadErrorSequence { .. })
        ));
    }

    #[test]
    fn estimate_order_recovers_linear_rates_within_five_percent() {
        for alpha in [0.2f64, 0.5, 0.9] {
            let e: Vec<f64> = (0..20).map(|k| 3.0 * alpha.powi(k)).collect();
            let r = estimate_order(&e).unwrap();
            assert_eq!(r.classification, OrderClass::Linear, "alpha = {alpha}");
            let fitted = r.linear_rate.unwrap();
            assert!((fitted - alpha).abs() <= 0.05 * alpha, "alpha {alpha} fitted {fitted}");
        }
    }

    #[test]
    fn stabilization_weak_constraint_is_asymptotic_only() {
        let p = parse_model("var w; minimize w^2 + w^4; subject to: w >= 0;").unwrap();
        let nlp = NlpProblem {
            vars: p.var_names().to_vec(),
            objective: p.objective.clone(),
            equalities: vec![],
            inequalities: p.inequalities.clone(),
        };
        let z0 = NlpPoint::from_primal(&nlp, dvector![0.4]);
        let trace = sqp_solve(&nlp, &z0, &SolveOptions::default()).unwrap();
        let reference = PrimalDualPoint {
            w: dvector![0.0],
            lambda: dvector![],
            mu: dvector![0.0],
            xi: dvector![],
            nu: dvector![],
        };
        let rep = stabilization_report(&trace, &p, &reference, 1e-8).unwrap();
        assert_eq!(rep.inequality_flags.len(), 1);
        assert_eq!(rep.inequality_flags[0].reference_status, "A0");
        assert_eq!(rep.inequality_flags[0].identification, Identification::AsymptoticOnly);
    }

    #[test]
    fn stabilization_strict_constraint_is_identified_finitely() {
        let p = parse_model("var w; minimize (w+1)^2 + (w+1)^4; subject to: w >= 0;").unwrap();
        let nlp = NlpProblem {
            vars: p.var_names().to_vec(),
            objective: p.objective.clone(),
            equalities: vec![],
            inequalities: p.inequalities.clone(),
        };
        let z0 = NlpPoint::from_primal(&nlp, dvector![0.4]);
        let trace = sqp_solve(&nlp, &z0, &SolveOptions::default()).unwrap();
        let reference = PrimalDualPoint {
            w: dvector![0.0],
            lambda: dvector![],
            mu: dvector![6.0],
            xi: dvector![],
            nu: dvector![],
        };
        let rep = stabilization_report(&trace, &p, &reference, 1e-8).unwrap();
        assert_eq!(rep.inequality_flags[0].reference_status, "A+");
        assert_eq!(rep.inequality_flags[0].identification, Identification::Finite { first_record: 0 });
        assert_eq!(rep.inequality_chain_from, Some(0));
    }

    #[test]
    fn stabilization_leyffer_identifies_the_pair_after_the_branch_switch() {
        let p = parse_model(LEYFFER).unwrap();
        let z0 = PrimalDualPoint::from_primal(&p, dvector![0.0, 2.0]);
        let trace = sqpcc_solve(&p, &z0, &SolveOptions::default()).unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        let reference = PrimalDualPoint {
            w: dvector![1.0, 0.0],
            lambda: dvector![],
            mu: dvector![],
            xi: dvector![0.0],
            nu: dvector![0.0],
        };
        let rep = stabilization_report(&trace, &p, &reference, 1e-8).unwrap();
        // I+0^qp = {0} from the first H-side step onward (record 1).
        assert_eq!(rep.pair_flags[0].reference_status, "I+0");
        assert_eq!(rep.pair_flags[0].identification, Identification::Finite { first_record: 1 });
        assert_eq!(rep.pair_chain_from, Some(1));
    }

    #[test]
    fn stabilization_requires_an_s_reference() {
        let p = parse_model(LEYFFER).unwrap();
        let z0 = PrimalDualPoint::from_primal(&p, dvector![0.0, 2.0]);
        let trace = sqpcc_solve(&p, &z0, &SolveOptions::default()).unwrap();
        let m_point = PrimalDualPoint {
            w: dvector![0.0, 0.0],
            lambda: dvector![],
            mu: dvector![],
            xi: dvector![-2.0],
            nu: dvector![0.0],
        };
        assert!(matches!(
            stabilization_report(&trace, &p, &m_point, 1e-8),
            Err(AnalysisError::ReferenceNotS { class: StationarityClass::M })
        ));
    }

    #[test]
    fn contraction_fit_is_small_on_quadratic_tails() {
        let errors = [2.0, 1.0, 0.25, 0.02, 3e-4, 1e-7, 1e-14];
        let (alpha, _) = fit_contraction(&errors).unwrap();
        assert!(alpha.abs() <= 0.1, "alpha = {alpha}");
    }
}
