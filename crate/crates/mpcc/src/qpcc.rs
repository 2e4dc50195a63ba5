//! Linearized QPCC subproblems solved exactly by branch enumeration.
//!
//! At an iterate `z` the MPCC data is linearized into a QP with linearized
//! complementarity pairs. Every one of the `2^m` branch assignments fixes
//! each pair to one side and yields a plain QP; the enumeration solves them
//! all, deduplicates coinciding steps, and marks each candidate S-stationary
//! or not by the sign test on the multipliers of biactive linearized pairs.
//!
//! Biactivity of a linearized pair at a candidate step is decided
//! combinatorially: the inequality side counts as at its bound when the QP
//! solver held it in the final working set, or when its value is not
//! strictly positive. A pure value tolerance would misflag pairs whose
//! inequality side converges to zero from strictly positive values, which is
//! exactly the spurious-sequence regime the toolkit has to reproduce.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::denseqp::{self, QpData, QpError};
use crate::model::{BranchAssignment, BranchSide, MpccProblem, PrimalDualPoint};

/// Linearized rows of one complementarity pair: `(∇G_iᵀ, G_i(w))` and
/// `(∇H_iᵀ, H_i(w))`.
#[derive(Debug, Clone)]
pub struct PairRows {
    pub g_row: DVector<f64>,
    pub g_const: f64,
    pub h_row: DVector<f64>,
    pub h_const: f64,
}

/// Data of the QPCC subproblem at one linearization point.
#[derive(Debug, Clone)]
pub struct QpccData {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub eq_rows: DMatrix<f64>,
    pub eq_consts: DVector<f64>,
    /// Linearized `g <= 0` rows.
    pub in_rows: DMatrix<f64>,
    pub in_consts: DVector<f64>,
    pub pairs: Vec<PairRows>,
}

impl QpccData {
    pub fn num_vars(&self) -> usize {
        self.gradient.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }
}

/// Partition of the linearized pairs at a candidate step.
#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize)]
pub struct QpPairPartition {
    pub i_zero_plus: Vec<usize>,
    pub i_plus_zero: Vec<usize>,
    pub i_zero_zero: Vec<usize>,
}

/// One candidate solution of the QPCC subproblem.
#[derive(Debug, Clone)]
pub struct QpccSolution {
    pub step: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub xi: DVector<f64>,
    pub nu: DVector<f64>,
    /// Representative branch assignment that produced this step.
    pub branch: BranchAssignment,
    /// All assignments whose branch QP produced this same step.
    pub contributing: Vec<BranchAssignment>,
    /// Inequality working set of the branch QP, in the branch QP's row
    /// numbering: original `g` rows first, then one row per pair.
    pub qp_active_set: Vec<usize>,
    /// Indices of original `g` inequalities held active by the branch QP.
    pub g_active: Vec<usize>,
    /// Values of the linearized pair functions at the step.
    pub pair_values: Vec<(f64, f64)>,
    pub partition: QpPairPartition,
    pub objective: f64,
    pub s_stationary: bool,
}

#[derive(Debug, Error)]
pub enum QpccError {
    #[error("pair count {m} exceeds the branch enumeration cap {cap}")]
    CapExceeded { m: usize, cap: usize },
    #[error("every branch QP failed; last error: {last}")]
    AllBranchesFailed { last: QpError },
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("no candidate was produced by the forced branch {signature}")]
    ForcedBranchUnavailable { signature: String },
    #[error("evaluation failed: {0}")]
    Eval(#[from] crate::expr::EvalError),
}

/// Default cap on the number of complementarity pairs (`2^16` branches).
pub const DEFAULT_ENUMERATION_CAP: usize = 16;

/// Assemble the QPCC data at `z` with the supplied Hessian: exact constraint
/// Jacobians and values, gradient of the objective.
pub fn linearize(
    p: &MpccProblem,
    z: &PrimalDualPoint,
    hessian: DMatrix<f64>,
) -> Result<QpccData, crate::expr::EvalError> {
    let w = z.w.as_slice();
    let n = p.num_vars();
    let gradient = p.objective.gradient(w)?;
    let m_eq = p.num_equalities();
    let mut eq_rows = DMatrix::zeros(m_eq, n);
    let mut eq_consts = DVector::zeros(m_eq);
    for (j, e) in p.equalities.iter().enumerate() {
        eq_rows.row_mut(j).copy_from(&e.gradient(w)?.transpose());
        eq_consts[j] = e.value(w)?;
    }
    let m_in = p.num_inequalities();
    let mut in_rows = DMatrix::zeros(m_in, n);
    let mut in_consts = DVector::zeros(m_in);
    for (j, e) in p.inequalities.iter().enumerate() {
        in_rows.row_mut(j).copy_from(&e.gradient(w)?.transpose());
        in_consts[j] = e.value(w)?;
    }
    let mut pairs = Vec::with_capacity(p.num_pairs());
    for (g, h) in &p.pairs {
        pairs.push(PairRows {
            g_row: g.gradient(w)?,
            g_const: g.value(w)?,
            h_row: h.gradient(w)?,
            h_const: h.value(w)?,
        });
    }
    Ok(QpccData { hessian, gradient, eq_rows, eq_consts, in_rows, in_consts, pairs })
}

/// Build the plain QP of one branch: fixed sides become equalities, the free
/// sides nonnegativity inequalities appended after the `g` rows.
fn branch_qp(d: &QpccData, a: &BranchAssignment) -> QpData {
    let n = d.num_vars();
    let m = d.num_pairs();
    let m_eq = d.eq_rows.nrows();
    let m_in = d.in_rows.nrows();
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
        // free side: value >= 0, stored as -(row·x + c) <= 0
        a_in.row_mut(m_in + i).copy_from(&(-in_row).transpose());
        b_in[m_in + i] = -in_c;
    }
    QpData { hessian: d.hessian.clone(), gradient: d.gradient.clone(), a_eq, b_eq, a_in, b_in }
}

/// Candidate from one branch QP solution: multipliers mapped back to the
/// MPCC sign convention and the pair partition derived from the working set.
fn candidate_from_branch(
    d: &QpccData,
    a: &BranchAssignment,
    sol: &denseqp::QpSolution,
    sign_tol: f64,
) -> QpccSolution {
    let m = d.num_pairs();
    let m_eq = d.eq_rows.nrows();
    let m_in = d.in_rows.nrows();
    let lambda = sol.eq_multipliers.rows(0, m_eq).into_owned();
    let mu = sol.in_multipliers.rows(0, m_in).into_owned();
    let mut xi = DVector::zeros(m);
    let mut nu = DVector::zeros(m);
    let mut pair_values = Vec::with_capacity(m);
    let mut partition = QpPairPartition::default();
    let mut s_stationary = true;
    for (i, (pair, side)) in d.pairs.iter().zip(&a.0).enumerate() {
        // The QP equality multiplier enters its Lagrangian as +λ·(row·x+c);
        // the MPCC-Lagrangian carries -ξᵀG and -νᵀH, so fixed sides flip sign.
        // Free sides are stored negated, so their multiplier maps directly.
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
        let g_val = pair.g_row.dot(&sol.x) + pair.g_const;
        let h_val = pair.h_row.dot(&sol.x) + pair.h_const;
        pair_values.push((g_val, h_val));
        let free_val = match side {
            BranchSide::FixG => h_val,
            BranchSide::FixH => g_val,
        };
        let free_in_working_set = sol.active_set.contains(&(m_in + i));
        let biactive = free_in_working_set || free_val <= 0.0;
        if biactive {
            partition.i_zero_zero.push(i);
            if xi[i] < -sign_tol || nu[i] < -sign_tol {
                s_stationary = false;
            }
        } else {
            match side {
                BranchSide::FixG => partition.i_zero_plus.push(i),
                BranchSide::FixH => partition.i_plus_zero.push(i),
            }
        }
    }
    let g_active: Vec<usize> = sol.active_set.iter().copied().filter(|&i| i < m_in).collect();
    let objective = 0.5 * (sol.x.transpose() * &d.hessian * &sol.x)[(0, 0)] + d.gradient.dot(&sol.x);
    QpccSolution {
        step: sol.x.clone(),
        lambda,
        mu,
        xi,
        nu,
        branch: a.clone(),
        contributing: vec![a.clone()],
        qp_active_set: sol.active_set.clone(),
        g_active,
        pair_values,
        partition,
        objective,
        s_stationary,
    }
}

/// Solve the QPCC by exact enumeration of all `2^m` branch QPs.
///
/// Solutions whose steps agree to `1e-9` are merged; when two merged
/// candidates carry the same activity pattern their multipliers must agree
/// (multiplier uniqueness under MPCC-LICQ), which is checked in debug builds.
/// The returned list is sorted by objective value, then lexicographically by
/// step, and is deterministic in the input.
///
/// Infeasible branches are skipped; the call fails only if every branch
/// fails or `m` exceeds `cap`.
pub fn solve_qpcc_enumerate(
    d: &QpccData,
    cap: usize,
    sign_tol: f64,
) -> Result<Vec<QpccSolution>, QpccError> {
    let m = d.num_pairs();
    if m > cap {
        return Err(QpccError::CapExceeded { m, cap });
    }
    let mut candidates: Vec<QpccSolution> = Vec::new();
    let mut last_err: Option<QpError> = None;
    for a in BranchAssignment::enumerate(m) {
        let qp = branch_qp(d, &a);
        match denseqp::solve_qp(&qp, None) {
            Ok(sol) => candidates.push(candidate_from_branch(d, &a, &sol, sign_tol)),
            Err(e) => last_err = Some(e),
        }
    }
    if candidates.is_empty() {
        return match last_err {
            Some(last) => Err(QpccError::AllBranchesFailed { last }),
            None => Ok(Vec::new()), // m = 0 with no branches cannot happen: enumerate(0) = [empty]
        };
    }

    // Merge steps that coincide to 1e-9, preferring the candidate with the
    // least degenerate pair labeling.
    let mut merged: Vec<QpccSolution> = Vec::new();
    for cand in candidates {
        match merged.iter_mut().find(|c| (&c.step - &cand.step).amax() <= 1e-9) {
            None => merged.push(cand),
            Some(existing) => {
                if existing.partition.i_zero_zero == cand.partition.i_zero_zero
                    && existing.qp_active_set == cand.qp_active_set
                {
                    debug_assert!(
                        (&existing.lambda - &cand.lambda).amax() <= 1e-8
                            && (&existing.mu - &cand.mu).amax() <= 1e-8
                            && (&existing.xi - &cand.xi).amax() <= 1e-8
                            && (&existing.nu - &cand.nu).amax() <= 1e-8,
                        "merged duplicate steps with identical active sets but different multipliers"
                    );
                }
                let mut contributing = existing.contributing.clone();
                contributing.extend(cand.contributing.iter().cloned());
                if cand.partition.i_zero_zero.len() < existing.partition.i_zero_zero.len() {
                    *existing = cand;
                }
                contributing.sort();
                contributing.dedup();
                existing.contributing = contributing;
            }
        }
    }

    merged.sort_by(|a, b| {
        a.objective
            .partial_cmp(&b.objective)
            .unwrap()
            .then_with(|| {
                for (x, y) in a.step.iter().zip(b.step.iter()) {
                    match x.partial_cmp(y).unwrap() {
                        std::cmp::Ordering::Equal => continue,
                        ord => return ord,
                    }
                }
                std::cmp::Ordering::Equal
            })
    });
    Ok(merged)
}

/// Step-selection policy applied to the candidate list of one subproblem.
#[derive(Debug, Clone, PartialEq)]
pub enum StepPolicy {
    /// Lowest objective among S-stationary candidates; falls back to the
    /// lowest-objective candidate overall (flagged) when none is S-stationary.
    MinObjective,
    /// Prefer the S-stationary candidate whose contributing branches contain
    /// the previous assignment; otherwise behave like `MinObjective`.
    WarmBranch,
    /// The candidate from this branch, regardless of stationarity.
    ForcedBranch(BranchAssignment),
}

/// Result of [`select_step`].
#[derive(Debug, Clone)]
pub struct SelectedStep {
    pub solution: QpccSolution,
    /// Set when `MinObjective` had to fall back to a non-S candidate.
    pub non_s_fallback: bool,
}

/// Select one candidate according to `policy`. `previous` carries the branch
/// assignment selected at the preceding iteration, used by `WarmBranch`.
pub fn select_step(
    candidates: &[QpccSolution],
    policy: &StepPolicy,
    previous: Option<&BranchAssignment>,
) -> Result<SelectedStep, QpccError> {
    if candidates.is_empty() {
        return Err(QpccError::NoCandidates);
    }
    let min_objective = || -> SelectedStep {
        match candidates.iter().find(|c| c.s_stationary) {
            Some(c) => SelectedStep { solution: c.clone(), non_s_fallback: false },
            None => SelectedStep { solution: candidates[0].clone(), non_s_fallback: true },
        }
    };
    match policy {
        StepPolicy::MinObjective => Ok(min_objective()),
        StepPolicy::WarmBranch => {
            if let Some(prev) = previous {
                if let Some(c) = candidates
                    .iter()
                    .find(|c| c.s_stationary && c.contributing.iter().any(|a| a == prev))
                {
                    return Ok(SelectedStep { solution: c.clone(), non_s_fallback: false });
                }
            }
            Ok(min_objective())
        }
        StepPolicy::ForcedBranch(a) => candidates
            .iter()
            .find(|c| c.contributing.iter().any(|b| b == a))
            .map(|c| SelectedStep { solution: c.clone(), non_s_fallback: !c.s_stationary })
            .ok_or_else(|| QpccError::ForcedBranchUnavailable { signature: a.signature() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;
    use nalgebra::dvector;

    const LEYFFER: &str = "\
var w1, w2;
minimize (w1-1)^2 + w2^2 + w2^3;
subject to:
  comp w1 , w2;
";

    const EXAMPLE54: &str = "\
var w1, w2;
minimize w1^4 + w1^2 + w2^4 + w2^2;
subject to:
  comp w1 , w2;
";

    fn linearized_at(model: &str, w: &[f64]) -> QpccData {
        let p = parse_model(model).unwrap();
        let z = PrimalDualPoint::from_primal(&p, DVector::from_row_slice(w));
        let h = p.lagrangian_hessian(&z).unwrap();
        linearize(&p, &z, h).unwrap()
    }

    #[test]
    fn linearize_leyffer_on_the_vertical_axis() {
        for &t in &[0.5, 2.0] {
            let d = linearized_at(LEYFFER, &[0.0, t]);
            assert!((d.gradient[0] - (-2.0)).abs() < 1e-15);
            assert!((d.gradient[1] - (2.0 * t + 3.0 * t * t)).abs() < 1e-12);
            assert_eq!(d.hessian[(0, 0)], 2.0);
            assert!((d.hessian[(1, 1)] - (2.0 + 6.0 * t)).abs() < 1e-12);
            let pr = &d.pairs[0];
            assert_eq!((pr.g_row[0], pr.g_row[1], pr.g_const), (1.0, 0.0, 0.0));
            assert_eq!((pr.h_row[0], pr.h_row[1]), (0.0, 1.0));
            assert_eq!(pr.h_const, t);
        }
    }

    #[test]
    fn linearize_example54_on_the_horizontal_axis() {
        let t = 0.3;
        let d = linearized_at(EXAMPLE54, &[t, 0.0]);
        assert!((d.gradient[0] - (2.0 * t + 4.0 * t * t * t)).abs() < 1e-15);
        assert_eq!(d.gradient[1], 0.0);
        assert!((d.hessian[(0, 0)] - (2.0 + 12.0 * t * t)).abs() < 1e-15);
        assert_eq!(d.hessian[(1, 1)], 2.0);
        let pr = &d.pairs[0];
        assert_eq!(pr.g_const, t);
        assert_eq!(pr.h_const, 0.0);
    }

    #[test]
    fn constants_equal_constraint_values_at_any_point() {
        let p = parse_model("var x, y; minimize x^2; subject to: x + y - 3 <= 0; comp x, y;").unwrap();
        let z = PrimalDualPoint::from_primal(&p, dvector![1.5, 0.25]);
        let h = p.lagrangian_hessian(&z).unwrap();
        let d = linearize(&p, &z, h).unwrap();
        assert!((d.in_consts[0] - (1.5 + 0.25 - 3.0)).abs() < 1e-15);
        assert_eq!(d.pairs[0].g_const, 1.5);
        assert_eq!(d.pairs[0].h_const, 0.25);
    }

    #[test]
    fn leyffer_enumeration_finds_both_s_stationary_steps() {
        let t = 0.5;
        let d = linearized_at(LEYFFER, &[0.0, t]);
        let cands = solve_qpcc_enumerate(&d, 16, 1e-8).unwrap();
        assert_eq!(cands.len(), 2);
        assert!(cands.iter().all(|c| c.s_stationary));
        // Sorted by objective: the corner-turning step comes first.
        assert!((&cands[0].step - dvector![1.0, -0.5]).amax() < 1e-12);
        assert!((&cands[1].step - dvector![0.0, -0.35]).amax() < 1e-12);
        assert!(cands[0].objective < cands[1].objective);
        // Linearized complementarity holds at both candidates.
        for c in &cands {
            for &(g, h) in &c.pair_values {
                assert!((g * h).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn fixed_point_has_unique_s_stationary_zero_step() {
        let p = parse_model(LEYFFER).unwrap();
        let z = PrimalDualPoint {
            w: dvector![1.0, 0.0],
            lambda: dvector![],
            mu: dvector![],
            xi: dvector![0.0],
            nu: dvector![0.0],
        };
        let h = p.lagrangian_hessian(&z).unwrap();
        let d = linearize(&p, &z, h).unwrap();
        let cands = solve_qpcc_enumerate(&d, 16, 1e-8).unwrap();
        let s: Vec<_> = cands.iter().filter(|c| c.s_stationary).collect();
        assert_eq!(s.len(), 1);
        assert!(s[0].step.amax() < 1e-12);
        // Zero-step S-candidate exists iff its multipliers solve the
        // stationarity system at the iterate.
        let z_cand = PrimalDualPoint {
            w: z.w.clone(),
            lambda: s[0].lambda.clone(),
            mu: s[0].mu.clone(),
            xi: s[0].xi.clone(),
            nu: s[0].nu.clone(),
        };
        assert!(p.kkt_residual(&z_cand, 1e-8).unwrap() <= 1e-10);
        // The G-side candidate steps to the origin and fails the sign test.
        let non_s: Vec<_> = cands.iter().filter(|c| !c.s_stationary).collect();
        assert_eq!(non_s.len(), 1);
        assert!((&non_s[0].step - dvector![-1.0, 0.0]).amax() < 1e-12);
        assert!(non_s[0].xi[0] < 0.0);
    }

    #[test]
    fn biactivity_is_combinatorial_not_tolerance_based() {
        // Deep in the spurious regime the free side is tiny but strictly
        // positive and stays out of the working set: not biactive.
        let t = 1e-10;
        let d = linearized_at(LEYFFER, &[0.0, t]);
        let cands = solve_qpcc_enumerate(&d, 16, 1e-8).unwrap();
        let g_side = cands
            .iter()
            .find(|c| c.contributing.iter().any(|a| a.signature() == "G"))
            .unwrap();
        assert!(g_side.partition.i_zero_zero.is_empty());
        assert_eq!(g_side.partition.i_zero_plus, vec![0]);
        assert!(g_side.s_stationary);
    }

    #[test]
    fn cap_is_enforced() {
        let d = linearized_at(LEYFFER, &[0.0, 0.5]);
        match solve_qpcc_enumerate(&d, 0, 1e-8) {
            Err(QpccError::CapExceeded { m: 1, cap: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn select_step_policies() {
        let t = 0.5;
        let d = linearized_at(LEYFFER, &[0.0, t]);
        let cands = solve_qpcc_enumerate(&d, 16, 1e-8).unwrap();

        let sel = select_step(&cands, &StepPolicy::MinObjective, None).unwrap();
        assert!((&sel.solution.step - dvector![1.0, -t]).amax() < 1e-12);
        assert!(!sel.non_s_fallback);

        let forced = BranchAssignment::parse("G").unwrap();
        let sel = select_step(&cands, &StepPolicy::ForcedBranch(forced), None).unwrap();
        let expected = -(2.0 * t + 3.0 * t * t) / (2.0 * (1.0 + 3.0 * t));
        assert!((sel.solution.step[1] - expected).abs() < 1e-12);
        assert_eq!(sel.solution.step[0], 0.0);

        let prev = BranchAssignment::parse("G").unwrap();
        let sel = select_step(&cands, &StepPolicy::WarmBranch, Some(&prev)).unwrap();
        assert_eq!(sel.solution.branch.signature(), "G");

        let single = vec![cands[0].clone()];
        for policy in [
            StepPolicy::MinObjective,
            StepPolicy::WarmBranch,
            StepPolicy::ForcedBranch(cands[0].branch.clone()),
        ] {
            let sel = select_step(&single, &policy, None).unwrap();
            assert_eq!(sel.solution.step, cands[0].step);
        }

        assert!(matches!(
            select_step(&[], &StepPolicy::MinObjective, None),
            Err(QpccError::NoCandidates)
        ));
    }

    #[test]
    fn affine_pairs_make_full_steps_complementarity_feasible() {
        let p = parse_model(LEYFFER).unwrap();
        for &(w1, w2) in &[(0.0, 2.0), (0.7, 0.0), (0.0, 0.3)] {
            let z = PrimalDualPoint::from_primal(&p, dvector![w1, w2]);
            let h = p.lagrangian_hessian(&z).unwrap();
            let d = linearize(&p, &z, h).unwrap();
            for c in solve_qpcc_enumerate(&d, 16, 1e-8).unwrap() {
                let w_new = [w1 + c.step[0], w2 + c.step[1]];
                let (g, hval) = p.pair_values(&w_new).unwrap();
                assert!((g[0] * hval[0]).abs() <= 1e-10, "G*H = {}", g[0] * hval[0]);
            }
        }
    }
}
