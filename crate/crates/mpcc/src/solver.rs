//! Full-step SQPCC outer loop, classical full-step SQP baseline, pluggable
//! Hessian strategies, and per-iteration diagnostic capture.
//!
//! Both solvers take the full step `w^{k+1} = w^k + Δw^k` and hand the
//! subproblem multipliers over unchanged; there is no line search or
//! damping. Termination is on the KKT residual (for the SQPCC loop the
//! S-stationarity residual of the MPCC), so a converged status certifies a
//! stationary point to tolerance rather than a mere small step.
//!
//! Each iteration records the iterate, the subproblem outcome, the
//! derivative-approximation error `κ^k = |∇²L − H^k|₂`, and the perturbation
//! `r^k = Φ(z^{k+1}) − Φ(z^k) − ∇Φ̃(z^k)ᵀ(z^{k+1} − z^k)` of the stacked
//! KKT map, the two measurable quantities that govern the local rate.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::denseqp::{self, nearest_pd, symmetric_two_norm, QpData, QpError};
use crate::expr::EvalError;
use crate::model::{BranchAssignment, MpccProblem, NlpPoint, NlpProblem, PrimalDualPoint};
use crate::qpcc::{self, QpPairPartition, StepPolicy};

/// How the subproblem Hessian is produced at each iterate.
#[derive(Debug, Clone)]
pub enum HessianKind {
    /// Exact Lagrangian Hessian, shifted onto the positive definite cone
    /// with eigenvalue floor `floor`.
    Exact { floor: f64 },
    /// Exact Lagrangian Hessian, unmodified. May be indefinite; the QP
    /// solver then succeeds only while every reduced Hessian it encounters
    /// is positive definite.
    ExactRaw,
    /// `∇²L + I`.
    PerturbedIdentity,
    /// A fixed matrix.
    Constant(DMatrix<f64>),
    /// Damped BFGS. `initial` seeds the approximation; `None` starts from
    /// the convexified exact Hessian at the initial iterate.
    Bfgs { initial: Option<DMatrix<f64>> },
    /// Gauss-Newton `2 JᵀJ + floor·I` from the problem's residual block.
    ///
    /// The objective convention is `f = Σ r_i²`, whose Hessian is
    /// `2 JᵀJ + 2 Σ r_i ∇²r_i`; the factor two keeps the approximation
    /// consistent with that convention.
    GaussNewton { floor: f64 },
}

impl HessianKind {
    /// Default eigenvalue floor for convexified variants.
    pub const DEFAULT_FLOOR: f64 = 1e-6;

    pub fn exact() -> Self {
        HessianKind::Exact { floor: Self::DEFAULT_FLOOR }
    }
}

/// Hessian strategy with its runtime state (the BFGS approximation).
#[derive(Debug, Clone)]
pub struct HessianStrategy {
    pub kind: HessianKind,
    bfgs_state: Option<DMatrix<f64>>,
}

impl HessianStrategy {
    pub fn new(kind: HessianKind) -> Self {
        HessianStrategy { kind, bfgs_state: None }
    }

    /// Matrix used by the subproblem at the current iterate. `exact_hessian`
    /// is the exact Lagrangian Hessian at that iterate; `residual_jacobian`
    /// is the Jacobian of the residual block when one exists.
    fn matrix(
        &mut self,
        exact_hessian: &DMatrix<f64>,
        residual_jacobian: Option<&DMatrix<f64>>,
    ) -> Result<DMatrix<f64>, SolveError> {
        let n = exact_hessian.nrows();
        match &self.kind {
            HessianKind::Exact { floor } => Ok(nearest_pd(exact_hessian, *floor)),
            HessianKind::ExactRaw => Ok(exact_hessian.clone()),
            HessianKind::PerturbedIdentity => Ok(exact_hessian + DMatrix::identity(n, n)),
            HessianKind::Constant(m) => {
                if m.nrows() != n || m.ncols() != n {
                    return Err(SolveError::Dimension(format!(
                        "constant Hessian is {}x{}, expected {}x{}",
                        m.nrows(),
                        m.ncols(),
                        n,
                        n
                    )));
                }
                Ok(m.clone())
            }
            HessianKind::Bfgs { initial } => {
                if self.bfgs_state.is_none() {
                    let b0 = match initial {
                        Some(m) => m.clone(),
                        None => nearest_pd(exact_hessian, HessianKind::DEFAULT_FLOOR),
                    };
                    self.bfgs_state = Some(b0);
                }
                Ok(self.bfgs_state.as_ref().unwrap().clone())
            }
            HessianKind::GaussNewton { floor } => match residual_jacobian {
                None => Err(SolveError::GaussNewtonWithoutResiduals),
                Some(j) => {
                    Ok(j.transpose() * j * 2.0 + DMatrix::identity(n, n) * *floor)
                }
            },
        }
    }

    /// Damped BFGS update with `s = w_new − w_old` and
    /// `y = ∇L(w_new, new multipliers) − ∇L(w_old, new multipliers)`.
    /// Skipped when `sᵀy ≤ 1e-12 |s||y|`; Powell damping otherwise keeps the
    /// approximation positive definite.
    fn bfgs_update(&mut self, s: &DVector<f64>, y: &DVector<f64>) {
        let b = match self.bfgs_state.as_mut() {
            Some(b) => b,
            None => return,
        };
        let sy = s.dot(y);
        if s.norm() == 0.0 || sy <= 1e-12 * s.norm() * y.norm() {
            return;
        }
        let bs = &*b * s;
        let sbs = s.dot(&bs);
        let y_eff = if sy < 0.2 * sbs {
            let theta = 0.8 * sbs / (sbs - sy);
            y * theta + &bs * (1.0 - theta)
        } else {
            y.clone()
        };
        let sy_eff = s.dot(&y_eff);
        *b -= &bs * bs.transpose() / sbs;
        *b += &y_eff * y_eff.transpose() / sy_eff;
        // Symmetrize against rounding drift.
        let sym = (&*b + b.transpose()) * 0.5;
        *b = sym;
    }

    /// Current BFGS approximation, when the strategy carries one.
    pub fn bfgs_matrix(&self) -> Option<&DMatrix<f64>> {
        self.bfgs_state.as_ref()
    }
}

/// Options shared by [`sqpcc_solve`] and [`sqp_solve`].
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// KKT residual tolerance for termination.
    pub tol: f64,
    pub max_iter: usize,
    /// Activity tolerance for index sets and sign tests.
    pub activity_tol: f64,
    pub hessian: HessianKind,
    pub policy: StepPolicy,
    pub enumeration_cap: usize,
    /// Reference solution for error logging on MPCC solves.
    pub reference: Option<PrimalDualPoint>,
    /// Reference solution for error logging on NLP solves.
    pub nlp_reference: Option<NlpPoint>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_iter: 50,
            activity_tol: 1e-8,
            hessian: HessianKind::exact(),
            policy: StepPolicy::MinObjective,
            enumeration_cap: qpcc::DEFAULT_ENUMERATION_CAP,
            reference: None,
            nlp_reference: None,
        }
    }
}

/// Terminal status of a solve.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    SubproblemFailure { iteration: usize, message: String },
}

/// One row of a [`SolveTrace`]: the iterate and the subproblem that left it.
///
/// The active sets and pair partitions are those of the subproblem solution
/// computed at this iterate (they describe the combinatorial state of the
/// step into the next iterate). The terminal record carries no step.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    pub w: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub xi: DVector<f64>,
    pub nu: DVector<f64>,
    pub kkt_residual: f64,
    pub step: Option<DVector<f64>>,
    pub step_norm: f64,
    pub err_to_ref: Option<f64>,
    /// `G`/`H` per pair for the selected branch; empty for NLP solves and on
    /// the terminal record.
    pub branch_signature: String,
    pub num_candidates: usize,
    /// `|r^k|∞` of the step leaving this iterate; zero on the terminal record.
    pub r_norm: f64,
    /// `|∇²L(z^k) − H^k|₂` for the Hessian used at this iterate.
    pub kappa: f64,
    /// S-stationarity flag of the selected QPCC candidate.
    pub selected_s_stationary: Option<bool>,
    /// Set when the min-objective policy fell back to a non-S candidate.
    pub non_s_fallback: bool,
    /// Pair partition of the selected QPCC candidate.
    pub qp_partition: Option<QpPairPartition>,
    /// Inequality (`g`) rows held active by the subproblem.
    pub g_active: Vec<usize>,
}

/// Dimensions of the traced problem, fixing the CSV column layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceDims {
    pub n: usize,
    pub m_h: usize,
    pub m_g: usize,
    pub m_pairs: usize,
}

/// Complete record of one solve: one record per iterate (including the
/// initial point) plus the terminal status.
#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub records: Vec<IterationRecord>,
    pub status: SolveStatus,
    pub dims: TraceDims,
}

impl SolveTrace {
    /// Number of steps actually taken.
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn final_record(&self) -> &IterationRecord {
        self.records.last().expect("trace has at least the initial record")
    }

    pub fn final_w(&self) -> &DVector<f64> {
        &self.final_record().w
    }

    /// Reference errors per iterate, when a reference was supplied.
    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.err_to_ref).collect()
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("gauss-newton requested but the problem has no residual block")]
    GaussNewtonWithoutResiduals,
    #[error("evaluation failed at the initial point: {0}")]
    Eval(#[from] EvalError),
}

/// Stacked KKT map `Ψ(z) = (∇L, h, −g, G, H)` of the MPCC.
pub fn mpcc_kkt_map(p: &MpccProblem, z: &PrimalDualPoint) -> Result<DVector<f64>, EvalError> {
    let w = z.w.as_slice();
    let grad = p.lagrangian_gradient(z)?;
    let mut out = Vec::with_capacity(
        p.num_vars() + p.num_equalities() + p.num_inequalities() + 2 * p.num_pairs(),
    );
    out.extend(grad.iter());
    for e in &p.equalities {
        out.push(e.value(w)?);
    }
    for e in &p.inequalities {
        out.push(-e.value(w)?);
    }
    let (gv, hv) = p.pair_values(w)?;
    out.extend(gv.iter());
    out.extend(hv.iter());
    Ok(DVector::from_vec(out))
}

/// Jacobian (transposed, as it multiplies `Δz`) of [`mpcc_kkt_map`] with the
/// Hessian block replaced by `h_block`; all other blocks exact.
pub fn mpcc_kkt_map_jacobian(
    p: &MpccProblem,
    z: &PrimalDualPoint,
    h_block: &DMatrix<f64>,
) -> Result<DMatrix<f64>, EvalError> {
    let w = z.w.as_slice();
    let n = p.num_vars();
    let m_h = p.num_equalities();
    let m_g = p.num_inequalities();
    let m = p.num_pairs();
    let nz = n + m_h + m_g + 2 * m;
    let mut jac = DMatrix::zeros(nz, nz);
    jac.view_mut((0, 0), (n, n)).copy_from(h_block);
    for (j, e) in p.equalities.iter().enumerate() {
        let g = e.gradient(w)?;
        for i in 0..n {
            jac[(i, n + j)] = g[i];
            jac[(n + j, i)] = g[i];
        }
    }
    for (j, e) in p.inequalities.iter().enumerate() {
        let g = e.gradient(w)?;
        for i in 0..n {
            jac[(i, n + m_h + j)] = g[i];
            jac[(n + m_h + j, i)] = -g[i];
        }
    }
    for (j, (ge, he)) in p.pairs.iter().enumerate() {
        let gg = ge.gradient(w)?;
        let gh = he.gradient(w)?;
        for i in 0..n {
            jac[(i, n + m_h + m_g + j)] = -gg[i];
            jac[(n + m_h + m_g + j, i)] = gg[i];
            jac[(i, n + m_h + m_g + m + j)] = -gh[i];
            jac[(n + m_h + m_g + m + j, i)] = gh[i];
        }
    }
    Ok(jac)
}

/// Stacked KKT map `Φ(z) = (∇L, h, −g)` of a plain NLP.
pub fn nlp_kkt_map(p: &NlpProblem, z: &NlpPoint) -> Result<DVector<f64>, EvalError> {
    let w = z.w.as_slice();
    let grad = p.lagrangian_gradient(z)?;
    let mut out = Vec::with_capacity(p.num_vars() + p.equalities.len() + p.inequalities.len());
    out.extend(grad.iter());
    for e in &p.equalities {
        out.push(e.value(w)?);
    }
    for e in &p.inequalities {
        out.push(-e.value(w)?);
    }
    Ok(DVector::from_vec(out))
}

/// Jacobian of [`nlp_kkt_map`] with the Hessian block replaced by `h_block`.
pub fn nlp_kkt_map_jacobian(
    p: &NlpProblem,
    z: &NlpPoint,
    h_block: &DMatrix<f64>,
) -> Result<DMatrix<f64>, EvalError> {
    let w = z.w.as_slice();
    let n = p.num_vars();
    let m_h = p.equalities.len();
    let m_g = p.inequalities.len();
    let nz = n + m_h + m_g;
    let mut jac = DMatrix::zeros(nz, nz);
    jac.view_mut((0, 0), (n, n)).copy_from(h_block);
    for (j, e) in p.equalities.iter().enumerate() {
        let g = e.gradient(w)?;
        for i in 0..n {
            jac[(i, n + j)] = g[i];
            jac[(n + j, i)] = g[i];
        }
    }
    for (j, e) in p.inequalities.iter().enumerate() {
        let g = e.gradient(w)?;
        for i in 0..n {
            jac[(i, n + m_h + j)] = g[i];
            jac[(n + m_h + j, i)] = -g[i];
        }
    }
    Ok(jac)
}

/// Perturbation `r^k = Ψ(z^{k+1}) − Ψ(z^k) − ∇Ψ̃(z^k)ᵀ(z^{k+1} − z^k)` of one
/// full step, with `used_hessian` in the Hessian block of `∇Ψ̃`.
pub fn perturbation_rk(
    p: &MpccProblem,
    z_old: &PrimalDualPoint,
    z_new: &PrimalDualPoint,
    used_hessian: &DMatrix<f64>,
) -> Result<DVector<f64>, EvalError> {
    let dz = z_new.stacked() - z_old.stacked();
    let jac = mpcc_kkt_map_jacobian(p, z_old, used_hessian)?;
    Ok(mpcc_kkt_map(p, z_new)? - mpcc_kkt_map(p, z_old)? - jac * dz)
}

/// NLP counterpart of [`perturbation_rk`].
pub fn perturbation_rk_nlp(
    p: &NlpProblem,
    z_old: &NlpPoint,
    z_new: &NlpPoint,
    used_hessian: &DMatrix<f64>,
) -> Result<DVector<f64>, EvalError> {
    let dz = z_new.stacked() - z_old.stacked();
    let jac = nlp_kkt_map_jacobian(p, z_old, used_hessian)?;
    Ok(nlp_kkt_map(p, z_new)? - nlp_kkt_map(p, z_old)? - jac * dz)
}

/// `κ = |∇²L(z) − H|₂`: the only inexact block of the stacked Jacobian is the
/// Hessian, so the operator-norm error reduces to the Hessian error.
pub fn kappa_estimate(
    p: &MpccProblem,
    z: &PrimalDualPoint,
    used_hessian: &DMatrix<f64>,
) -> Result<f64, EvalError> {
    Ok(symmetric_two_norm(&(p.lagrangian_hessian(z)? - used_hessian)))
}

/// NLP counterpart of [`kappa_estimate`].
pub fn kappa_estimate_nlp(
    p: &NlpProblem,
    z: &NlpPoint,
    used_hessian: &DMatrix<f64>,
) -> Result<f64, EvalError> {
    Ok(symmetric_two_norm(&(p.lagrangian_hessian(z)? - used_hessian)))
}

fn residual_jacobian(p: &MpccProblem, w: &[f64]) -> Result<Option<DMatrix<f64>>, EvalError> {
    match &p.residuals {
        None => Ok(None),
        Some(rs) => {
            let mut j = DMatrix::zeros(rs.len(), p.num_vars());
            for (i, r) in rs.iter().enumerate() {
                j.row_mut(i).copy_from(&r.gradient(w)?.transpose());
            }
            Ok(Some(j))
        }
    }
}

/// Full-step SQPCC: at each iterate the QPCC subproblem is solved by branch
/// enumeration, one candidate is selected by the policy, and the full step
/// and its multipliers are taken. Terminates when the S-stationarity
/// residual drops below `opts.tol`.
pub fn sqpcc_solve(
    p: &MpccProblem,
    z0: &PrimalDualPoint,
    opts: &SolveOptions,
) -> Result<SolveTrace, SolveError> {
    check_mpcc_dims(p, z0)?;
    let dims = TraceDims {
        n: p.num_vars(),
        m_h: p.num_equalities(),
        m_g: p.num_inequalities(),
        m_pairs: p.num_pairs(),
    };
    let mut strategy = HessianStrategy::new(opts.hessian.clone());
    let mut z = z0.clone();
    let mut prev_branch: Option<BranchAssignment> = None;
    let mut records: Vec<IterationRecord> = Vec::new();

    for k in 0..=opts.max_iter {
        let residual = match p.kkt_residual(&z, opts.activity_tol) {
            Ok(r) => r,
            Err(e) => {
                return Ok(failed_trace_mpcc(records, dims, k, &z, &opts.reference, e.to_string()))
            }
        };
        let err = opts.reference.as_ref().map(|r| z.inf_distance(r));
        let exact_h = match p.lagrangian_hessian(&z) {
            Ok(h) => h,
            Err(e) => {
                return Ok(failed_trace_mpcc(records, dims, k, &z, &opts.reference, e.to_string()))
            }
        };

        if residual <= opts.tol || k == opts.max_iter {
            let kappa = terminal_kappa(&mut strategy, p, &z, &exact_h);
            records.push(terminal_record_mpcc(k, &z, residual, err, kappa));
            let status = if residual <= opts.tol {
                SolveStatus::Converged
            } else {
                SolveStatus::MaxIterations
            };
            return Ok(SolveTrace { records, status, dims });
        }

        let rj = match residual_jacobian(p, z.w.as_slice()) {
            Ok(j) => j,
            Err(e) => {
                return Ok(failed_trace_mpcc(records, dims, k, &z, &opts.reference, e.to_string()))
            }
        };
        let h_used = match strategy.matrix(&exact_h, rj.as_ref()) {
            Ok(h) => h,
            Err(SolveError::GaussNewtonWithoutResiduals) => {
                return Err(SolveError::GaussNewtonWithoutResiduals)
            }
            Err(e) => return Err(e),
        };
        let kappa = symmetric_two_norm(&(&exact_h - &h_used));

        let data = match qpcc::linearize(p, &z, h_used.clone()) {
            Ok(d) => d,
            Err(e) => {
                return Ok(failed_trace_mpcc(records, dims, k, &z, &opts.reference, e.to_string()))
            }
        };
        let candidates = match qpcc::solve_qpcc_enumerate(&data, opts.enumeration_cap, opts.activity_tol)
        {
            Ok(c) => c,
            Err(e) => {
                return Ok(failed_trace_mpcc(records, dims, k, &z, &opts.reference, e.to_string()))
            }
        };
        let num_candidates = candidates.len();
        let selected = match qpcc::select_step(&candidates, &opts.policy, prev_branch.as_ref()) {
            Ok(s) => s,
            Err(e) => {
                return Ok(failed_trace_mpcc(records, dims, k, &z, &opts.reference, e.to_string()))
            }
        };
        let sol = selected.solution;

        let z_new = PrimalDualPoint {
            w: &z.w + &sol.step,
            lambda: sol.lambda.clone(),
            mu: sol.mu.clone(),
            xi: sol.xi.clone(),
            nu: sol.nu.clone(),
        };
        let r_norm = perturbation_rk(p, &z, &z_new, &h_used).map(|r| r.amax()).unwrap_or(f64::NAN);

        records.push(IterationRecord {
            k,
            w: z.w.clone(),
            lambda: z.lambda.clone(),
            mu: z.mu.clone(),
            xi: z.xi.clone(),
            nu: z.nu.clone(),
            kkt_residual: residual,
            step: Some(sol.step.clone()),
            step_norm: sol.step.amax(),
            err_to_ref: err,
            branch_signature: sol.branch.signature(),
            num_candidates,
            r_norm,
            kappa,
            selected_s_stationary: Some(sol.s_stationary),
            non_s_fallback: selected.non_s_fallback,
            qp_partition: Some(sol.partition.clone()),
            g_active: sol.g_active.clone(),
        });

        // Damped BFGS update with both Lagrangian gradients at the new
        // multipliers.
        if matches!(opts.hessian, HessianKind::Bfgs { .. }) {
            let z_old_new_mults = PrimalDualPoint {
                w: z.w.clone(),
                lambda: z_new.lambda.clone(),
                mu: z_new.mu.clone(),
                xi: z_new.xi.clone(),
                nu: z_new.nu.clone(),
            };
            if let (Ok(g_new), Ok(g_old)) =
                (p.lagrangian_gradient(&z_new), p.lagrangian_gradient(&z_old_new_mults))
            {
                let s = &z_new.w - &z.w;
                strategy.bfgs_update(&s, &(g_new - g_old));
            }
        }
        prev_branch = Some(sol.branch.clone());
        z = z_new;
    }
    unreachable!("loop returns at k == max_iter");
}

fn check_mpcc_dims(p: &MpccProblem, z: &PrimalDualPoint) -> Result<(), SolveError> {
    if z.w.len() != p.num_vars()
        || z.lambda.len() != p.num_equalities()
        || z.mu.len() != p.num_inequalities()
        || z.xi.len() != p.num_pairs()
        || z.nu.len() != p.num_pairs()
    {
        return Err(SolveError::Dimension(
            "primal-dual point does not match the problem dimensions".into(),
        ));
    }
    Ok(())
}

fn terminal_kappa(
    strategy: &mut HessianStrategy,
    p: &MpccProblem,
    z: &PrimalDualPoint,
    exact_h: &DMatrix<f64>,
) -> f64 {
    let rj = residual_jacobian(p, z.w.as_slice()).ok().flatten();
    match strategy.matrix(exact_h, rj.as_ref()) {
        Ok(h) => symmetric_two_norm(&(exact_h - h)),
        Err(_) => 0.0,
    }
}

fn terminal_record_mpcc(
    k: usize,
    z: &PrimalDualPoint,
    residual: f64,
    err: Option<f64>,
    kappa: f64,
) -> IterationRecord {
    IterationRecord {
        k,
        w: z.w.clone(),
        lambda: z.lambda.clone(),
        mu: z.mu.clone(),
        xi: z.xi.clone(),
        nu: z.nu.clone(),
        kkt_residual: residual,
        step: None,
        step_norm: 0.0,
        err_to_ref: err,
        branch_signature: String::new(),
        num_candidates: 0,
        r_norm: 0.0,
        kappa,
        selected_s_stationary: None,
        non_s_fallback: false,
        qp_partition: None,
        g_active: Vec::new(),
    }
}

fn failed_trace_mpcc(
    mut records: Vec<IterationRecord>,
    dims: TraceDims,
    k: usize,
    z: &PrimalDualPoint,
    reference: &Option<PrimalDualPoint>,
    message: String,
) -> SolveTrace {
    let err = reference.as_ref().map(|r| z.inf_distance(r));
    records.push(terminal_record_mpcc(k, z, f64::NAN, err, 0.0));
    SolveTrace {
        records,
        status: SolveStatus::SubproblemFailure { iteration: k, message },
        dims,
    }
}

/// Classical full-step SQP on a plain NLP: the QP linearizes the constraints
/// and uses the (approximated) standard Lagrangian Hessian. Used on the
/// bilinear NLP reformulation as the baseline, and on branch NLPs in tests.
///
/// Consecutive QP solves are warm-started with the previous active set.
pub fn sqp_solve(
    p: &NlpProblem,
    z0: &NlpPoint,
    opts: &SolveOptions,
) -> Result<SolveTrace, SolveError> {
    if z0.w.len() != p.num_vars()
        || z0.lambda.len() != p.equalities.len()
        || z0.mu.len() != p.inequalities.len()
    {
        return Err(SolveError::Dimension(
            "primal-dual point does not match the problem dimensions".into(),
        ));
    }
    let dims = TraceDims {
        n: p.num_vars(),
        m_h: p.equalities.len(),
        m_g: p.inequalities.len(),
        m_pairs: 0,
    };
    let mut strategy = HessianStrategy::new(opts.hessian.clone());
    let mut z = z0.clone();
    let mut warm: Option<Vec<usize>> = None;
    let mut records: Vec<IterationRecord> = Vec::new();

    for k in 0..=opts.max_iter {
        let residual = match p.kkt_residual(&z) {
            Ok(r) => r,
            Err(e) => return Ok(failed_trace_nlp(records, dims, k, &z, &opts.nlp_reference, e.to_string())),
        };
        let err = opts.nlp_reference.as_ref().map(|r| z.inf_distance(r));
        let exact_h = match p.lagrangian_hessian(&z) {
            Ok(h) => h,
            Err(e) => return Ok(failed_trace_nlp(records, dims, k, &z, &opts.nlp_reference, e.to_string())),
        };

        if residual <= opts.tol || k == opts.max_iter {
            let kappa = match strategy.matrix(&exact_h, None) {
                Ok(h) => symmetric_two_norm(&(&exact_h - h)),
                Err(_) => 0.0,
            };
            records.push(terminal_record_nlp(k, &z, residual, err, kappa));
            let status = if residual <= opts.tol {
                SolveStatus::Converged
            } else {
                SolveStatus::MaxIterations
            };
            return Ok(SolveTrace { records, status, dims });
        }

        let h_used = match strategy.matrix(&exact_h, None) {
            Ok(h) => h,
            Err(e) => return Err(e),
        };
        let kappa = symmetric_two_norm(&(&exact_h - &h_used));

        let qp = match build_sqp_qp(p, &z, &h_used) {
            Ok(q) => q,
            Err(e) => return Ok(failed_trace_nlp(records, dims, k, &z, &opts.nlp_reference, e.to_string())),
        };
        let sol = match denseqp::solve_qp(&qp, warm.as_deref()) {
            Ok(s) => s,
            Err(e @ QpError::Infeasible { .. }) => {
                let msg = format!("QP infeasible at iteration {k}: {e}");
                return Ok(failed_trace_nlp(records, dims, k, &z, &opts.nlp_reference, msg));
            }
            Err(e) => {
                let msg = format!("QP failed at iteration {k}: {e}");
                return Ok(failed_trace_nlp(records, dims, k, &z, &opts.nlp_reference, msg));
            }
        };

        let z_new = NlpPoint {
            w: &z.w + &sol.x,
            lambda: sol.eq_multipliers.clone(),
            mu: sol.in_multipliers.clone(),
        };
        let r_norm =
            perturbation_rk_nlp(p, &z, &z_new, &h_used).map(|r| r.amax()).unwrap_or(f64::NAN);

        records.push(IterationRecord {
            k,
            w: z.w.clone(),
            lambda: z.lambda.clone(),
            mu: z.mu.clone(),
            xi: DVector::zeros(0),
            nu: DVector::zeros(0),
            kkt_residual: residual,
            step: Some(sol.x.clone()),
            step_norm: sol.x.amax(),
            err_to_ref: err,
            branch_signature: String::new(),
            num_candidates: 1,
            r_norm,
            kappa,
            selected_s_stationary: None,
            non_s_fallback: false,
            qp_partition: None,
            g_active: sol.active_set.clone(),
        });

        if matches!(opts.hessian, HessianKind::Bfgs { .. }) {
            let z_old_new_mults = NlpPoint {
                w: z.w.clone(),
                lambda: z_new.lambda.clone(),
                mu: z_new.mu.clone(),
            };
            if let (Ok(g_new), Ok(g_old)) =
                (p.lagrangian_gradient(&z_new), p.lagrangian_gradient(&z_old_new_mults))
            {
                let s = &z_new.w - &z.w;
                strategy.bfgs_update(&s, &(g_new - g_old));
            }
        }
        warm = Some(sol.active_set.clone());
        z = z_new;
    }
    unreachable!("loop returns at k == max_iter");
}

fn build_sqp_qp(p: &NlpProblem, z: &NlpPoint, h: &DMatrix<f64>) -> Result<QpData, EvalError> {
    let w = z.w.as_slice();
    let n = p.num_vars();
    let m_eq = p.equalities.len();
    let m_in = p.inequalities.len();
    let mut a_eq = DMatrix::zeros(m_eq, n);
    let mut b_eq = DVector::zeros(m_eq);
    for (j, e) in p.equalities.iter().enumerate() {
        a_eq.row_mut(j).copy_from(&e.gradient(w)?.transpose());
        b_eq[j] = e.value(w)?;
    }
    let mut a_in = DMatrix::zeros(m_in, n);
    let mut b_in = DVector::zeros(m_in);
    for (j, e) in p.inequalities.iter().enumerate() {
        a_in.row_mut(j).copy_from(&e.gradient(w)?.transpose());
        b_in[j] = e.value(w)?;
    }
    Ok(QpData {
        hessian: h.clone(),
        gradient: p.objective.gradient(w)?,
        a_eq,
        b_eq,
        a_in,
        b_in,
    })
}

fn terminal_record_nlp(
    k: usize,
    z: &NlpPoint,
    residual: f64,
    err: Option<f64>,
    kappa: f64,
) -> IterationRecord {
    IterationRecord {
        k,
        w: z.w.clone(),
        lambda: z.lambda.clone(),
        mu: z.mu.clone(),
        xi: DVector::zeros(0),
        nu: DVector::zeros(0),
        kkt_residual: residual,
        step: None,
        step_norm: 0.0,
        err_to_ref: err,
        branch_signature: String::new(),
        num_candidates: 0,
        r_norm: 0.0,
        kappa,
        selected_s_stationary: None,
        non_s_fallback: false,
        qp_partition: None,
        g_active: Vec::new(),
    }
}

fn failed_trace_nlp(
    mut records: Vec<IterationRecord>,
    dims: TraceDims,
    k: usize,
    z: &NlpPoint,
    reference: &Option<NlpPoint>,
    message: String,
) -> SolveTrace {
    let err = reference.as_ref().map(|r| z.inf_distance(r));
    records.push(terminal_record_nlp(k, z, f64::NAN, err, 0.0));
    SolveTrace {
        records,
        status: SolveStatus::SubproblemFailure { iteration: k, message },
        dims,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;
    use nalgebra::{dmatrix, dvector};

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

    fn from_primal(p: &MpccProblem, w: &[f64]) -> PrimalDualPoint {
        PrimalDualPoint::from_primal(p, DVector::from_row_slice(w))
    }

    #[test]
    fn leyffer_sqpcc_turns_to_the_minimizer() {
        let p = parse_model(LEYFFER).unwrap();
        let z0 = from_primal(&p, &[0.0, 2.0]);
        let trace = sqpcc_solve(&p, &z0, &SolveOptions::default()).unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        assert!((trace.final_w() - dvector![1.0, 0.0]).amax() < 1e-10);
        // One G-side step, then the H-side branch finishes in one more
        // iteration (the branch NLP is a QP).
        let sigs: Vec<&str> =
            trace.records.iter().filter_map(|r| r.step.as_ref().map(|_| r.branch_signature.as_str())).collect();
        assert_eq!(sigs, vec!["G", "H", "H"]);
        let first_h = trace.records.iter().position(|r| r.branch_signature == "H").unwrap();
        let steps_after = trace.records.iter().skip(first_h + 1).filter(|r| r.step.is_some()).count();
        assert_eq!(steps_after, 1);
    }

    #[test]
    fn example51_exact_hessian_converges_quadratically_around_the_corner() {
        let p = parse_model(EXAMPLE51).unwrap();
        let z0 = from_primal(&p, &[2.0, 0.0]);
        let reference = PrimalDualPoint {
            w: dvector![0.0, 1.0],
            lambda: dvector![],
            mu: dvector![],
            xi: dvector![1.0],
            nu: dvector![0.0],
        };
        let opts = SolveOptions { reference: Some(reference), ..SolveOptions::default() };
        let trace = sqpcc_solve(&p, &z0, &opts).unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        assert!(trace.iterations() <= 15);
        assert!((trace.final_w() - dvector![0.0, 1.0]).amax() <= 1e-10);
        // Early iterates keep w2 exactly on the axis until the corner turn.
        let turn = trace.records.iter().position(|r| r.w[0].abs() <= 1e-12).unwrap();
        assert!(turn >= 1);
        for r in &trace.records[..turn] {
            assert!(r.w[1].abs() <= 1e-12, "iterate {} off the axis: {}", r.k, r.w[1]);
        }
        // Full-step property and exact multiplier handoff.
        for pair in trace.records.windows(2) {
            let step = pair[0].step.as_ref().unwrap();
            assert_eq!(&pair[0].w + step, pair[1].w);
        }
    }

    #[test]
    fn fixed_point_converges_in_zero_steps() {
        let p = parse_model(LEYFFER).unwrap();
        let z0 = PrimalDualPoint {
            w: dvector![1.0, 0.0],
            lambda: dvector![],
            mu: dvector![],
            xi: dvector![0.0],
            nu: dvector![0.0],
        };
        let trace = sqpcc_solve(&p, &z0, &SolveOptions::default()).unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        assert_eq!(trace.iterations(), 0);
    }

    #[test]
    fn forced_branch_reproduces_the_spurious_map() {
        let p = parse_model(LEYFFER).unwrap();
        let z0 = from_primal(&p, &[0.0, 0.5]);
        let opts = SolveOptions {
            policy: StepPolicy::ForcedBranch(BranchAssignment::parse("G").unwrap()),
            max_iter: 6,
            ..SolveOptions::default()
        };
        let trace = sqpcc_solve(&p, &z0, &opts).unwrap();
        assert_eq!(trace.status, SolveStatus::MaxIterations);
        for pair in trace.records.windows(2) {
            let t = pair[0].w[1];
            let expected = 3.0 * t * t / (6.0 * t + 2.0);
            assert!((pair[1].w[1] - expected).abs() <= 1e-12);
            assert_eq!(pair[1].w[0], 0.0);
            assert_eq!(pair[0].selected_s_stationary, Some(true));
        }
        assert_eq!(trace.iterations(), 6);
    }

    #[test]
    fn sqp_weak_constraint_follows_the_cubic_map() {
        let p = parse_model("var w; minimize w^2 + w^4; subject to: w >= 0;").unwrap();
        let nlp = NlpProblem {
            vars: p.var_names().to_vec(),
            objective: p.objective.clone(),
            equalities: vec![],
            inequalities: p.inequalities.clone(),
        };
        let z0 = NlpPoint::from_primal(&nlp, dvector![0.4]);
        let trace = sqp_solve(&nlp, &z0, &SolveOptions::default()).unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        for pair in trace.records.windows(2) {
            let t = pair[0].w[0];
            let expected = 4.0 * t * t * t / (6.0 * t * t + 1.0);
            assert!((pair[1].w[0] - expected).abs() <= 1e-12);
            assert!(pair[0].g_active.is_empty());
        }
    }

    #[test]
    fn sqp_strict_constraint_is_identified_finitely() {
        let p = parse_model("var w; minimize (w+1)^2 + (w+1)^4; subject to: w >= 0;").unwrap();
        let nlp = NlpProblem {
            vars: p.var_names().to_vec(),
            objective: p.objective.clone(),
            equalities: vec![],
            inequalities: p.inequalities.clone(),
        };
        let z0 = NlpPoint::from_primal(&nlp, dvector![0.4]);
        let trace = sqp_solve(&nlp, &z0, &SolveOptions::default()).unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        assert!((trace.final_w()[0]).abs() < 1e-12);
        assert!((trace.final_record().mu[0] - 6.0).abs() < 1e-9);
        // Active set identified at the first subproblem and kept.
        let with_steps: Vec<_> = trace.records.iter().filter(|r| r.step.is_some()).collect();
        assert!(with_steps.iter().all(|r| r.g_active == vec![0]));
    }

    #[test]
    fn next_hessian_variants() {
        let p = parse_model(LEYFFER).unwrap();
        let z = from_primal(&p, &[0.0, 2.0]);
        let exact = p.lagrangian_hessian(&z).unwrap();
        assert_eq!(exact, dmatrix![2.0, 0.0; 0.0, 14.0]);

        let mut s = HessianStrategy::new(HessianKind::Constant(dmatrix![5.0, 0.0; 0.0, 10.0]));
        for _ in 0..3 {
            assert_eq!(s.matrix(&exact, None).unwrap(), dmatrix![5.0, 0.0; 0.0, 10.0]);
        }

        let mut s = HessianStrategy::new(HessianKind::PerturbedIdentity);
        assert_eq!(s.matrix(&exact, None).unwrap(), dmatrix![3.0, 0.0; 0.0, 15.0]);

        let mut s = HessianStrategy::new(HessianKind::Bfgs { initial: Some(DMatrix::identity(2, 2)) });
        let b0 = s.matrix(&exact, None).unwrap();
        // Orthogonal s and y trigger the skip rule: matrix unchanged.
        s.bfgs_update(&dvector![1.0, 0.0], &dvector![0.0, 1.0]);
        assert_eq!(s.matrix(&exact, None).unwrap(), b0);
        // A genuine curvature pair updates and stays positive definite.
        s.bfgs_update(&dvector![1.0, 0.5], &dvector![2.0, 1.5]);
        let b1 = s.matrix(&exact, None).unwrap();
        assert!(crate::denseqp::min_eigenvalue(&b1) > 0.0);

        let mut s = HessianStrategy::new(HessianKind::GaussNewton { floor: 1e-6 });
        assert!(matches!(s.matrix(&exact, None), Err(SolveError::GaussNewtonWithoutResiduals)));
    }

    #[test]
    fn gauss_newton_on_a_residual_model() {
        let src = "\
var x;
minimize (x^2 - 1)^2 + x^2;
residuals x^2 - 1; x;
";
        let p = parse_model(src).unwrap();
        let z0 = from_primal(&p, &[1.0]);
        let opts = SolveOptions {
            hessian: HessianKind::GaussNewton { floor: 1e-6 },
            max_iter: 200,
            ..SolveOptions::default()
        };
        let trace = sqpcc_solve(&p, &z0, &opts).unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        let root = (0.5f64).sqrt();
        assert!((trace.final_w()[0] - root).abs() < 1e-8);
        // Nonzero residual at the solution keeps kappa bounded away from 0.
        assert!(trace.final_record().kappa > 0.5);
    }

    #[test]
    fn perturbation_vanishes_on_quadratic_data_and_zero_steps() {
        let src = "var x, y; minimize x^2 + y^2 + x*y + x;";
        let p = parse_model(src).unwrap();
        let z0 = from_primal(&p, &[1.0, -2.0]);
        let z1 = from_primal(&p, &[0.3, 0.7]);
        let h = p.lagrangian_hessian(&z0).unwrap();
        let r = perturbation_rk(&p, &z0, &z1, &h).unwrap();
        assert!(r.amax() <= 1e-12);
        let r = perturbation_rk(&p, &z0, &z0, &h).unwrap();
        assert_eq!(r.amax(), 0.0);
    }

    #[test]
    fn perturbation_is_second_order_on_example51() {
        let p = parse_model(EXAMPLE51).unwrap();
        let z0 = from_primal(&p, &[2.0, 0.0]);
        let trace = sqpcc_solve(&p, &z0, &SolveOptions::default()).unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        // |r^k| <= C |dz|^2 with a uniform finite C over the trace.
        let mut c_max: f64 = 0.0;
        for pair in trace.records.windows(2) {
            let dz_parts = [
                (&pair[1].w - &pair[0].w).amax(),
                (&pair[1].xi - &pair[0].xi).amax(),
                (&pair[1].nu - &pair[0].nu).amax(),
            ];
            let dz = dz_parts.iter().fold(0.0f64, |a, &b| a.max(b));
            if dz > 1e-14 {
                c_max = c_max.max(pair[0].r_norm / (dz * dz));
            }
        }
        assert!(c_max.is_finite() && c_max > 0.0 && c_max < 1e3, "C = {c_max}");
    }

    #[test]
    fn kappa_values_for_the_documented_strategies() {
        let p = parse_model(EXAMPLE51).unwrap();
        let z = from_primal(&p, &[0.0, 1.0]);
        let exact = p.lagrangian_hessian(&z).unwrap();
        assert!(kappa_estimate(&p, &z, &exact).unwrap() < 1e-15);
        let perturbed = &exact + DMatrix::identity(2, 2);
        assert!((kappa_estimate(&p, &z, &perturbed).unwrap() - 1.0).abs() < 1e-12);
        let constant = dmatrix![5.0, 0.0; 0.0, 10.0];
        assert!((kappa_estimate(&p, &z, &constant).unwrap() - 8.0).abs() < 1e-12);
        // At the origin the exact Hessian is diag(2, 14), so the constant
        // approximation is off by |diag(-3, 4)|₂ = 4.
        let z0 = from_primal(&p, &[0.0, 0.0]);
        assert!((kappa_estimate(&p, &z0, &constant).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn traces_are_bit_identical_across_runs() {
        let p = parse_model(EXAMPLE51).unwrap();
        let z0 = from_primal(&p, &[2.0, 0.0]);
        let opts = SolveOptions::default();
        let a = sqpcc_solve(&p, &z0, &opts).unwrap();
        let b = sqpcc_solve(&p, &z0, &opts).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(ra.w.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       rb.w.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(ra.kkt_residual.to_bits(), rb.kkt_residual.to_bits());
            assert_eq!(ra.r_norm.to_bits(), rb.r_norm.to_bits());
            assert_eq!(ra.kappa.to_bits(), rb.kappa.to_bits());
        }
    }

    #[test]
    fn bfgs_matrices_stay_positive_definite_along_a_run() {
        let p = parse_model(EXAMPLE51).unwrap();
        let z0 = from_primal(&p, &[2.0, 0.0]);
        let opts = SolveOptions {
            hessian: HessianKind::Bfgs { initial: None },
            max_iter: 60,
            ..SolveOptions::default()
        };
        let trace = sqpcc_solve(&p, &z0, &opts).unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        assert!((trace.final_w() - dvector![0.0, 1.0]).amax() < 1e-9);
    }
}
