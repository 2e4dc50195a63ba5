//! MPCC data model: problem functions with derivative access, index sets,
//! and the derived problems (NLP reformulation, branch NLPs, relaxed NLP)
//! on which both the solvers and the stationarity analysis are built.
//!
//! Conventions, used consistently across the crate:
//!
//! - inequality constraints are stored as `g(w) <= 0`; `>= 0` forms from the
//!   model format are negated at parse time;
//! - complementarity pairs `(G_i, H_i)` mean `0 <= G_i(w) ⟂ H_i(w) >= 0`;
//! - the MPCC-Lagrangian is `L = f + λᵀh + μᵀg − ξᵀG − νᵀH`, so S-stationarity
//!   requires `ξ_i, ν_i >= 0` on biactive pairs.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::expr::{self, Expr, EvalError, ParseError};

/// An expression bundled with its precomputed symbolic gradient and Hessian.
///
/// Construction performs all differentiation once; evaluation afterwards is
/// pure and thread-safe.
#[derive(Debug, Clone)]
pub struct Differentiable {
    pub expr: Expr,
    grad: Vec<Expr>,
    hess: Vec<Vec<Expr>>, // lower triangle, hess[i][j] for j <= i
}

impl Differentiable {
    pub fn new(expr: Expr, n: usize) -> Self {
        let grad: Vec<Expr> = (0..n).map(|i| expr.diff(i)).collect();
        let hess = (0..n)
            .map(|i| (0..=i).map(|j| grad[i].diff(j)).collect())
            .collect();
        Differentiable { expr, grad, hess }
    }

    pub fn value(&self, w: &[f64]) -> Result<f64, EvalError> {
        self.expr.eval(w)
    }

    pub fn gradient(&self, w: &[f64]) -> Result<DVector<f64>, EvalError> {
        let mut g = DVector::zeros(self.grad.len());
        for (i, e) in self.grad.iter().enumerate() {
            g[i] = e.eval(w)?;
        }
        Ok(g)
    }

    pub fn gradient_expr(&self, i: usize) -> &Expr {
        &self.grad[i]
    }

    /// Symmetric Hessian, assembled from the lower triangle.
    pub fn hessian(&self, w: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        let n = self.grad.len();
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.hess[i][j].eval(w)?;
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        Ok(h)
    }
}

/// Primal-dual MPCC iterate `z = (w, λ, μ, ξ, ν)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualPoint {
    pub w: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub xi: DVector<f64>,
    pub nu: DVector<f64>,
}

impl PrimalDualPoint {
    /// Point with the given primal part and zero multipliers, sized for `p`.
    pub fn from_primal(p: &MpccProblem, w: DVector<f64>) -> Self {
        PrimalDualPoint {
            w,
            lambda: DVector::zeros(p.num_equalities()),
            mu: DVector::zeros(p.num_inequalities()),
            xi: DVector::zeros(p.num_pairs()),
            nu: DVector::zeros(p.num_pairs()),
        }
    }

    /// Stacked vector `(w, λ, μ, ξ, ν)`.
    pub fn stacked(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(
            self.w.len() + self.lambda.len() + self.mu.len() + self.xi.len() + self.nu.len(),
        );
        v.extend(self.w.iter());
        v.extend(self.lambda.iter());
        v.extend(self.mu.iter());
        v.extend(self.xi.iter());
        v.extend(self.nu.iter());
        DVector::from_vec(v)
    }

    /// Infinity-norm distance to another point.
    pub fn inf_distance(&self, other: &PrimalDualPoint) -> f64 {
        (self.stacked() - other.stacked()).amax()
    }
}

/// Primal-dual iterate for a plain NLP, `z = (w, λ, μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpPoint {
    pub w: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
}

impl NlpPoint {
    pub fn from_primal(p: &NlpProblem, w: DVector<f64>) -> Self {
        NlpPoint {
            w,
            lambda: DVector::zeros(p.equalities.len()),
            mu: DVector::zeros(p.inequalities.len()),
        }
    }

    pub fn stacked(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.w.len() + self.lambda.len() + self.mu.len());
        v.extend(self.w.iter());
        v.extend(self.lambda.iter());
        v.extend(self.mu.iter());
        DVector::from_vec(v)
    }

    pub fn inf_distance(&self, other: &NlpPoint) -> f64 {
        (self.stacked() - other.stacked()).amax()
    }
}

/// Which side of the L-shaped set a pair is fixed to in a branch NLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BranchSide {
    /// `G_i = 0` as equality, `H_i >= 0` as inequality.
    FixG,
    /// `H_i = 0` as equality, `G_i >= 0` as inequality.
    FixH,
}

/// One side per complementarity pair, selecting a branch NLP.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct BranchAssignment(pub Vec<BranchSide>);

impl BranchAssignment {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Signature string, one `G` or `H` per pair (`G` = G-side, `G_i = 0`).
    pub fn signature(&self) -> String {
        self.0
            .iter()
            .map(|s| match s {
                BranchSide::FixG => 'G',
                BranchSide::FixH => 'H',
            })
            .collect()
    }

    /// Parse a `G`/`H` string, as accepted by the CLI `--policy force:...`.
    pub fn parse(s: &str) -> Option<Self> {
        s.chars()
            .map(|c| match c {
                'G' | 'g' => Some(BranchSide::FixG),
                'H' | 'h' => Some(BranchSide::FixH),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(BranchAssignment)
    }

    /// All `2^m` assignments in lexicographic order (G before H per pair).
    pub fn enumerate(m: usize) -> Vec<BranchAssignment> {
        let count = 1usize << m;
        (0..count)
            .map(|bits| {
                BranchAssignment(
                    (0..m)
                        .map(|i| {
                            if bits >> (m - 1 - i) & 1 == 0 {
                                BranchSide::FixG
                            } else {
                                BranchSide::FixH
                            }
                        })
                        .collect(),
                )
            })
            .collect()
    }
}

/// Index sets `I_{0+}`, `I_{+0}`, `I_{00}` of the complementarity pairs at a
/// feasible point (0-based indices, each sorted).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplementarityPartition {
    pub i_zero_plus: Vec<usize>,
    pub i_plus_zero: Vec<usize>,
    pub i_zero_zero: Vec<usize>,
    pub tol: f64,
}

/// Active, strictly active, weakly active and inactive inequality indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSets {
    pub active: Vec<usize>,
    pub strictly_active: Vec<usize>,
    pub weakly_active: Vec<usize>,
    pub inactive: Vec<usize>,
    pub tol: f64,
}

/// A standard NLP with derivative access; produced from an [`MpccProblem`]
/// by reformulation, branch fixing or relaxation, and consumed by the
/// classical SQP baseline.
#[derive(Debug, Clone)]
pub struct NlpProblem {
    pub vars: Vec<String>,
    pub objective: Differentiable,
    pub equalities: Vec<Differentiable>,
    /// Convention `g(w) <= 0`.
    pub inequalities: Vec<Differentiable>,
}

impl NlpProblem {
    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    /// Gradient of the standard Lagrangian `∇f + ∇h λ + ∇g μ`.
    pub fn lagrangian_gradient(&self, z: &NlpPoint) -> Result<DVector<f64>, EvalError> {
        let w = z.w.as_slice();
        let mut g = self.objective.gradient(w)?;
        for (e, &l) in self.equalities.iter().zip(z.lambda.iter()) {
            g += e.gradient(w)? * l;
        }
        for (e, &m) in self.inequalities.iter().zip(z.mu.iter()) {
            g += e.gradient(w)? * m;
        }
        Ok(g)
    }

    /// Hessian of the standard Lagrangian in `w`.
    pub fn lagrangian_hessian(&self, z: &NlpPoint) -> Result<DMatrix<f64>, EvalError> {
        let w = z.w.as_slice();
        let mut h = self.objective.hessian(w)?;
        for (e, &l) in self.equalities.iter().zip(z.lambda.iter()) {
            h += e.hessian(w)? * l;
        }
        for (e, &m) in self.inequalities.iter().zip(z.mu.iter()) {
            h += e.hessian(w)? * m;
        }
        Ok(h)
    }

    /// Infinity norm of the standard KKT residual at `z`.
    pub fn kkt_residual(&self, z: &NlpPoint) -> Result<f64, EvalError> {
        let w = z.w.as_slice();
        let mut r = self.lagrangian_gradient(z)?.amax();
        for e in &self.equalities {
            r = r.max(e.value(w)?.abs());
        }
        for (e, &m) in self.inequalities.iter().zip(z.mu.iter()) {
            let gi = e.value(w)?;
            r = r.max(gi.max(0.0));
            r = r.max(m.min(-gi).abs());
            r = r.max((-m).max(0.0));
        }
        Ok(r)
    }
}

/// The full MPCC problem data `(f, h, g, G, H)` with optional residual list
/// for Gauss-Newton Hessians. Immutable after construction.
#[derive(Debug, Clone)]
pub struct MpccProblem {
    vars: Vec<String>,
    pub objective: Differentiable,
    pub equalities: Vec<Differentiable>,
    /// Convention `g(w) <= 0`.
    pub inequalities: Vec<Differentiable>,
    pub pairs: Vec<(Differentiable, Differentiable)>,
    pub residuals: Option<Vec<Differentiable>>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("syntax error at line {line}, column {col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("duplicate variable `{name}` at line {line}, column {col}")]
    DuplicateVariable { name: String, line: usize, col: usize },
    #[error("empty or missing objective")]
    EmptyObjective,
    #[error("no variables declared")]
    NoVariables,
    #[error("expression references variable index {index} but only {n} variables are declared")]
    VariableOutOfRange { index: usize, n: usize },
    #[error(
        "residual list inconsistent with objective at w = {point:?}: f = {f}, sum of squares = {sum}"
    )]
    ResidualMismatch { point: Vec<f64>, f: f64, sum: f64 },
    #[error("evaluation failed while validating the model: {0}")]
    Eval(#[from] EvalError),
}

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("pair {index} infeasible at the query point: G = {g}, H = {h} (tol = {tol})")]
    Infeasible { index: usize, g: f64, h: f64, tol: f64 },
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
}

impl MpccProblem {
    /// Validating constructor. Checks index ranges and, when a residual list
    /// is present, that the objective equals the sum of squared residuals at
    /// 100 random points.
    pub fn new(
        vars: Vec<String>,
        objective: Expr,
        equalities: Vec<Expr>,
        inequalities: Vec<Expr>,
        pairs: Vec<(Expr, Expr)>,
        residuals: Option<Vec<Expr>>,
    ) -> Result<Self, ModelError> {
        let n = vars.len();
        if n == 0 {
            return Err(ModelError::NoVariables);
        }
        let check = |e: &Expr| -> Result<(), ModelError> {
            if let Some(i) = e.max_var() {
                if i >= n {
                    return Err(ModelError::VariableOutOfRange { index: i, n });
                }
            }
            Ok(())
        };
        check(&objective)?;
        for e in equalities.iter().chain(inequalities.iter()) {
            check(e)?;
        }
        for (g, h) in &pairs {
            check(g)?;
            check(h)?;
        }
        if let Some(rs) = &residuals {
            for r in rs {
                check(r)?;
            }
            // Validate f == sum r_i^2 on random points before committing.
            let mut rng = StdRng::seed_from_u64(0x5eed_0bad_cafe);
            let mut checked = 0;
            let mut attempts = 0;
            while checked < 100 && attempts < 1000 {
                attempts += 1;
                let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let f = match objective.eval(&w) {
                    Ok(v) => v,
                    Err(_) => continue, // outside some function's domain; resample
                };
                let mut sum = 0.0;
                let mut ok = true;
                for r in rs {
                    match r.eval(&w) {
                        Ok(v) => sum += v * v,
                        Err(_) => {
                            ok = false;
                            break;
                        }
                    }
                }
                if !ok {
                    continue;
                }
                if (f - sum).abs() > 1e-10 * f.abs().max(1.0) {
                    return Err(ModelError::ResidualMismatch { point: w, f, sum });
                }
                checked += 1;
            }
        }
        let d = |e: Expr| Differentiable::new(e, n);
        Ok(MpccProblem {
            vars,
            objective: d(objective),
            equalities: equalities.into_iter().map(d).collect(),
            inequalities: inequalities.into_iter().map(d).collect(),
            pairs: pairs.into_iter().map(|(g, h)| (d(g), d(h))).collect(),
            residuals: residuals.map(|rs| rs.into_iter().map(d).collect()),
        })
    }

    pub fn var_names(&self) -> &[String] {
        &self.vars
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn num_equalities(&self) -> usize {
        self.equalities.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.inequalities.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Values of all pair functions at `w`: `(G(w), H(w))`.
    pub fn pair_values(&self, w: &[f64]) -> Result<(DVector<f64>, DVector<f64>), EvalError> {
        let m = self.pairs.len();
        let mut g = DVector::zeros(m);
        let mut h = DVector::zeros(m);
        for (i, (ge, he)) in self.pairs.iter().enumerate() {
            g[i] = ge.value(w)?;
            h[i] = he.value(w)?;
        }
        Ok((g, h))
    }

    /// Partition the pairs into `I_{0+}`, `I_{+0}`, `I_{00}` at a point that
    /// is complementarity-feasible to within `tol`.
    pub fn complementarity_partition(
        &self,
        w: &[f64],
        tol: f64,
    ) -> Result<ComplementarityPartition, PartitionError> {
        let (gv, hv) = self.pair_values(w)?;
        let mut part = ComplementarityPartition {
            i_zero_plus: Vec::new(),
            i_plus_zero: Vec::new(),
            i_zero_zero: Vec::new(),
            tol,
        };
        for i in 0..self.pairs.len() {
            let (g, h) = (gv[i], hv[i]);
            if g < -tol || h < -tol || (g > tol && h > tol) {
                return Err(PartitionError::Infeasible { index: i, g, h, tol });
            }
            if g <= tol && h <= tol {
                part.i_zero_zero.push(i);
            } else if g <= tol {
                part.i_zero_plus.push(i);
            } else {
                part.i_plus_zero.push(i);
            }
        }
        Ok(part)
    }

    /// Active-set split of the inequality constraints at `(w, μ)`.
    pub fn active_sets(&self, w: &[f64], mu: &[f64], tol: f64) -> Result<ActiveSets, EvalError> {
        let mut sets = ActiveSets {
            active: Vec::new(),
            strictly_active: Vec::new(),
            weakly_active: Vec::new(),
            inactive: Vec::new(),
            tol,
        };
        for (i, e) in self.inequalities.iter().enumerate() {
            let gi = e.value(w)?;
            if gi.abs() <= tol {
                sets.active.push(i);
                if mu.get(i).copied().unwrap_or(0.0) > tol {
                    sets.strictly_active.push(i);
                } else {
                    sets.weakly_active.push(i);
                }
            } else {
                sets.inactive.push(i);
            }
        }
        Ok(sets)
    }

    /// The bilinear NLP reformulation: inequalities `[g; -G; -H; G_i·H_i]`,
    /// equalities `h`, objective unchanged.
    pub fn nlp_reformulation(&self) -> NlpProblem {
        let n = self.num_vars();
        let mut inequalities: Vec<Expr> =
            self.inequalities.iter().map(|e| e.expr.clone()).collect();
        for (g, _) in &self.pairs {
            inequalities.push(expr::neg(g.expr.clone()));
        }
        for (_, h) in &self.pairs {
            inequalities.push(expr::neg(h.expr.clone()));
        }
        for (g, h) in &self.pairs {
            inequalities.push(expr::mul(g.expr.clone(), h.expr.clone()));
        }
        NlpProblem {
            vars: self.vars.clone(),
            objective: Differentiable::new(self.objective.expr.clone(), n),
            equalities: self
                .equalities
                .iter()
                .map(|e| Differentiable::new(e.expr.clone(), n))
                .collect(),
            inequalities: inequalities
                .into_iter()
                .map(|e| Differentiable::new(e, n))
                .collect(),
        }
    }

    /// The branch NLP for assignment `a`: G-side pairs contribute
    /// `G_i = 0` and `-H_i <= 0`, H-side pairs the mirror image; original
    /// `h` and `g` are retained.
    pub fn branch_nlp(&self, a: &BranchAssignment) -> NlpProblem {
        assert_eq!(a.len(), self.pairs.len(), "branch assignment length mismatch");
        let n = self.num_vars();
        let mut equalities: Vec<Expr> = self.equalities.iter().map(|e| e.expr.clone()).collect();
        let mut inequalities: Vec<Expr> =
            self.inequalities.iter().map(|e| e.expr.clone()).collect();
        for ((g, h), side) in self.pairs.iter().zip(&a.0) {
            match side {
                BranchSide::FixG => {
                    equalities.push(g.expr.clone());
                    inequalities.push(expr::neg(h.expr.clone()));
                }
                BranchSide::FixH => {
                    equalities.push(h.expr.clone());
                    inequalities.push(expr::neg(g.expr.clone()));
                }
            }
        }
        NlpProblem {
            vars: self.vars.clone(),
            objective: Differentiable::new(self.objective.expr.clone(), n),
            equalities: equalities.into_iter().map(|e| Differentiable::new(e, n)).collect(),
            inequalities: inequalities
                .into_iter()
                .map(|e| Differentiable::new(e, n))
                .collect(),
        }
    }

    /// The relaxed NLP at the partition `part`: nondegenerate pairs keep
    /// their identified side, degenerate pairs keep only the nonnegativity
    /// of both functions.
    pub fn relaxed_nlp(&self, part: &ComplementarityPartition) -> NlpProblem {
        let n = self.num_vars();
        let mut equalities: Vec<Expr> = self.equalities.iter().map(|e| e.expr.clone()).collect();
        let mut inequalities: Vec<Expr> =
            self.inequalities.iter().map(|e| e.expr.clone()).collect();
        for (i, (g, h)) in self.pairs.iter().enumerate() {
            if part.i_zero_plus.contains(&i) {
                equalities.push(g.expr.clone());
                inequalities.push(expr::neg(h.expr.clone()));
            } else if part.i_plus_zero.contains(&i) {
                equalities.push(h.expr.clone());
                inequalities.push(expr::neg(g.expr.clone()));
            } else {
                inequalities.push(expr::neg(g.expr.clone()));
                inequalities.push(expr::neg(h.expr.clone()));
            }
        }
        NlpProblem {
            vars: self.vars.clone(),
            objective: Differentiable::new(self.objective.expr.clone(), n),
            equalities: equalities.into_iter().map(|e| Differentiable::new(e, n)).collect(),
            inequalities: inequalities
                .into_iter()
                .map(|e| Differentiable::new(e, n))
                .collect(),
        }
    }

    /// Gradient of the MPCC-Lagrangian `∇f + ∇h λ + ∇g μ − ∇G ξ − ∇H ν`.
    pub fn lagrangian_gradient(&self, z: &PrimalDualPoint) -> Result<DVector<f64>, EvalError> {
        let w = z.w.as_slice();
        let mut g = self.objective.gradient(w)?;
        for (e, &l) in self.equalities.iter().zip(z.lambda.iter()) {
            g += e.gradient(w)? * l;
        }
        for (e, &m) in self.inequalities.iter().zip(z.mu.iter()) {
            g += e.gradient(w)? * m;
        }
        for ((ge, he), (&xi, &nu)) in self.pairs.iter().zip(z.xi.iter().zip(z.nu.iter())) {
            g -= ge.gradient(w)? * xi;
            g -= he.gradient(w)? * nu;
        }
        Ok(g)
    }

    /// Exact symmetric Hessian of the MPCC-Lagrangian in `w`.
    pub fn lagrangian_hessian(&self, z: &PrimalDualPoint) -> Result<DMatrix<f64>, EvalError> {
        let w = z.w.as_slice();
        let mut h = self.objective.hessian(w)?;
        for (e, &l) in self.equalities.iter().zip(z.lambda.iter()) {
            h += e.hessian(w)? * l;
        }
        for (e, &m) in self.inequalities.iter().zip(z.mu.iter()) {
            h += e.hessian(w)? * m;
        }
        for ((ge, he), (&xi, &nu)) in self.pairs.iter().zip(z.xi.iter().zip(z.nu.iter())) {
            h -= ge.hessian(w)? * xi;
            h -= he.hessian(w)? * nu;
        }
        Ok(h)
    }

    /// Infinity-norm residual of the S-stationarity system at `z`.
    ///
    /// Zero (to tolerance) exactly when `z` is an S-stationary primal-dual
    /// pair: stationarity of the MPCC-Lagrangian, primal feasibility,
    /// complementarity for `g`, vanishing multipliers on inactive pair sides,
    /// and nonnegative `ξ_i, ν_i` on biactive pairs. `tol` is the activity
    /// tolerance used to decide which sides count as active.
    pub fn kkt_residual(&self, z: &PrimalDualPoint, tol: f64) -> Result<f64, EvalError> {
        let w = z.w.as_slice();
        let mut r = self.lagrangian_gradient(z)?.amax();
        for e in &self.equalities {
            r = r.max(e.value(w)?.abs());
        }
        for (e, &m) in self.inequalities.iter().zip(z.mu.iter()) {
            let gi = e.value(w)?;
            r = r.max(gi.max(0.0));
            r = r.max(m.min(-gi).abs());
            r = r.max((-m).max(0.0));
        }
        let (gv, hv) = self.pair_values(w)?;
        for i in 0..self.pairs.len() {
            let (g, h) = (gv[i], hv[i]);
            r = r.max((-g).max(0.0));
            r = r.max((-h).max(0.0));
            r = r.max(g.min(h).abs());
            if g > tol {
                r = r.max(z.xi[i].abs());
            }
            if h > tol {
                r = r.max(z.nu[i].abs());
            }
            if g <= tol && h <= tol {
                r = r.max((-z.xi[i]).max(0.0));
                r = r.max((-z.nu[i]).max(0.0));
            }
        }
        Ok(r)
    }

    /// Maximum violation of feasibility (equalities, inequalities, pair
    /// nonnegativity and complementarity) at `w`.
    pub fn feasibility_violation(&self, w: &[f64]) -> Result<f64, EvalError> {
        let mut v: f64 = 0.0;
        for e in &self.equalities {
            v = v.max(e.value(w)?.abs());
        }
        for e in &self.inequalities {
            v = v.max(e.value(w)?.max(0.0));
        }
        let (gv, hv) = self.pair_values(w)?;
        for i in 0..self.pairs.len() {
            v = v.max((-gv[i]).max(0.0));
            v = v.max((-hv[i]).max(0.0));
            v = v.max(gv[i].min(hv[i]).abs());
        }
        Ok(v)
    }
}

/// Parse the line-oriented model format:
///
/// ```text
/// var w1, w2;
/// minimize <expr>;
/// residuals <expr>; <expr>; ... ;        # optional, enables Gauss-Newton
/// subject to:
///   <expr> == 0;
///   <expr> <= 0;
///   <expr> >= 0;                          # negated internally
///   comp <expr> , <expr>;                 # 0 <= e1 perp e2 >= 0
/// ```
///
/// `#` starts a comment that runs to the end of the line.
pub fn parse_model(text: &str) -> Result<MpccProblem, ModelError> {
    let mut p = ModelParser::new(text);
    p.parse()
}

struct ModelParser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> ModelParser<'a> {
    fn new(src: &'a str) -> Self {
        ModelParser { src, pos: 0 }
    }

    fn line_col(&self, offset: usize) -> (usize, usize) {
        let mut line = 1;
        let mut col = 1;
        for (i, c) in self.src.char_indices() {
            if i >= offset {
                break;
            }
            if c == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
        }
        (line, col)
    }

    fn syntax_err(&self, offset: usize, message: impl Into<String>) -> ModelError {
        let (line, col) = self.line_col(offset);
        ModelError::Syntax { line, col, message: message.into() }
    }

    fn expr_err(&self, base: usize, err: ParseError) -> ModelError {
        match err {
            ParseError::UnknownIdentifier { offset, name } => {
                self.syntax_err(base + offset, format!("unknown identifier `{name}`"))
            }
            ParseError::NonIntegerExponent { offset, text } => {
                self.syntax_err(base + offset, format!("non-integer exponent `{text}`"))
            }
            ParseError::Syntax { offset, message } => self.syntax_err(base + offset, message),
        }
    }

    fn skip_ws_comments(&mut self) {
        let bytes = self.src.as_bytes();
        loop {
            while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < bytes.len() && bytes[self.pos] == b'#' {
                while self.pos < bytes.len() && bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn peek_word(&mut self) -> Option<&'a str> {
        self.skip_ws_comments();
        let bytes = self.src.as_bytes();
        let start = self.pos;
        let mut end = start;
        while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
            end += 1;
        }
        if end > start {
            Some(&self.src[start..end])
        } else {
            None
        }
    }

    fn eat_word(&mut self, word: &str) -> bool {
        if self.peek_word() == Some(word) {
            self.pos += word.len();
            true
        } else {
            false
        }
    }

    fn eat_symbol(&mut self, sym: &str) -> bool {
        self.skip_ws_comments();
        if self.src[self.pos..].starts_with(sym) {
            self.pos += sym.len();
            true
        } else {
            false
        }
    }

    /// Slice from the current position up to (not including) the next
    /// occurrence of one of `stops` outside parentheses. Comments inside the
    /// slice are blanked out so expression offsets stay aligned.
    fn take_until(&mut self, stops: &[&'static str]) -> Result<(usize, String, &'static str), ModelError> {
        self.skip_ws_comments();
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut depth = 0usize;
        let mut i = start;
        while i < bytes.len() {
            let rest = &self.src[i..];
            if bytes[i] == b'(' {
                depth += 1;
            } else if bytes[i] == b')' {
                depth = depth.saturating_sub(1);
            } else if depth == 0 {
                for stop in stops {
                    if rest.starts_with(stop) {
                        let mut text = self.src[start..i].to_string();
                        blank_comments(&mut text);
                        self.pos = i;
                        return Ok((start, text, stop));
                    }
                }
            }
            i += 1;
        }
        Err(self.syntax_err(start, format!("expected one of {stops:?} before end of input")))
    }

    fn parse(&mut self) -> Result<MpccProblem, ModelError> {
        let mut vars: Vec<String> = Vec::new();
        let mut objective: Option<Expr> = None;
        let mut residuals: Option<Vec<Expr>> = None;
        let mut equalities = Vec::new();
        let mut inequalities = Vec::new();
        let mut pairs = Vec::new();

        loop {
            self.skip_ws_comments();
            if self.pos >= self.src.len() {
                break;
            }
            let word_start = self.pos;
            if self.eat_word("var") {
                loop {
                    self.skip_ws_comments();
                    let start = self.pos;
                    match self.peek_word() {
                        Some(name) if !name.is_empty() && !name.as_bytes()[0].is_ascii_digit() => {
                            self.pos += name.len();
                            if vars.iter().any(|v| v == name) {
                                let (line, col) = self.line_col(start);
                                return Err(ModelError::DuplicateVariable {
                                    name: name.to_string(),
                                    line,
                                    col,
                                });
                            }
                            vars.push(name.to_string());
                        }
                        _ => return Err(self.syntax_err(start, "expected variable name")),
                    }
                    if self.eat_symbol(",") {
                        continue;
                    }
                    if self.eat_symbol(";") {
                        break;
                    }
                    return Err(self.syntax_err(self.pos, "expected `,` or `;` in var list"));
                }
            } else if self.eat_word("minimize") {
                let (start, text, _) = self.take_until(&[";"])?;
                if text.trim().is_empty() {
                    return Err(ModelError::EmptyObjective);
                }
                let e = expr::parse_expr(&text, &vars).map_err(|e| self.expr_err(start, e))?;
                objective = Some(e);
                self.eat_symbol(";");
            } else if self.eat_word("residuals") {
                let mut list = Vec::new();
                loop {
                    let (start, text, _) = self.take_until(&[";"])?;
                    let e = expr::parse_expr(&text, &vars).map_err(|e| self.expr_err(start, e))?;
                    list.push(e);
                    self.eat_symbol(";");
                    self.skip_ws_comments();
                    match self.peek_word() {
                        Some("subject") | None => break,
                        Some("var") | Some("minimize") | Some("residuals") => break,
                        _ => continue,
                    }
                }
                residuals = Some(list);
            } else if self.eat_word("subject") {
                if !self.eat_word("to") {
                    return Err(self.syntax_err(self.pos, "expected `to` after `subject`"));
                }
                if !self.eat_symbol(":") {
                    return Err(self.syntax_err(self.pos, "expected `:` after `subject to`"));
                }
                loop {
                    self.skip_ws_comments();
                    if self.pos >= self.src.len() {
                        break;
                    }
                    if self.eat_word("comp") {
                        let (s1, t1, _) = self.take_until(&[","])?;
                        let g = expr::parse_expr(&t1, &vars).map_err(|e| self.expr_err(s1, e))?;
                        self.eat_symbol(",");
                        let (s2, t2, _) = self.take_until(&[";"])?;
                        let h = expr::parse_expr(&t2, &vars).map_err(|e| self.expr_err(s2, e))?;
                        self.eat_symbol(";");
                        pairs.push((g, h));
                        continue;
                    }
                    let (start, text, stop) = self.take_until(&["==", "<=", ">="])?;
                    let e = expr::parse_expr(&text, &vars).map_err(|e| self.expr_err(start, e))?;
                    self.eat_symbol(stop);
                    self.skip_ws_comments();
                    let zero_at = self.pos;
                    let (zstart, ztext, _) = self.take_until(&[";"])?;
                    let _ = zstart;
                    if ztext.trim() != "0" {
                        return Err(self.syntax_err(
                            zero_at,
                            format!("expected `0` on the right-hand side, found `{}`", ztext.trim()),
                        ));
                    }
                    self.eat_symbol(";");
                    match stop {
                        "==" => equalities.push(e),
                        "<=" => inequalities.push(e),
                        ">=" => inequalities.push(expr::neg(e)),
                        _ => unreachable!(),
                    }
                }
            } else {
                let found = self.peek_word().unwrap_or("?").to_string();
                return Err(self.syntax_err(
                    word_start,
                    format!("expected `var`, `minimize`, `residuals` or `subject to:`, found `{found}`"),
                ));
            }
        }

        let objective = objective.ok_or(ModelError::EmptyObjective)?;
        MpccProblem::new(vars, objective, equalities, inequalities, pairs, residuals)
    }
}

/// Replace `#`-comments with spaces, preserving byte offsets.
fn blank_comments(text: &mut String) {
    let mut bytes = std::mem::take(text).into_bytes();
    let mut in_comment = false;
    for b in bytes.iter_mut() {
        if *b == b'#' {
            in_comment = true;
        }
        if *b == b'\n' {
            in_comment = false;
        }
        if in_comment {
            *b = b' ';
        }
    }
    *text = String::from_utf8(bytes).unwrap();
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn zdp(p: &MpccProblem, w: &[f64], xi: &[f64], nu: &[f64]) -> PrimalDualPoint {
        PrimalDualPoint {
            w: DVector::from_row_slice(w),
            lambda: DVector::zeros(p.num_equalities()),
            mu: DVector::zeros(p.num_inequalities()),
            xi: DVector::from_row_slice(xi),
            nu: DVector::from_row_slice(nu),
        }
    }

    #[test]
    fn parses_leyffer_model() {
        let p = parse_model(LEYFFER).unwrap();
        assert_eq!(p.num_vars(), 2);
        assert_eq!(p.num_pairs(), 1);
        assert_eq!(p.num_equalities(), 0);
        assert_eq!(p.num_inequalities(), 0);
    }

    #[test]
    fn parses_degenerate_mpcc_without_constraints() {
        let p = parse_model("var x; minimize x^2;").unwrap();
        assert_eq!(p.num_vars(), 1);
        assert_eq!(p.num_pairs(), 0);
    }

    #[test]
    fn parses_example54_model() {
        let p = parse_model(EXAMPLE54).unwrap();
        assert_eq!(p.num_vars(), 2);
        assert_eq!(p.num_pairs(), 1);
    }

    #[test]
    fn parse_reports_line_and_column() {
        let err = parse_model("var x;\nminimize x^2 + y;").unwrap_err();
        match err {
            ModelError::Syntax { line, col, .. } => {
                assert_eq!(line, 2);
                assert!(col > 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_model("var x, x; minimize x;").unwrap_err();
        assert!(matches!(err, ModelError::DuplicateVariable { .. }));
        let err = parse_model("var x; minimize ;").unwrap_err();
        assert!(matches!(err, ModelError::EmptyObjective));
    }

    #[test]
    fn comments_and_ge_negation() {
        let p = parse_model(
            "# a comment\nvar w;\nminimize (w+1)^2 + (w+1)^4; # objective\nsubject to:\n  w >= 0; # becomes -w <= 0\n",
        )
        .unwrap();
        assert_eq!(p.num_inequalities(), 1);
        assert_eq!(p.inequalities[0].value(&[2.0]).unwrap(), -2.0);
    }

    #[test]
    fn partition_at_leyffer_points() {
        let p = parse_model(LEYFFER).unwrap();
        let part = p.complementarity_partition(&[1.0, 0.0], 1e-8).unwrap();
        assert_eq!(part.i_plus_zero, vec![0]);
        assert!(part.i_zero_plus.is_empty() && part.i_zero_zero.is_empty());

        let part = p.complementarity_partition(&[0.0, 0.0], 1e-8).unwrap();
        assert_eq!(part.i_zero_zero, vec![0]);

        let part = p.complementarity_partition(&[1e-12, 1.0], 1e-8).unwrap();
        assert_eq!(part.i_zero_plus, vec![0]);

        assert!(p.complementarity_partition(&[0.5, 0.5], 1e-8).is_err());
        assert!(p.complementarity_partition(&[-1.0, 0.0], 1e-8).is_err());
    }

    #[test]
    fn active_set_split_follows_multiplier() {
        let p = parse_model("var w; minimize w^2; subject to: w >= 0;").unwrap();
        let s = p.active_sets(&[0.0], &[6.0], 1e-8).unwrap();
        assert_eq!(s.active, vec![0]);
        assert_eq!(s.strictly_active, vec![0]);
        let s = p.active_sets(&[0.0], &[0.0], 1e-8).unwrap();
        assert_eq!(s.active, vec![0]);
        assert_eq!(s.weakly_active, vec![0]);
        let s = p.active_sets(&[1.0], &[0.0], 1e-8).unwrap();
        assert!(s.active.is_empty());
        assert_eq!(s.inactive, vec![0]);
    }

    #[test]
    fn reformulation_builds_bilinear_rows() {
        let p = parse_model(LEYFFER).unwrap();
        let nlp = p.nlp_reformulation();
        assert!(nlp.equalities.is_empty());
        assert_eq!(nlp.inequalities.len(), 3);
        // [-w1, -w2, w1*w2] by evaluation
        let w = [0.3, 0.7];
        assert_eq!(nlp.inequalities[0].value(&w).unwrap(), -0.3);
        assert_eq!(nlp.inequalities[1].value(&w).unwrap(), -0.7);
        assert!((nlp.inequalities[2].value(&w).unwrap() - 0.21).abs() < 1e-15);

        // m = 0 is the identity transformation
        let p0 = parse_model("var x; minimize x^2;").unwrap();
        let nlp0 = p0.nlp_reformulation();
        assert!(nlp0.inequalities.is_empty() && nlp0.equalities.is_empty());
    }

    #[test]
    fn reformulation_matches_structurally_on_example51() {
        let p = parse_model(EXAMPLE51).unwrap();
        let nlp = p.nlp_reformulation();
        let vars = p.var_names().to_vec();
        let expected = [
            expr::neg(expr::parse_expr("w1", &vars).unwrap()),
            expr::neg(expr::parse_expr("w2", &vars).unwrap()),
            expr::mul(
                expr::parse_expr("w1", &vars).unwrap(),
                expr::parse_expr("w2", &vars).unwrap(),
            ),
        ];
        for (got, want) in nlp.inequalities.iter().zip(expected.iter()) {
            assert_eq!(&got.expr, want);
        }
    }

    #[test]
    fn branch_nlps_fix_one_side() {
        let p = parse_model(LEYFFER).unwrap();
        let g_side = p.branch_nlp(&BranchAssignment(vec![BranchSide::FixG]));
        assert_eq!(g_side.equalities.len(), 1);
        assert_eq!(g_side.equalities[0].value(&[0.4, 0.5]).unwrap(), 0.4); // w1
        assert_eq!(g_side.inequalities[0].value(&[0.4, 0.5]).unwrap(), -0.5); // -w2

        let h_side = p.branch_nlp(&BranchAssignment(vec![BranchSide::FixH]));
        assert_eq!(h_side.equalities[0].value(&[0.4, 0.5]).unwrap(), 0.5); // w2
        assert_eq!(h_side.inequalities[0].value(&[0.4, 0.5]).unwrap(), -0.4); // -w1

        let p0 = parse_model("var x; minimize x^2;").unwrap();
        let b = p0.branch_nlp(&BranchAssignment(vec![]));
        assert!(b.equalities.is_empty() && b.inequalities.is_empty());
    }

    #[test]
    fn relaxed_nlp_by_partition() {
        let p = parse_model(LEYFFER).unwrap();
        // At (0,0): biactive, both nonnegativity inequalities, no equality.
        let part = p.complementarity_partition(&[0.0, 0.0], 1e-8).unwrap();
        let r = p.relaxed_nlp(&part);
        assert!(r.equalities.is_empty());
        assert_eq!(r.inequalities.len(), 2);
        // At (1,0): H fixed to zero, -G inequality.
        let part = p.complementarity_partition(&[1.0, 0.0], 1e-8).unwrap();
        let r = p.relaxed_nlp(&part);
        assert_eq!(r.equalities.len(), 1);
        assert_eq!(r.equalities[0].value(&[1.0, 0.3]).unwrap(), 0.3); // w2
        assert_eq!(r.inequalities.len(), 1);
        assert_eq!(r.inequalities[0].value(&[1.0, 0.3]).unwrap(), -1.0); // -w1
    }

    #[test]
    fn relaxed_equals_unique_branch_without_degeneracy() {
        let p = parse_model(LEYFFER).unwrap();
        let part = p.complementarity_partition(&[1.0, 0.0], 1e-8).unwrap();
        let r = p.relaxed_nlp(&part);
        let b = p.branch_nlp(&BranchAssignment(vec![BranchSide::FixH]));
        let w = [0.9, 0.1];
        assert_eq!(r.equalities.len(), b.equalities.len());
        assert_eq!(
            r.equalities[0].value(&w).unwrap(),
            b.equalities[0].value(&w).unwrap()
        );
        assert_eq!(
            r.inequalities[0].value(&w).unwrap(),
            b.inequalities[0].value(&w).unwrap()
        );
    }

    #[test]
    fn lagrangian_gradient_vanishes_at_stationary_multipliers() {
        let ex51 = parse_model(EXAMPLE51).unwrap();
        let z = zdp(&ex51, &[0.0, 0.0], &[1.0], &[-6.0]);
        assert!(ex51.lagrangian_gradient(&z).unwrap().amax() < 1e-14);

        let ley = parse_model(LEYFFER).unwrap();
        let z = zdp(&ley, &[0.0, 0.0], &[-2.0], &[0.0]);
        assert!(ley.lagrangian_gradient(&z).unwrap().amax() < 1e-14);

        // All multipliers zero: gradient of f.
        let z = zdp(&ley, &[0.3, 0.4], &[0.0], &[0.0]);
        let g = ley.lagrangian_gradient(&z).unwrap();
        let gf = ley.objective.gradient(&[0.3, 0.4]).unwrap();
        assert_eq!(g, gf);
    }

    #[test]
    fn lagrangian_hessian_values() {
        let ley = parse_model(LEYFFER).unwrap();
        for &t in &[0.0, 0.5, 2.0] {
            let z = zdp(&ley, &[0.0, t], &[0.0], &[0.0]);
            let h = ley.lagrangian_hessian(&z).unwrap();
            assert_eq!(h[(0, 0)], 2.0);
            assert!((h[(1, 1)] - (2.0 + 6.0 * t)).abs() < 1e-14);
            assert_eq!(h[(0, 1)], 0.0);
        }
        let ex51 = parse_model(EXAMPLE51).unwrap();
        let z = zdp(&ex51, &[0.0, 1.0], &[0.0], &[0.0]);
        let h = ex51.lagrangian_hessian(&z).unwrap();
        assert_eq!(h[(0, 0)], 2.0);
        assert_eq!(h[(1, 1)], 2.0);

        let lin = parse_model("var x, y; minimize x + y;").unwrap();
        let z = PrimalDualPoint::from_primal(&lin, dvector![1.0, 2.0]);
        assert_eq!(lin.lagrangian_hessian(&z).unwrap().amax(), 0.0);
    }

    #[test]
    fn hessian_matches_fd_jacobian_of_gradient() {
        let ex51 = parse_model(EXAMPLE51).unwrap();
        let z = zdp(&ex51, &[0.7, 0.3], &[0.4], &[-1.1]);
        let h = ex51.lagrangian_hessian(&z).unwrap();
        let fd_h = {
            let n = 2;
            let mut m = DMatrix::zeros(n, n);
            let step = 1e-6;
            for j in 0..n {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp.w[j] += step;
                zm.w[j] -= step;
                let gp = ex51.lagrangian_gradient(&zp).unwrap();
                let gm = ex51.lagrangian_gradient(&zm).unwrap();
                for i in 0..n {
                    m[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
                }
            }
            m
        };
        assert!((h - fd_h).amax() < 1e-6);
    }

    #[test]
    fn kkt_residual_on_leyffer_points() {
        let ley = parse_model(LEYFFER).unwrap();
        let z = zdp(&ley, &[1.0, 0.0], &[0.0], &[0.0]);
        assert!(ley.kkt_residual(&z, 1e-8).unwrap() < 1e-14);

        let z = zdp(&ley, &[0.0, 0.0], &[-2.0], &[0.0]);
        let r = ley.kkt_residual(&z, 1e-8).unwrap();
        assert!((r - 2.0).abs() < 1e-14, "residual {r}");

        let z = zdp(&ley, &[1.0, 0.0], &[5.0], &[-3.0]);
        assert!(ley.kkt_residual(&z, 1e-8).unwrap() > 1.0);
    }

    #[test]
    fn residual_block_validates_or_rejects() {
        let good = "\
var x, y;
minimize (x-1)^2 + (y-2)^2;
residuals x - 1; y - 2;
";
        let p = parse_model(good).unwrap();
        assert_eq!(p.residuals.as_ref().unwrap().len(), 2);

        let bad = "\
var x, y;
minimize (x-1)^2 + (y-2)^2;
residuals x - 1; y;
";
        assert!(matches!(parse_model(bad), Err(ModelError::ResidualMismatch { .. })));
    }

    #[test]
    fn branch_enumeration_order_is_lexicographic() {
        let all = BranchAssignment::enumerate(2);
        let sigs: Vec<String> = all.iter().map(|a| a.signature()).collect();
        assert_eq!(sigs, vec!["GG", "GH", "HG", "HH"]);
        assert_eq!(BranchAssignment::parse("GH").unwrap(), all[1]);
    }
}
