//! The paper benchmark suite: canonical runs on the registry problems across
//! Hessian variants and selection policies, plot-data emission, and the
//! acceptance criteria evaluated against those runs.
//!
//! `mpcc bench --suite paper` drives [`run_paper_suite`] and writes one CSV
//! trace per run, two-column error files per Hessian variant, iterate-path
//! files in the `(w1, w2)` plane, and a JSON summary with the pass/fail
//! table. The `acceptance` test target runs the same criteria.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{dvector, DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::analysis::{
    check_ulsc_pulsc, classify_stationarity, estimate_order, fit_contraction,
    stabilization_report, Identification, OrderClass, StationarityClass,
};
use crate::denseqp::solve_qp;
use crate::expr::central_fd;
use crate::model::{BranchAssignment, MpccProblem, NlpPoint, PrimalDualPoint};
use crate::oracle;
use crate::qpcc::{self, StepPolicy};
use crate::registry;
use crate::solver::{
    sqp_solve, sqpcc_solve, HessianKind, SolveOptions, SolveStatus, SolveTrace,
};

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: usize,
    pub name: String,
    pub passed: bool,
    pub details: String,
}

/// One named benchmark run with its trace.
pub struct NamedRun {
    pub name: &'static str,
    pub problem: &'static str,
    pub method: &'static str,
    pub hessian: &'static str,
    pub policy: &'static str,
    pub trace: SolveTrace,
}

/// Everything the paper suite produces.
pub struct BenchReport {
    pub runs: Vec<NamedRun>,
    pub criteria: Vec<CriterionResult>,
    pub notes: Vec<String>,
}

impl BenchReport {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    /// Human-readable pass/fail table, one line per criterion.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for c in &self.criteria {
            let _ = writeln!(
                out,
                "criterion {:2} [{}] {} — {}",
                c.id,
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.details
            );
        }
        out
    }
}

fn mpcc_from(entry: &registry::RegistryEntry) -> &MpccProblem {
    &entry.problem
}

fn solve_entry(
    entry: &registry::RegistryEntry,
    x0: DVector<f64>,
    hessian: HessianKind,
    policy: StepPolicy,
    max_iter: usize,
) -> SolveTrace {
    let p = mpcc_from(entry);
    let z0 = PrimalDualPoint::from_primal(p, x0);
    let opts = SolveOptions {
        hessian,
        policy,
        max_iter,
        reference: Some(entry.reference.clone()),
        ..SolveOptions::default()
    };
    sqpcc_solve(p, &z0, &opts).expect("registry problems are dimensionally valid")
}

/// Run every canonical benchmark; `only` restricts to a single named run.
pub fn run_paper_suite(only: Option<&str>) -> BenchReport {
    let ex51 = registry::find("example51").unwrap();
    let leyffer = registry::find("leyffer").unwrap();
    let ex54 = registry::find("example54").unwrap();
    let weak = registry::find("sqp-weak").unwrap();
    let strict = registry::find("sqp-strict").unwrap();

    let mut runs: Vec<NamedRun> = Vec::new();
    let push = |name: &'static str,
                    problem: &'static str,
                    method: &'static str,
                    hessian: &'static str,
                    policy: &'static str,
                    trace: SolveTrace,
                    runs: &mut Vec<NamedRun>| {
        if only.map(|o| o == name).unwrap_or(true) {
            runs.push(NamedRun { name, problem, method, hessian, policy, trace });
        }
    };

    // Example 5.1 under the four Hessian variants.
    push(
        "ex51-exact",
        "example51",
        "sqpcc",
        "exact",
        "min-obj",
        solve_entry(&ex51, dvector![2.0, 0.0], HessianKind::exact(), StepPolicy::MinObjective, 15),
        &mut runs,
    );
    push(
        "ex51-bfgs",
        "example51",
        "sqpcc",
        "bfgs",
        "min-obj",
        solve_entry(
            &ex51,
            dvector![2.0, 0.0],
            HessianKind::Bfgs { initial: None },
            StepPolicy::MinObjective,
            60,
        ),
        &mut runs,
    );
    push(
        "ex51-perturbed",
        "example51",
        "sqpcc",
        "perturbed",
        "min-obj",
        solve_entry(
            &ex51,
            dvector![2.0, 0.0],
            HessianKind::PerturbedIdentity,
            StepPolicy::MinObjective,
            60,
        ),
        &mut runs,
    );
    push(
        "ex51-const",
        "example51",
        "sqpcc",
        "const:5,10",
        "min-obj",
        solve_entry(
            &ex51,
            dvector![2.0, 0.0],
            HessianKind::Constant(DMatrix::from_diagonal(&dvector![5.0, 10.0])),
            StepPolicy::MinObjective,
            60,
        ),
        &mut runs,
    );

    // Leyffer: SQPCC vs the classical-SQP baseline on the reformulation,
    // plus the forced-branch spurious sequence.
    push(
        "leyffer-sqpcc",
        "leyffer",
        "sqpcc",
        "exact",
        "min-obj",
        solve_entry(&leyffer, dvector![0.0, 2.0], HessianKind::exact(), StepPolicy::MinObjective, 50),
        &mut runs,
    );
    {
        // The reformulation's bilinear multiplier grows like 1/w2 along the
        // trajectory, so the exact Hessian is passed through raw; ten
        // iterations keep the run clear of the eventual underflow of w2.
        let nlp = leyffer.problem.nlp_reformulation();
        let z0 = NlpPoint::from_primal(&nlp, dvector![0.0, 2.0]);
        let opts = SolveOptions {
            hessian: HessianKind::ExactRaw,
            max_iter: 10,
            ..SolveOptions::default()
        };
        let trace = sqp_solve(&nlp, &z0, &opts).expect("baseline dimensions are valid");
        push("leyffer-sqp", "leyffer", "sqp", "exact-raw", "-", trace, &mut runs);
    }
    push(
        "leyffer-spurious",
        "leyffer",
        "sqpcc",
        "exact",
        "force:G",
        solve_entry(
            &leyffer,
            dvector![0.0, 0.5],
            HessianKind::exact(),
            StepPolicy::ForcedBranch(BranchAssignment::parse("G").unwrap()),
            6,
        ),
        &mut runs,
    );

    // Example 5.4 from both axes.
    push(
        "ex54-a",
        "example54",
        "sqpcc",
        "exact",
        "min-obj",
        solve_entry(&ex54, dvector![0.3, 0.0], HessianKind::exact(), StepPolicy::MinObjective, 50),
        &mut runs,
    );
    push(
        "ex54-b",
        "example54",
        "sqpcc",
        "exact",
        "min-obj",
        solve_entry(&ex54, dvector![0.0, 0.3], HessianKind::exact(), StepPolicy::MinObjective, 50),
        &mut runs,
    );

    // Classical SQP on the scalar active-set examples.
    for (name, entry) in [("sqp-weak", &weak), ("sqp-strict", &strict)] {
        let nlp = entry.problem.nlp_reformulation();
        let z0 = NlpPoint::from_primal(&nlp, entry.initial_points[0].clone());
        let reference = NlpPoint {
            w: entry.reference.w.clone(),
            lambda: entry.reference.lambda.clone(),
            mu: entry.reference.mu.clone(),
        };
        let opts = SolveOptions { nlp_reference: Some(reference), ..SolveOptions::default() };
        let trace = sqp_solve(&nlp, &z0, &opts).expect("scalar NLP dimensions are valid");
        push(name, name, "sqp", "exact", "-", trace, &mut runs);
    }

    let mut notes = vec![String::from(
        "example51 at the origin: the stationarity system solved at (0,0) gives \
         (xi, nu) = (1, -6), class A; the originally printed multipliers (-1, -6) \
         and class C are inconsistent with the stated objective's gradient \
         (1, -6) at the origin. All assertions pin the derived values.",
    )];

    let criteria = if only.is_none() {
        evaluate_criteria(&runs, &mut notes)
    } else {
        Vec::new()
    };

    BenchReport { runs, criteria, notes }
}

fn get<'a>(runs: &'a [NamedRun], name: &str) -> &'a NamedRun {
    runs.iter().find(|r| r.name == name).expect("run present")
}

fn within(trace: &SolveTrace, target: &[f64], tol: f64) -> bool {
    let w = trace.final_w();
    w.len() == target.len()
        && w.iter().zip(target).all(|(a, b)| (a - b).abs() <= tol)
}

fn evaluate_criteria(runs: &[NamedRun], notes: &mut Vec<String>) -> Vec<CriterionResult> {
    let mut out = Vec::new();

    // 1. Example 5.1, exact Hessian: quadratic convergence around the corner.
    {
        let started = Instant::now();
        let ex51 = registry::find("example51").unwrap();
        let trace = solve_entry(
            &ex51,
            dvector![2.0, 0.0],
            HessianKind::exact(),
            StepPolicy::MinObjective,
            15,
        );
        let elapsed = started.elapsed();
        let converged = trace.status == SolveStatus::Converged;
        let close = within(&trace, &[0.0, 1.0], 1e-10);
        let iters_ok = trace.iterations() <= 15;
        let order = estimate_order(&trace.errors());
        let quadratic =
            order.as_ref().map(|o| o.classification == OrderClass::Quadratic).unwrap_or(false);
        let turn = trace.records.iter().position(|r| r.w[0].abs() <= 1e-12);
        let axis_ok = match turn {
            Some(t) if t >= 1 => trace.records[..t].iter().all(|r| r.w[1].abs() <= 1e-12),
            _ => false,
        };
        let fast = elapsed.as_secs_f64() < 1.0;
        out.push(CriterionResult {
            id: 1,
            name: "example51 exact Hessian: quadratic, corner-turning, <= 15 iterations".into(),
            passed: converged && close && iters_ok && quadratic && axis_ok && fast,
            details: format!(
                "status {:?}, {} iterations, |w - (0,1)|inf = {:.2e}, order {:?}, axis iterates before turn: {:?}, {:.3} s",
                trace.status,
                trace.iterations(),
                (trace.final_w() - dvector![0.0, 1.0]).amax(),
                order.map(|o| o.classification),
                turn,
                elapsed.as_secs_f64()
            ),
        });
    }

    // 2. Example 5.1 Hessian-variant matrix.
    {
        let bfgs_errors = get(runs, "ex51-bfgs").trace.errors();
        let bfgs = estimate_order(&bfgs_errors);
        let perturbed = estimate_order(&get(runs, "ex51-perturbed").trace.errors());
        let constant = estimate_order(&get(runs, "ex51-const").trace.errors());
        // BFGS must converge superlinearly: the ratio e_{k+1}/e_k has to be
        // driven toward zero. On this problem the quasi-Newton tail is in
        // fact second order (e_{k+1} = 2 e_k e_{k-1}^2, since the objective
        // is even in the active direction about the solution), so the
        // classifier reports the stronger quadratic label; both satisfy the
        // superlinear requirement, which is additionally witnessed directly
        // on the last ratio.
        let bfgs_class = bfgs.as_ref().map(|o| o.classification).ok();
        let bfgs_label_ok = matches!(
            bfgs_class,
            Some(OrderClass::Superlinear) | Some(OrderClass::Quadratic)
        );
        let last_rho = bfgs_errors
            .windows(2)
            .filter(|wdw| wdw[0] > 0.0 && wdw[1] > 0.0)
            .map(|wdw| wdw[1] / wdw[0])
            .last()
            .unwrap_or(f64::INFINITY);
        let bfgs_ok = bfgs_label_ok && last_rho <= 1e-3;
        if bfgs_class == Some(OrderClass::Quadratic) {
            notes.push(
                "example51 BFGS run classifies quadratic: the tail obeys \
                 e_{k+1} = 2 e_k e_{k-1}^2 (order two) because the reduced \
                 objective is even about w2 = 1; quadratic is reported as \
                 satisfying the superlinear requirement."
                    .into(),
            );
        }
        let pert_rate = perturbed
            .as_ref()
            .ok()
            .filter(|o| o.classification == OrderClass::Linear)
            .and_then(|o| o.linear_rate);
        let const_rate = constant
            .as_ref()
            .ok()
            .filter(|o| o.classification == OrderClass::Linear)
            .and_then(|o| o.linear_rate);
        let rates_ok = match (pert_rate, const_rate) {
            (Some(a), Some(b)) => b > a,
            _ => false,
        };
        out.push(CriterionResult {
            id: 2,
            name: "example51 variants: BFGS superlinear, perturbed/constant linear with ordered rates".into(),
            passed: bfgs_ok && rates_ok,
            details: format!(
                "bfgs {:?} (last rho {:.1e}), perturbed {:?} (alpha {:?}), constant {:?} (alpha {:?})",
                bfgs_class,
                last_rho,
                perturbed.as_ref().map(|o| o.classification).ok(),
                pert_rate,
                constant.as_ref().map(|o| o.classification).ok(),
                const_rate
            ),
        });
    }

    // 3. Leyffer baseline vs SQPCC.
    {
        let sqp = &get(runs, "leyffer-sqp").trace;
        let sqpcc = &get(runs, "leyffer-sqpcc").trace;
        let leyffer = registry::find("leyffer").unwrap();
        let sqp_close = within(sqp, &[0.0, 0.0], 1e-8);
        let origin = classify_stationarity(&leyffer.problem, &[0.0, 0.0], 1e-8).unwrap();
        let origin_m = origin.class == StationarityClass::M;
        let sqpcc_ok =
            sqpcc.status == SolveStatus::Converged && within(sqpcc, &[1.0, 0.0], 1e-10);
        let first_h = sqpcc.records.iter().position(|r| r.branch_signature == "H");
        let one_more = first_h
            .map(|i| sqpcc.records[i + 1..].iter().filter(|r| r.step.is_some()).count() == 1)
            .unwrap_or(false);
        out.push(CriterionResult {
            id: 3,
            name: "leyffer: SQP reformulation stalls at the M-point, SQPCC reaches the minimizer".into(),
            passed: sqp_close && origin_m && sqpcc_ok && one_more,
            details: format!(
                "sqp final {:?} ({}), origin class {}, sqpcc final {:?} ({:?}), steps after first H-side step: {}",
                sqp.final_w().as_slice(),
                if sqp_close { "within 1e-8 of the origin" } else { "too far" },
                origin.class,
                sqpcc.final_w().as_slice(),
                sqpcc.status,
                first_h
                    .map(|i| sqpcc.records[i + 1..].iter().filter(|r| r.step.is_some()).count())
                    .unwrap_or(usize::MAX)
            ),
        });
    }

    // 4. Spurious-sequence reproduction on the forced G branch.
    {
        let trace = &get(runs, "leyffer-spurious").trace;
        let steps: Vec<_> = trace.records.windows(2).collect();
        let enough = steps.len() >= 6;
        let mut map_ok = true;
        let mut s_ok = true;
        for pair in &steps {
            let t = pair[0].w[1];
            let expected = 3.0 * t * t / (6.0 * t + 2.0);
            map_ok &= (pair[1].w[1] - expected).abs() <= 1e-12 && pair[1].w[0] == 0.0;
            s_ok &= pair[0].selected_s_stationary == Some(true)
                && pair[0].branch_signature == "G";
        }
        out.push(CriterionResult {
            id: 4,
            name: "leyffer forced-G: spurious map to 1e-12 per step, each step S-stationary".into(),
            passed: enough && map_ok && s_ok,
            details: format!(
                "{} steps, map match {}, all selected candidates S-stationary {}",
                steps.len(),
                map_ok,
                s_ok
            ),
        });
    }

    // 5. Classical-SQP iterate-map oracle on the scalar examples.
    {
        let weak = &get(runs, "sqp-weak").trace;
        let strict = &get(runs, "sqp-strict").trace;
        let mut weak_map = weak.status == SolveStatus::Converged;
        let mut weak_active_empty = true;
        for pair in weak.records.windows(2) {
            let t = pair[0].w[0];
            let expected = 4.0 * t * t * t / (6.0 * t * t + 1.0);
            weak_map &= (pair[1].w[0] - expected).abs() <= 1e-12;
            weak_active_empty &= pair[0].g_active.is_empty();
        }
        let strict_steps: Vec<_> =
            strict.records.iter().filter(|r| r.step.is_some()).collect();
        let strict_identified = !strict_steps.is_empty()
            && strict_steps.iter().all(|r| r.g_active == vec![0])
            && strict.status == SolveStatus::Converged;
        out.push(CriterionResult {
            id: 5,
            name: "sqp scalar examples: cubic iterate map, weak vs finite active-set identification".into(),
            passed: weak_map && weak_active_empty && strict_identified,
            details: format!(
                "weak map match {weak_map}, weak active sets empty {weak_active_empty}, strict identified finitely {strict_identified}"
            ),
        });
    }

    // 6. Classifier table.
    {
        let leyffer = registry::find("leyffer").unwrap();
        let ex54 = registry::find("example54").unwrap();
        let ex51 = registry::find("example51").unwrap();
        let r1 = classify_stationarity(&leyffer.problem, &[1.0, 0.0], 1e-8).unwrap();
        let ok1 = r1.class == StationarityClass::S && r1.nu[0].abs() <= 1e-10;
        let r2 = classify_stationarity(&leyffer.problem, &[0.0, 0.0], 1e-8).unwrap();
        let ok2 = r2.class == StationarityClass::M
            && (r2.xi[0] + 2.0).abs() <= 1e-10
            && r2.nu[0].abs() <= 1e-10;
        let r3 = classify_stationarity(&ex54.problem, &[0.0, 0.0], 1e-8).unwrap();
        let part3 = ex54.problem.complementarity_partition(&[0.0, 0.0], 1e-8).unwrap();
        let u3 = check_ulsc_pulsc(&r3, &part3, 1e-8);
        let ok3 = r3.class == StationarityClass::S
            && r3.xi[0].abs() <= 1e-10
            && r3.nu[0].abs() <= 1e-10
            && !u3.pulsc;
        // Independent derivation at the example51 origin: the stationarity
        // system is diagonal, xi = df/dw1(0,0) = 1 and nu = df/dw2(0,0) = -6.
        let r4 = classify_stationarity(&ex51.problem, &[0.0, 0.0], 1e-8).unwrap();
        let ok4 = (r4.xi[0] - 1.0).abs() <= 1e-10 && (r4.nu[0] + 6.0).abs() <= 1e-10;
        if ok4 {
            notes.push(format!(
                "example51 origin classified {} with (xi, nu) = ({:.1}, {:.1})",
                r4.class, r4.xi[0], r4.nu[0]
            ));
        }
        out.push(CriterionResult {
            id: 6,
            name: "classifier table on the registry points".into(),
            passed: ok1 && ok2 && ok3 && ok4,
            details: format!(
                "leyffer(1,0): {} nu={:.1e}; leyffer(0,0): {} (xi,nu)=({:.6},{:.1e}); ex54(0,0): {} pulsc={}; ex51(0,0): (xi,nu)=({:.6},{:.6}) class {}",
                r1.class, r1.nu[0], r2.class, r2.xi[0], r2.nu[0], r3.class, u3.pulsc, r4.xi[0], r4.nu[0], r4.class
            ),
        });
    }

    // 7. Oracle equivalence for the QP solver and the branch enumeration.
    {
        let started = Instant::now();
        let mut rng = StdRng::seed_from_u64(0x0051_c0de);
        let mut qp_fail = 0usize;
        for _ in 0..500 {
            let data = oracle::random_qp(&mut rng, 4, 4);
            let ours = solve_qp(&data, None);
            let reference = oracle::qp_solve_by_enumeration(&data);
            match (ours, reference) {
                (Ok(sol), Some(oracle_sol)) => {
                    if (data.objective(&sol.x) - oracle_sol.objective).abs() > 1e-8 {
                        qp_fail += 1;
                    }
                }
                (Err(crate::denseqp::QpError::Infeasible { .. }), None) => {}
                _ => qp_fail += 1,
            }
        }
        let mut qpcc_fail = 0usize;
        for _ in 0..200 {
            let d = oracle::random_qpcc(&mut rng, 4, 3);
            let ours = qpcc::solve_qpcc_enumerate(&d, 16, 1e-8).unwrap_or_default();
            let reference = oracle::qpcc_solve_by_enumeration(&d, 1e-8);
            if ours.len() != reference.len() {
                qpcc_fail += 1;
                continue;
            }
            for (a, b) in ours.iter().zip(reference.iter()) {
                if (&a.step - &b.step).amax() > 1e-8 || a.s_stationary != b.s_stationary {
                    qpcc_fail += 1;
                    break;
                }
            }
        }
        let elapsed = started.elapsed();
        out.push(CriterionResult {
            id: 7,
            name: "oracle equivalence: 500 QPs and 200 QPCCs against subset enumeration".into(),
            passed: qp_fail == 0 && qpcc_fail == 0 && elapsed.as_secs_f64() < 30.0,
            details: format!(
                "qp mismatches {qp_fail}/500, qpcc mismatches {qpcc_fail}/200, {:.2} s",
                elapsed.as_secs_f64()
            ),
        });
    }

    // 8. Derivative correctness on all registry problems.
    {
        let mut rng = StdRng::seed_from_u64(8_008);
        let mut worst: f64 = 0.0;
        for entry in registry::all() {
            let p = &entry.problem;
            let n = p.num_vars();
            let mut exprs = vec![&p.objective];
            exprs.extend(p.equalities.iter());
            exprs.extend(p.inequalities.iter());
            for (g, h) in &p.pairs {
                exprs.push(g);
                exprs.push(h);
            }
            for _ in 0..100 {
                let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
                for d in &exprs {
                    for i in 0..n {
                        let sym = d.gradient_expr(i).eval(&w).unwrap();
                        let fd = central_fd(&d.expr, &w, i, 1e-6).unwrap();
                        worst = worst.max((sym - fd).abs() / fd.abs().max(1.0));
                        for j in 0..n {
                            let hij = d.gradient_expr(i).diff(j).eval(&w).unwrap();
                            let fd2 = central_fd(d.gradient_expr(i), &w, j, 1e-6).unwrap();
                            worst = worst.max((hij - fd2).abs() / fd2.abs().max(1.0));
                        }
                    }
                }
            }
        }
        out.push(CriterionResult {
            id: 8,
            name: "symbolic gradients and Hessians match central differences".into(),
            passed: worst <= 1e-6,
            details: format!("worst relative deviation {worst:.3e}"),
        });
    }

    // 9. Example 5.4 branch maps and asymptotic-only identification.
    {
        let ex54 = registry::find("example54").unwrap();
        let mut ok = true;
        let mut details = String::new();
        for (name, axis) in [("ex54-a", 0usize), ("ex54-b", 1usize)] {
            let trace = &get(runs, name).trace;
            let converged =
                trace.status == SolveStatus::Converged && within(trace, &[0.0, 0.0], 1e-10);
            let mut map_ok = true;
            for pair in trace.records.windows(2) {
                let t = pair[0].w[axis];
                let expected = 4.0 * t * t * t / (6.0 * t * t + 1.0);
                map_ok &= (pair[1].w[axis] - expected).abs() <= 1e-12;
                map_ok &= pair[1].w[1 - axis] == 0.0;
            }
            let rep = stabilization_report(trace, &ex54.problem, &ex54.reference, 1e-8).unwrap();
            let asymptotic = rep.pair_flags[0].reference_status == "I000"
                && rep.pair_flags[0].identification == Identification::AsymptoticOnly;
            ok &= converged && map_ok && asymptotic;
            let _ = write!(
                details,
                "{name}: converged {converged}, map {map_ok}, asymptotic-only {asymptotic}; "
            );
        }
        out.push(CriterionResult {
            id: 9,
            name: "example54: branch maps to 1e-12 per step, biactive pair asymptotic-only".into(),
            passed: ok,
            details,
        });
    }

    // 10. Contraction fit on every exact-Hessian converging run with
    //     a known reference.
    {
        let mut ok = true;
        let mut details = String::new();
        for name in ["ex51-exact", "leyffer-sqpcc", "ex54-a", "ex54-b"] {
            let trace = &get(runs, name).trace;
            if trace.status != SolveStatus::Converged {
                ok = false;
                let _ = write!(details, "{name}: not converged; ");
                continue;
            }
            match fit_contraction(&trace.errors()) {
                Some((alpha, _)) => {
                    ok &= alpha <= 0.1;
                    let _ = write!(details, "{name}: alpha = {alpha:.3e}; ");
                }
                None => {
                    ok = false;
                    let _ = write!(details, "{name}: fit unavailable; ");
                }
            }
        }
        out.push(CriterionResult {
            id: 10,
            name: "contraction inequality: fitted alpha <= 0.1 on exact-Hessian runs".into(),
            passed: ok,
            details,
        });
    }

    out
}

/// Assemble the JSON summary of one run: terminal state, stationarity class
/// of the final iterate, order estimate, contraction fit, and stabilization
/// report when a reference is available.
#[allow(clippy::too_many_arguments)]
pub fn summarize_trace(
    problem_name: &str,
    method: &str,
    hessian: &str,
    policy: &str,
    trace: &SolveTrace,
    p: Option<&MpccProblem>,
    reference: Option<&PrimalDualPoint>,
    activity_tol: f64,
) -> crate::trace::SolveSummary {
    let final_rec = trace.final_record();
    let mut notes = Vec::new();
    if trace.records.iter().any(|r| r.non_s_fallback) {
        notes.push(
            "min-objective fell back to a non-S-stationary candidate on at least one iteration"
                .to_string(),
        );
    }
    let final_class = p.and_then(|p| {
        classify_stationarity(p, final_rec.w.as_slice(), activity_tol)
            .ok()
            .map(|r| r.class.to_string())
    });
    let errors = trace.errors();
    let order = if errors.iter().filter(|&&e| e > 0.0).count() >= 4 {
        estimate_order(&errors).ok()
    } else {
        None
    };
    let contraction = if errors.is_empty() { None } else { fit_contraction(&errors) };
    let stabilization = match (p, reference) {
        (Some(p), Some(reference))
            if trace.dims.m_pairs == p.num_pairs() && trace.dims.m_g == p.num_inequalities() =>
        {
            stabilization_report(trace, p, reference, activity_tol).ok()
        }
        _ => None,
    };
    crate::trace::SolveSummary {
        problem: problem_name.to_string(),
        method: method.to_string(),
        hessian: hessian.to_string(),
        policy: policy.to_string(),
        status: trace.status.clone(),
        iterations: trace.iterations(),
        final_w: final_rec.w.iter().copied().collect(),
        final_kkt_residual: final_rec.kkt_residual,
        final_err_to_ref: final_rec.err_to_ref,
        final_class,
        contraction,
        order,
        stabilization,
        notes,
    }
}

/// Two-column `(iteration, error)` plot data of a run.
pub fn error_plot_data(trace: &SolveTrace) -> String {
    let mut out = String::new();
    for r in &trace.records {
        if let Some(e) = r.err_to_ref {
            let _ = writeln!(out, "{} {:.16e}", r.k, e);
        }
    }
    out
}

/// Iterate-path plot data: one `(w1, w2)` row per iterate.
pub fn path_plot_data(trace: &SolveTrace) -> String {
    let mut out = String::new();
    for r in &trace.records {
        let coords: Vec<String> = r.w.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", coords.join(" "));
    }
    out
}
