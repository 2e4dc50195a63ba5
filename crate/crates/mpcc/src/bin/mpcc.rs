//! Thin command-line front end: solve models, classify points, and run the
//! paper benchmark suite. All functionality lives in the library; see the
//! crate examples for programmatic use.
//!
//! Exit codes for `solve`: 0 converged, 2 maximum iterations, 3 subproblem
//! failure, 1 usage error. `classify` exits 4 on an infeasible point;
//! `bench` exits 2 when an acceptance criterion fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use mpcc::analysis::{
    check_b_stationarity, check_mpcc_ssosc, check_ulsc_pulsc, classify_stationarity,
    AnalysisError, StationarityClass,
};
use mpcc::bench::{self, run_paper_suite};
use mpcc::model::{parse_model, BranchAssignment, MpccProblem, NlpPoint, PrimalDualPoint};
use mpcc::qpcc::StepPolicy;
use mpcc::registry;
use mpcc::solver::{sqp_solve, sqpcc_solve, HessianKind, SolveOptions, SolveStatus, SolveTrace};
use mpcc::trace::to_csv;

#[derive(Parser)]
#[command(
    name = "mpcc",
    about = "Full-step SQPCC solver toolkit for mathematical programs with complementarity constraints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a model (registry name or model file) with SQPCC or classical SQP.
    Solve(SolveArgs),
    /// Classify the stationarity of a feasible point.
    Classify(ClassifyArgs),
    /// Run the paper benchmark suite and write traces and plot data.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Registry problem name (e.g. `leyffer`) or path to a model file.
    model: String,
    /// Initial primal point, comma separated (defaults to the registry
    /// problem's canonical start).
    #[arg(long)]
    x0: Option<String>,
    /// Hessian strategy: exact | exact-raw | perturbed | bfgs | gn | const:v1,v2,...
    #[arg(long, default_value = "exact")]
    hessian: String,
    /// Step selection policy: min-obj | warm | force:<GH-string>
    #[arg(long, default_value = "min-obj")]
    policy: String,
    /// KKT residual tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    /// Activity tolerance for index sets and sign tests.
    #[arg(long, default_value_t = 1e-8)]
    activity_tol: f64,
    /// Write the iteration trace CSV to this path.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print the JSON summary instead of the human-readable one.
    #[arg(long)]
    json: bool,
    /// sqpcc (default) or sqp (classical SQP on the NLP reformulation).
    #[arg(long, default_value = "sqpcc")]
    method: String,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Registry problem name or path to a model file.
    model: String,
    /// The point to classify, comma separated.
    #[arg(long)]
    point: String,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark suite; only `paper` is defined.
    #[arg(long, default_value = "paper")]
    suite: String,
    /// Restrict to a single named run (e.g. `leyffer-spurious`).
    #[arg(long)]
    only: Option<String>,
    /// Output directory for traces, plot data and the summary.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Classify(args) => cmd_classify(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

/// Resolve a model argument to a problem, together with its registry entry
/// when the name matched one.
fn load_model(arg: &str) -> Result<(MpccProblem, Option<registry::RegistryEntry>), String> {
    if let Some(entry) = registry::find(arg) {
        let problem = parse_model(entry.model_source).map_err(|e| e.to_string())?;
        return Ok((problem, Some(entry)));
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(format!(
            "`{arg}` is neither a registry problem ({}) nor an existing file",
            registry::all().iter().map(|e| e.name).collect::<Vec<_>>().join(", ")
        ));
    }
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {arg}: {e}"))?;
    let problem = parse_model(&text).map_err(|e| format!("{arg}: {e}"))?;
    Ok((problem, None))
}

fn parse_vector(text: &str, expected_len: usize) -> Result<DVector<f64>, String> {
    let values: Result<Vec<f64>, _> =
        text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let values = values.map_err(|e| format!("cannot parse `{text}` as a vector: {e}"))?;
    if values.len() != expected_len {
        return Err(format!("expected {expected_len} components, got {}", values.len()));
    }
    Ok(DVector::from_vec(values))
}

fn parse_hessian(text: &str) -> Result<HessianKind, String> {
    match text {
        "exact" => Ok(HessianKind::exact()),
        "exact-raw" => Ok(HessianKind::ExactRaw),
        "perturbed" => Ok(HessianKind::PerturbedIdentity),
        "bfgs" => Ok(HessianKind::Bfgs { initial: None }),
        "gn" => Ok(HessianKind::GaussNewton { floor: HessianKind::DEFAULT_FLOOR }),
        other => match other.strip_prefix("const:") {
            Some(rest) => {
                let diag: Result<Vec<f64>, _> =
                    rest.split(',').map(|s| s.trim().parse::<f64>()).collect();
                let diag = diag.map_err(|e| format!("bad constant Hessian `{rest}`: {e}"))?;
                Ok(HessianKind::Constant(DMatrix::from_diagonal(&DVector::from_vec(diag))))
            }
            None => Err(format!(
                "unknown hessian `{other}` (expected exact, exact-raw, perturbed, bfgs, gn or const:...)"
            )),
        },
    }
}

fn parse_policy(text: &str) -> Result<StepPolicy, String> {
    match text {
        "min-obj" => Ok(StepPolicy::MinObjective),
        "warm" => Ok(StepPolicy::WarmBranch),
        other => match other.strip_prefix("force:") {
            Some(rest) => BranchAssignment::parse(rest)
                .map(StepPolicy::ForcedBranch)
                .ok_or_else(|| format!("bad branch string `{rest}` (expected G/H characters)")),
            None => {
                Err(format!("unknown policy `{other}` (expected min-obj, warm or force:...)"))
            }
        },
    }
}

fn status_exit(status: &SolveStatus) -> ExitCode {
    match status {
        SolveStatus::Converged => ExitCode::from(0),
        SolveStatus::MaxIterations => ExitCode::from(2),
        SolveStatus::SubproblemFailure { .. } => ExitCode::from(3),
    }
}

fn cmd_solve(args: SolveArgs) -> ExitCode {
    let (problem, entry) = match load_model(&args.model) {
        Ok(v) => v,
        Err(e) => return usage_error(e),
    };
    let x0 = match (&args.x0, &entry) {
        (Some(text), _) => match parse_vector(text, problem.num_vars()) {
            Ok(v) => v,
            Err(e) => return usage_error(e),
        },
        (None, Some(entry)) => entry.initial_points[0].clone(),
        (None, None) => return usage_error("--x0 is required for model files"),
    };
    let hessian = match parse_hessian(&args.hessian) {
        Ok(h) => h,
        Err(e) => return usage_error(e),
    };
    let policy = match parse_policy(&args.policy) {
        Ok(p) => p,
        Err(e) => return usage_error(e),
    };
    if let StepPolicy::ForcedBranch(a) = &policy {
        if a.len() != problem.num_pairs() {
            return usage_error(format!(
                "forced branch has {} sides but the problem has {} pairs",
                a.len(),
                problem.num_pairs()
            ));
        }
    }
    let reference = entry.as_ref().map(|e| e.reference.clone());

    let trace: SolveTrace = match args.method.as_str() {
        "sqpcc" => {
            let z0 = PrimalDualPoint::from_primal(&problem, x0);
            let opts = SolveOptions {
                tol: args.tol,
                max_iter: args.max_iter,
                activity_tol: args.activity_tol,
                hessian,
                policy,
                reference: reference.clone(),
                ..SolveOptions::default()
            };
            match sqpcc_solve(&problem, &z0, &opts) {
                Ok(t) => t,
                Err(e) => return usage_error(e),
            }
        }
        "sqp" => {
            let nlp = problem.nlp_reformulation();
            let z0 = NlpPoint::from_primal(&nlp, x0);
            let nlp_reference = reference.as_ref().filter(|_| problem.num_pairs() == 0).map(|r| {
                NlpPoint { w: r.w.clone(), lambda: r.lambda.clone(), mu: r.mu.clone() }
            });
            let opts = SolveOptions {
                tol: args.tol,
                max_iter: args.max_iter,
                activity_tol: args.activity_tol,
                hessian,
                policy,
                nlp_reference,
                ..SolveOptions::default()
            };
            match sqp_solve(&nlp, &z0, &opts) {
                Ok(t) => t,
                Err(e) => return usage_error(e),
            }
        }
        other => return usage_error(format!("unknown method `{other}` (expected sqpcc or sqp)")),
    };

    if let Some(path) = &args.trace {
        if let Err(e) = std::fs::write(path, to_csv(&trace)) {
            eprintln!("error: cannot write trace {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    let summary = bench::summarize_trace(
        &args.model,
        &args.method,
        &args.hessian,
        &args.policy,
        &trace,
        Some(&problem),
        reference.as_ref(),
        args.activity_tol,
    );
    if args.json {
        println!("{}", summary.to_json());
    } else {
        println!(
            "{}: {:?} after {} iterations, w = {:?}, kkt residual {:.3e}{}",
            args.model,
            trace.status,
            trace.iterations(),
            summary.final_w,
            summary.final_kkt_residual,
            summary
                .final_class
                .as_ref()
                .map(|c| format!(", final point class {c}"))
                .unwrap_or_default()
        );
        for note in &summary.notes {
            println!("note: {note}");
        }
    }
    status_exit(&trace.status)
}

fn cmd_classify(args: ClassifyArgs) -> ExitCode {
    let (problem, _) = match load_model(&args.model) {
        Ok(v) => v,
        Err(e) => return usage_error(e),
    };
    let point = match parse_vector(&args.point, problem.num_vars()) {
        Ok(v) => v,
        Err(e) => return usage_error(e),
    };
    let w: Vec<f64> = point.iter().copied().collect();
    let mut report = match classify_stationarity(&problem, &w, args.tol) {
        Ok(r) => r,
        Err(AnalysisError::Infeasible { violation, tol }) => {
            eprintln!("error: point infeasible (violation {violation:e} > tolerance {tol:e})");
            return ExitCode::from(4);
        }
        Err(AnalysisError::Partition(e)) => {
            eprintln!("error: point infeasible: {e}");
            return ExitCode::from(4);
        }
        Err(e) => return usage_error(e),
    };
    let b = check_b_stationarity(&problem, &w, args.tol, 16).ok();
    report.b_stationary = b.as_ref().map(|r| r.b_stationary);

    let mut out = serde_json::to_value(&report).expect("report serializes");
    if report.class == StationarityClass::S {
        let z = report.point(&w);
        if let Ok(ssosc) = check_mpcc_ssosc(&problem, &z, args.tol) {
            out["ssosc"] = serde_json::to_value(&ssosc).unwrap();
        }
        if let Ok(part) = problem.complementarity_partition(&w, args.tol) {
            let ulsc = check_ulsc_pulsc(&report, &part, args.tol);
            out["ulsc"] = serde_json::to_value(&ulsc).unwrap();
        }
    }
    if let Some(b) = b {
        out["b_certificates"] = serde_json::to_value(&b.certificates).unwrap();
    }
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
    ExitCode::from(0)
}

fn cmd_bench(args: BenchArgs) -> ExitCode {
    if args.suite != "paper" {
        return usage_error(format!("unknown suite `{}` (only `paper` is defined)", args.suite));
    }
    let report = run_paper_suite(args.only.as_deref());
    if report.runs.is_empty() {
        return usage_error(format!(
            "no run named `{}`; available: ex51-exact, ex51-bfgs, ex51-perturbed, ex51-const, \
             leyffer-sqpcc, leyffer-sqp, leyffer-spurious, ex54-a, ex54-b, sqp-weak, sqp-strict",
            args.only.as_deref().unwrap_or("")
        ));
    }
    if let Err(e) = std::fs::create_dir_all(&args.out) {
        eprintln!("error: cannot create {}: {e}", args.out.display());
        return ExitCode::from(1);
    }
    let mut summaries = Vec::new();
    for run in &report.runs {
        let csv_path = args.out.join(format!("{}.csv", run.name));
        if let Err(e) = std::fs::write(&csv_path, to_csv(&run.trace)) {
            eprintln!("error: cannot write {}: {e}", csv_path.display());
            return ExitCode::from(1);
        }
        let err_data = bench::error_plot_data(&run.trace);
        if !err_data.is_empty() {
            let _ = std::fs::write(args.out.join(format!("{}_err.dat", run.name)), err_data);
        }
        if run.trace.dims.n == 2 {
            let _ = std::fs::write(
                args.out.join(format!("{}_path.dat", run.name)),
                bench::path_plot_data(&run.trace),
            );
        }
        let entry = registry::find(run.problem);
        let summary = bench::summarize_trace(
            run.problem,
            run.method,
            run.hessian,
            run.policy,
            &run.trace,
            entry.as_ref().map(|e| &e.problem),
            entry.as_ref().map(|e| &e.reference),
            1e-8,
        );
        summaries.push((run.name, summary));
    }
    let json = serde_json::json!({
        "suite": "paper",
        "criteria": report.criteria,
        "notes": report.notes,
        "runs": summaries.iter().map(|(name, s)| {
            serde_json::json!({ "name": name, "summary": s })
        }).collect::<Vec<_>>(),
    });
    let _ = std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&json).unwrap(),
    );
    print!("{}", report.table());
    for note in &report.notes {
        println!("note: {note}");
    }
    println!("wrote {} runs to {}", report.runs.len(), args.out.display());
    if args.only.is_none() && !report.all_passed() {
        return ExitCode::from(2);
    }
    ExitCode::from(0)
}
