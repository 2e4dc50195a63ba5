//! Solver toolkit for mathematical programs with complementarity constraints
//! (MPCCs), built around the full-step SQPCC method: the complementarity
//! structure is retained in the quadratic subproblems (QPCCs), which are
//! solved exactly by branch enumeration at desk scale.
//!
//! The crate bundles:
//!
//! - [`expr`]: expression parsing, evaluation and exact symbolic derivatives;
//! - [`model`]: the MPCC data model, index sets, and the derived NLPs
//!   (reformulation, branch NLPs, relaxed NLP);
//! - [`denseqp`]: a dense primal active-set solver for strictly convex QPs;
//! - [`qpcc`]: linearized QPCC subproblems solved by exact branch enumeration
//!   with an S-stationarity filter and step-selection policies;
//! - [`solver`]: the full-step SQPCC loop, a classical-SQP baseline, pluggable
//!   Hessian strategies, and per-iteration diagnostics;
//! - [`analysis`]: stationarity classification (W/A/C/M/S and B), constraint
//!   qualification and second-order checks, convergence-order estimation and
//!   active-set stabilization reports;
//! - [`registry`]: built-in benchmark problems with reference solutions;
//! - [`bench`]: the acceptance matrix behind `mpcc bench` and the test suite.
//!
//! See the `examples/` directory for one runnable example per capability, and
//! the thin `mpcc` binary for the `solve` / `classify` / `bench` commands.

pub mod analysis;
pub mod bench;
pub mod denseqp;
pub mod expr;
pub mod model;
pub mod oracle;
pub mod qpcc;
pub mod registry;
pub mod solver;
pub mod trace;
