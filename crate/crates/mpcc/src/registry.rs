//! Built-in benchmark problems with classifier-verified reference solutions
//! and canonical initial points. The model sources go through the regular
//! parser, so every solve also exercises the model format.

use nalgebra::{dvector, DVector};

use crate::analysis::StationarityClass;
use crate::model::{parse_model, MpccProblem, PrimalDualPoint};

/// How an entry is meant to be driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    /// A genuine MPCC, solved with the SQPCC loop.
    Mpcc,
    /// An inequality-constrained NLP written as an MPCC without pairs;
    /// driven with the classical SQP loop in the benchmark suite.
    NlpAsMpcc,
}

/// A named stationary point with its derived multipliers and expected class.
#[derive(Debug, Clone)]
pub struct KnownPoint {
    pub w: DVector<f64>,
    pub point: PrimalDualPoint,
    pub expected_class: StationarityClass,
    pub note: &'static str,
}

/// One registry problem.
pub struct RegistryEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub model_source: &'static str,
    pub problem: MpccProblem,
    pub kind: EntryKind,
    /// Reference solution with derived multipliers; S-stationary for MPCC
    /// entries, a KKT point for the NLP entries.
    pub reference: PrimalDualPoint,
    /// Canonical initial primal points.
    pub initial_points: Vec<DVector<f64>>,
    /// Other stationary points of interest (attractors, spurious limits).
    pub alternates: Vec<KnownPoint>,
}

pub const EXAMPLE51_SRC: &str = "\
# Unique local minimizer (0, 1); the origin is a weaker stationary point
# whose derived multipliers are (xi, nu) = (1, -6).
var w1, w2;
minimize w1 + w1^2 + w1^3 + (w2-1)^4 + (w2-1)^2;
subject to:
  comp w1 , w2;
";

pub const LEYFFER_SRC: &str = "\
# Unique minimizer (1, 0), S-stationary; the origin is M-stationary with
# (xi, nu) = (-2, 0) and attracts a spurious SQPCC sequence on the G branch.
var w1, w2;
minimize (w1-1)^2 + w2^2 + w2^3;
subject to:
  comp w1 , w2;
";

pub const EXAMPLE54_SRC: &str = "\
# Unique S-stationary point (0, 0) with xi = nu = 0: the biactive pair is
# identified only asymptotically along either branch.
var w1, w2;
minimize w1^4 + w1^2 + w2^4 + w2^2;
subject to:
  comp w1 , w2;
";

pub const SQP_WEAK_SRC: &str = "\
# Weakly active bound at the solution: mu = 0, identified only in the limit.
var w;
minimize w^2 + w^4;
subject to:
  w >= 0;
";

pub const SQP_STRICT_SRC: &str = "\
# Strictly active bound at the solution: mu = 6, identified finitely.
var w;
minimize (w+1)^2 + (w+1)^4;
subject to:
  w >= 0;
";

fn mpcc_point(w: DVector<f64>, xi: f64, nu: f64) -> PrimalDualPoint {
    PrimalDualPoint {
        w,
        lambda: dvector![],
        mu: dvector![],
        xi: dvector![xi],
        nu: dvector![nu],
    }
}

/// All registry entries, in a fixed order.
pub fn all() -> Vec<RegistryEntry> {
    let example51 = RegistryEntry {
        name: "example51",
        description: "corner-turning MPCC with a weaker stationary point near the minimizer",
        model_source: EXAMPLE51_SRC,
        problem: parse_model(EXAMPLE51_SRC).expect("registry model parses"),
        kind: EntryKind::Mpcc,
        reference: mpcc_point(dvector![0.0, 1.0], 1.0, 0.0),
        initial_points: vec![dvector![2.0, 0.0]],
        alternates: vec![KnownPoint {
            w: dvector![0.0, 0.0],
            point: mpcc_point(dvector![0.0, 0.0], 1.0, -6.0),
            expected_class: StationarityClass::A,
            note: "derived multipliers (1, -6); see the benchmark report for \
                   the sign discrepancy against the originally printed value",
        }],
    };
    let leyffer = RegistryEntry {
        name: "leyffer",
        description: "counterexample with an M-stationary attractor at the origin",
        model_source: LEYFFER_SRC,
        problem: parse_model(LEYFFER_SRC).expect("registry model parses"),
        kind: EntryKind::Mpcc,
        reference: mpcc_point(dvector![1.0, 0.0], 0.0, 0.0),
        initial_points: vec![dvector![0.0, 2.0]],
        alternates: vec![KnownPoint {
            w: dvector![0.0, 0.0],
            point: mpcc_point(dvector![0.0, 0.0], -2.0, 0.0),
            expected_class: StationarityClass::M,
            note: "M-stationary limit of the spurious forced-branch sequence",
        }],
    };
    let example54 = RegistryEntry {
        name: "example54",
        description: "nonunique branch sequences into a biactive S-stationary point",
        model_source: EXAMPLE54_SRC,
        problem: parse_model(EXAMPLE54_SRC).expect("registry model parses"),
        kind: EntryKind::Mpcc,
        reference: mpcc_point(dvector![0.0, 0.0], 0.0, 0.0),
        initial_points: vec![dvector![0.3, 0.0], dvector![0.0, 0.3]],
        alternates: vec![],
    };
    let sqp_weak = RegistryEntry {
        name: "sqp-weak",
        description: "scalar NLP whose bound is identified only in the limit",
        model_source: SQP_WEAK_SRC,
        problem: parse_model(SQP_WEAK_SRC).expect("registry model parses"),
        kind: EntryKind::NlpAsMpcc,
        reference: PrimalDualPoint {
            w: dvector![0.0],
            lambda: dvector![],
            mu: dvector![0.0],
            xi: dvector![],
            nu: dvector![],
        },
        initial_points: vec![dvector![0.4]],
        alternates: vec![],
    };
    let sqp_strict = RegistryEntry {
        name: "sqp-strict",
        description: "scalar NLP whose bound is identified after finitely many steps",
        model_source: SQP_STRICT_SRC,
        problem: parse_model(SQP_STRICT_SRC).expect("registry model parses"),
        kind: EntryKind::NlpAsMpcc,
        reference: PrimalDualPoint {
            w: dvector![0.0],
            lambda: dvector![],
            mu: dvector![6.0],
            xi: dvector![],
            nu: dvector![],
        },
        initial_points: vec![dvector![0.4]],
        alternates: vec![],
    };
    vec![example51, leyffer, example54, sqp_weak, sqp_strict]
}

/// Look up one entry by name.
pub fn find(name: &str) -> Option<RegistryEntry> {
    all().into_iter().find(|e| e.name == name)
}
