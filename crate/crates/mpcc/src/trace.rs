//! Trace serialization: the fixed-schema CSV with 17-significant-digit
//! numbers (so every `f64` round-trips bit-exactly) and the JSON run
//! summary.
//!
//! CSV columns, in order: `k`, `w[0..n)`, `lambda[0..m_h)`, `mu[0..m_g)`,
//! `xi[0..m)`, `nu[0..m)`, `kkt_residual`, `step_norm`, `err_to_ref` (empty
//! when no reference was supplied), `branch_signature`, `num_candidates`,
//! `r_norm`, `kappa`.

use serde::Serialize;
use thiserror::Error;

use crate::analysis::{OrderEstimate, StabilizationReport};
use crate::solver::{SolveStatus, SolveTrace, TraceDims};

fn fmt(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// Render a trace into the fixed CSV schema.
pub fn to_csv(trace: &SolveTrace) -> String {
    let d = trace.dims;
    let mut header: Vec<String> = vec!["k".into()];
    header.extend((0..d.n).map(|i| format!("w{i}")));
    header.extend((0..d.m_h).map(|i| format!("lambda{i}")));
    header.extend((0..d.m_g).map(|i| format!("mu{i}")));
    header.extend((0..d.m_pairs).map(|i| format!("xi{i}")));
    header.extend((0..d.m_pairs).map(|i| format!("nu{i}")));
    header.extend(
        ["kkt_residual", "step_norm", "err_to_ref", "branch_signature", "num_candidates", "r_norm", "kappa"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut out = header.join(",");
    out.push('\n');
    for r in &trace.records {
        let mut row: Vec<String> = vec![r.k.to_string()];
        row.extend(r.w.iter().map(|&v| fmt(v)));
        row.extend(r.lambda.iter().map(|&v| fmt(v)));
        row.extend(r.mu.iter().map(|&v| fmt(v)));
        row.extend(r.xi.iter().map(|&v| fmt(v)));
        row.extend(r.nu.iter().map(|&v| fmt(v)));
        row.push(fmt(r.kkt_residual));
        row.push(fmt(r.step_norm));
        row.push(r.err_to_ref.map(fmt).unwrap_or_default());
        row.push(r.branch_signature.clone());
        row.push(r.num_candidates.to_string());
        row.push(fmt(r.r_norm));
        row.push(fmt(r.kappa));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// A parsed CSV row, mirroring the written columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub k: usize,
    pub w: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub xi: Vec<f64>,
    pub nu: Vec<f64>,
    pub kkt_residual: f64,
    pub step_norm: f64,
    pub err_to_ref: Option<f64>,
    pub branch_signature: String,
    pub num_candidates: usize,
    pub r_norm: f64,
    pub kappa: f64,
}

#[derive(Debug, Error)]
pub enum TraceCsvError {
    #[error("empty file")]
    Empty,
    #[error("row {row}: expected {expected} fields, found {found}")]
    FieldCount { row: usize, expected: usize, found: usize },
    #[error("row {row}: cannot parse `{value}`")]
    Value { row: usize, value: String },
    #[error("unrecognized header: {0}")]
    Header(String),
}

/// Parse a CSV written by [`to_csv`] back into rows; numeric fields
/// round-trip bit-exactly.
pub fn parse_csv(text: &str) -> Result<(TraceDims, Vec<CsvRow>), TraceCsvError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(TraceCsvError::Empty)?;
    let cols: Vec<&str> = header.split(',').collect();
    let count = |prefix: &str| cols.iter().filter(|c| c.starts_with(prefix) && c[prefix.len()..].chars().all(|ch| ch.is_ascii_digit())).count();
    let dims = TraceDims {
        n: count("w"),
        m_h: count("lambda"),
        m_g: count("mu"),
        m_pairs: count("xi"),
    };
    let expected = 1 + dims.n + dims.m_h + dims.m_g + 2 * dims.m_pairs + 7;
    if cols.len() != expected {
        return Err(TraceCsvError::Header(header.to_string()));
    }
    let parse_f = |row: usize, s: &str| -> Result<f64, TraceCsvError> {
        if s == "nan" {
            return Ok(f64::NAN);
        }
        s.parse::<f64>().map_err(|_| TraceCsvError::Value { row, value: s.to_string() })
    };
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(TraceCsvError::FieldCount { row: idx, expected, found: fields.len() });
        }
        let mut it = fields.into_iter();
        let k = it
            .next()
            .unwrap()
            .parse::<usize>()
            .map_err(|_| TraceCsvError::Value { row: idx, value: "k".into() })?;
        let take = |len: usize, it: &mut std::vec::IntoIter<&str>| -> Result<Vec<f64>, TraceCsvError> {
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                v.push(parse_f(idx, it.next().unwrap())?);
            }
            Ok(v)
        };
        let mut rest: std::vec::IntoIter<&str> = it.collect::<Vec<_>>().into_iter();
        let w = take(dims.n, &mut rest)?;
        let lambda = take(dims.m_h, &mut rest)?;
        let mu = take(dims.m_g, &mut rest)?;
        let xi = take(dims.m_pairs, &mut rest)?;
        let nu = take(dims.m_pairs, &mut rest)?;
        let kkt_residual = parse_f(idx, rest.next().unwrap())?;
        let step_norm = parse_f(idx, rest.next().unwrap())?;
        let err_field = rest.next().unwrap();
        let err_to_ref = if err_field.is_empty() { None } else { Some(parse_f(idx, err_field)?) };
        let branch_signature = rest.next().unwrap().to_string();
        let num_candidates = rest
            .next()
            .unwrap()
            .parse::<usize>()
            .map_err(|_| TraceCsvError::Value { row: idx, value: "num_candidates".into() })?;
        let r_norm = parse_f(idx, rest.next().unwrap())?;
        let kappa = parse_f(idx, rest.next().unwrap())?;
        rows.push(CsvRow {
            k,
            w,
            lambda,
            mu,
            xi,
            nu,
            kkt_residual,
            step_norm,
            err_to_ref,
            branch_signature,
            num_candidates,
            r_norm,
            kappa,
        });
    }
    Ok((dims, rows))
}

/// JSON run summary emitted by the CLI next to the trace.
#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub problem: String,
    pub method: String,
    pub hessian: String,
    pub policy: String,
    pub status: SolveStatus,
    pub iterations: usize,
    pub final_w: Vec<f64>,
    pub final_kkt_residual: f64,
    pub final_err_to_ref: Option<f64>,
    /// Stationarity class of the final iterate, when it is feasible.
    pub final_class: Option<String>,
    /// Fitted contraction coefficients `(alpha, beta)` over the error tail,
    /// when a reference was supplied.
    pub contraction: Option<(f64, f64)>,
    pub order: Option<OrderEstimate>,
    pub stabilization: Option<StabilizationReport>,
    pub notes: Vec<String>,
}

impl SolveSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}
