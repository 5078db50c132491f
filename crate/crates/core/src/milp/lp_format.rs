//! CPLEX-style LP text for cross-checking models with external solvers.
//!
//! ```text
//! \ <comment>
//! Minimize
//!  obj: 2 a0 - 1.5 a1 + 1 tp0
//! Subject To
//!  r0: 2 a0 + 2 a1 - 1 tp0 = 1
//! Bounds
//!  0 <= tp0 <= +inf
//! Binaries
//!  a0 a1
//! End
//! ```
//! Terms with zero coefficients are omitted; every variable gets a bounds
//! line unless it is binary.

use std::fmt::Write as _;

use super::{MilpModel, Sense};
use crate::numeric::Scalar;

fn terms<T: Scalar>(out: &mut String, coeffs: &[T], names: &[String]) {
    let mut first = true;
    for (c, name) in coeffs.iter().zip(names) {
        if *c == T::zero() {
            continue;
        }
        let sign = if *c < T::zero() { "-" } else { "+" };
        if first {
            let lead = if *c < T::zero() { "-" } else { "" };
            let _ = write!(out, " {lead}{} {name}", c.abs());
            first = false;
        } else {
            let _ = write!(out, " {sign} {} {name}", c.abs());
        }
    }
    if first {
        out.push_str(" 0");
    }
}

pub fn write_lp<T: Scalar>(model: &MilpModel<T>, comment: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "\\ {comment}");
    out.push_str("Minimize\n obj:");
    terms(&mut out, &model.objective, &model.names);
    out.push_str("\nSubject To\n");
    for (k, row) in model.rows.iter().enumerate() {
        let _ = write!(out, " r{k}:");
        terms(&mut out, &row.coeffs, &model.names);
        let op = match row.sense {
            Sense::Eq => "=",
            Sense::Le => "<=",
        };
        let _ = writeln!(out, " {op} {}", row.rhs);
    }
    out.push_str("Bounds\n");
    for j in 0..model.n_vars {
        if model.binary[j] {
            continue;
        }
        let upper = if model.upper[j].is_infinite() {
            "+inf".to_string()
        } else {
            model.upper[j].to_string()
        };
        let _ = writeln!(out, " {} <= {} <= {upper}", model.lower[j], model.names[j]);
    }
    let bins: Vec<&str> = (0..model.n_vars)
        .filter(|&j| model.binary[j])
        .map(|j| model.names[j].as_str())
        .collect();
    if !bins.is_empty() {
        let _ = writeln!(out, "Binaries\n {}", bins.join(" "));
    }
    out.push_str("End\n");
    out
}
