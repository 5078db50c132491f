//! Mixed-integer linear programs over a generic [`Scalar`]: the model
//! representation, a dense bounded-variable simplex for relaxations, an
//! exact best-first branch-and-bound, and an exhaustive oracle for
//! equal-split assignment programs.

mod bnb;
mod enumerate;
mod lp_format;
mod simplex;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::Scalar;

pub use bnb::{milp_solve, milp_solve_with, IncumbentHeuristic};
pub use enumerate::{enumerate_solve, EqualSplitProgram, MAX_ENUMERATED};
pub use lp_format::write_lp;
pub use simplex::lp_solve;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MilpError {
    #[error("inconsistent model: {0}")]
    InvalidModel(String),
    #[error("numerical failure in simplex: {0}")]
    NumericalFailure(String),
    #[error("relaxation is unbounded")]
    Unbounded,
    #[error("enumeration size exceeded: {0}")]
    SizeExceeded(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Eq,
    Le,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint<T> {
    pub coeffs: Vec<T>,
    pub sense: Sense,
    pub rhs: T,
}

/// `min c'x` subject to equality rows, `<=` rows and variable bounds; some
/// variables are flagged binary.
#[derive(Debug, Clone, PartialEq)]
pub struct MilpModel<T> {
    pub n_vars: usize,
    pub objective: Vec<T>,
    pub rows: Vec<Constraint<T>>,
    pub lower: Vec<T>,
    pub upper: Vec<T>,
    pub binary: Vec<bool>,
    pub names: Vec<String>,
}

impl<T: Scalar> MilpModel<T> {
    /// `n` continuous variables in `[0, inf)` with zero objective.
    pub fn new(n_vars: usize) -> Self {
        Self {
            n_vars,
            objective: vec![T::zero(); n_vars],
            rows: Vec::new(),
            lower: vec![T::zero(); n_vars],
            upper: vec![T::infinity(); n_vars],
            binary: vec![false; n_vars],
            names: (0..n_vars).map(|i| format!("x{i}")).collect(),
        }
    }

    pub fn set_binary(&mut self, var: usize) {
        self.binary[var] = true;
        self.lower[var] = T::zero();
        self.upper[var] = T::one();
    }

    pub fn set_bounds(&mut self, var: usize, lower: T, upper: T) {
        self.lower[var] = lower;
        self.upper[var] = upper;
    }

    pub fn add_eq(&mut self, coeffs: Vec<T>, rhs: T) {
        self.rows.push(Constraint {
            coeffs,
            sense: Sense::Eq,
            rhs,
        });
    }

    pub fn add_le(&mut self, coeffs: Vec<T>, rhs: T) {
        self.rows.push(Constraint {
            coeffs,
            sense: Sense::Le,
            rhs,
        });
    }

    pub fn n_eq(&self) -> usize {
        self.rows.iter().filter(|r| r.sense == Sense::Eq).count()
    }

    pub fn n_le(&self) -> usize {
        self.rows.iter().filter(|r| r.sense == Sense::Le).count()
    }

    pub fn n_binary(&self) -> usize {
        self.binary.iter().filter(|&&b| b).count()
    }

    pub fn validate(&self) -> Result<(), MilpError> {
        let n = self.n_vars;
        let bad = |m: String| Err(MilpError::InvalidModel(m));
        if self.objective.len() != n
            || self.lower.len() != n
            || self.upper.len() != n
            || self.binary.len() != n
            || self.names.len() != n
        {
            return bad("per-variable vectors differ from n_vars".into());
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return bad("non-finite objective coefficient".into());
        }
        for (k, row) in self.rows.iter().enumerate() {
            if row.coeffs.len() != n {
                return bad(format!("row {k} has {} coefficients", row.coeffs.len()));
            }
            if !row.rhs.is_finite() || row.coeffs.iter().any(|c| !c.is_finite()) {
                return bad(format!("row {k} has a non-finite entry"));
            }
        }
        for j in 0..n {
            if !self.lower[j].is_finite() {
                return bad(format!("variable {j} needs a finite lower bound"));
            }
            if self.upper[j] < self.lower[j] || self.upper[j].is_nan() {
                return bad(format!("variable {j} has empty bounds"));
            }
            if self.binary[j] && (self.lower[j] != T::zero() || self.upper[j] != T::one()) {
                return bad(format!("binary variable {j} must have bounds [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, x: &[T]) -> T {
        crate::numeric::ksum(self.objective.iter().zip(x).map(|(&c, &v)| c * v))
    }

    /// Largest constraint or bound violation of `x`.
    pub fn max_violation(&self, x: &[T]) -> T {
        let mut worst = T::zero();
        for row in &self.rows {
            let lhs = crate::numeric::ksum(row.coeffs.iter().zip(x).map(|(&a, &v)| a * v));
            let v = match row.sense {
                Sense::Eq => (lhs - row.rhs).abs(),
                Sense::Le => (lhs - row.rhs).max(T::zero()),
            };
            worst = worst.max(v);
        }
        for j in 0..self.n_vars {
            worst = worst.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    BudgetExceeded,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::BudgetExceeded => "budget_exceeded",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilpSolution<T> {
    /// Empty when no feasible point is known.
    pub x: Vec<T>,
    pub objective: T,
    pub status: SolveStatus,
    pub nodes_explored: usize,
    /// Incumbent minus best open bound; zero once optimality is proven.
    pub gap: T,
    /// Objective of the root relaxation.
    pub root_bound: T,
}

impl<T: Scalar> MilpSolution<T> {
    pub(crate) fn infeasible(nodes: usize) -> Self {
        Self {
            x: Vec::new(),
            objective: T::infinity(),
            status: SolveStatus::Infeasible,
            nodes_explored: nodes,
            gap: T::zero(),
            root_bound: T::infinity(),
        }
    }

    pub fn has_solution(&self) -> bool {
        !self.x.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branching {
    MostFractional,
    PseudoCost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig<T> {
    pub integrality_tol: T,
    pub lp_tol: T,
    pub node_budget: usize,
    /// Wall-clock cap; results under a time cap are not reproducible.
    pub time_budget: Option<Duration>,
    pub branching: Branching,
    pub incumbent_heuristic: bool,
    /// Break ties between optimal solutions by the lexicographically
    /// smallest vector of binaries.
    pub lexicographic_ties: bool,
    pub seed: u64,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            integrality_tol: T::default_integrality_tol(),
            lp_tol: T::default_lp_tol(),
            node_budget: 200_000,
            time_budget: None,
            branching: Branching::MostFractional,
            incumbent_heuristic: true,
            lexicographic_ties: true,
            seed: 0,
        }
    }
}

/// Relative tolerance under which two objective values tie.
pub(crate) fn tie_eps<T: Scalar>(z: T) -> T {
    T::lit(1e-10) * z.abs().max(T::one())
}
