//! Exhaustive oracle for programs whose binaries form an equal-split
//! assignment.

use itertools::Itertools;

use super::{tie_eps, MilpError, MilpSolution, SolveStatus};
use crate::numeric::{binomial, Scalar};

/// Largest enumeration `enumerate_solve` accepts.
pub const MAX_ENUMERATED: f64 = 1e7;

/// A program over `n` binaries with exactly `n_treated` ones, whose
/// continuous part is determined by the binaries.
pub trait EqualSplitProgram<T: Scalar> {
    fn n_subjects(&self) -> usize;
    fn n_treated(&self) -> usize;
    /// Optimal objective for a fixed assignment.
    fn objective_of(&self, treated: &[bool]) -> T;
    /// Full variable vector (binaries plus optimal auxiliaries).
    fn complete(&self, treated: &[bool]) -> Vec<T>;
}

/// Minimises over all assignments; ties go to the lexicographically
/// smallest assignment vector.
pub fn enumerate_solve<T: Scalar, P: EqualSplitProgram<T>>(
    program: &P,
    max_n: usize,
) -> Result<MilpSolution<T>, MilpError> {
    let n = program.n_subjects();
    let k = program.n_treated();
    if n > max_n || k > n {
        return Err(MilpError::SizeExceeded(format!("n = {n} exceeds max_n = {max_n}")));
    }
    let count = binomial(n, k);
    if count > MAX_ENUMERATED {
        return Err(MilpError::SizeExceeded(format!("C({n},{k}) = {count}")));
    }
    // Iterating control sets in lexicographic order visits assignment
    // vectors in ascending lexicographic order.
    let bits_of = |control: &[usize]| {
        let mut bits = vec![true; n];
        for &i in control {
            bits[i] = false;
        }
        bits
    };
    let mut best = T::infinity();
    for control in (0..n).combinations(n - k) {
        let z = program.objective_of(&bits_of(&control));
        if z < best {
            best = z;
        }
    }
    let cutoff = best + tie_eps(best);
    let mut evaluated = 0usize;
    for control in (0..n).combinations(n - k) {
        evaluated += 1;
        let bits = bits_of(&control);
        let z = program.objective_of(&bits);
        if z <= cutoff {
            return Ok(MilpSolution {
                x: program.complete(&bits),
                objective: z,
                status: SolveStatus::Optimal,
                nodes_explored: count as usize + evaluated,
                gap: T::zero(),
                root_bound: best,
            });
        }
    }
    Ok(MilpSolution::infeasible(count as usize))
}
