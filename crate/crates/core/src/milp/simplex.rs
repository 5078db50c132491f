//! Dense two-phase primal simplex with implicit variable bounds.
//!
//! Nonbasic variables sit at their lower or upper bound, so binary upper
//! bounds and branch-and-bound fixings never become explicit rows. Pricing
//! is Dantzig's rule; after a run of degenerate pivots it switches to
//! Bland's rule until progress resumes.

use super::{MilpError, MilpModel, MilpSolution, Sense, SolveStatus, SolverConfig};
use crate::numeric::Scalar;

const NONBASIC: usize = usize::MAX;
const DEGENERATE_RUN: usize = 50;

#[derive(Debug, Clone)]
pub(crate) enum LpOutcome<T> {
    Optimal { x: Vec<T>, objective: T },
    Infeasible,
}

struct Tableau<T> {
    m: usize,
    width: usize,
    tab: Vec<T>,
    beta: Vec<T>,
    basis: Vec<usize>,
    pos: Vec<usize>,
    at_upper: Vec<bool>,
    ub: Vec<T>,
    d: Vec<T>,
    tol: T,
}

impl<T: Scalar> Tableau<T> {
    #[inline]
    fn at(&self, r: usize, j: usize) -> T {
        self.tab[r * self.width + j]
    }

    fn price(&mut self, cost: &[T]) {
        for j in 0..self.width {
            let mut v = cost[j];
            for r in 0..self.m {
                let a = self.at(r, j);
                if a != T::zero() {
                    v -= cost[self.basis[r]] * a;
                }
            }
            self.d[j] = v;
        }
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let w = self.width;
        let piv = self.at(r, q);
        {
            let row = &mut self.tab[r * w..(r + 1) * w];
            for v in row.iter_mut() {
                *v /= piv;
            }
            row[q] = T::one();
        }
        let prow: Vec<T> = self.tab[r * w..(r + 1) * w].to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.tab[i * w + q];
            if f == T::zero() {
                continue;
            }
            let row = &mut self.tab[i * w..(i + 1) * w];
            for (v, &p) in row.iter_mut().zip(&prow) {
                if p != T::zero() {
                    *v -= f * p;
                }
            }
            row[q] = T::zero();
        }
        let f = self.d[q];
        if f != T::zero() {
            for (v, &p) in self.d.iter_mut().zip(&prow) {
                if p != T::zero() {
                    *v -= f * p;
                }
            }
        }
        self.d[q] = T::zero();
    }

    /// Runs primal simplex on the current reduced costs.
    fn optimize(&mut self, max_iter: usize) -> Result<(), MilpError> {
        let tol = self.tol;
        let mut bland = false;
        let mut degenerate = 0usize;
        for _ in 0..max_iter {
            // pricing
            let mut q = NONBASIC;
            let mut best = T::zero();
            for j in 0..self.width {
                if self.pos[j] != NONBASIC || self.ub[j] <= T::zero() {
                    continue;
                }
                let dj = self.d[j];
                let eligible = if self.at_upper[j] { dj > tol } else { dj < -tol };
                if eligible {
                    if bland {
                        q = j;
                        break;
                    }
                    if dj.abs() > best {
                        best = dj.abs();
                        q = j;
                    }
                }
            }
            if q == NONBASIC {
                return Ok(());
            }
            let dir = if self.at_upper[q] { -T::one() } else { T::one() };

            // ratio test
            let mut theta = self.ub[q];
            let mut leave: Option<(usize, bool)> = None;
            let mut leave_mag = T::zero();
            for r in 0..self.m {
                let a = self.at(r, q);
                if a.abs() <= tol {
                    continue;
                }
                let rate = -dir * a;
                let lim = if rate < T::zero() {
                    self.beta[r] / -rate
                } else {
                    let u = self.ub[self.basis[r]];
                    if u.is_infinite() {
                        continue;
                    }
                    (u - self.beta[r]) / rate
                };
                let lim = lim.max(T::zero());
                let tie = T::lit(1e-12) * (T::one() + theta.abs().min(T::lit(1e12)));
                let better = match leave {
                    _ if lim < theta - tie => true,
                    Some((lr, _)) if (lim - theta).abs() <= tie => {
                        if bland {
                            self.basis[r] < self.basis[lr]
                        } else {
                            a.abs() > leave_mag
                        }
                    }
                    _ => false,
                };
                if better {
                    theta = lim;
                    leave = Some((r, rate > T::zero()));
                    leave_mag = a.abs();
                }
            }
            if theta.is_infinite() {
                return Err(MilpError::Unbounded);
            }

            for r in 0..self.m {
                let a = self.at(r, q);
                if a != T::zero() {
                    self.beta[r] -= dir * a * theta;
                }
            }
            match leave {
                None => self.at_upper[q] = !self.at_upper[q],
                Some((r, to_upper)) => {
                    let start = if self.at_upper[q] { self.ub[q] } else { T::zero() };
                    let old = self.basis[r];
                    self.pivot(r, q);
                    self.beta[r] = start + dir * theta;
                    self.basis[r] = q;
                    self.pos[q] = r;
                    self.pos[old] = NONBASIC;
                    self.at_upper[old] = to_upper && self.ub[old].is_finite();
                }
            }

            if theta <= tol {
                degenerate += 1;
                if degenerate > DEGENERATE_RUN {
                    bland = true;
                }
            } else {
                degenerate = 0;
                bland = false;
            }
        }
        Err(MilpError::NumericalFailure(format!(
            "no convergence within {max_iter} iterations"
        )))
    }

    fn value(&self, j: usize) -> T {
        if self.pos[j] != NONBASIC {
            self.beta[self.pos[j]]
        } else if self.at_upper[j] {
            self.ub[j]
        } else {
            T::zero()
        }
    }
}

/// Solves the relaxation of `model` under the bound overrides `lower` /
/// `upper`; integrality flags are ignored.
pub(crate) fn solve_bounded<T: Scalar>(
    model: &MilpModel<T>,
    lower: &[T],
    upper: &[T],
    tol: T,
) -> Result<LpOutcome<T>, MilpError> {
    let n = model.n_vars;
    let m = model.rows.len();
    if (0..n).any(|j| upper[j] < lower[j]) {
        return Ok(LpOutcome::Infeasible);
    }
    let n_le = model.n_le();
    let art0 = n + n_le;
    let width = art0 + m;

    let mut tab = vec![T::zero(); m * width];
    let mut beta = vec![T::zero(); m];
    let mut slack = n;
    for (r, row) in model.rows.iter().enumerate() {
        let mut rhs = row.rhs;
        for j in 0..n {
            rhs -= row.coeffs[j] * lower[j];
        }
        let sign = if rhs < T::zero() { -T::one() } else { T::one() };
        for j in 0..n {
            tab[r * width + j] = sign * row.coeffs[j];
        }
        if row.sense == Sense::Le {
            tab[r * width + slack] = sign;
            slack += 1;
        }
        tab[r * width + art0 + r] = T::one();
        beta[r] = sign * rhs;
    }

    let mut ub = vec![T::infinity(); width];
    for j in 0..n {
        ub[j] = upper[j] - lower[j];
    }
    let mut pos = vec![NONBASIC; width];
    let basis: Vec<usize> = (0..m).map(|r| art0 + r).collect();
    for (r, &b) in basis.iter().enumerate() {
        pos[b] = r;
    }

    let mut t = Tableau {
        m,
        width,
        tab,
        beta,
        basis,
        pos,
        at_upper: vec![false; width],
        ub,
        d: vec![T::zero(); width],
        tol,
    };
    let max_iter = 200 * (m + width) + 1000;

    // phase 1
    if m > 0 {
        let rhs_scale = t.beta.iter().fold(T::one(), |acc, &b| acc.max(b.abs()));
        let mut cost = vec![T::zero(); width];
        for c in cost.iter_mut().skip(art0) {
            *c = T::one();
        }
        t.price(&cost);
        t.optimize(max_iter)?;
        let infeas: T = (art0..width).map(|j| t.value(j)).fold(T::zero(), |a, b| a + b);
        if infeas > tol * T::lit(1e3) * rhs_scale {
            return Ok(LpOutcome::Infeasible);
        }
        for j in art0..width {
            t.ub[j] = T::zero();
            if t.pos[j] != NONBASIC {
                t.beta[t.pos[j]] = T::zero();
            }
            t.at_upper[j] = false;
        }
    }

    // phase 2
    let mut cost = vec![T::zero(); width];
    cost[..n].copy_from_slice(&model.objective);
    t.price(&cost);
    t.optimize(max_iter)?;

    let x: Vec<T> = (0..n)
        .map(|j| {
            let v = lower[j] + t.value(j);
            v.max(lower[j]).min(upper[j])
        })
        .collect();
    let objective = model.objective_value(&x);
    Ok(LpOutcome::Optimal { x, objective })
}

/// Solves the linear relaxation of `model` (binary flags ignored).
pub fn lp_solve<T: Scalar>(
    model: &MilpModel<T>,
    config: &SolverConfig<T>,
) -> Result<MilpSolution<T>, MilpError> {
    model.validate()?;
    match solve_bounded(model, &model.lower, &model.upper, config.lp_tol)? {
        LpOutcome::Infeasible => Ok(MilpSolution::infeasible(1)),
        LpOutcome::Optimal { x, objective } => Ok(MilpSolution {
            x,
            objective,
            status: SolveStatus::Optimal,
            nodes_explored: 1,
            gap: T::zero(),
            root_bound: objective,
        }),
    }
}
