//! Best-first branch-and-bound over binary variables.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use super::simplex::{solve_bounded, LpOutcome};
use super::{tie_eps, Branching, MilpError, MilpModel, MilpSolution, SolveStatus, SolverConfig};
use crate::numeric::Scalar;
use crate::seeding::{self, Rng};

/// Supplies feasible points (full variable vectors) from a relaxation
/// point. Proposals are checked before use; infeasible ones are dropped.
pub trait IncumbentHeuristic<T: Scalar>: Sync {
    fn propose(&self, relaxation: &[T], rng: &mut Rng) -> Option<Vec<T>>;
}

const HEURISTIC_EVERY: usize = 256;

/// Packed fixing: `var << 1 | value`.
type Fixing = u32;

fn pack(var: usize, value: bool) -> Fixing {
    ((var as u32) << 1) | value as u32
}

fn unpack(f: Fixing) -> (usize, bool) {
    ((f >> 1) as usize, f & 1 == 1)
}

struct Node<T> {
    bound: T,
    id: u64,
    fixings: Vec<Fixing>,
    branch_var: usize,
    branch_value: T,
}

impl<T: Scalar> PartialEq for Node<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Scalar> Eq for Node<T> {}
impl<T: Scalar> PartialOrd for Node<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Scalar> Ord for Node<T> {
    // BinaryHeap is a max-heap: smallest bound, then smallest id, on top.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .partial_cmp(&self.bound)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.id.cmp(&self.id))
    }
}

#[derive(Clone, Copy)]
enum Mode<T> {
    Optimize,
    /// Stop at the first integral point with objective <= cutoff.
    FindAtMost(T),
}

struct RunResult<T> {
    incumbent: Option<(Vec<T>, T)>,
    exhausted: bool,
    best_open: T,
    root: Option<T>,
}

#[derive(Clone)]
struct PseudoCosts<T> {
    down: Vec<(T, usize)>,
    up: Vec<(T, usize)>,
}

impl<T: Scalar> PseudoCosts<T> {
    fn new(n: usize) -> Self {
        Self {
            down: vec![(T::zero(), 0); n],
            up: vec![(T::zero(), 0); n],
        }
    }

    fn record(&mut self, var: usize, up: bool, per_unit: T) {
        let slot = if up { &mut self.up[var] } else { &mut self.down[var] };
        slot.0 += per_unit;
        slot.1 += 1;
    }

    fn estimate(&self, var: usize, up: bool) -> Option<T> {
        let (s, n) = if up { self.up[var] } else { self.down[var] };
        (n > 0).then(|| s / T::from_usize(n).unwrap())
    }
}

struct Search<'a, T: Scalar> {
    model: &'a MilpModel<T>,
    config: &'a SolverConfig<T>,
    heuristic: Option<&'a dyn IncumbentHeuristic<T>>,
    binaries: Vec<usize>,
    nodes: usize,
    run_nodes: usize,
    next_id: u64,
    started: Instant,
    pseudo: PseudoCosts<T>,
    rng: Rng,
}

impl<'a, T: Scalar> Search<'a, T> {
    fn budget_left(&self) -> bool {
        if self.run_nodes >= self.config.node_budget {
            return false;
        }
        match self.config.time_budget {
            Some(limit) => self.started.elapsed() < limit,
            None => true,
        }
    }

    fn solve_fixed(&mut self, fixings: &[Fixing]) -> Result<LpOutcome<T>, MilpError> {
        let mut lower = self.model.lower.clone();
        let mut upper = self.model.upper.clone();
        for &f in fixings {
            let (var, val) = unpack(f);
            let v = if val { T::one() } else { T::zero() };
            lower[var] = v;
            upper[var] = v;
        }
        self.nodes += 1;
        self.run_nodes += 1;
        solve_bounded(self.model, &lower, &upper, self.config.lp_tol)
    }

    fn fractional(&self, x: &[T]) -> Option<(usize, T)> {
        let tol = self.config.integrality_tol;
        let frac: Vec<(usize, T)> = self
            .binaries
            .iter()
            .map(|&j| (j, x[j]))
            .filter(|&(_, v)| v > tol && v < T::one() - tol)
            .collect();
        if frac.is_empty() {
            return None;
        }
        let most_fractional = || {
            let mut best = frac[0];
            for &(j, v) in &frac[1..] {
                if v.min(T::one() - v) > best.1.min(T::one() - best.1) {
                    best = (j, v);
                }
            }
            best
        };
        match self.config.branching {
            Branching::MostFractional => Some(most_fractional()),
            Branching::PseudoCost => {
                let floor = T::lit(1e-6);
                let mut best: Option<((usize, T), T)> = None;
                for &(j, v) in &frac {
                    let (Some(d), Some(u)) = (self.pseudo.estimate(j, false), self.pseudo.estimate(j, true))
                    else {
                        continue;
                    };
                    let score = (d * v).max(floor) * (u * (T::one() - v)).max(floor);
                    if best.is_none_or(|(_, s)| score > s) {
                        best = Some(((j, v), score));
                    }
                }
                Some(best.map(|b| b.0).unwrap_or_else(most_fractional))
            }
        }
    }

    /// Fixes binaries to their rounded values and re-solves the rest.
    fn polish(&mut self, x: &[T]) -> Result<Option<(Vec<T>, T)>, MilpError> {
        let half = T::lit(0.5);
        let fix: Vec<Fixing> = self.binaries.iter().map(|&j| pack(j, x[j] > half)).collect();
        match self.solve_fixed(&fix)? {
            LpOutcome::Optimal { x, objective } => Ok(Some((x, objective))),
            LpOutcome::Infeasible => Ok(None),
        }
    }

    fn try_heuristic(&mut self, x: &[T]) -> Result<Option<(Vec<T>, T)>, MilpError> {
        let Some(h) = self.heuristic else {
            return Ok(None);
        };
        if !self.config.incumbent_heuristic {
            return Ok(None);
        }
        let Some(cand) = h.propose(x, &mut self.rng) else {
            return Ok(None);
        };
        if cand.len() != self.model.n_vars {
            return Ok(None);
        }
        let tol = self.config.integrality_tol;
        if self
            .binaries
            .iter()
            .any(|&j| cand[j].min((T::one() - cand[j]).abs()) > tol)
        {
            return Ok(None);
        }
        self.polish(&cand)
    }

    fn run(&mut self, root_fixings: Vec<Fixing>, mode: Mode<T>) -> Result<RunResult<T>, MilpError> {
        self.run_nodes = 0;
        let mut incumbent: Option<(Vec<T>, T)> = None;
        let keep = |bound: T, inc: &Option<(Vec<T>, T)>| match mode {
            Mode::Optimize => match inc {
                Some((_, z)) => bound < *z - tie_eps(*z),
                None => true,
            },
            Mode::FindAtMost(c) => bound <= c + tie_eps(c),
        };
        let accept = |cand: (Vec<T>, T), inc: &mut Option<(Vec<T>, T)>| -> bool {
            match mode {
                Mode::Optimize => {
                    let better = match inc {
                        Some((_, z)) => cand.1 < *z - tie_eps(*z),
                        None => true,
                    };
                    if better {
                        *inc = Some(cand);
                    }
                    false
                }
                Mode::FindAtMost(c) => {
                    if cand.1 <= c + tie_eps(c) {
                        *inc = Some(cand);
                        true
                    } else {
                        false
                    }
                }
            }
        };

        let (root_x, root_obj) = match self.solve_fixed(&root_fixings)? {
            LpOutcome::Infeasible => {
                return Ok(RunResult {
                    incumbent: None,
                    exhausted: true,
                    best_open: T::infinity(),
                    root: None,
                })
            }
            LpOutcome::Optimal { x, objective } => (x, objective),
        };
        let mut heap = BinaryHeap::new();
        let finish = |incumbent, exhausted, heap: &BinaryHeap<Node<T>>| RunResult {
            incumbent,
            exhausted,
            best_open: heap.peek().map(|n: &Node<T>| n.bound).unwrap_or(T::infinity()),
            root: Some(root_obj),
        };

        if matches!(mode, Mode::Optimize) {
            if let Some(c) = self.try_heuristic(&root_x)? {
                accept(c, &mut incumbent);
            }
        }
        match self.fractional(&root_x) {
            None => {
                if let Some(c) = self.polish(&root_x)? {
                    if accept(c, &mut incumbent) {
                        return Ok(finish(incumbent, false, &heap));
                    }
                }
                return Ok(finish(incumbent, true, &heap));
            }
            Some((var, value)) => {
                if keep(root_obj, &incumbent) {
                    heap.push(Node {
                        bound: root_obj,
                        id: self.next_id,
                        fixings: root_fixings,
                        branch_var: var,
                        branch_value: value,
                    });
                    self.next_id += 1;
                }
            }
        }

        while let Some(node) = heap.pop() {
            if !keep(node.bound, &incumbent) {
                continue;
            }
            if !self.budget_left() {
                heap.push(node);
                return Ok(finish(incumbent, false, &heap));
            }
            for up in [false, true] {
                let mut fixings = node.fixings.clone();
                fixings.push(pack(node.branch_var, up));
                let (x, obj) = match self.solve_fixed(&fixings)? {
                    LpOutcome::Infeasible => continue,
                    LpOutcome::Optimal { x, objective } => (x, objective),
                };
                let dist = if up {
                    T::one() - node.branch_value
                } else {
                    node.branch_value
                };
                if dist > T::zero() {
                    let degradation = (obj - node.bound).max(T::zero());
                    self.pseudo.record(node.branch_var, up, degradation / dist);
                }
                if matches!(mode, Mode::Optimize) && self.nodes % HEURISTIC_EVERY == 0 {
                    if let Some(c) = self.try_heuristic(&x)? {
                        accept(c, &mut incumbent);
                    }
                }
                if !keep(obj, &incumbent) {
                    continue;
                }
                match self.fractional(&x) {
                    None => {
                        if let Some(c) = self.polish(&x)? {
                            if accept(c, &mut incumbent) {
                                return Ok(finish(incumbent, false, &heap));
                            }
                        }
                    }
                    Some((var, value)) => {
                        heap.push(Node {
                            bound: obj,
                            id: self.next_id,
                            fixings,
                            branch_var: var,
                            branch_value: value,
                        });
                        self.next_id += 1;
                    }
                }
            }
        }
        Ok(finish(incumbent, true, &heap))
    }

    /// Replaces the optimum by the lexicographically smallest optimal
    /// vector of binaries. Gives up (keeping the current witness) when an
    /// attempt runs out of budget.
    fn lexicographic(&mut self, witness: Vec<T>, z: T) -> Result<Vec<T>, MilpError> {
        let half = T::lit(0.5);
        let mut w = witness;
        let mut fixed: Vec<Fixing> = Vec::new();
        for b in self.binaries.clone() {
            if w[b] <= half {
                fixed.push(pack(b, false));
                continue;
            }
            let mut attempt = fixed.clone();
            attempt.push(pack(b, false));
            let r = self.run(attempt, Mode::FindAtMost(z))?;
            match r.incumbent {
                Some((x, _)) => {
                    w = x;
                    fixed.push(pack(b, false));
                }
                None if r.exhausted => fixed.push(pack(b, true)),
                None => break,
            }
        }
        Ok(w)
    }
}

pub fn milp_solve<T: Scalar>(
    model: &MilpModel<T>,
    config: &SolverConfig<T>,
) -> Result<MilpSolution<T>, MilpError> {
    milp_solve_with(model, config, None)
}

/// Branch-and-bound with an optional caller-supplied incumbent heuristic.
pub fn milp_solve_with<T: Scalar>(
    model: &MilpModel<T>,
    config: &SolverConfig<T>,
    heuristic: Option<&dyn IncumbentHeuristic<T>>,
) -> Result<MilpSolution<T>, MilpError> {
    model.validate()?;
    let mut search = Search {
        model,
        config,
        heuristic,
        binaries: (0..model.n_vars).filter(|&j| model.binary[j]).collect(),
        nodes: 0,
        run_nodes: 0,
        next_id: 0,
        started: Instant::now(),
        pseudo: PseudoCosts::new(model.n_vars),
        rng: seeding::rng_for(config.seed, seeding::STREAM_HEURISTIC),
    };
    let result = search.run(Vec::new(), Mode::Optimize)?;
    let root_bound = result.root.unwrap_or(T::infinity());
    let Some((mut x, mut objective)) = result.incumbent else {
        let status = if result.exhausted {
            SolveStatus::Infeasible
        } else {
            SolveStatus::BudgetExceeded
        };
        return Ok(MilpSolution {
            x: Vec::new(),
            objective: T::infinity(),
            status,
            nodes_explored: search.nodes,
            gap: if result.exhausted { T::zero() } else { T::infinity() },
            root_bound,
        });
    };
    let status = if result.exhausted {
        SolveStatus::Optimal
    } else {
        SolveStatus::BudgetExceeded
    };
    let gap = match status {
        SolveStatus::Optimal => T::zero(),
        _ => (objective - result.best_open.min(objective)).max(T::zero()),
    };
    if status == SolveStatus::Optimal && config.lexicographic_ties && !search.binaries.is_empty() {
        x = search.lexicographic(x, objective)?;
        objective = model.objective_value(&x);
    }

    // bound sandwich: root relaxation <= reported optimum
    let slack = tie_eps(objective) + config.lp_tol * T::lit(1e3);
    if root_bound > objective + slack {
        return Err(MilpError::NumericalFailure(format!(
            "root bound {root_bound} exceeds incumbent {objective}"
        )));
    }
    let rhs_scale = model
        .rows
        .iter()
        .fold(T::one(), |acc, r| acc.max(r.rhs.abs()));
    if model.max_violation(&x) > config.lp_tol * T::lit(1e3) * rhs_scale {
        return Err(MilpError::NumericalFailure("returned point violates constraints".into()));
    }
    let tol = config.integrality_tol;
    if search
        .binaries
        .iter()
        .any(|&j| x[j].min((T::one() - x[j]).abs()) > tol)
    {
        return Err(MilpError::NumericalFailure("returned point is not integral".into()));
    }
    Ok(MilpSolution {
        x,
        objective,
        status,
        nodes_explored: search.nodes,
        gap,
        root_bound,
    })
}
