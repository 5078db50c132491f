//! Adversarial assignment search: the Lagrangian trade-off between the
//! measured effect and a balancing score, transcribed as mixed-integer
//! programs, swept over the multiplier to trace the worst-case frontier,
//! and summarized by the worst-case deviation factor (xi) and the
//! deviation index of a deployed trial (rho).

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{calibrate_scorer, is_admissible, one_hot, BalanceCalibration, BalanceKind, BalanceSpec, CalibrationConfig, Scorer};
use crate::error::{Error, Result};
use crate::milp::{enumerate_solve, milp_solve_with, EqualSplitProgram, IncumbentHeuristic, SolveStatus};
use crate::numeric::{binomial, kmean, mean_sd_population};
use crate::seeding::{self, Rng};
use crate::trial::{ate, equal_split_treated, mate, sigma_ate_exact, sigma_ate_mc, Assignment, ObservedTrial, SigmaEstimate, TrialPopulation};
use crate::{MilpModel, MilpSolution, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Max,
    Min,
}

impl Direction {
    pub fn sign(&self) -> f64 {
        match self {
            Direction::Max => 1.0,
            Direction::Min => -1.0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Max => "max",
            Direction::Min => "min",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Direction::Max),
            "min" => Ok(Direction::Min),
            other => Err(Error::InvalidInput(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Penalty {
    L1,
    LInf,
}

/// One trade-off program over equal-split assignments:
/// minimize `-dir * lambda * sum_i a_i g_i + P(v)` where
/// `v_r = sum_i c_ri a_i - o_r` and `P` is the weighted l1 or the l-inf norm.
///
/// With `n1 = floor(N/2)` treated and `n0 = N - n1` controls,
/// `g_i = (N/2)(y1_i/n1 + y0_i/n0) / s` so that
/// `sum_i a_i g_i = (N/2)(MATE + sum_i y0_i / n0) / s`, with `s` the
/// outcome scale. For SMD, `v_j = (N/2)(mean_treat x_j - mean_ctrl x_j)`;
/// for the Pocock score `v_r` is the treated-minus-control count of a
/// one-hot row. For even `N` these reduce to `g_i = (y1_i + y0_i)/s` and
/// `v = X(2a - 1)`.
#[derive(Debug, Clone)]
pub struct AtastreetProblem {
    n: usize,
    n_treated: usize,
    lambda: f64,
    direction: Direction,
    penalty: Penalty,
    gain: Vec<f64>,
    /// Row-major `rows x n` coefficient matrix.
    coef: Vec<Vec<f64>>,
    offset: Vec<f64>,
    row_weight: Vec<f64>,
    /// `penalty = score_scale * balancing score`.
    score_scale: f64,
    outcome_scale: f64,
    kicks: usize,
    moves: usize,
}

/// Default random-kick rounds per incumbent-heuristic call.
pub const DEFAULT_KICKS: usize = 64;
/// Default annealing moves per incumbent-heuristic call.
pub const DEFAULT_MOVES: usize = 100_000;

/// Population standard deviation of `y1 + y0`, or 1 when that is zero.
pub fn outcome_scale(pop: &TrialPopulation) -> f64 {
    let sums: Vec<f64> = pop.subjects().iter().map(|s| s.y1 + s.y0).collect();
    let (_, sd) = mean_sd_population(&sums);
    if sd > 0.0 {
        sd
    } else {
        1.0
    }
}

impl AtastreetProblem {
    /// Builds the program for a prepared scorer (standardized or
    /// discretized population).
    pub fn new(scorer: &Scorer, lambda: f64, direction: Direction) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidInput(format!("lambda = {lambda} must be finite and >= 0")));
        }
        let pop = scorer.population();
        let n = pop.len();
        let n1 = equal_split_treated(n);
        let n0 = n - n1;
        if n1 == 0 {
            return Err(Error::InvalidInput("need at least 2 subjects".into()));
        }
        let half = n as f64 / 2.0;
        let outcome_scale = outcome_scale(pop);
        let gain = pop
            .subjects()
            .iter()
            .map(|s| half * (s.y1 / n1 as f64 + s.y0 / n0 as f64) / outcome_scale)
            .collect();
        let (coef, offset, row_weight, penalty, score_scale) = match scorer.kind() {
            BalanceKind::SmdL1 | BalanceKind::SmdLinf => {
                let k = half * (1.0 / n1 as f64 + 1.0 / n0 as f64);
                let mut coef = Vec::with_capacity(pop.m());
                let mut offset = Vec::with_capacity(pop.m());
                for j in 0..pop.m() {
                    let col = pop.column(j);
                    offset.push(half * col.iter().sum::<f64>() / n0 as f64);
                    coef.push(col.iter().map(|v| k * v).collect());
                }
                let penalty = if scorer.kind() == BalanceKind::SmdL1 {
                    Penalty::L1
                } else {
                    Penalty::LInf
                };
                (coef, offset, vec![1.0; pop.m()], penalty, half)
            }
            BalanceKind::Pocock => {
                let x = one_hot(pop)?;
                let weights = scorer.weights();
                let coef = x.data.iter().map(|r| r.iter().map(|&d| 2.0 * d as f64).collect()).collect();
                let offset = x.data.iter().map(|r| r.iter().map(|&d| d as f64).sum()).collect();
                let row_weight = x.row_covariate.iter().map(|&c| weights[c]).collect();
                (coef, offset, row_weight, Penalty::L1, 1.0)
            }
        };
        Ok(Self {
            n,
            n_treated: n1,
            lambda,
            direction,
            penalty,
            gain,
            coef,
            offset,
            row_weight,
            score_scale,
            outcome_scale,
            kicks: DEFAULT_KICKS,
            moves: DEFAULT_MOVES,
        })
    }

    /// Sets the random-kick rounds per heuristic call.
    pub fn with_kicks(mut self, kicks: usize) -> Self {
        self.kicks = kicks;
        self
    }

    /// Sets the annealing moves per heuristic call.
    pub fn with_moves(mut self, moves: usize) -> Self {
        self.moves = moves;
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rows(&self) -> usize {
        self.coef.len()
    }

    /// Penalty divided by this gives the balancing score.
    pub fn score_scale(&self) -> f64 {
        self.score_scale
    }

    pub fn outcome_scale(&self) -> f64 {
        self.outcome_scale
    }

    fn row_values(&self, treated: &[bool]) -> Vec<f64> {
        self.coef
            .iter()
            .zip(&self.offset)
            .map(|(row, o)| {
                row.iter()
                    .zip(treated)
                    .filter(|(_, &t)| t)
                    .map(|(c, _)| c)
                    .sum::<f64>()
                    - o
            })
            .collect()
    }

    fn penalty_of(&self, v: &[f64]) -> f64 {
        match self.penalty {
            Penalty::L1 => v.iter().zip(&self.row_weight).map(|(x, w)| w * x.abs()).sum(),
            Penalty::LInf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    fn lambda_term(&self, treated: &[bool]) -> f64 {
        let g: f64 = self.gain.iter().zip(treated).filter(|(_, &t)| t).map(|(g, _)| g).sum();
        -self.direction.sign() * self.lambda * g
    }

    /// The mixed-integer program. Variables: `a_0..a_{N-1}` (binary),
    /// then `t+_r, t-_r` per row, then `T` for the l-inf penalty.
    pub fn build(&self) -> MilpModel {
        let n = self.n;
        let k = self.rows();
        let linf = self.penalty == Penalty::LInf;
        let n_vars = n + 2 * k + linf as usize;
        let mut model = MilpModel::new(n_vars);
        for i in 0..n {
            model.set_binary(i);
            model.objective[i] = -self.direction.sign() * self.lambda * self.gain[i];
        }
        for r in 0..k {
            let (tp, tm) = (n + 2 * r, n + 2 * r + 1);
            let w = if linf { 0.0 } else { self.row_weight[r] };
            model.objective[tp] = w;
            model.objective[tm] = w;
            model.names[tp] = format!("tp{r}");
            model.names[tm] = format!("tm{r}");
            let mut row = vec![0.0; n_vars];
            row[..n].copy_from_slice(&self.coef[r]);
            row[tp] = -1.0;
            row[tm] = 1.0;
            model.add_eq(row, self.offset[r]);
        }
        let mut card = vec![0.0; n_vars];
        card[..n].iter_mut().for_each(|c| *c = 1.0);
        model.add_eq(card, self.n_treated as f64);
        if linf {
            let big_t = n + 2 * k;
            model.objective[big_t] = 1.0;
            model.names[big_t] = "T".into();
            for r in 0..k {
                let mut row = vec![0.0; n_vars];
                row[n + 2 * r] = 1.0;
                row[n + 2 * r + 1] = 1.0;
                row[big_t] = -1.0;
                model.add_le(row, 0.0);
            }
        }
        model
    }

    /// Equal-split assignment encoded in a solution vector.
    pub fn assignment_of(&self, x: &[f64]) -> Assignment {
        Assignment::new(x[..self.n].iter().map(|&v| v > 0.5).collect())
    }

    /// Objective of the program at `a`, recomputed from the raw
    /// population: `-dir * lambda * (N/2)(MATE + sum y0 / n0)/s + score_scale * U`.
    pub fn objective_from_raw(&self, pop: &TrialPopulation, score: f64, a: &Assignment) -> Result<f64> {
        let n0 = (self.n - self.n_treated) as f64;
        let half = self.n as f64 / 2.0;
        let m = mate(pop, a)?;
        let base: f64 = pop.y0().sum::<f64>() / n0;
        Ok(-self.direction.sign() * self.lambda * half * (m + base) / self.outcome_scale + self.score_scale * score)
    }

    fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.coef.iter().map(|row| row[i]).collect()).collect()
    }

    /// Iterated descent: `kicks` rounds of 2-4 random swaps followed by
    /// descent, restarting from the best assignment so far.
    fn kick_descent(&self, bits: &mut Vec<bool>, rng: &mut Rng) {
        let mut best_z = self.objective_of(bits);
        for _ in 0..self.kicks {
            let mut cand = bits.clone();
            let mut t: Vec<usize> = (0..self.n).filter(|&i| cand[i]).collect();
            let mut c: Vec<usize> = (0..self.n).filter(|&i| !cand[i]).collect();
            for _ in 0..rng.random_range(2..=4usize) {
                let a = rng.random_range(0..t.len());
                let b = rng.random_range(0..c.len());
                cand[t[a]] = false;
                cand[c[b]] = true;
                std::mem::swap(&mut t[a], &mut c[b]);
            }
            self.local_search(&mut cand);
            let z = self.objective_of(&cand);
            if z < best_z {
                best_z = z;
                *bits = cand;
            }
        }
    }

    /// Simulated annealing over 1-for-1 swaps with geometric cooling from
    /// the mean absolute move cost down by three orders of magnitude;
    /// leaves the best assignment visited in `bits`.
    fn anneal(&self, bits: &mut Vec<bool>, rng: &mut Rng) {
        if self.moves == 0 {
            return;
        }
        let k = self.rows();
        let cols = self.columns();
        let sign = -self.direction.sign() * self.lambda;
        let mut treated: Vec<usize> = (0..self.n).filter(|&i| bits[i]).collect();
        let mut control: Vec<usize> = (0..self.n).filter(|&i| !bits[i]).collect();
        let mut v = self.row_values(bits);
        let mut pen = self.penalty_of(&v);
        let mut trial = vec![0.0; k];
        let delta_of = |v: &[f64], pen: f64, i: usize, j: usize, trial: &mut [f64]| {
            for r in 0..k {
                trial[r] = v[r] - cols[i][r] + cols[j][r];
            }
            let p = self.penalty_of(trial);
            (sign * (self.gain[j] - self.gain[i]) + p - pen, p)
        };
        let probe = 64;
        let mut scale = 0.0;
        for _ in 0..probe {
            let i = treated[rng.random_range(0..treated.len())];
            let j = control[rng.random_range(0..control.len())];
            scale += delta_of(&v, pen, i, j, &mut trial).0.abs();
        }
        let mut temp = scale / probe as f64;
        if !(temp > 0.0) {
            return;
        }
        let cooling = 1e-3f64.powf(1.0 / self.moves as f64);
        let mut z = 0.0;
        let mut best_z = 0.0;
        let mut best = bits.clone();
        for _ in 0..self.moves {
            let a = rng.random_range(0..treated.len());
            let b = rng.random_range(0..control.len());
            let (i, j) = (treated[a], control[b]);
            let (delta, p) = delta_of(&v, pen, i, j, &mut trial);
            if delta <= 0.0 || rng.random::<f64>() < (-delta / temp).exp() {
                for r in 0..k {
                    v[r] = trial[r];
                }
                pen = p;
                bits[i] = false;
                bits[j] = true;
                std::mem::swap(&mut treated[a], &mut control[b]);
                z += delta;
                if z < best_z {
                    best_z = z;
                    best.copy_from_slice(bits);
                }
            }
            temp *= cooling;
        }
        *bits = best;
    }

    /// Best-improvement 1-for-1 swap descent from `bits`.
    fn local_search(&self, bits: &mut [bool]) {
        let k = self.rows();
        let cols = self.columns();
        let mut v = self.row_values(bits);
        let sign = -self.direction.sign() * self.lambda;
        let mut trial = vec![0.0; k];
        loop {
            let pen = self.penalty_of(&v);
            let mut best: Option<(usize, usize)> = None;
            let mut best_delta = -1e-12 * pen.abs().max(1.0);
            for i in (0..self.n).filter(|&i| bits[i]) {
                for j in (0..self.n).filter(|&j| !bits[j]) {
                    for r in 0..k {
                        trial[r] = v[r] - cols[i][r] + cols[j][r];
                    }
                    let delta = sign * (self.gain[j] - self.gain[i]) + self.penalty_of(&trial) - pen;
                    if delta < best_delta {
                        best_delta = delta;
                        best = Some((i, j));
                    }
                }
            }
            let Some((i, j)) = best else { break };
            bits[i] = false;
            bits[j] = true;
            for r in 0..k {
                v[r] += cols[j][r] - cols[i][r];
            }
        }
    }
}

impl EqualSplitProgram<f64> for AtastreetProblem {
    fn n_subjects(&self) -> usize {
        self.n
    }

    fn n_treated(&self) -> usize {
        self.n_treated
    }

    fn objective_of(&self, treated: &[bool]) -> f64 {
        self.lambda_term(treated) + self.penalty_of(&self.row_values(treated))
    }

    fn complete(&self, treated: &[bool]) -> Vec<f64> {
        let v = self.row_values(treated);
        let mut x: Vec<f64> = treated.iter().map(|&t| t as u8 as f64).collect();
        for &val in &v {
            x.push(val.max(0.0));
            x.push((-val).max(0.0));
        }
        if self.penalty == Penalty::LInf {
            x.push(v.iter().fold(0.0, |m, a| m.max(a.abs())));
        }
        x
    }
}

impl IncumbentHeuristic<f64> for AtastreetProblem {
    /// Rounds the relaxation to its `floor(N/2)` largest entries and runs
    /// swap descent, then improves that point two ways (iterated descent
    /// with random kicks, and annealing) and returns the best of the three.
    fn propose(&self, relaxation: &[f64], rng: &mut Rng) -> Option<Vec<f64>> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.sort_by(|&a, &b| relaxation[b].total_cmp(&relaxation[a]).then(a.cmp(&b)));
        let mut bits = vec![false; self.n];
        for &i in &idx[..self.n_treated] {
            bits[i] = true;
        }
        self.local_search(&mut bits);
        if self.n_treated == 0 || self.n_treated == self.n {
            return Some(self.complete(&bits));
        }
        let mut best_z = self.objective_of(&bits);
        let mut kicked = bits.clone();
        self.kick_descent(&mut kicked, rng);
        let mut annealed = bits.clone();
        self.anneal(&mut annealed, rng);
        self.local_search(&mut annealed);
        for cand in [kicked, annealed] {
            let z = self.objective_of(&cand);
            if z < best_z {
                best_z = z;
                bits = cand;
            }
        }
        Some(self.complete(&bits))
    }
}

/// Solves one trade-off program with the branch-and-bound solver.
pub fn solve_problem(problem: &AtastreetProblem, solver: &SolverConfig) -> Result<MilpSolution> {
    Ok(milp_solve_with(&problem.build(), solver, Some(problem))?)
}

/// Solves one trade-off program by enumerating all equal splits.
pub fn enumerate_problem(problem: &AtastreetProblem, max_n: usize) -> Result<MilpSolution> {
    Ok(enumerate_solve(problem, max_n)?)
}

pub fn build_smd_milp(pop: &TrialPopulation, lambda: f64, norm: BalanceKind, direction: Direction) -> Result<MilpModel> {
    if norm == BalanceKind::Pocock {
        return Err(Error::InvalidInput("build_smd_milp needs an SMD score".into()));
    }
    let spec = BalanceSpec {
        standardize: false,
        ..BalanceSpec::new(norm)
    };
    Ok(AtastreetProblem::new(&Scorer::new(pop, &spec)?, lambda, direction)?.build())
}

pub fn build_pocock_milp(pop: &TrialPopulation, lambda: f64, weights: &[f64], direction: Direction) -> Result<MilpModel> {
    let spec = BalanceSpec::new(BalanceKind::Pocock).with_weights(weights.to_vec());
    Ok(AtastreetProblem::new(&Scorer::new(pop, &spec)?, lambda, direction)?.build())
}

/// Minimum balancing score over equal splits (the trade-off at
/// `lambda = 0`) and the solver status behind it.
pub fn min_imbalance(scorer: &Scorer, solver: &SolverConfig) -> Result<(f64, SolveStatus)> {
    let problem = AtastreetProblem::new(scorer, 0.0, Direction::Max)?;
    let sol = solve_problem(&problem, solver)?;
    if !sol.has_solution() {
        return Err(Error::InvalidInput(format!("minimum-imbalance solve ended {}", sol.status.as_str())));
    }
    Ok((scorer.score(&problem.assignment_of(&sol.x))?, sol.status))
}

/// `{0}` plus 40 log-spaced values over `[1e-3, 1e3]`.
pub fn default_lambdas() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((0..40).map(|k| 10f64.powf(-3.0 + 6.0 * k as f64 / 39.0)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub direction: Direction,
    pub spec: BalanceSpec,
    pub solver: SolverConfig,
}

impl SweepConfig {
    pub fn new(spec: BalanceSpec, direction: Direction) -> Self {
        Self {
            lambdas: default_lambdas(),
            direction,
            spec,
            solver: SolverConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::InvalidInput("empty lambda grid".into()));
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidInput("lambdas must be finite and >= 0".into()));
        }
        if self.lambdas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("lambda grid must be strictly ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub lambda: f64,
    pub assignment: Assignment,
    pub mate_value: f64,
    pub u_value: f64,
    pub status: SolveStatus,
    /// Branch-and-bound nodes spent on this multiplier.
    pub nodes: usize,
}

/// Traces the frontier: one program per multiplier, solved in parallel.
///
/// Solves that stop on a budget are not proven optimal, so each
/// multiplier finally takes the best assignment (lexicographically
/// smallest on exact ties) among everything the sweep found. The
/// frontier is then monotone in the multiplier even when some solves
/// were cut short. Points repeating an earlier assignment are dropped.
pub fn sweep(pop: &TrialPopulation, config: &SweepConfig) -> Result<Vec<FrontierPoint>> {
    sweep_scorer(pop, &Scorer::new(pop, &config.spec)?, config)
}

/// `sweep` with a prepared scorer; `pop` supplies the outcomes for MATE.
pub fn sweep_scorer(pop: &TrialPopulation, scorer: &Scorer, config: &SweepConfig) -> Result<Vec<FrontierPoint>> {
    config.validate()?;
    let problems: Vec<AtastreetProblem> = config
        .lambdas
        .iter()
        .map(|&l| AtastreetProblem::new(scorer, l, config.direction))
        .collect::<Result<_>>()?;
    let solved: Vec<MilpSolution> = problems
        .par_iter()
        .map(|p| solve_problem(p, &config.solver))
        .collect::<Result<_>>()?;
    let mut candidates: Vec<Vec<bool>> = solved
        .iter()
        .zip(&problems)
        .filter(|(s, _)| s.has_solution())
        .map(|(s, p)| p.assignment_of(&s.x).bits().to_vec())
        .collect();
    candidates.sort();
    candidates.dedup();
    if candidates.is_empty() {
        if solved.iter().any(|s| s.status == SolveStatus::BudgetExceeded) {
            return Err(Error::BudgetExhausted);
        }
        return Err(Error::InvalidInput("no feasible assignment found on the grid".into()));
    }
    let mut points: Vec<FrontierPoint> = Vec::with_capacity(problems.len());
    for (p, s) in problems.iter().zip(&solved) {
        if s.status != SolveStatus::Optimal {
            log::warn!("lambda = {}: solve ended {} after {} nodes", p.lambda, s.status.as_str(), s.nodes_explored);
        }
        // candidates are sorted, so the first strict minimum is the
        // lexicographically smallest among exact ties
        let mut best = &candidates[0];
        let mut best_z = p.objective_of(best);
        for c in &candidates[1..] {
            let z = p.objective_of(c);
            if z < best_z {
                best = c;
                best_z = z;
            }
        }
        let assignment = Assignment::new(best.clone());
        points.push(FrontierPoint {
            lambda: p.lambda,
            mate_value: mate(pop, &assignment)?,
            u_value: scorer.score(&assignment)?,
            assignment,
            status: s.status,
            nodes: s.nodes_explored,
        });
    }
    let mut seen = std::collections::HashSet::new();
    points.retain(|pt| seen.insert(pt.assignment.clone()));
    Ok(points)
}

/// The assignment maximizing (or minimizing) MATE with no balance term:
/// the `floor(N/2)` subjects with the largest `y1/n1 + y0/n0` are treated,
/// ties to the lower index.
pub fn extreme_mate_assignment(pop: &TrialPopulation, direction: Direction) -> Assignment {
    let n = pop.len();
    let n1 = equal_split_treated(n) as f64;
    let n0 = n as f64 - n1;
    let key: Vec<f64> = pop
        .subjects()
        .iter()
        .map(|s| direction.sign() * (s.y1 / n1 + s.y0 / n0))
        .collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
    Assignment::from_treated(n, &idx[..equal_split_treated(n)])
}

/// One random equal-split assignment in (score, MATE) space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub u: f64,
    pub mate: f64,
}

/// Scores and MATEs of `draws` uniform equal-split assignments.
pub fn reference_cloud(pop: &TrialPopulation, scorer: &Scorer, draws: usize, seed: u64) -> Result<Vec<ReferencePoint>> {
    let base = seeding::derive(seed, seeding::STREAM_REFERENCE);
    (0..draws)
        .into_par_iter()
        .map(|k| {
            let mut rng = seeding::rng_for(base, k as u64);
            let a = Assignment::random_equal_split(pop.len(), &mut rng);
            Ok(ReferencePoint {
                u: scorer.score(&a)?,
                mate: mate(pop, &a)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactXi {
    /// `None` when sigma is zero.
    pub xi: Option<f64>,
    pub mate_max: f64,
    pub mate_min: f64,
    pub u_min: f64,
    pub admissible: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiReport {
    /// `None` when sigma is zero (every assignment measures the same effect).
    pub xi: Option<f64>,
    pub mate_max: f64,
    pub mate_min: f64,
    pub sigma: SigmaEstimate,
    pub alpha_a: f64,
    pub calibration: BalanceCalibration,
    pub admissible_points: usize,
    /// Full-enumeration value for small populations; differences from
    /// `xi` come from admissible assignments the sweep cannot reach.
    pub exact: Option<ExactXi>,
}

fn ratio(range: f64, sigma: f64) -> Option<f64> {
    (sigma > 0.0).then(|| range / (2.0 * sigma))
}

/// Worst-case deviation factor from both sweeps: the MATE range over
/// admissible frontier points divided by twice sigma.
pub fn xi(
    calibration: &BalanceCalibration,
    max_sweep: &[FrontierPoint],
    min_sweep: &[FrontierPoint],
    sigma: &SigmaEstimate,
) -> Result<XiReport> {
    let mut calib = *calibration;
    // a sweep may beat an uncertified minimum
    for p in max_sweep.iter().chain(min_sweep) {
        calib.tighten_u_min(p.u_value);
    }
    let mut admissible = Vec::new();
    for p in max_sweep.iter().chain(min_sweep) {
        if is_admissible(p.u_value, &calib)? {
            admissible.push(p.mate_value);
        }
    }
    if admissible.is_empty() {
        return Err(Error::NoAdmissiblePoint);
    }
    let mate_max = admissible.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mate_min = admissible.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(XiReport {
        xi: ratio(mate_max - mate_min, sigma.sigma),
        mate_max,
        mate_min,
        sigma: sigma.clone(),
        alpha_a: calib.alpha_a,
        calibration: calib,
        admissible_points: admissible.len(),
        exact: None,
    })
}

/// Enumerated worst-case deviation factor using `calibration`'s
/// expected imbalance and threshold, the exact minimum score, and `sigma`.
pub fn xi_exact(pop: &TrialPopulation, scorer: &Scorer, calibration: &BalanceCalibration, sigma: f64, max_n: usize) -> Result<ExactXi> {
    let n = pop.len();
    if n > max_n || binomial(n, equal_split_treated(n)) > crate::milp::MAX_ENUMERATED {
        return Err(Error::SizeExceeded(format!("enumerating {n} subjects")));
    }
    let scored: Vec<(f64, f64)> = Assignment::all_equal_split(n)
        .map(|a| Ok((scorer.score(&a)?, mate(pop, &a)?)))
        .collect::<Result<_>>()?;
    let u_min = scored.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let calib = BalanceCalibration { u_min, ..*calibration };
    let mut mate_max = f64::NEG_INFINITY;
    let mut mate_min = f64::INFINITY;
    let mut admissible = 0;
    for &(u, m) in &scored {
        if is_admissible(u, &calib)? {
            admissible += 1;
            mate_max = mate_max.max(m);
            mate_min = mate_min.min(m);
        }
    }
    Ok(ExactXi {
        xi: ratio(mate_max - mate_min, sigma),
        mate_max,
        mate_min,
        u_min,
        admissible,
    })
}

#[derive(Debug, Clone)]
pub struct XiConfig {
    pub spec: BalanceSpec,
    pub lambdas: Vec<f64>,
    pub solver: SolverConfig,
    pub calibration: CalibrationConfig,
    pub sigma_draws: usize,
    pub seed: u64,
    /// Also enumerate when the population has at most this many subjects.
    pub exact_max_n: usize,
}

impl XiConfig {
    pub fn new(spec: BalanceSpec) -> Self {
        Self {
            spec,
            lambdas: default_lambdas(),
            solver: SolverConfig::default(),
            calibration: CalibrationConfig::default(),
            sigma_draws: 10_000,
            seed: 0,
            exact_max_n: 14,
        }
    }
}

/// Everything behind one worst-case deviation factor.
#[derive(Debug, Clone)]
pub struct XiAudit {
    pub report: XiReport,
    pub max_sweep: Vec<FrontierPoint>,
    pub min_sweep: Vec<FrontierPoint>,
}

/// Calibrates, estimates sigma, sweeps both directions and reports xi.
pub fn audit_xi(pop: &TrialPopulation, config: &XiConfig) -> Result<XiAudit> {
    let scorer = Scorer::new(pop, &config.spec)?;
    let calib_cfg = CalibrationConfig {
        seed: config.seed,
        solver: config.solver.clone(),
        ..config.calibration.clone()
    };
    let calibration = calibrate_scorer(&scorer, &calib_cfg)?;
    let sigma = sigma_for(pop, config.sigma_draws, config.seed)?;
    let sweep_cfg = |direction| SweepConfig {
        lambdas: config.lambdas.clone(),
        direction,
        spec: config.spec.clone(),
        solver: config.solver.clone(),
    };
    let max_sweep = sweep_scorer(pop, &scorer, &sweep_cfg(Direction::Max))?;
    let min_sweep = sweep_scorer(pop, &scorer, &sweep_cfg(Direction::Min))?;
    let mut report = xi(&calibration, &max_sweep, &min_sweep, &sigma)?;
    if pop.len() <= config.exact_max_n {
        report.exact = Some(xi_exact(pop, &scorer, &calibration, sigma.sigma, config.exact_max_n)?);
    }
    Ok(XiAudit {
        report,
        max_sweep,
        min_sweep,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub size: usize,
    pub mean_xi: f64,
    pub sd_xi: f64,
    /// Replicates with a defined xi.
    pub replicates: usize,
}

/// Mean and spread of xi over random subsamples of each size. A
/// subsample keeps the population's subject order.
pub fn xi_vs_population_size(pop: &TrialPopulation, config: &XiConfig, sizes: &[usize], replicates: usize) -> Result<Vec<ScalingRow>> {
    if replicates == 0 {
        return Err(Error::InvalidInput("at least one replicate required".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size > pop.len() || size < 4 {
            return Err(Error::InvalidInput(format!("size {size} outside 4..={}", pop.len())));
        }
        let mut values = Vec::with_capacity(replicates);
        for r in 0..replicates {
            let mut rng = seeding::rng_for(seeding::derive(config.seed, seeding::STREAM_SUBSAMPLE), (size as u64) << 32 | r as u64);
            let mut idx = index::sample(&mut rng, pop.len(), size).into_vec();
            idx.sort_unstable();
            let sub = pop.select(&idx)?;
            if let Some(x) = audit_xi(&sub, config)?.report.xi {
                values.push(x);
            }
        }
        let (_, sd) = mean_sd_population(&values);
        rows.push(ScalingRow {
            size,
            mean_xi: kmean(values.iter().copied()),
            sd_xi: sd,
            replicates: values.len(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoReport {
    pub rho: f64,
    pub epsilon_hat: f64,
    pub epsilon_max: f64,
    pub u_value: f64,
    /// Direction of the estimated error, whose contour was used.
    pub direction: Direction,
    pub contour: Vec<FrontierPoint>,
    /// The trial's score fell outside the contour and was clamped.
    pub clamped: bool,
}

/// Piecewise-linear interpolation through `(u, e)` points sorted by `u`;
/// returns the value and whether `u` was clamped to an endpoint.
fn interpolate(points: &[(f64, f64)], u: f64) -> (f64, bool) {
    let first = points[0];
    let last = points[points.len() - 1];
    if u <= first.0 {
        return (first.1, u < first.0);
    }
    if u >= last.0 {
        return (last.1, u > last.0);
    }
    for w in points.windows(2) {
        let (u0, e0) = w[0];
        let (u1, e1) = w[1];
        if u >= u0 && u <= u1 {
            if u1 == u0 {
                return (e0.max(e1), false);
            }
            return (e0 + (e1 - e0) * (u - u0) / (u1 - u0), false);
        }
    }
    (last.1, false)
}

/// Deviation index of a deployed trial: reconstruct the counterfactuals,
/// sweep the reconstruction in the direction of the estimated error, and
/// compare that error with the contour of worst-case errors at the
/// trial's balancing score.
pub fn rho(observed: &ObservedTrial, imputer: &dyn crate::counterfactual::Imputer, config: &SweepConfig) -> Result<RhoReport> {
    let recon = imputer.impute(observed)?.population;
    let deployed = &observed.assignment;
    let scorer = Scorer::new(&recon, &config.spec)?;
    let truth = ate(&recon);
    let error = mate(&recon, deployed)? - truth;
    let u_value = scorer.score(deployed)?;
    let direction = if error >= 0.0 { Direction::Max } else { Direction::Min };
    let contour = sweep_scorer(&recon, &scorer, &SweepConfig { direction, ..config.clone() })?;
    let mut pts: Vec<(f64, f64)> = contour.iter().map(|p| (p.u_value, (p.mate_value - truth).abs())).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (epsilon_max, clamped) = interpolate(&pts, u_value);
    if clamped {
        log::warn!("trial score {u_value} outside the contour; clamped to its endpoint");
    }
    // errors at round-off level relative to the outcomes count as zero
    let tiny = 1e-12 * outcome_scale(&recon);
    let epsilon_hat = if error.abs() <= tiny { 0.0 } else { error.abs() };
    if !(epsilon_max > tiny) {
        if epsilon_hat == 0.0 {
            return Ok(RhoReport {
                rho: 0.0,
                epsilon_hat,
                epsilon_max,
                u_value,
                direction,
                contour,
                clamped,
            });
        }
        return Err(Error::InvalidInput("worst-case contour is zero at the trial's score".into()));
    }
    Ok(RhoReport {
        rho: epsilon_hat / epsilon_max,
        epsilon_hat,
        epsilon_max,
        u_value,
        direction,
        contour,
        clamped,
    })
}

/// Exact sigma when enumeration is cheap, otherwise Monte Carlo.
pub fn sigma_for(pop: &TrialPopulation, draws: usize, seed: u64) -> Result<SigmaEstimate> {
    match sigma_ate_exact(pop, 1e4) {
        Ok(sigma) => Ok(SigmaEstimate {
            sigma,
            standard_error: 0.0,
            draws: binomial(pop.len(), equal_split_treated(pop.len())) as usize,
            seed,
        }),
        Err(Error::SizeExceeded(_)) => sigma_ate_mc(pop, draws, seed),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::{CovariateSchema, Subject};

    fn small_pop() -> TrialPopulation {
        let schema = CovariateSchema::all_continuous(2).unwrap();
        let rows = [
            ([0.1, 1.0], 1.0, 2.0),
            ([0.9, -0.3], 0.5, 0.7),
            ([-1.2, 0.4], 2.0, 1.0),
            ([0.3, 0.3], -1.0, 0.5),
            ([1.5, -1.1], 0.0, 3.0),
            ([-0.4, 0.8], 1.5, 1.4),
        ];
        let subjects = rows.iter().map(|(x, y0, y1)| Subject::new(x.to_vec(), *y0, *y1)).collect();
        TrialPopulation::new(schema, subjects).unwrap()
    }

    #[test]
    fn model_dimensions() {
        let pop = small_pop();
        let l1 = build_smd_milp(&pop, 1.0, BalanceKind::SmdL1, Direction::Max).unwrap();
        assert_eq!((l1.n_vars, l1.n_binary(), l1.n_eq(), l1.n_le()), (6 + 4, 6, 3, 0));
        let linf = build_smd_milp(&pop, 1.0, BalanceKind::SmdLinf, Direction::Max).unwrap();
        assert_eq!((linf.n_vars, linf.n_eq(), linf.n_le()), (6 + 5, 3, 2));
    }

    #[test]
    fn even_n_matches_textbook_form() {
        let pop = small_pop();
        let p = AtastreetProblem::new(&Scorer::new(&pop, &BalanceSpec { standardize: false, ..BalanceSpec::new(BalanceKind::SmdL1) }).unwrap(), 1.0, Direction::Max).unwrap();
        let s = p.outcome_scale();
        for (g, subj) in p.gain.iter().zip(pop.subjects()) {
            assert!((g * s - (subj.y1 + subj.y0)).abs() < 1e-12);
        }
        let a: Assignment = "101010".parse().unwrap();
        let v = p.row_values(a.bits());
        for (j, vj) in v.iter().enumerate() {
            let direct: f64 = pop.subjects().iter().zip(a.signs()).map(|(s, sg)| sg * s.x[j]).sum();
            assert!((vj - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn solver_matches_enumeration_and_raw_objective() {
        let pop = small_pop();
        for kind in [BalanceKind::SmdL1, BalanceKind::SmdLinf] {
            let scorer = Scorer::new(&pop, &BalanceSpec::new(kind)).unwrap();
            for lambda in [0.0, 0.1, 1.0, 10.0] {
                for dir in [Direction::Max, Direction::Min] {
                    let p = AtastreetProblem::new(&scorer, lambda, dir).unwrap();
                    let bb = solve_problem(&p, &SolverConfig::default()).unwrap();
                    let en = enumerate_problem(&p, 20).unwrap();
                    assert!((bb.objective - en.objective).abs() < 1e-9, "{kind:?} {lambda} {dir:?}");
                    assert_eq!(p.assignment_of(&bb.x), p.assignment_of(&en.x));
                    let a = p.assignment_of(&bb.x);
                    let raw = p.objective_from_raw(&pop, scorer.score(&a).unwrap(), &a).unwrap();
                    assert!((raw - bb.objective).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn large_lambda_reaches_closed_form() {
        let pop = small_pop();
        let cfg = SweepConfig {
            lambdas: vec![0.0, 1.0, 1e6],
            ..SweepConfig::new(BalanceSpec::new(BalanceKind::SmdL1), Direction::Max)
        };
        let points = sweep(&pop, &cfg).unwrap();
        assert_eq!(points.last().unwrap().assignment, extreme_mate_assignment(&pop, Direction::Max));
    }

    #[test]
    fn interpolation() {
        let pts = [(0.0, 1.0), (1.0, 3.0), (2.0, 3.0)];
        assert_eq!(interpolate(&pts, 0.5), (2.0, false));
        assert_eq!(interpolate(&pts, 1.0), (3.0, false));
        assert_eq!(interpolate(&pts, 3.0), (3.0, true));
        assert_eq!(interpolate(&pts, -1.0), (1.0, true));
    }
}
