//! Pocock's sequential minimization: discretization, the per-arrival
//! imbalance `G`, the biased-coin run, a search for arrival orders that
//! reproduce a given assignment, and Monte-Carlo expected-imbalance
//! trajectories.

use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ksum, sample_sd_with_se};
use crate::seeding::{self, Rng};
use crate::trial::{equal_split_treated, Assignment, Covariate, CovariateKind, CovariateSchema, TrialPopulation};

/// Replaces continuous covariates by equal-frequency bin codes.
pub fn discretize(pop: &TrialPopulation, bins: usize) -> Result<TrialPopulation> {
    if bins < 2 {
        return Err(Error::InvalidInput("discretization needs at least 2 bins".into()));
    }
    let n = pop.len();
    let mut schema = pop.schema().clone();
    let mut columns = Vec::with_capacity(pop.m());
    for j in 0..pop.m() {
        let col = pop.column(j);
        let cov = pop.schema().get(j);
        if cov.kind != CovariateKind::Continuous {
            columns.push(col);
            continue;
        }
        let mut sorted: Vec<usize> = (0..n).collect();
        sorted.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        let mut distinct = col.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let b = if distinct.len() < bins {
            log::warn!(
                "`{}` has {} distinct values; using that many bins instead of {bins}",
                cov.name,
                distinct.len()
            );
            distinct.len().max(1)
        } else {
            bins
        };
        // Tied values share the bin of their first rank.
        let mut codes = vec![0usize; n];
        let mut first_rank = 0;
        for (rank, &i) in sorted.iter().enumerate() {
            if rank > 0 && col[i] != col[sorted[rank - 1]] {
                first_rank = rank;
            }
            codes[i] = first_rank * b / n;
        }
        // Renumber so the used codes are contiguous.
        let mut used: Vec<usize> = codes.clone();
        used.sort_unstable();
        used.dedup();
        let remap: HashMap<usize, usize> = used.iter().enumerate().map(|(k, &c)| (c, k)).collect();
        let categories = used.len().max(2);
        schema.replace(j, Covariate::categorical(cov.name.clone(), categories));
        columns.push(codes.iter().map(|c| remap[c] as f64).collect());
    }
    pop.with_covariates(schema, &columns)
}

fn category_counts(schema: &CovariateSchema) -> Result<Vec<usize>> {
    schema
        .covariates()
        .iter()
        .map(|c| {
            c.categories().ok_or_else(|| Error::ContinuousCovariate {
                name: c.name.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PocockConfig {
    /// Probability of following the smaller-`G` group.
    pub p0: f64,
    /// Per-covariate weights; `None` means all ones.
    pub weights: Option<Vec<f64>>,
    pub warmup: usize,
    pub seed: u64,
    /// Force the final arrivals into the deficient group so the run ends
    /// with an equal split.
    pub equal_split: bool,
}

impl Default for PocockConfig {
    fn default() -> Self {
        Self {
            p0: 1.0,
            weights: None,
            warmup: 2,
            seed: 0,
            equal_split: false,
        }
    }
}

impl PocockConfig {
    fn validate(&self, m: usize) -> Result<Vec<f64>> {
        if !(0.5..=1.0).contains(&self.p0) {
            return Err(Error::InvalidInput(format!("p0 = {} outside [0.5, 1]", self.p0)));
        }
        match &self.weights {
            None => Ok(vec![1.0; m]),
            Some(w) if w.len() != m => Err(Error::InvalidInput(format!(
                "{} weights for {m} covariates",
                w.len()
            ))),
            Some(w) if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) => {
                Err(Error::InvalidInput("weights must be positive".into()))
            }
            Some(w) => Ok(w.clone()),
        }
    }
}

/// A permutation of subject indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ArrivalOrder(Vec<usize>);

impl ArrivalOrder {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidInput("arrival order is not a permutation".into()));
            }
        }
        Ok(Self(order))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn random(n: usize, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self(order)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<usize>> for ArrivalOrder {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ArrivalOrder> for Vec<usize> {
    fn from(o: ArrivalOrder) -> Self {
        o.0
    }
}

/// Category counts per group plus the partial assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqState {
    /// `diff[j][c]` = treated minus control subjects in category `c` of covariate `j`.
    diff: Vec<Vec<i64>>,
    treat: Vec<Vec<u32>>,
    ctrl: Vec<Vec<u32>>,
    assigned: Vec<Option<bool>>,
}

impl SeqState {
    /// Empty state for a categorical population.
    pub fn new(pop: &TrialPopulation) -> Result<Self> {
        let cats = category_counts(pop.schema())?;
        Ok(Self {
            diff: cats.iter().map(|&k| vec![0; k]).collect(),
            treat: cats.iter().map(|&k| vec![0; k]).collect(),
            ctrl: cats.iter().map(|&k| vec![0; k]).collect(),
            assigned: vec![None; pop.len()],
        })
    }

    pub fn assigned(&self) -> &[Option<bool>] {
        &self.assigned
    }

    pub fn n_assigned(&self) -> usize {
        self.assigned.iter().filter(|a| a.is_some()).count()
    }

    pub fn n_treated(&self) -> usize {
        self.assigned.iter().filter(|a| **a == Some(true)).count()
    }

    pub fn n_control(&self) -> usize {
        self.assigned.iter().filter(|a| **a == Some(false)).count()
    }

    pub fn treated_count(&self, covariate: usize, category: usize) -> u32 {
        self.treat[covariate][category]
    }

    pub fn control_count(&self, covariate: usize, category: usize) -> u32 {
        self.ctrl[covariate][category]
    }

    pub fn assign(&mut self, pop: &TrialPopulation, subject: usize, treated: bool) {
        assert!(self.assigned[subject].is_none(), "subject {subject} already assigned");
        self.assigned[subject] = Some(treated);
        for (j, &v) in pop.subjects()[subject].x.iter().enumerate() {
            let c = v as usize;
            if treated {
                self.treat[j][c] += 1;
                self.diff[j][c] += 1;
            } else {
                self.ctrl[j][c] += 1;
                self.diff[j][c] -= 1;
            }
        }
    }

    /// Weighted count-difference score of the current partial assignment.
    pub fn u_pocock(&self, weights: &[f64]) -> f64 {
        ksum(
            self.diff
                .iter()
                .zip(weights)
                .map(|(d, w)| w * d.iter().map(|v| v.unsigned_abs()).sum::<u64>() as f64),
        )
    }

    /// The assignment so far, if every subject is placed.
    pub fn to_assignment(&self) -> Option<Assignment> {
        self.assigned
            .iter()
            .copied()
            .collect::<Option<Vec<bool>>>()
            .map(Assignment::new)
    }
}

/// `G` after hypothetically placing `subject` in `treated`'s group:
/// weighted absolute count gaps over the subject's own categories.
pub fn pocock_g(state: &SeqState, pop: &TrialPopulation, subject: usize, treated: bool, weights: &[f64]) -> f64 {
    let step = if treated { 1 } else { -1 };
    ksum(
        pop.subjects()[subject]
            .x
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(j, (&v, w))| w * (state.diff[j][v as usize] + step).unsigned_abs() as f64),
    )
}

/// The Pocock decision given the step's uniform draw `u`: ties go to
/// treatment when `u < 0.5`; otherwise the smaller-`G` group is taken
/// when `u < p0`.
fn decide(state: &SeqState, pop: &TrialPopulation, subject: usize, p0: f64, weights: &[f64], u: f64) -> bool {
    let g_treat = pocock_g(state, pop, subject, true, weights);
    let g_ctrl = pocock_g(state, pop, subject, false, weights);
    if g_treat == g_ctrl {
        return u < 0.5;
    }
    let prefer_treat = g_treat < g_ctrl;
    if u < p0 {
        prefer_treat
    } else {
        !prefer_treat
    }
}

/// Places `subject` by the biased coin and returns the chosen group.
pub fn pocock_assign(
    state: &mut SeqState,
    pop: &TrialPopulation,
    subject: usize,
    config: &PocockConfig,
    rng: &mut Rng,
) -> Result<bool> {
    let weights = config.validate(pop.m())?;
    let treated = decide(state, pop, subject, config.p0, &weights, rng.random::<f64>());
    state.assign(pop, subject, treated);
    Ok(treated)
}

/// Uniform draw used at arrival `step` of a run with `seed`.
fn step_draw(seed: u64, step: usize) -> f64 {
    seeding::rng_for(seeding::derive(seed, seeding::STREAM_POCOCK), step as u64).random::<f64>()
}

/// Group forced on the arrival at `step` so the run can still end in an
/// equal split, if any.
fn forced_group(state: &SeqState, n: usize, step: usize) -> Option<bool> {
    let remaining = n - step;
    let need_treat = equal_split_treated(n).saturating_sub(state.n_treated());
    let need_ctrl = (n - equal_split_treated(n)).saturating_sub(state.n_control());
    if need_treat == 0 {
        Some(false)
    } else if need_ctrl == 0 || need_treat >= remaining {
        Some(true)
    } else if need_ctrl >= remaining {
        Some(false)
    } else {
        None
    }
}

/// Group the arrival at `step` receives in a run, before the state is
/// updated. `forced` reports whether the equal-split rule decided it.
fn run_decision(
    state: &SeqState,
    pop: &TrialPopulation,
    subject: usize,
    step: usize,
    config: &PocockConfig,
    weights: &[f64],
) -> (bool, bool) {
    let n = pop.len();
    let warmup = config.warmup.min(n);
    let start_treat = step_draw(config.seed, 0) < 0.5;
    if step < warmup {
        return (start_treat == (step % 2 == 0), false);
    }
    if config.equal_split {
        if let Some(g) = forced_group(state, n, step) {
            let free = decide(state, pop, subject, config.p0, weights, step_draw(config.seed, step));
            return (g, g != free);
        }
    }
    (decide(state, pop, subject, config.p0, weights, step_draw(config.seed, step)), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PocockRun {
    pub assignment: Assignment,
    /// Arrivals whose group was overridden by the equal-split rule.
    pub forced: usize,
}

/// Runs the sequential method along `order`. The first `warmup`
/// arrivals alternate between groups from a random start.
pub fn pocock_run(pop: &TrialPopulation, order: &ArrivalOrder, config: &PocockConfig) -> Result<PocockRun> {
    let weights = config.validate(pop.m())?;
    if order.len() != pop.len() {
        return Err(Error::InvalidInput("arrival order length differs from population".into()));
    }
    let mut state = SeqState::new(pop)?;
    let mut forced = 0;
    for (step, &i) in order.as_slice().iter().enumerate() {
        let (g, was_forced) = run_decision(&state, pop, i, step, config, &weights);
        forced += was_forced as usize;
        state.assign(pop, i, g);
    }
    Ok(PocockRun {
        assignment: state.to_assignment().expect("every subject arrives once"),
        forced,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityResult {
    pub target_hash: String,
    pub order: ArrivalOrder,
    pub p0: f64,
    pub seed: u64,
    pub expansions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    Found(FeasibilityResult),
    /// Budget ran out; this does not prove that no order exists.
    NotFound { expansions: usize },
}

struct FeasibilitySearch<'a> {
    pop: &'a TrialPopulation,
    target: &'a Assignment,
    config: &'a PocockConfig,
    weights: Vec<f64>,
    /// Subjects grouped by (covariate profile, target group); members of
    /// one class are interchangeable.
    classes: Vec<Vec<usize>>,
    budget: usize,
    expansions: usize,
    failed: HashSet<Vec<u16>>,
    rng: Rng,
}

impl FeasibilitySearch<'_> {
    fn dfs(&mut self, state: &mut SeqState, taken: &mut Vec<u16>, order: &mut Vec<usize>) -> Option<bool> {
        let step = order.len();
        if step == self.pop.len() {
            return Some(true);
        }
        if self.failed.contains(taken) {
            return Some(false);
        }
        let mut candidates: Vec<usize> = (0..self.classes.len())
            .filter(|&c| {
                let members = &self.classes[c];
                let Some(&i) = members.get(taken[c] as usize) else {
                    return false;
                };
                let (g, _) = run_decision(state, self.pop, i, step, self.config, &self.weights);
                g == self.target.treated(i)
            })
            .collect();
        candidates.shuffle(&mut self.rng);
        for c in candidates {
            self.expansions += 1;
            if self.expansions > self.budget {
                return None;
            }
            let i = self.classes[c][taken[c] as usize];
            let mut next = state.clone();
            next.assign(self.pop, i, self.target.treated(i));
            taken[c] += 1;
            order.push(i);
            match self.dfs(&mut next, taken, order) {
                Some(true) => return Some(true),
                None => return None,
                Some(false) => {}
            }
            order.pop();
            taken[c] -= 1;
        }
        self.failed.insert(taken.clone());
        Some(false)
    }
}

/// Searches for an arrival order under which the sequential run
/// (normally with `p0 = 1`) reproduces `target`, expanding at most
/// `budget` search nodes.
pub fn feasibility_search(
    pop: &TrialPopulation,
    target: &Assignment,
    config: &PocockConfig,
    budget: usize,
    seed: u64,
) -> Result<Feasibility> {
    let weights = config.validate(pop.m())?;
    if target.len() != pop.len() {
        return Err(Error::InvalidInput("target length differs from population".into()));
    }
    if !target.is_equal_split() {
        return Err(Error::InvalidInput("target is not an equal split".into()));
    }
    if config.p0 < 1.0 {
        log::warn!("feasibility search with p0 = {} replays only one coin sequence", config.p0);
    }
    SeqState::new(pop)?;
    let mut class_of: HashMap<(Vec<u64>, bool), usize> = HashMap::new();
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for (i, s) in pop.subjects().iter().enumerate() {
        let key = (s.x.iter().map(|v| v.to_bits()).collect(), target.treated(i));
        let c = *class_of.entry(key).or_insert_with(|| {
            classes.push(Vec::new());
            classes.len() - 1
        });
        classes[c].push(i);
    }
    let mut search = FeasibilitySearch {
        pop,
        target,
        config,
        weights,
        budget,
        expansions: 0,
        failed: HashSet::new(),
        rng: seeding::rng_for(seed, seeding::STREAM_SEARCH),
        classes,
    };
    let mut taken = vec![0u16; search.classes.len()];
    let mut order = Vec::with_capacity(pop.len());
    let mut state = SeqState::new(pop)?;
    let found = search.dfs(&mut state, &mut taken, &mut order);
    let expansions = search.expansions.min(budget);
    if found != Some(true) {
        return Ok(Feasibility::NotFound { expansions });
    }
    let order = ArrivalOrder::new(order)?;
    debug_assert_eq!(&pocock_run(pop, &order, config)?.assignment, target);
    Ok(Feasibility::Found(FeasibilityResult {
        target_hash: crate::io::sha256_hex(target.to_string().as_bytes()),
        order,
        p0: config.p0,
        seed: config.seed,
        expansions,
    }))
}

/// Mean final score (and its standard error) when the unassigned
/// subjects of `state` are completed by a uniformly random assignment
/// that reaches an equal split where the partial state allows it.
pub fn expected_final_u_mc(
    pop: &TrialPopulation,
    state: &SeqState,
    weights: &[f64],
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if draws < 1 {
        return Err(Error::InvalidInput("at least one draw required".into()));
    }
    let remaining: Vec<usize> = (0..pop.len()).filter(|&i| state.assigned[i].is_none()).collect();
    if remaining.is_empty() {
        return Ok((state.u_pocock(weights), 0.0));
    }
    let need = equal_split_treated(pop.len())
        .saturating_sub(state.n_treated())
        .min(remaining.len());
    let base = seeding::derive(seed, seeding::STREAM_COMPLETE);
    let finals: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|k| {
            let mut rng = seeding::rng_for(base, k as u64);
            let picked = index::sample(&mut rng, remaining.len(), need);
            let mut treat = vec![false; remaining.len()];
            for p in picked {
                treat[p] = true;
            }
            let mut s = state.clone();
            for (&i, &t) in remaining.iter().zip(&treat) {
                s.assign(pop, i, t);
            }
            s.u_pocock(weights)
        })
        .collect();
    let mean = ksum(finals.iter().copied()) / draws as f64;
    let se = if draws > 1 {
        sample_sd_with_se(&finals).0 / (draws as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub expected_u: f64,
    pub draws: usize,
}

/// Expected final score after each prefix of `order` is placed as in
/// `assignment`; step 0 is the empty state.
pub fn trajectory(
    pop: &TrialPopulation,
    order: &ArrivalOrder,
    assignment: &Assignment,
    weights: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<TrajectoryPoint>> {
    if order.len() != pop.len() || assignment.len() != pop.len() {
        return Err(Error::InvalidInput("order/assignment length differs from population".into()));
    }
    let mut state = SeqState::new(pop)?;
    let mut points = Vec::with_capacity(pop.len() + 1);
    for step in 0..=pop.len() {
        let (expected_u, _) = expected_final_u_mc(pop, &state, weights, draws, seeding::derive(seed, step as u64))?;
        points.push(TrajectoryPoint {
            step,
            expected_u,
            draws,
        });
        if let Some(&i) = order.as_slice().get(step) {
            state.assign(pop, i, assignment.treated(i));
        }
    }
    Ok(points)
}
