//! Trial data model: covariate schema, potential-outcome populations,
//! treatment assignments and the ATE / MATE arithmetic.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use rand::seq::index;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{binomial, ksum, sample_sd_with_se};
use crate::seeding::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Categorical { categories: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
}

impl Covariate {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Continuous,
        }
    }

    pub fn categorical(name: impl Into<String>, categories: usize) -> Self {
        Self {
            name: name.into(),
            kind: CovariateKind::Categorical { categories },
        }
    }

    pub fn categories(&self) -> Option<usize> {
        match self.kind {
            CovariateKind::Categorical { categories } => Some(categories),
            CovariateKind::Continuous => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovariateSchema {
    covariates: Vec<Covariate>,
}

impl CovariateSchema {
    pub fn new(covariates: Vec<Covariate>) -> Result<Self> {
        if covariates.is_empty() {
            return Err(Error::Schema("at least one covariate is required".into()));
        }
        let mut seen = HashSet::new();
        for c in &covariates {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate covariate name `{}`", c.name)));
            }
            if let Some(k) = c.categories() {
                if k < 2 {
                    return Err(Error::Schema(format!(
                        "categorical covariate `{}` needs at least 2 categories",
                        c.name
                    )));
                }
            }
        }
        Ok(Self { covariates })
    }

    /// `m` continuous covariates named `x1..xm`.
    pub fn all_continuous(m: usize) -> Result<Self> {
        Self::new((1..=m).map(|i| Covariate::continuous(format!("x{i}"))).collect())
    }

    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn get(&self, i: usize) -> &Covariate {
        &self.covariates[i]
    }

    pub fn all_categorical(&self) -> bool {
        self.covariates.iter().all(|c| c.categories().is_some())
    }

    pub(crate) fn replace(&mut self, i: usize, cov: Covariate) {
        self.covariates[i] = cov;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub x: Vec<f64>,
    pub y0: f64,
    pub y1: f64,
}

impl Subject {
    pub fn new(x: Vec<f64>, y0: f64, y1: f64) -> Self {
        Self { x, y0, y1 }
    }
}

/// Oracle view of a trial: every subject carries both potential outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPopulation {
    schema: CovariateSchema,
    subjects: Vec<Subject>,
}

fn check_covariates(schema: &CovariateSchema, row: usize, x: &[f64]) -> Result<()> {
    if x.len() != schema.len() {
        return Err(Error::Schema(format!(
            "subject {row} has {} covariates, schema declares {}",
            x.len(),
            schema.len()
        )));
    }
    for (j, (v, cov)) in x.iter().zip(schema.covariates()).enumerate() {
        if !v.is_finite() {
            return Err(Error::Schema(format!("subject {row}, covariate {j} is not finite")));
        }
        if let Some(k) = cov.categories() {
            if v.fract() != 0.0 || *v < 0.0 || *v >= k as f64 {
                return Err(Error::Schema(format!(
                    "subject {row}: `{}` code {v} outside 0..{k}",
                    cov.name
                )));
            }
        }
    }
    Ok(())
}

impl TrialPopulation {
    pub fn new(schema: CovariateSchema, subjects: Vec<Subject>) -> Result<Self> {
        if subjects.len() < 2 {
            return Err(Error::InvalidInput("a population needs at least 2 subjects".into()));
        }
        for (i, s) in subjects.iter().enumerate() {
            check_covariates(&schema, i, &s.x)?;
            if !s.y0.is_finite() || !s.y1.is_finite() {
                return Err(Error::InvalidInput(format!("subject {i} has a non-finite outcome")));
            }
        }
        Ok(Self { schema, subjects })
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn m(&self) -> usize {
        self.schema.len()
    }

    /// Values of covariate `j` across subjects.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.subjects.iter().map(|s| s.x[j]).collect()
    }

    pub fn y0(&self) -> impl Iterator<Item = f64> + '_ {
        self.subjects.iter().map(|s| s.y0)
    }

    pub fn y1(&self) -> impl Iterator<Item = f64> + '_ {
        self.subjects.iter().map(|s| s.y1)
    }

    /// Sub-population with the given subjects, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let subjects = idx.iter().map(|&i| self.subjects[i].clone()).collect();
        Self::new(self.schema.clone(), subjects)
    }

    /// Same subjects, new covariate values/schema.
    pub(crate) fn with_covariates(&self, schema: CovariateSchema, columns: &[Vec<f64>]) -> Result<Self> {
        let subjects = self
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| Subject::new(columns.iter().map(|c| c[i]).collect(), s.y0, s.y1))
            .collect();
        Self::new(schema, subjects)
    }

    /// Applies `f` to every potential outcome.
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> Self {
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject::new(s.x.clone(), f(s.y0), f(s.y1)))
            .collect();
        Self {
            schema: self.schema.clone(),
            subjects,
        }
    }
}

/// Binary treatment map; `true` means treatment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Assignment {
    bits: Vec<bool>,
}

/// Treatment-group size of an equal split: `floor(n / 2)`.
pub fn equal_split_treated(n: usize) -> usize {
    n / 2
}

impl Assignment {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_treated(n: usize, treated: &[usize]) -> Self {
        let mut bits = vec![false; n];
        for &i in treated {
            bits[i] = true;
        }
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn treated(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn n_treated(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn n_control(&self) -> usize {
        self.len() - self.n_treated()
    }

    pub fn is_equal_split(&self) -> bool {
        self.n_treated() == equal_split_treated(self.len())
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Signs `2a_i - 1`.
    pub fn signs(&self) -> impl Iterator<Item = f64> + '_ {
        self.bits.iter().map(|&b| if b { 1.0 } else { -1.0 })
    }

    /// Uniform draw from the equal-split assignments of `n` subjects.
    pub fn random_equal_split(n: usize, rng: &mut Rng) -> Self {
        let treated = index::sample(rng, n, equal_split_treated(n));
        Self::from_treated(n, &treated.into_vec())
    }

    /// Every equal-split assignment of `n` subjects, `C(n, floor(n/2))` in total.
    pub fn all_equal_split(n: usize) -> impl Iterator<Item = Assignment> {
        (0..n)
            .combinations(equal_split_treated(n))
            .map(move |t| Assignment::from_treated(n, &t))
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for Assignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidInput(format!("assignment character `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bits })
    }
}

impl From<Assignment> for String {
    fn from(a: Assignment) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for Assignment {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// A trial as run: one observed outcome per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedTrial {
    pub schema: CovariateSchema,
    pub covariates: Vec<Vec<f64>>,
    pub assignment: Assignment,
    pub y_obs: Vec<f64>,
}

impl ObservedTrial {
    pub fn new(
        schema: CovariateSchema,
        covariates: Vec<Vec<f64>>,
        assignment: Assignment,
        y_obs: Vec<f64>,
    ) -> Result<Self> {
        if covariates.len() != assignment.len() || y_obs.len() != assignment.len() {
            return Err(Error::InvalidInput("observed trial columns differ in length".into()));
        }
        for (i, x) in covariates.iter().enumerate() {
            check_covariates(&schema, i, x)?;
        }
        Ok(Self {
            schema,
            covariates,
            assignment,
            y_obs,
        })
    }

    pub fn len(&self) -> usize {
        self.y_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_obs.is_empty()
    }

    /// Re-attaches the hidden counterfactuals (`hidden[i]` is the outcome
    /// of the arm subject `i` did not receive).
    pub fn attach(&self, hidden: &[f64]) -> Result<TrialPopulation> {
        if hidden.len() != self.len() {
            return Err(Error::InvalidInput("hidden outcome count mismatch".into()));
        }
        let subjects = (0..self.len())
            .map(|i| {
                let (y0, y1) = if self.assignment.treated(i) {
                    (hidden[i], self.y_obs[i])
                } else {
                    (self.y_obs[i], hidden[i])
                };
                Subject::new(self.covariates[i].clone(), y0, y1)
            })
            .collect();
        TrialPopulation::new(self.schema.clone(), subjects)
    }
}

pub fn ate(pop: &TrialPopulation) -> f64 {
    ksum(pop.subjects().iter().map(|s| s.y1 - s.y0)) / pop.len() as f64
}

fn check_groups(a: &Assignment) -> Result<(usize, usize)> {
    let n1 = a.n_treated();
    let n0 = a.n_control();
    if n1 == 0 {
        return Err(Error::EmptyGroup { group: "treatment" });
    }
    if n0 == 0 {
        return Err(Error::EmptyGroup { group: "control" });
    }
    Ok((n1, n0))
}

fn check_len(pop: &TrialPopulation, a: &Assignment) -> Result<()> {
    if pop.len() != a.len() {
        return Err(Error::InvalidInput(format!(
            "assignment has {} entries for {} subjects",
            a.len(),
            pop.len()
        )));
    }
    Ok(())
}

/// Difference of group means of the observed outcomes.
pub fn mate(pop: &TrialPopulation, a: &Assignment) -> Result<f64> {
    check_len(pop, a)?;
    let (n1, n0) = check_groups(a)?;
    let s = pop.subjects();
    let treat = ksum((0..s.len()).filter(|&i| a.treated(i)).map(|i| s[i].y1));
    let ctrl = ksum((0..s.len()).filter(|&i| !a.treated(i)).map(|i| s[i].y0));
    Ok(treat / n1 as f64 - ctrl / n0 as f64)
}

/// Signed error `MATE(a) - ATE`.
pub fn estimation_error(pop: &TrialPopulation, a: &Assignment) -> Result<f64> {
    Ok(mate(pop, a)? - ate(pop))
}

pub fn observe(pop: &TrialPopulation, a: &Assignment) -> Result<ObservedTrial> {
    check_len(pop, a)?;
    let y_obs = pop
        .subjects()
        .iter()
        .zip(a.bits())
        .map(|(s, &t)| if t { s.y1 } else { s.y0 })
        .collect();
    Ok(ObservedTrial {
        schema: pop.schema().clone(),
        covariates: pop.subjects().iter().map(|s| s.x.clone()).collect(),
        assignment: a.clone(),
        y_obs,
    })
}

/// Counterfactual column dropped by [`observe`].
pub fn hidden_outcomes(pop: &TrialPopulation, a: &Assignment) -> Vec<f64> {
    pop.subjects()
        .iter()
        .zip(a.bits())
        .map(|(s, &t)| if t { s.y0 } else { s.y1 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub sigma: f64,
    pub standard_error: f64,
    pub draws: usize,
    pub seed: u64,
}

/// Monte-Carlo spread of the estimation error under uniform equal-split
/// assignment.
pub fn sigma_ate_mc(pop: &TrialPopulation, draws: usize, seed: u64) -> Result<SigmaEstimate> {
    if draws < 2 {
        return Err(Error::InvalidInput("sigma needs at least 2 draws".into()));
    }
    let errors = sample_errors(pop, draws, seed)?;
    let (sigma, standard_error) = sample_sd_with_se(&errors);
    Ok(SigmaEstimate {
        sigma,
        standard_error,
        draws,
        seed,
    })
}

/// `draws` estimation errors under uniform equal-split assignments; draw
/// `k` depends only on `(seed, k)`.
pub fn sample_errors(pop: &TrialPopulation, draws: usize, seed: u64) -> Result<Vec<f64>> {
    let n = pop.len();
    let truth = ate(pop);
    (0..draws)
        .into_par_iter()
        .map(|k| {
            let mut rng = seeding::rng_for(seeding::derive(seed, seeding::STREAM_SIGMA), k as u64);
            let a = Assignment::random_equal_split(n, &mut rng);
            Ok(mate(pop, &a)? - truth)
        })
        .collect()
}

/// Exact root-mean-square estimation error over all equal-split assignments.
pub fn sigma_ate_exact(pop: &TrialPopulation, max_assignments: f64) -> Result<f64> {
    let n = pop.len();
    let count = binomial(n, equal_split_treated(n));
    if count > max_assignments {
        return Err(Error::SizeExceeded(format!("C({n},{}) assignments", n / 2)));
    }
    let truth = ate(pop);
    let sq: Vec<f64> = Assignment::all_equal_split(n)
        .map(|a| mate(pop, &a).map(|m| (m - truth).powi(2)))
        .collect::<Result<_>>()?;
    Ok((ksum(sq.iter().copied()) / sq.len() as f64).sqrt())
}

/// Uniform random arrival order.
pub fn random_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
