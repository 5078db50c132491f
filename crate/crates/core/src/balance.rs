//! Balancing scores: standardized mean differences under the l1 / l-inf
//! norms and the category-count score behind Pocock's method, plus the
//! calibration (expected and minimum imbalance) that defines admissible
//! assignments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::milp::SolveStatus;
use crate::numeric::{binomial, ksum, mean_sd_population};
use crate::seeding;
use crate::trial::{equal_split_treated, Assignment, CovariateKind, CovariateSchema, TrialPopulation};
use crate::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BalanceKind {
    #[serde(rename = "smd-l1")]
    SmdL1,
    #[serde(rename = "smd-linf")]
    SmdLinf,
    #[serde(rename = "pocock")]
    Pocock,
}

impl BalanceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BalanceKind::SmdL1 => "smd-l1",
            BalanceKind::SmdLinf => "smd-linf",
            BalanceKind::Pocock => "pocock",
        }
    }
}

impl std::str::FromStr for BalanceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smd-l1" => Ok(BalanceKind::SmdL1),
            "smd-linf" => Ok(BalanceKind::SmdLinf),
            "pocock" => Ok(BalanceKind::Pocock),
            other => Err(Error::InvalidInput(format!("unknown balance score `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    L1,
    LInf,
}

impl Norm {
    pub fn apply(&self, v: impl IntoIterator<Item = f64>) -> f64 {
        match self {
            Norm::L1 => ksum(v.into_iter().map(f64::abs)),
            Norm::LInf => v.into_iter().fold(0.0, |acc, x| acc.max(x.abs())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSpec {
    pub kind: BalanceKind,
    /// Per-covariate weights for the Pocock score; `None` means all ones.
    pub weights: Option<Vec<f64>>,
    /// Rescale continuous covariates to unit variance before SMD.
    pub standardize: bool,
    /// Quantile bins for continuous covariates under the Pocock score.
    pub bins: usize,
}

impl BalanceSpec {
    pub fn new(kind: BalanceKind) -> Self {
        Self {
            kind,
            weights: None,
            standardize: true,
            bins: 3,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn weights_for(&self, m: usize) -> Result<Vec<f64>> {
        match &self.weights {
            None => Ok(vec![1.0; m]),
            Some(w) => {
                if w.len() != m {
                    return Err(Error::InvalidInput(format!(
                        "{} weights for {m} covariates",
                        w.len()
                    )));
                }
                if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidInput("weights must be positive".into()));
                }
                Ok(w.clone())
            }
        }
    }
}

/// Rescales every continuous covariate by its whole-cohort population
/// standard deviation. Means are not shifted.
pub fn standardize(pop: &TrialPopulation) -> Result<TrialPopulation> {
    let columns: Vec<Vec<f64>> = (0..pop.m())
        .map(|j| {
            let col = pop.column(j);
            let cov = pop.schema().get(j);
            if cov.kind != CovariateKind::Continuous {
                return Ok(col);
            }
            let (_, sd) = mean_sd_population(&col);
            if !(sd > 0.0) {
                return Err(Error::DegenerateCovariate {
                    name: cov.name.clone(),
                });
            }
            Ok(col.into_iter().map(|v| v / sd).collect())
        })
        .collect::<Result<_>>()?;
    pop.with_covariates(pop.schema().clone(), &columns)
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

/// Norm of the difference of covariate group means, on the covariates as
/// given (standardize first for the standardized score).
pub fn smd(pop: &TrialPopulation, a: &Assignment, norm: Norm) -> Result<f64> {
    check_len(pop, a)?;
    let n1 = a.n_treated();
    let n0 = a.n_control();
    if n1 == 0 {
        return Err(Error::EmptyGroup { group: "treatment" });
    }
    if n0 == 0 {
        return Err(Error::EmptyGroup { group: "control" });
    }
    let diffs = (0..pop.m()).map(|j| {
        let t = ksum(pop.subjects().iter().zip(a.bits()).filter(|(_, &b)| b).map(|(s, _)| s.x[j]));
        let c = ksum(pop.subjects().iter().zip(a.bits()).filter(|(_, &b)| !b).map(|(s, _)| s.x[j]));
        t / n1 as f64 - c / n0 as f64
    });
    Ok(norm.apply(diffs))
}

fn require_categorical(schema: &CovariateSchema) -> Result<Vec<usize>> {
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

/// Indicator matrix with one row per (covariate, category) pair and one
/// column per subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotMatrix {
    pub data: Vec<Vec<u8>>,
    /// Covariate index of each row.
    pub row_covariate: Vec<usize>,
    /// Category code of each row.
    pub row_category: Vec<usize>,
}

impl OneHotMatrix {
    pub fn rows(&self) -> usize {
        self.data.len()
    }

    pub fn cols(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    /// Weighted l1 norm of `X~ (2a - 1)`.
    pub fn weighted_l1(&self, a: &Assignment, weights: &[f64]) -> f64 {
        ksum(self.data.iter().zip(&self.row_covariate).map(|(row, &cov)| {
            let s: i64 = row
                .iter()
                .zip(a.bits())
                .map(|(&d, &t)| d as i64 * if t { 1 } else { -1 })
                .sum();
            weights[cov] * s.unsigned_abs() as f64
        }))
    }
}

pub fn one_hot(pop: &TrialPopulation) -> Result<OneHotMatrix> {
    let cats = require_categorical(pop.schema())?;
    let mut m = OneHotMatrix {
        data: Vec::new(),
        row_covariate: Vec::new(),
        row_category: Vec::new(),
    };
    for (j, &k) in cats.iter().enumerate() {
        for c in 0..k {
            m.data.push(
                pop.subjects()
                    .iter()
                    .map(|s| (s.x[j] as usize == c) as u8)
                    .collect(),
            );
            m.row_covariate.push(j);
            m.row_category.push(c);
        }
    }
    Ok(m)
}

/// Weighted sum over covariates and categories of absolute differences
/// between control and treatment category counts.
pub fn u_pocock(pop: &TrialPopulation, a: &Assignment, weights: &[f64]) -> Result<f64> {
    check_len(pop, a)?;
    let cats = require_categorical(pop.schema())?;
    if weights.len() != cats.len() {
        return Err(Error::InvalidInput("one weight per covariate required".into()));
    }
    let mut total = 0.0;
    for (j, &k) in cats.iter().enumerate() {
        let mut diff = vec![0i64; k];
        for (s, &t) in pop.subjects().iter().zip(a.bits()) {
            diff[s.x[j] as usize] += if t { 1 } else { -1 };
        }
        total += weights[j] * diff.iter().map(|d| d.unsigned_abs()).sum::<u64>() as f64;
    }
    Ok(total)
}

/// A population prepared for one balancing score: standardized for SMD,
/// discretized for the Pocock score.
#[derive(Debug, Clone)]
pub struct Scorer {
    spec: BalanceSpec,
    prepared: TrialPopulation,
    weights: Vec<f64>,
}

impl Scorer {
    pub fn new(pop: &TrialPopulation, spec: &BalanceSpec) -> Result<Self> {
        let prepared = match spec.kind {
            BalanceKind::SmdL1 | BalanceKind::SmdLinf => {
                if spec.standardize {
                    standardize(pop)?
                } else {
                    pop.clone()
                }
            }
            BalanceKind::Pocock => crate::pocock::discretize(pop, spec.bins)?,
        };
        let weights = spec.weights_for(pop.m())?;
        Ok(Self {
            spec: spec.clone(),
            prepared,
            weights,
        })
    }

    pub fn spec(&self) -> &BalanceSpec {
        &self.spec
    }

    pub fn kind(&self) -> BalanceKind {
        self.spec.kind
    }

    pub fn population(&self) -> &TrialPopulation {
        &self.prepared
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn score(&self, a: &Assignment) -> Result<f64> {
        match self.spec.kind {
            BalanceKind::SmdL1 => smd(&self.prepared, a, Norm::L1),
            BalanceKind::SmdLinf => smd(&self.prepared, a, Norm::LInf),
            BalanceKind::Pocock => u_pocock(&self.prepared, a, &self.weights),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceCalibration {
    pub kind: BalanceKind,
    pub u_bar: f64,
    pub u_min: f64,
    pub alpha_a: f64,
    pub draws: usize,
    pub seed: u64,
    /// `u_bar` comes from full enumeration rather than sampling.
    pub exhaustive: bool,
    /// `u_min` is a proven minimum (solver optimal).
    pub u_min_certified: bool,
}

impl BalanceCalibration {
    /// Lowers `u_min` to a better observed value; certification is kept
    /// only if the value did not change.
    pub fn tighten_u_min(&mut self, observed: f64) {
        if observed < self.u_min {
            self.u_min = observed;
            self.u_min_certified = false;
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub draws: usize,
    pub seed: u64,
    /// Enumerate instead of sampling when there are at most this many
    /// equal-split assignments.
    pub exhaustive_threshold: f64,
    pub alpha_a: f64,
    pub solver: SolverConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            draws: 10_000,
            seed: 0,
            exhaustive_threshold: 20_000.0,
            alpha_a: 0.02,
            solver: SolverConfig::default(),
        }
    }
}

pub fn check_alpha(alpha_a: f64) -> Result<()> {
    if !(alpha_a > 0.0 && alpha_a < 0.5) {
        return Err(Error::InvalidInput(format!("alpha_a = {alpha_a} outside (0, 0.5)")));
    }
    if alpha_a > 0.1 {
        log::warn!("alpha_a = {alpha_a} admits loosely balanced assignments");
    }
    Ok(())
}

/// Expected imbalance under uniform equal-split assignment.
pub fn expected_imbalance(scorer: &Scorer, cfg: &CalibrationConfig) -> Result<(f64, bool)> {
    let n = scorer.population().len();
    if binomial(n, equal_split_treated(n)) <= cfg.exhaustive_threshold {
        let scores: Vec<f64> = Assignment::all_equal_split(n)
            .map(|a| scorer.score(&a))
            .collect::<Result<_>>()?;
        return Ok((ksum(scores.iter().copied()) / scores.len() as f64, true));
    }
    let base = seeding::derive(cfg.seed, seeding::STREAM_CALIBRATE);
    let scores: Vec<f64> = (0..cfg.draws)
        .into_par_iter()
        .map(|k| {
            let mut rng = seeding::rng_for(base, k as u64);
            scorer.score(&Assignment::random_equal_split(n, &mut rng))
        })
        .collect::<Result<_>>()?;
    Ok((ksum(scores.iter().copied()) / scores.len() as f64, false))
}

pub fn calibrate(pop: &TrialPopulation, spec: &BalanceSpec, cfg: &CalibrationConfig) -> Result<BalanceCalibration> {
    calibrate_scorer(&Scorer::new(pop, spec)?, cfg)
}

pub fn calibrate_scorer(scorer: &Scorer, cfg: &CalibrationConfig) -> Result<BalanceCalibration> {
    if cfg.draws < 100 {
        return Err(Error::InvalidInput("calibration needs at least 100 draws".into()));
    }
    check_alpha(cfg.alpha_a)?;
    let (u_bar, exhaustive) = expected_imbalance(scorer, cfg)?;
    let (u_min, status) = crate::atastreet::min_imbalance(scorer, &cfg.solver)?;
    Ok(BalanceCalibration {
        kind: scorer.kind(),
        u_bar,
        u_min,
        alpha_a: cfg.alpha_a,
        draws: cfg.draws,
        seed: cfg.seed,
        exhaustive,
        u_min_certified: status == SolveStatus::Optimal,
    })
}

/// `(u - u_min) / u_bar < alpha_a`.
pub fn is_admissible(u_value: f64, calib: &BalanceCalibration) -> Result<bool> {
    if !(calib.u_bar > 0.0) {
        return Err(Error::DegenerateCalibration);
    }
    Ok((u_value - calib.u_min) / calib.u_bar < calib.alpha_a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::{Covariate, Subject};

    fn continuous_pop(cols: &[&[f64]]) -> TrialPopulation {
        let n = cols[0].len();
        let schema = CovariateSchema::all_continuous(cols.len()).unwrap();
        let subjects = (0..n)
            .map(|i| Subject::new(cols.iter().map(|c| c[i]).collect(), 0.0, 0.0))
            .collect();
        TrialPopulation::new(schema, subjects).unwrap()
    }

    fn binary_pop(codes: &[f64]) -> TrialPopulation {
        let schema = CovariateSchema::new(vec![Covariate::categorical("b", 2)]).unwrap();
        let subjects = codes.iter().map(|&c| Subject::new(vec![c], 0.0, 0.0)).collect();
        TrialPopulation::new(schema, subjects).unwrap()
    }

    #[test]
    fn standardize_two_value_column() {
        // population sd of [0,0,2,2] is 1, so the column is unchanged
        let pop = continuous_pop(&[&[0.0, 0.0, 2.0, 2.0]]);
        assert_eq!(standardize(&pop).unwrap().column(0), vec![0.0, 0.0, 2.0, 2.0]);
        let scaled = continuous_pop(&[&[0.0, 0.0, 4.0, 4.0]]);
        assert_eq!(standardize(&scaled).unwrap().column(0), vec![0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let pop = continuous_pop(&[&[0.3, -1.2, 2.5, 0.7, 1.1]]);
        let once = standardize(&pop).unwrap();
        let twice = standardize(&once).unwrap();
        for (a, b) in once.column(0).iter().zip(twice.column(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let pop = continuous_pop(&[&[1.0, 1.0, 1.0]]);
        match standardize(&pop) {
            Err(Error::DegenerateCovariate { name }) => assert_eq!(name, "x1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn smd_examples() {
        let pop = continuous_pop(&[&[1.0, 1.0, 0.0, 0.0]]);
        let a: Assignment = "1100".parse().unwrap();
        assert_eq!(smd(&pop, &a, Norm::L1).unwrap(), 1.0);
        // population sd of [1,1,0,0] is 0.5
        assert_eq!(smd(&standardize(&pop).unwrap(), &a, Norm::L1).unwrap(), 2.0);

        let mirrored = continuous_pop(&[&[1.0, 3.0, 1.0, 3.0], &[5.0, 2.0, 5.0, 2.0]]);
        let a: Assignment = "1100".parse().unwrap();
        assert_eq!(smd(&mirrored, &a, Norm::L1).unwrap(), 0.0);
        assert_eq!(smd(&mirrored, &a, Norm::LInf).unwrap(), 0.0);

        let gaps = continuous_pop(&[&[0.3, 0.0], &[0.4, 0.0]]);
        let a: Assignment = "10".parse().unwrap();
        assert!((smd(&gaps, &a, Norm::L1).unwrap() - 0.7).abs() < 1e-12);
        assert!((smd(&gaps, &a, Norm::LInf).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn one_hot_binary() {
        let pop = binary_pop(&[0.0, 1.0]);
        let x = one_hot(&pop).unwrap();
        assert_eq!(x.data, vec![vec![1, 0], vec![0, 1]]);
        assert!(one_hot(&continuous_pop(&[&[0.0, 1.0]])).is_err());
    }

    #[test]
    fn u_pocock_count_example() {
        // treatment {0,0,1}, control {0,1,1}
        let pop = binary_pop(&[0.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let a: Assignment = "111000".parse().unwrap();
        assert_eq!(u_pocock(&pop, &a, &[1.0]).unwrap(), 2.0);
        let same = binary_pop(&[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(u_pocock(&same, &"1100".parse().unwrap(), &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn admissibility_boundary() {
        let calib = BalanceCalibration {
            kind: BalanceKind::SmdL1,
            u_bar: 2.0,
            u_min: 0.5,
            alpha_a: 0.02,
            draws: 100,
            seed: 0,
            exhaustive: false,
            u_min_certified: true,
        };
        assert!(is_admissible(0.5, &calib).unwrap());
        assert!(!is_admissible(0.5 + 0.02 * 2.0, &calib).unwrap());
        let degenerate = BalanceCalibration { u_bar: 0.0, ..calib };
        assert!(matches!(is_admissible(0.0, &degenerate), Err(Error::DegenerateCalibration)));
    }
}
