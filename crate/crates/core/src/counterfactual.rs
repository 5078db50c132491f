//! Filling in unobserved potential outcomes, and the adversarial attack
//! that sweeps the reconstructed trial.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atastreet::{sweep_scorer, Direction, SweepConfig};
use crate::balance::{calibrate_scorer, is_admissible, BalanceCalibration, CalibrationConfig, Scorer};
use crate::error::{Error, Result};
use crate::numeric::mean_sd_population;
use crate::trial::{mate, Assignment, CovariateKind, ObservedTrial, TrialPopulation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ImputerSpec {
    /// Mean outcome of the `k` nearest opposite-arm subjects in
    /// standardized covariate space.
    Knn { k: usize },
    /// One ridge regression per arm (intercept unpenalized).
    Linear { ridge_penalty: f64 },
}

impl ImputerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ImputerSpec::Knn { k } if k == 0 => Err(Error::InvalidInput("k must be >= 1".into())),
            ImputerSpec::Linear { ridge_penalty } if !(ridge_penalty >= 0.0) || !ridge_penalty.is_finite() => {
                Err(Error::InvalidInput("ridge penalty must be finite and >= 0".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Observed,
    Imputed,
}

/// An observed trial with its counterfactual cells filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedTrial {
    pub population: TrialPopulation,
    /// Provenance of `(y0, y1)` per subject.
    pub provenance: Vec<(Provenance, Provenance)>,
}

impl ReconstructedTrial {
    fn from_hidden(observed: &ObservedTrial, hidden: &[f64]) -> Result<Self> {
        let population = observed.attach(hidden)?;
        let provenance = observed
            .assignment
            .bits()
            .iter()
            .map(|&t| {
                if t {
                    (Provenance::Imputed, Provenance::Observed)
                } else {
                    (Provenance::Observed, Provenance::Imputed)
                }
            })
            .collect();
        Ok(Self { population, provenance })
    }
}

/// Fits on the observed rows and predicts every missing potential outcome.
pub trait Imputer: Sync {
    fn impute(&self, observed: &ObservedTrial) -> Result<ReconstructedTrial>;
}

fn check_groups(observed: &ObservedTrial) -> Result<()> {
    if observed.assignment.n_treated() == 0 {
        return Err(Error::EmptyGroup { group: "treatment" });
    }
    if observed.assignment.n_control() == 0 {
        return Err(Error::EmptyGroup { group: "control" });
    }
    Ok(())
}

impl Imputer for ImputerSpec {
    fn impute(&self, observed: &ObservedTrial) -> Result<ReconstructedTrial> {
        self.validate()?;
        check_groups(observed)?;
        let hidden = match *self {
            ImputerSpec::Knn { k } => knn(observed, k),
            ImputerSpec::Linear { ridge_penalty } => linear(observed, ridge_penalty)?,
        };
        ReconstructedTrial::from_hidden(observed, &hidden)
    }
}

/// Returns the true counterfactuals: the perfect estimator.
#[derive(Debug, Clone)]
pub struct GroundTruth(pub TrialPopulation);

impl Imputer for GroundTruth {
    fn impute(&self, observed: &ObservedTrial) -> Result<ReconstructedTrial> {
        if self.0.len() != observed.len() {
            return Err(Error::InvalidInput("ground truth has a different population size".into()));
        }
        let hidden = crate::trial::hidden_outcomes(&self.0, &observed.assignment);
        ReconstructedTrial::from_hidden(observed, &hidden)
    }
}

fn knn(observed: &ObservedTrial, k: usize) -> Vec<f64> {
    let n = observed.len();
    let m = observed.schema.len();
    let scale: Vec<f64> = (0..m)
        .map(|j| {
            let col: Vec<f64> = observed.covariates.iter().map(|x| x[j]).collect();
            let (_, sd) = mean_sd_population(&col);
            if sd > 0.0 {
                1.0 / sd
            } else {
                0.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = observed
        .covariates
        .iter()
        .map(|x| x.iter().zip(&scale).map(|(v, s)| v * s).collect())
        .collect();
    let a = &observed.assignment;
    let opposite_size = |t: bool| if t { a.n_control() } else { a.n_treated() };
    for t in [true, false] {
        if k > opposite_size(t) {
            log::warn!("k = {k} exceeds an arm of {} subjects; clamped", opposite_size(t));
        }
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut near: Vec<(f64, usize)> = (0..n)
                .filter(|&j| a.treated(j) != a.treated(i))
                .map(|j| (z[i].iter().zip(&z[j]).map(|(p, q)| (p - q).powi(2)).sum::<f64>(), j))
                .collect();
            near.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let take = k.min(near.len());
            near[..take].iter().map(|&(_, j)| observed.y_obs[j]).sum::<f64>() / take as f64
        })
        .collect()
}

/// Intercept, continuous values, and indicators for categories `1..k`.
fn features(observed: &ObservedTrial, x: &[f64]) -> Vec<f64> {
    let mut f = vec![1.0];
    for (v, cov) in x.iter().zip(observed.schema.covariates()) {
        match cov.kind {
            CovariateKind::Continuous => f.push(*v),
            CovariateKind::Categorical { categories } => {
                f.extend((1..categories).map(|c| (*v as usize == c) as u8 as f64));
            }
        }
    }
    f
}

fn linear(observed: &ObservedTrial, penalty: f64) -> Result<Vec<f64>> {
    let a = &observed.assignment;
    let feats: Vec<Vec<f64>> = observed.covariates.iter().map(|x| features(observed, x)).collect();
    let p = feats[0].len();
    let fit = |arm: bool| -> Result<DVector<f64>> {
        let rows: Vec<usize> = (0..observed.len()).filter(|&i| a.treated(i) == arm).collect();
        let x = DMatrix::from_fn(rows.len(), p, |r, c| feats[rows[r]][c]);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| observed.y_obs[i]));
        let mut gram = x.transpose() * &x;
        for d in 1..p {
            gram[(d, d)] += penalty;
        }
        let rhs = x.transpose() * y;
        let arm_name = if arm { "treatment" } else { "control" };
        let beta = gram
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| gram.lu().solve(&rhs))
            .ok_or_else(|| Error::InvalidInput(format!("{arm_name} design is rank deficient; raise the ridge penalty")))?;
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidInput(format!("{arm_name} regression is numerically singular")));
        }
        Ok(beta)
    };
    let beta_treat = fit(true)?;
    let beta_ctrl = fit(false)?;
    Ok(feats
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let beta = if a.treated(i) { &beta_ctrl } else { &beta_treat };
            f.iter().zip(beta.iter()).map(|(x, b)| x * b).sum()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub assignment: Assignment,
    pub direction: Direction,
    /// MATE of the attack assignment on the reconstruction.
    pub recon_mate: f64,
    /// Estimation error on the reconstruction.
    pub recon_error: f64,
    pub u_value: f64,
    pub admissible: bool,
    pub calibration: BalanceCalibration,
    pub admissible_points: usize,
}

/// Impute, calibrate and sweep the reconstruction, and return the most
/// extreme admissible frontier assignment in `sweep.direction`.
pub fn attack(
    observed: &ObservedTrial,
    imputer: &dyn Imputer,
    sweep: &SweepConfig,
    calibration: &CalibrationConfig,
) -> Result<AttackResult> {
    let recon = imputer.impute(observed)?.population;
    let scorer = Scorer::new(&recon, &sweep.spec)?;
    let mut calib = calibrate_scorer(&scorer, calibration)?;
    let frontier = sweep_scorer(&recon, &scorer, sweep)?;
    for p in &frontier {
        calib.tighten_u_min(p.u_value);
    }
    let mut best: Option<&crate::atastreet::FrontierPoint> = None;
    let mut count = 0;
    let sign = sweep.direction.sign();
    for p in &frontier {
        if is_admissible(p.u_value, &calib)? {
            count += 1;
            if best.is_none_or(|b| sign * p.mate_value > sign * b.mate_value) {
                best = Some(p);
            }
        }
    }
    let best = best.ok_or(Error::NoAdmissiblePoint)?;
    let truth = crate::trial::ate(&recon);
    Ok(AttackResult {
        assignment: best.assignment.clone(),
        direction: sweep.direction,
        recon_mate: mate(&recon, &best.assignment)?,
        recon_error: best.mate_value - truth,
        u_value: best.u_value,
        admissible: true,
        calibration: calib,
        admissible_points: count,
    })
}
