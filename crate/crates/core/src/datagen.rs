//! Synthetic populations with known potential outcomes: a linear
//! outcome model over standard-normal and fair-coin covariates, plus
//! planted populations where perfectly balanced assignments carry a
//! known estimation error.

use rand::Rng as _;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::trial::{Assignment, Covariate, CovariateSchema, Subject, TrialPopulation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub m_continuous: usize,
    pub m_binary: usize,
    /// Scale of the baseline coefficients.
    pub beta_scale: f64,
    /// Constant part of the treatment effect.
    pub tau0: f64,
    /// Scale of the effect-modifier coefficients; 0 gives a homogeneous effect.
    pub gamma_scale: f64,
    pub noise_sd: f64,
    /// Adds a quadratic term in the continuous covariates to the baseline.
    pub nonlinear: bool,
    /// Size of the opposite-sign pair effects in planted populations.
    pub plant_effect: f64,
    /// Seeds coefficients and covariates.
    pub coef_seed: u64,
    pub noise_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 100,
            m_continuous: 4,
            m_binary: 6,
            beta_scale: 1.0,
            tau0: 1.0,
            gamma_scale: 0.5,
            noise_sd: 1.0,
            nonlinear: false,
            plant_effect: 1.0,
            coef_seed: 0,
            noise_seed: 1,
        }
    }
}

impl GenConfig {
    pub fn m(&self) -> usize {
        self.m_continuous + self.m_binary
    }

    fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::InvalidInput("generator needs n >= 4".into()));
        }
        if self.m() == 0 {
            return Err(Error::InvalidInput("generator needs at least one covariate".into()));
        }
        for (name, v) in [
            ("noise_sd", self.noise_sd),
            ("beta_scale", self.beta_scale),
            ("gamma_scale", self.gamma_scale),
            ("plant_effect", self.plant_effect),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be finite and >= 0")));
            }
        }
        if !self.tau0.is_finite() {
            return Err(Error::InvalidInput("tau0 must be finite".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> CovariateSchema {
        let cov = (0..self.m())
            .map(|j| {
                let name = format!("x{}", j + 1);
                if j < self.m_continuous {
                    Covariate::continuous(name)
                } else {
                    Covariate::categorical(name, 2)
                }
            })
            .collect();
        CovariateSchema::new(cov).expect("generated names are unique")
    }
}

/// Outcome-model coefficients drawn from the coefficient seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Coefficients {
    pub fn draw(config: &GenConfig) -> Self {
        let mut rng = seeding::rng_for(config.coef_seed, seeding::STREAM_GENERATE);
        let mut normal = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
        let beta0 = normal(config.beta_scale);
        let beta = (0..config.m()).map(|_| normal(config.beta_scale)).collect();
        let gamma = (0..config.m()).map(|_| normal(config.gamma_scale)).collect();
        Self { beta0, beta, gamma }
    }

    pub fn effect(&self, tau0: f64, x: &[f64]) -> f64 {
        tau0 + dot(&self.gamma, x)
    }

    /// Expected treatment effect over the covariate distribution.
    pub fn expected_effect(&self, config: &GenConfig) -> f64 {
        config.tau0 + 0.5 * self.gamma[config.m_continuous..].iter().sum::<f64>()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Covariates of subject `i`; depends only on `(coef_seed, i)` so smaller
/// populations are prefixes of larger ones.
fn covariates(config: &GenConfig, i: usize) -> Vec<f64> {
    let mut rng = seeding::rng_for(seeding::derive(config.coef_seed, seeding::STREAM_GENERATE), i as u64 + 1);
    let coin = Bernoulli::new(0.5).expect("valid probability");
    (0..config.m())
        .map(|j| {
            if j < config.m_continuous {
                rng.sample::<f64, _>(StandardNormal)
            } else {
                coin.sample(&mut rng) as u8 as f64
            }
        })
        .collect()
}

fn noise(config: &GenConfig, i: usize) -> f64 {
    let mut rng = seeding::rng_for(seeding::derive(config.noise_seed, seeding::STREAM_NOISE), i as u64);
    config.noise_sd * rng.sample::<f64, _>(StandardNormal)
}

fn baseline(config: &GenConfig, coef: &Coefficients, x: &[f64]) -> f64 {
    let mut y = coef.beta0 + dot(&coef.beta, x);
    if config.nonlinear {
        y += x[..config.m_continuous].iter().map(|v| 0.5 * v * v).sum::<f64>();
    }
    y
}

pub fn generate(config: &GenConfig) -> Result<TrialPopulation> {
    config.validate()?;
    let coef = Coefficients::draw(config);
    let subjects = (0..config.n)
        .map(|i| {
            let x = covariates(config, i);
            let y0 = baseline(config, &coef, &x) + noise(config, i);
            let y1 = y0 + coef.effect(config.tau0, &x);
            Subject::new(x, y0, y1)
        })
        .collect();
    TrialPopulation::new(config.schema(), subjects)
}

/// Population of `n / 2` pairs; both members of a pair share covariates
/// and potential outcomes. Subjects `2p` and `2p + 1` form pair `p`.
pub fn generate_twins(config: &GenConfig) -> Result<TrialPopulation> {
    config.validate()?;
    if config.n % 2 != 0 {
        return Err(Error::InvalidInput("twin populations need even n".into()));
    }
    let half = GenConfig {
        n: config.n / 2,
        ..config.clone()
    };
    let coef = Coefficients::draw(&half);
    let subjects = (0..half.n)
        .flat_map(|p| {
            let x = covariates(&half, p);
            let y0 = baseline(&half, &coef, &x) + noise(&half, p);
            let y1 = y0 + coef.effect(half.tau0, &x);
            let s = Subject::new(x, y0, y1);
            [s.clone(), s]
        })
        .collect();
    TrialPopulation::new(config.schema(), subjects)
}

/// Assignment that puts exactly one member of every twin pair in each group.
pub fn split_pairs(n: usize, rng: &mut seeding::Rng) -> Assignment {
    Assignment::new((0..n / 2).flat_map(|_| {
        let first: bool = rng.random();
        [first, !first]
    }).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCase {
    pub population: TrialPopulation,
    /// A zero-imbalance assignment whose estimation error is `error_bound`.
    pub witness: Assignment,
    /// `witness`'s estimation error; every pair-splitting assignment has
    /// imbalance zero, so the admissible error range reaches at least this far
    /// on both sides.
    pub error_bound: f64,
}

impl PlantedCase {
    /// Lower bound on the worst-case deviation factor given `sigma`.
    pub fn xi_lower_bound(&self, sigma: f64) -> f64 {
        self.error_bound / sigma
    }
}

/// Pairs of covariate-identical subjects with a shared baseline and
/// opposite-sign individual effects `tau(x) +- d_p`. Splitting every
/// pair balances all covariates exactly; treating each pair's positive
/// member yields error `(2/n) sum_p d_p`.
pub fn make_adversarial_case(config: &GenConfig) -> Result<PlantedCase> {
    config.validate()?;
    if config.n % 4 != 0 {
        return Err(Error::InvalidInput("planted populations need n divisible by 4".into()));
    }
    let half = GenConfig {
        n: config.n / 2,
        ..config.clone()
    };
    let coef = Coefficients::draw(&half);
    let mut rng = seeding::rng_for(config.noise_seed, seeding::STREAM_GENERATE);
    let mut subjects = Vec::with_capacity(config.n);
    let mut witness = Vec::with_capacity(config.n);
    let mut spread = Vec::with_capacity(half.n);
    for p in 0..half.n {
        let x = covariates(&half, p);
        let y0 = baseline(&half, &coef, &x) + noise(&half, p);
        let tau = coef.effect(half.tau0, &x);
        let d = config.plant_effect * (1.0 + rng.sample::<f64, _>(StandardNormal).abs());
        let plus_first: bool = rng.random();
        spread.push(d);
        for member in [plus_first, !plus_first] {
            let effect = if member { tau + d } else { tau - d };
            subjects.push(Subject::new(x.clone(), y0, y0 + effect));
            witness.push(member);
        }
    }
    let error_bound = 2.0 / config.n as f64 * spread.iter().sum::<f64>();
    Ok(PlantedCase {
        population: TrialPopulation::new(config.schema(), subjects)?,
        witness: Assignment::new(witness),
        error_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::{ate, estimation_error};

    #[test]
    fn homogeneous_effect_without_noise() {
        let cfg = GenConfig {
            n: 30,
            noise_sd: 0.0,
            gamma_scale: 0.0,
            tau0: 2.5,
            ..GenConfig::default()
        };
        let pop = generate(&cfg).unwrap();
        assert!((ate(&pop) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn smaller_population_is_prefix() {
        let small = generate(&GenConfig { n: 10, ..GenConfig::default() }).unwrap();
        let large = generate(&GenConfig { n: 40, ..GenConfig::default() }).unwrap();
        assert_eq!(small.subjects(), &large.subjects()[..10]);
    }

    #[test]
    fn planted_witness_attains_bound() {
        let case = make_adversarial_case(&GenConfig {
            n: 8,
            ..GenConfig::default()
        })
        .unwrap();
        assert!(case.witness.is_equal_split());
        let err = estimation_error(&case.population, &case.witness).unwrap();
        assert!((err - case.error_bound).abs() < 1e-12);
        assert!(make_adversarial_case(&GenConfig { n: 10, ..GenConfig::default() }).is_err());
    }

    #[test]
    fn twins_share_everything() {
        let pop = generate_twins(&GenConfig { n: 12, ..GenConfig::default() }).unwrap();
        for p in 0..6 {
            assert_eq!(pop.subjects()[2 * p], pop.subjects()[2 * p + 1]);
        }
    }
}
