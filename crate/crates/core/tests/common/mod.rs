//! Population builders shared by the integration tests.
#![allow(dead_code)]

use cbm_audit::datagen::{generate, GenConfig};
use cbm_audit::seeding;
use cbm_audit::trial::{Covariate, CovariateSchema, Subject, TrialPopulation};
use rand::Rng;

pub fn synthetic(n: usize, seed: u64) -> TrialPopulation {
    generate(&GenConfig {
        n,
        coef_seed: seed,
        noise_seed: seed + 10_000,
        ..GenConfig::default()
    })
    .unwrap()
}

/// Small population with `m` continuous covariates and heterogeneous
/// outcomes, all drawn uniformly.
pub fn continuous(n: usize, m: usize, seed: u64) -> TrialPopulation {
    let mut rng = seeding::rng(seed);
    let subjects = (0..n)
        .map(|_| {
            let x = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            Subject::new(x, rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
        })
        .collect();
    TrialPopulation::new(CovariateSchema::all_continuous(m).unwrap(), subjects).unwrap()
}

/// Population whose covariates are categorical with the given category counts.
pub fn categorical(n: usize, cats: &[usize], seed: u64) -> TrialPopulation {
    let mut rng = seeding::rng(seed);
    let schema = CovariateSchema::new(
        cats.iter()
            .enumerate()
            .map(|(j, &k)| Covariate::categorical(format!("c{j}"), k))
            .collect(),
    )
    .unwrap();
    let subjects = (0..n)
        .map(|_| {
            let x = cats.iter().map(|&k| rng.random_range(0..k) as f64).collect();
            Subject::new(x, rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
        })
        .collect();
    TrialPopulation::new(schema, subjects).unwrap()
}

/// Two-sided Kolmogorov-Smirnov statistic of two samples.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
