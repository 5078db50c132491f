mod common;

use cbm_audit::atastreet::min_imbalance;
use cbm_audit::balance::{
    calibrate_scorer, expected_imbalance, is_admissible, one_hot, smd, u_pocock, BalanceKind, BalanceSpec,
    CalibrationConfig, Norm, Scorer,
};
use cbm_audit::milp::SolveStatus;
use cbm_audit::pocock::discretize;
use cbm_audit::seeding;
use cbm_audit::trial::{Assignment, CovariateSchema, Subject, TrialPopulation};
use cbm_audit::{Error, SolverConfig};
use common::{categorical, continuous, sample_sd, synthetic};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn reorder(pop: &TrialPopulation, a: &Assignment, perm: &[usize]) -> (TrialPopulation, Assignment) {
    let p = pop.select(perm).unwrap();
    let b = Assignment::new(perm.iter().map(|&i| a.treated(i)).collect());
    (p, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smd_is_symmetric_under_complement(seed in 0u64..10_000, half in 2usize..10, m in 1usize..5) {
        let n = 2 * half;
        let pop = continuous(n, m, seed);
        let a = Assignment::random_equal_split(n, &mut seeding::rng(seed));
        for norm in [Norm::L1, Norm::LInf] {
            let d = smd(&pop, &a, norm).unwrap() - smd(&pop, &a.complement(), norm).unwrap();
            prop_assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn smd_norms_are_ordered(seed in 0u64..10_000, n in 4usize..21, m in 1usize..6) {
        let pop = continuous(n, m, seed);
        let a = Assignment::random_equal_split(n, &mut seeding::rng(seed));
        let l1 = smd(&pop, &a, Norm::L1).unwrap();
        let linf = smd(&pop, &a, Norm::LInf).unwrap();
        prop_assert!(linf <= l1 + 1e-12);
        prop_assert!(l1 <= m as f64 * linf + 1e-12);
    }

    #[test]
    fn smd_ignores_subject_order(seed in 0u64..10_000, n in 4usize..21) {
        let pop = continuous(n, 3, seed);
        let mut rng = seeding::rng(seed);
        let a = Assignment::random_equal_split(n, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (p, b) = reorder(&pop, &a, &perm);
        for norm in [Norm::L1, Norm::LInf] {
            prop_assert!((smd(&pop, &a, norm).unwrap() - smd(&p, &b, norm).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn pocock_score_equals_one_hot_norm(seed in 0u64..10_000, n in 4usize..30) {
        let pop = categorical(n, &[2, 3, 4], seed);
        let w = [1.0, 0.5, 2.0];
        let a = Assignment::random_equal_split(n, &mut seeding::rng(seed));
        let x = one_hot(&pop).unwrap();
        prop_assert_eq!(x.rows(), 9);
        prop_assert!((u_pocock(&pop, &a, &w).unwrap() - x.weighted_l1(&a, &w)).abs() < 1e-12);
    }

    #[test]
    fn pocock_score_invariances(seed in 0u64..10_000, n in 4usize..30) {
        let pop = categorical(n, &[2, 3, 4], seed);
        let w = [1.0, 1.0, 1.5];
        let mut rng = seeding::rng(seed);
        let a = Assignment::random_equal_split(n, &mut rng);
        let u = u_pocock(&pop, &a, &w).unwrap();
        prop_assert_eq!(u, u_pocock(&pop, &a.complement(), &w).unwrap());

        // relabel the categories of the last covariate
        let relabel = [2.0, 0.0, 3.0, 1.0];
        let subjects = pop
            .subjects()
            .iter()
            .map(|s| {
                let mut x = s.x.clone();
                x[2] = relabel[x[2] as usize];
                Subject::new(x, s.y0, s.y1)
            })
            .collect();
        let relabelled = TrialPopulation::new(pop.schema().clone(), subjects).unwrap();
        prop_assert_eq!(u, u_pocock(&relabelled, &a, &w).unwrap());

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (p, b) = reorder(&pop, &a, &perm);
        prop_assert_eq!(u, u_pocock(&p, &b, &w).unwrap());
    }
}

#[test]
fn discretized_bins_are_balanced() {
    for (n, bins) in [(30, 3), (31, 3), (50, 4), (17, 2)] {
        let pop = continuous(n, 2, n as u64);
        let d = discretize(&pop, bins).unwrap();
        for j in 0..2 {
            let mut counts = vec![0usize; bins];
            for v in d.column(j) {
                counts[v as usize] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "n = {n}, bins = {bins}: {counts:?}");
        }
    }
}

#[test]
fn sampled_expected_imbalance_matches_enumeration() {
    let pop = synthetic(12, 5);
    for kind in [BalanceKind::SmdL1, BalanceKind::SmdLinf, BalanceKind::Pocock] {
        let scorer = Scorer::new(&pop, &BalanceSpec::new(kind)).unwrap();
        let (exact, exhaustive) = expected_imbalance(&scorer, &CalibrationConfig::default()).unwrap();
        assert!(exhaustive);
        let cfg = CalibrationConfig {
            exhaustive_threshold: 0.0,
            draws: 20_000,
            seed: 3,
            ..CalibrationConfig::default()
        };
        let (sampled, exhaustive) = expected_imbalance(&scorer, &cfg).unwrap();
        assert!(!exhaustive);
        let scores: Vec<f64> = Assignment::all_equal_split(12).map(|a| scorer.score(&a).unwrap()).collect();
        let se = sample_sd(&scores) / (cfg.draws as f64).sqrt();
        assert!((sampled - exact).abs() < 4.0 * se, "{kind:?}: {sampled} vs {exact} (se {se})");
    }
}

#[test]
fn solver_minimum_imbalance_matches_enumeration() {
    for seed in 0..4 {
        let pop = synthetic(12, seed);
        for kind in [BalanceKind::SmdL1, BalanceKind::SmdLinf, BalanceKind::Pocock] {
            let scorer = Scorer::new(&pop, &BalanceSpec::new(kind)).unwrap();
            let (u, status) = min_imbalance(&scorer, &SolverConfig::default()).unwrap();
            assert_eq!(status, SolveStatus::Optimal);
            let brute = Assignment::all_equal_split(12)
                .map(|a| scorer.score(&a).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!((u - brute).abs() < 1e-9, "{kind:?} seed {seed}: {u} vs {brute}");
        }
    }
}

#[test]
fn admissible_set_matches_brute_force() {
    let pop = synthetic(12, 7);
    for kind in [BalanceKind::SmdL1, BalanceKind::Pocock] {
        let scorer = Scorer::new(&pop, &BalanceSpec::new(kind)).unwrap();
        let calib = calibrate_scorer(&scorer, &CalibrationConfig { alpha_a: 0.1, ..CalibrationConfig::default() }).unwrap();
        assert!(calib.exhaustive && calib.u_min_certified);
        let scores: Vec<f64> = Assignment::all_equal_split(12).map(|a| scorer.score(&a).unwrap()).collect();
        let u_bar = scores.iter().sum::<f64>() / scores.len() as f64;
        let u_min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let brute = scores.iter().filter(|&&u| (u - u_min) / u_bar < 0.1).count();
        let counted = scores.iter().filter(|&&u| is_admissible(u, &calib).unwrap()).count();
        assert_eq!(counted, brute);
        assert!(counted >= 1);
    }
}

#[test]
fn identical_subjects_have_zero_imbalance() {
    let subjects = (0..8).map(|i| Subject::new(vec![1.5, -0.5], i as f64, 2.0 * i as f64)).collect();
    let pop = TrialPopulation::new(CovariateSchema::all_continuous(2).unwrap(), subjects).unwrap();
    let spec = BalanceSpec {
        standardize: false,
        ..BalanceSpec::new(BalanceKind::SmdL1)
    };
    let scorer = Scorer::new(&pop, &spec).unwrap();
    let (u_bar, _) = expected_imbalance(&scorer, &CalibrationConfig::default()).unwrap();
    let (u_min, _) = min_imbalance(&scorer, &SolverConfig::default()).unwrap();
    assert_eq!((u_bar, u_min), (0.0, 0.0));
    assert!(matches!(
        calibrate_scorer(&scorer, &CalibrationConfig::default()).and_then(|c| is_admissible(0.0, &c)),
        Err(Error::DegenerateCalibration)
    ));
    // standardizing a constant covariate is refused outright
    assert!(matches!(
        Scorer::new(&pop, &BalanceSpec::new(BalanceKind::SmdL1)),
        Err(Error::DegenerateCovariate { .. })
    ));
}
