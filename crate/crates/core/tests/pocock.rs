mod common;

use cbm_audit::balance::{expected_imbalance, u_pocock, BalanceKind, BalanceSpec, CalibrationConfig, Scorer};
use cbm_audit::datagen::{make_adversarial_case, GenConfig};
use cbm_audit::pocock::{
    discretize, expected_final_u_mc, feasibility_search, pocock_assign, pocock_g, pocock_run, ArrivalOrder,
    Feasibility, PocockConfig, SeqState,
};
use cbm_audit::seeding;
use cbm_audit::trial::{Assignment, Covariate, CovariateSchema, Subject, TrialPopulation};
use common::{categorical, ks_statistic, synthetic};
use rand::Rng;

/// The decision comparing the subject's own count gaps agrees with the
/// one comparing the full score after each hypothetical placement.
#[test]
fn gap_rule_agrees_with_full_score() {
    let mut rng = seeding::rng(1);
    let mut steps = 0;
    let mut pop_seed = 0;
    while steps < 10_000 {
        pop_seed += 1;
        let cats = [2, 3, 4, 2];
        let pop = categorical(30, &cats, pop_seed);
        // dyadic weights keep every sum exact, so ties compare exactly
        let w: Vec<f64> = (0..cats.len()).map(|_| rng.random_range(1..=8) as f64 / 4.0).collect();
        let mut state = SeqState::new(&pop).unwrap();
        for i in 0..pop.len() {
            let g_t = pocock_g(&state, &pop, i, true, &w);
            let g_c = pocock_g(&state, &pop, i, false, &w);
            let mut t = state.clone();
            t.assign(&pop, i, true);
            let mut c = state.clone();
            c.assign(&pop, i, false);
            let (u_t, u_c) = (t.u_pocock(&w), c.u_pocock(&w));
            assert_eq!(g_t.partial_cmp(&g_c), u_t.partial_cmp(&u_c), "step {steps}");
            state.assign(&pop, i, rng.random_bool(0.5));
            steps += 1;
        }
    }
}

#[test]
fn coin_follows_p0() {
    let pop = categorical(40, &[3, 3, 2], 4);
    let w = vec![1.0; 3];
    for p0 in [0.5, 0.8] {
        let config = PocockConfig { p0, ..PocockConfig::default() };
        let mut rng = seeding::rng(5);
        let (mut followed, mut decided) = (0usize, 0usize);
        for _ in 0..400 {
            let mut state = SeqState::new(&pop).unwrap();
            for i in 0..pop.len() {
                let g_t = pocock_g(&state, &pop, i, true, &w);
                let g_c = pocock_g(&state, &pop, i, false, &w);
                let t = pocock_assign(&mut state, &pop, i, &config, &mut rng).unwrap();
                if g_t != g_c {
                    decided += 1;
                    followed += ((g_t < g_c) == t) as usize;
                }
            }
        }
        let freq = followed as f64 / decided as f64;
        let se = (p0 * (1.0 - p0) / decided as f64).sqrt();
        assert!((freq - p0).abs() < 4.0 * se, "p0 = {p0}: {freq} over {decided}");
    }
}

/// With `p0 = 0.5` and no warm-up the method is a fair coin per arrival.
#[test]
fn half_p0_matches_fair_coin() {
    let pop = categorical(50, &[3, 2, 4], 8);
    let w = vec![1.0; 3];
    let config = |seed| PocockConfig {
        p0: 0.5,
        warmup: 0,
        seed,
        ..PocockConfig::default()
    };
    let order = ArrivalOrder::identity(50);
    let runs: Vec<f64> = (0..2000)
        .map(|r| {
            let a = pocock_run(&pop, &order, &config(r)).unwrap().assignment;
            u_pocock(&pop, &a, &w).unwrap()
        })
        .collect();
    let mut rng = seeding::rng(77);
    let coins: Vec<f64> = (0..2000)
        .map(|_| {
            let a = Assignment::new((0..50).map(|_| rng.random_bool(0.5)).collect());
            u_pocock(&pop, &a, &w).unwrap()
        })
        .collect();
    let d = ks_statistic(&runs, &coins);
    // alpha = 0.001 critical value for two samples of 2000
    assert!(d < 1.95 * (2.0f64 / 2000.0).sqrt(), "KS statistic {d}");
}

#[test]
fn deterministic_minimization_balances_better() {
    let pop = discretize(&synthetic(60, 2), 3).unwrap();
    let w = vec![1.0; pop.m()];
    let median = |p0: f64| {
        let mut u: Vec<f64> = (0..200)
            .map(|r| {
                let order = ArrivalOrder::random(60, &mut seeding::rng(1000 + r));
                let config = PocockConfig { p0, seed: r, ..PocockConfig::default() };
                u_pocock(&pop, &pocock_run(&pop, &order, &config).unwrap().assignment, &w).unwrap()
            })
            .collect();
        u.sort_by(f64::total_cmp);
        u[100]
    };
    let (strict, fair) = (median(1.0), median(0.5));
    assert!(strict < fair, "median U: p0 = 1 gives {strict}, p0 = 0.5 gives {fair}");
}

#[test]
fn identical_population_is_reproducible_in_some_order() {
    let schema = CovariateSchema::new(vec![Covariate::categorical("c", 3), Covariate::categorical("d", 2)]).unwrap();
    let subjects = (0..12).map(|i| Subject::new(vec![1.0, 0.0], i as f64, 0.0)).collect();
    let pop = TrialPopulation::new(schema, subjects).unwrap();
    let config = PocockConfig::default();
    for seed in 0..5 {
        let target = Assignment::random_equal_split(12, &mut seeding::rng(seed));
        match feasibility_search(&pop, &target, &config, 1_000_000, seed).unwrap() {
            Feasibility::Found(found) => {
                assert_eq!(pocock_run(&pop, &found.order, &config).unwrap().assignment, target);
            }
            Feasibility::NotFound { expansions } => panic!("not found after {expansions} expansions"),
        }
    }
}

#[test]
fn empty_state_expectation_matches_expected_imbalance() {
    let raw = synthetic(12, 9);
    let spec = BalanceSpec::new(BalanceKind::Pocock);
    let scorer = Scorer::new(&raw, &spec).unwrap();
    let pop = scorer.population();
    let (u_bar, exhaustive) = expected_imbalance(&scorer, &CalibrationConfig::default()).unwrap();
    assert!(exhaustive);
    let (mc, se) = expected_final_u_mc(pop, &SeqState::new(pop).unwrap(), scorer.weights(), 20_000, 2).unwrap();
    assert!((mc - u_bar).abs() < 4.0 * se, "{mc} vs {u_bar} (se {se})");
}

#[test]
fn strict_minimization_balances_adjacent_pairs_exactly() {
    for seed in 0..5 {
        let case = make_adversarial_case(&GenConfig { n: 20, coef_seed: seed, ..GenConfig::default() }).unwrap();
        let pop = discretize(&case.population, 3).unwrap();
        let w = vec![1.0; pop.m()];
        let config = PocockConfig { seed, ..PocockConfig::default() };
        let a = pocock_run(&pop, &ArrivalOrder::identity(20), &config).unwrap().assignment;
        assert_eq!(u_pocock(&pop, &a, &w).unwrap(), 0.0);
        assert!(a.is_equal_split());
    }
}

#[test]
fn runs_are_reproducible() {
    let pop = categorical(30, &[2, 3], 3);
    let order = ArrivalOrder::random(30, &mut seeding::rng(3));
    let config = PocockConfig { p0: 0.7, seed: 11, ..PocockConfig::default() };
    let first = pocock_run(&pop, &order, &config).unwrap();
    assert_eq!(first, pocock_run(&pop, &order, &config).unwrap());
}
