mod common;

use cbm_audit::atastreet::{
    audit_xi, extreme_mate_assignment, outcome_scale, reference_cloud, rho, sweep, xi_vs_population_size, AtastreetProblem,
    Direction, FrontierPoint, SweepConfig, XiConfig,
};
use cbm_audit::balance::{smd, u_pocock, BalanceKind, BalanceSpec, CalibrationConfig, Norm, Scorer};
use cbm_audit::counterfactual::GroundTruth;
use cbm_audit::datagen::{generate_twins, split_pairs, GenConfig};
use cbm_audit::milp::{EqualSplitProgram, SolveStatus};
use cbm_audit::seeding;
use cbm_audit::trial::{ate, mate, observe, Assignment, CovariateSchema, Subject, TrialPopulation};
use cbm_audit::SolverConfig;
use common::{continuous, synthetic};

const KINDS: [BalanceKind; 3] = [BalanceKind::SmdL1, BalanceKind::SmdLinf, BalanceKind::Pocock];

fn small_grid() -> Vec<f64> {
    vec![0.0, 0.01, 0.05, 0.1, 0.3, 1.0, 3.0, 10.0, 100.0]
}

fn quick_xi_config(kind: BalanceKind) -> XiConfig {
    XiConfig {
        lambdas: small_grid(),
        calibration: CalibrationConfig {
            draws: 2000,
            ..CalibrationConfig::default()
        },
        sigma_draws: 2000,
        ..XiConfig::new(BalanceSpec::new(kind))
    }
}

/// Worst-case MATE in the sweep direction and the score never decrease
/// along the multiplier grid.
fn assert_monotone(points: &[FrontierPoint], dir: Direction) {
    for w in points.windows(2) {
        assert!(w[0].lambda < w[1].lambda);
        assert!(dir.sign() * w[1].mate_value >= dir.sign() * w[0].mate_value - 1e-12, "{w:?}");
        assert!(w[1].u_value >= w[0].u_value - 1e-12, "{w:?}");
    }
}

#[test]
fn model_objective_matches_raw_recomputation() {
    for (n, seed) in [(12, 1), (13, 2), (20, 3)] {
        let pop = continuous(n, 3, seed);
        for kind in KINDS {
            let scorer = Scorer::new(&pop, &BalanceSpec::new(kind)).unwrap();
            for dir in [Direction::Max, Direction::Min] {
                let problem = AtastreetProblem::new(&scorer, 0.7, dir).unwrap();
                let model = problem.build();
                let mut rng = seeding::rng(seed);
                for _ in 0..20 {
                    let a = Assignment::random_equal_split(n, &mut rng);
                    let x = problem.complete(a.bits());
                    assert!(model.max_violation(&x) < 1e-9);
                    let z = model.objective_value(&x);
                    let raw = problem.objective_from_raw(&pop, scorer.score(&a).unwrap(), &a).unwrap();
                    assert!((z - problem.objective_of(a.bits())).abs() < 1e-9);
                    assert!((z - raw).abs() < 1e-9 * (1.0 + raw.abs()), "{kind:?} n {n}: {z} vs {raw}");
                }
            }
        }
    }
}

#[test]
fn zero_multiplier_penalty_is_the_score() {
    let pop = synthetic(14, 3);
    let half = 7.0;
    let mut rng = seeding::rng(2);
    let smd_scorer = Scorer::new(&pop, &BalanceSpec::new(BalanceKind::SmdL1)).unwrap();
    let linf_scorer = Scorer::new(&pop, &BalanceSpec::new(BalanceKind::SmdLinf)).unwrap();
    let weights = vec![1.0, 2.0, 0.5, 1.0, 1.0, 3.0, 1.0, 1.0, 1.0, 0.25];
    let pocock_scorer = Scorer::new(&pop, &BalanceSpec::new(BalanceKind::Pocock).with_weights(weights.clone())).unwrap();
    let l1 = AtastreetProblem::new(&smd_scorer, 0.0, Direction::Max).unwrap();
    let linf = AtastreetProblem::new(&linf_scorer, 0.0, Direction::Max).unwrap();
    let pk = AtastreetProblem::new(&pocock_scorer, 0.0, Direction::Max).unwrap();
    for _ in 0..50 {
        let a = Assignment::random_equal_split(14, &mut rng);
        let std_pop = smd_scorer.population();
        assert!((l1.objective_of(a.bits()) - half * smd(std_pop, &a, Norm::L1).unwrap()).abs() < 1e-9);
        assert!((linf.objective_of(a.bits()) - half * smd(std_pop, &a, Norm::LInf).unwrap()).abs() < 1e-9);
        let u = u_pocock(pocock_scorer.population(), &a, &weights).unwrap();
        assert!((pk.objective_of(a.bits()) - u).abs() < 1e-9);
    }
}

#[test]
fn doubling_weights_and_multiplier_keeps_the_solution() {
    let pop = synthetic(12, 6);
    let w = vec![1.0, 2.0, 1.0, 0.5, 1.0, 1.0, 1.5, 1.0, 1.0, 1.0];
    let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
    let s1 = Scorer::new(&pop, &BalanceSpec::new(BalanceKind::Pocock).with_weights(w)).unwrap();
    let s2 = Scorer::new(&pop, &BalanceSpec::new(BalanceKind::Pocock).with_weights(w2)).unwrap();
    for lambda in [0.1, 0.5, 2.0] {
        let p1 = AtastreetProblem::new(&s1, lambda, Direction::Max).unwrap();
        let p2 = AtastreetProblem::new(&s2, 2.0 * lambda, Direction::Max).unwrap();
        let a1 = cbm_audit::atastreet::solve_problem(&p1, &SolverConfig::default()).unwrap();
        let a2 = cbm_audit::atastreet::solve_problem(&p2, &SolverConfig::default()).unwrap();
        assert_eq!(p1.assignment_of(&a1.x), p2.assignment_of(&a2.x), "lambda {lambda}");
        assert!((2.0 * a1.objective - a2.objective).abs() < 1e-9);
    }
}

#[test]
fn frontiers_are_monotone() {
    for (n, seed) in [(12, 1), (15, 2), (24, 3)] {
        let pop = synthetic(n, seed);
        for kind in KINDS {
            for dir in [Direction::Max, Direction::Min] {
                let cfg = SweepConfig {
                    lambdas: small_grid(),
                    ..SweepConfig::new(BalanceSpec::new(kind), dir)
                };
                assert_monotone(&sweep(&pop, &cfg).unwrap(), dir);
            }
        }
    }
}

#[test]
fn budget_limited_frontier_is_still_monotone() {
    let pop = synthetic(40, 12);
    let cfg = SweepConfig {
        lambdas: small_grid(),
        solver: SolverConfig {
            node_budget: 20,
            ..SolverConfig::default()
        },
        ..SweepConfig::new(BalanceSpec::new(BalanceKind::SmdL1), Direction::Max)
    };
    let points = sweep(&pop, &cfg).unwrap();
    assert!(points.iter().any(|p| p.status == SolveStatus::BudgetExceeded));
    assert_monotone(&points, Direction::Max);
}

#[test]
fn large_multiplier_reaches_closed_form_extreme() {
    let pop = synthetic(20, 5);
    for kind in KINDS {
        for dir in [Direction::Max, Direction::Min] {
            let cfg = SweepConfig {
                lambdas: vec![0.0, 1e6],
                ..SweepConfig::new(BalanceSpec::new(kind), dir)
            };
            let last = sweep(&pop, &cfg).unwrap().pop().unwrap();
            let expected = mate(&pop, &extreme_mate_assignment(&pop, dir)).unwrap();
            assert!((last.mate_value - expected).abs() < 1e-9, "{kind:?} {dir:?}");
        }
    }
}

/// No random assignment beats a frontier point on that point's own
/// trade-off objective.
#[test]
fn frontier_points_beat_random_assignments() {
    let pop = synthetic(14, 9);
    for kind in KINDS {
        let scorer = Scorer::new(&pop, &BalanceSpec::new(kind)).unwrap();
        let cfg = SweepConfig {
            lambdas: small_grid(),
            ..SweepConfig::new(BalanceSpec::new(kind), Direction::Max)
        };
        let points = cbm_audit::atastreet::sweep_scorer(&pop, &scorer, &cfg).unwrap();
        let base = seeding::derive(3, 1);
        let cloud: Vec<Assignment> = (0..10_000)
            .map(|k| Assignment::random_equal_split(14, &mut seeding::rng_for(base, k)))
            .collect();
        for p in &points {
            assert_eq!(p.status, SolveStatus::Optimal);
            let problem = AtastreetProblem::new(&scorer, p.lambda, Direction::Max).unwrap();
            let z = problem.objective_of(p.assignment.bits());
            for a in &cloud {
                assert!(z <= problem.objective_of(a.bits()) + 1e-9);
            }
        }
        assert_eq!(reference_cloud(&pop, &scorer, 100, 1).unwrap().len(), 100);
    }
}

#[test]
fn frontier_xi_never_exceeds_enumerated_xi() {
    for seed in 0..3 {
        let pop = synthetic(12, 20 + seed);
        for kind in KINDS {
            let report = audit_xi(&pop, &quick_xi_config(kind)).unwrap().report;
            let exact = report.exact.as_ref().unwrap();
            assert!(report.xi.unwrap() <= exact.xi.unwrap() + 1e-9, "{kind:?} seed {seed}");
            assert!(report.xi.unwrap() > 0.0);
        }
    }
}

#[test]
fn constant_outcomes_leave_xi_undefined() {
    let base = continuous(10, 2, 4);
    let subjects = base.subjects().iter().map(|s| Subject::new(s.x.clone(), 1.0, 1.0)).collect();
    let pop = TrialPopulation::new(CovariateSchema::all_continuous(2).unwrap(), subjects).unwrap();
    let report = audit_xi(&pop, &quick_xi_config(BalanceKind::SmdL1)).unwrap().report;
    assert_eq!(report.xi, None);
    assert_eq!(report.sigma.sigma, 0.0);
}

#[test]
fn xi_is_invariant_to_affine_outcome_maps() {
    let pop = synthetic(12, 31);
    for kind in KINDS {
        let cfg = quick_xi_config(kind);
        let xi = audit_xi(&pop, &cfg).unwrap().report.xi.unwrap();
        for (scale, shift) in [(3.0, -2.0), (0.25, 10.0), (-1.5, 0.5)] {
            let mapped = pop.map_outcomes(|y| scale * y + shift);
            let other = audit_xi(&mapped, &cfg).unwrap().report.xi.unwrap();
            assert!((xi - other).abs() < 1e-6 * xi, "{kind:?} ({scale}, {shift}): {xi} vs {other}");
        }
    }
}

#[test]
fn full_size_single_replicate_equals_plain_xi() {
    let pop = synthetic(14, 2);
    let cfg = XiConfig {
        exact_max_n: 0,
        ..quick_xi_config(BalanceKind::SmdL1)
    };
    let rows = xi_vs_population_size(&pop, &cfg, &[14], 1).unwrap();
    let plain = audit_xi(&pop, &cfg).unwrap().report.xi.unwrap();
    assert_eq!(rows[0].replicates, 1);
    assert!((rows[0].mean_xi - plain).abs() < 1e-12);
    assert_eq!(rows[0].sd_xi, 0.0);
}

fn twin_setup(seed: u64) -> (TrialPopulation, SweepConfig) {
    let pop = generate_twins(&GenConfig { n: 16, coef_seed: seed, ..GenConfig::default() }).unwrap();
    let cfg = SweepConfig {
        lambdas: small_grid(),
        ..SweepConfig::new(BalanceSpec::new(BalanceKind::SmdL1), Direction::Max)
    };
    (pop, cfg)
}

#[test]
fn rho_of_frontier_points_is_one() {
    for seed in 0..3 {
        let (pop, cfg) = twin_setup(seed);
        let truth = GroundTruth(pop.clone());
        for dir in [Direction::Max, Direction::Min] {
            let points = sweep(&pop, &SweepConfig { direction: dir, ..cfg.clone() }).unwrap();
            // errors at round-off level are zero, and so is their rho
            let tiny = 1e-12 * outcome_scale(&pop);
            for p in points.iter().filter(|p| dir.sign() * (p.mate_value - ate(&pop)) > tiny) {
                let report = rho(&observe(&pop, &p.assignment).unwrap(), &truth, &cfg).unwrap();
                assert!((report.rho - 1.0).abs() < 1e-6, "seed {seed} lambda {}: {}", p.lambda, report.rho);
                assert!(!report.clamped);
            }
        }
    }
}

#[test]
fn rho_of_a_pair_splitting_assignment_is_zero() {
    let (pop, cfg) = twin_setup(4);
    let a = split_pairs(16, &mut seeding::rng(1));
    let report = rho(&observe(&pop, &a).unwrap(), &GroundTruth(pop.clone()), &cfg).unwrap();
    assert!(report.rho.abs() < 1e-6, "{}", report.rho);
}

#[test]
fn rho_is_invariant_to_affine_outcome_maps() {
    let pop = synthetic(14, 8);
    let cfg = SweepConfig {
        lambdas: small_grid(),
        ..SweepConfig::new(BalanceSpec::new(BalanceKind::SmdL1), Direction::Max)
    };
    let a = Assignment::random_equal_split(14, &mut seeding::rng(6));
    let base = rho(&observe(&pop, &a).unwrap(), &GroundTruth(pop.clone()), &cfg).unwrap().rho;
    let mapped = pop.map_outcomes(|y| 4.0 * y - 3.0);
    let other = rho(&observe(&mapped, &a).unwrap(), &GroundTruth(mapped.clone()), &cfg).unwrap().rho;
    assert!((base - other).abs() < 1e-6, "{base} vs {other}");
}
