//! Search-engine contracts checked against independent oracles: a brute-force
//! Pareto filter, Monte Carlo hypervolume, and the closed-form distribution
//! of sorted uniform draws.

use lenopt::encoder::LengthConfig;
use lenopt::hpo::{
    bayesian_suggest, evolve, run_search, sample_uniform, validate_config, ParetoArchive,
    SearchSpace, Strategy, TrialRecord,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Mutex;

/// run_search reads LENOPT_THREADS, so tests that call it (or mutate the
/// variable) serialize on this lock to keep each other honest.
static ENV_LOCK: Mutex<()> = Mutex::new(());

fn rec(config: LengthConfig, f1: f64, cost: f64, i: usize) -> TrialRecord {
    TrialRecord { config, f1, cost, trial_index: i, strategy_tag: "test".to_string() }
}

fn dummy_config() -> LengthConfig {
    LengthConfig::new(vec![4, 2]).unwrap()
}

/// O(n^2) reference: a point survives iff nothing else dominates it.
fn brute_front(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let dominates = |a: (f64, f64), b: (f64, f64)| {
        a.0 >= b.0 && a.1 <= b.1 && (a.0 > b.0 || a.1 < b.1)
    };
    points
        .iter()
        .copied()
        .filter(|&p| !points.iter().any(|&q| dominates(q, p)))
        .collect()
}

fn sorted(mut v: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

#[test]
fn archive_matches_the_brute_force_filter_on_random_streams() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut archive = ParetoArchive::new();
        let mut all = Vec::with_capacity(1000);
        for i in 0..1000 {
            let f1: f64 = rng.gen();
            let cost: f64 = rng.gen_range(0.0..10.0);
            all.push((f1, cost));
            archive.update(rec(dummy_config(), f1, cost, i));
        }
        let got = sorted(archive.points().iter().map(|p| (p.f1, p.cost)).collect());
        let want = sorted(brute_front(&all));
        assert_eq!(got, want, "seed {seed}: incremental archive diverged from the oracle");
    }
}

#[test]
fn hypervolume_agrees_with_monte_carlo() {
    // reference corner (0, 1): archives live in f1 (0.3, 1), cost (0, 1)
    let reference = (0.0, 1.0);
    let samples = 1_000_000usize;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut archive = ParetoArchive::new();
        for i in 0..30 {
            let f1 = rng.gen_range(0.3..1.0);
            let cost = rng.gen_range(0.01..0.99);
            archive.update(rec(dummy_config(), f1, cost, i));
        }
        let exact = archive.hypervolume(reference).unwrap();
        let front: Vec<(f64, f64)> =
            archive.points().iter().map(|p| (p.f1, p.cost)).collect();

        let mut hits = 0usize;
        let mut mc = ChaCha8Rng::seed_from_u64(777 + seed);
        for _ in 0..samples {
            let f: f64 = mc.gen();
            let c: f64 = mc.gen();
            if front.iter().any(|&(pf, pc)| pf >= f && pc <= c) {
                hits += 1;
            }
        }
        let estimate = hits as f64 / samples as f64; // box area is 1
        let rel = (estimate - exact).abs() / exact;
        assert!(
            rel < 0.01,
            "seed {seed}: exact {exact:.6} vs MC {estimate:.6} (rel {rel:.4})"
        );
    }
}

#[test]
fn sorted_sampling_matches_the_closed_form_distribution() {
    // two draws from {1,2,3}, sorted descending: six outcomes with
    // probabilities [1,2,1,2,2,1]/9
    let space = SearchSpace::new(2, 1, 3).unwrap();
    let outcomes: [(usize, usize); 6] = [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3)];
    let expected = [1.0, 2.0, 1.0, 2.0, 2.0, 1.0].map(|w| w / 9.0);
    let n = 9000usize;
    let mut counts = [0usize; 6];
    for seed in 0..n {
        let c = sample_uniform(&space, seed as u64).unwrap();
        let pair = (c.lengths()[0], c.lengths()[1]);
        let slot = outcomes.iter().position(|&o| o == pair).expect("draw outside the lattice");
        counts[slot] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&obs, p)| {
            let e = p * n as f64;
            (obs as f64 - e).powi(2) / e
        })
        .sum();
    // 5 degrees of freedom, p = 0.01
    assert!(chi2 < 15.086, "chi-square {chi2:.3} rejects uniform sorted sampling");
}

#[test]
fn every_uniform_sample_satisfies_the_constraints() {
    let space = SearchSpace::default();
    for seed in 0..10_000u64 {
        let c = sample_uniform(&space, seed).unwrap();
        let v = validate_config(&space, c.lengths());
        assert!(v.is_empty(), "seed {seed}: {v:?}");
    }
}

#[test]
fn every_evolved_child_satisfies_the_constraints() {
    let space = SearchSpace::default();
    let parents: Vec<TrialRecord> = (0..6)
        .map(|i| rec(sample_uniform(&space, 900 + i).unwrap(), 0.5, 1.0, i as usize))
        .collect();
    for seed in 0..10_000u64 {
        let c = evolve(&parents, &space, seed).unwrap();
        let v = validate_config(&space, c.lengths());
        assert!(v.is_empty(), "seed {seed}: {v:?}");
    }
}

#[test]
fn every_bayesian_suggestion_satisfies_the_constraints() {
    let space = SearchSpace::default();
    let history: Vec<TrialRecord> = (0..8)
        .map(|i| {
            let c = sample_uniform(&space, 40 + i).unwrap();
            let s: usize = c.lengths().iter().sum();
            rec(c, 1.0 / (1.0 + s as f64), s as f64, i as usize)
        })
        .collect();
    for seed in 0..10_000u64 {
        let c = bayesian_suggest(&history, &space, seed).unwrap();
        let v = validate_config(&space, c.lengths());
        assert!(v.is_empty(), "seed {seed}: {v:?}");
    }
}

/// A smooth single-basin landscape where both objectives prefer the same
/// region, so every Chebyshev weighting agrees on what "good" means and
/// suggestion quality is measured by plain distance to the optimum.
fn basin_distance(space: &SearchSpace, c: &LengthConfig, target: &[f64]) -> f64 {
    let range = (space.upper - space.lower) as f64;
    c.lengths()
        .iter()
        .zip(target)
        .map(|(&l, &t)| {
            let z = (l - space.lower) as f64 / range;
            (z - t) * (z - t)
        })
        .sum::<f64>()
        / target.len() as f64
}

#[test]
fn bayesian_suggestions_concentrate_in_the_best_decile() {
    let space = SearchSpace::new(3, 2, 32).unwrap();
    let target = [0.75, 0.5, 0.2]; // normalized optimum, monotone in raw lengths
    let history: Vec<TrialRecord> = (0..40)
        .map(|i| {
            let c = sample_uniform(&space, i).unwrap();
            let d = basin_distance(&space, &c, &target);
            rec(c, 1.0 - d, d + 0.1, i as usize)
        })
        .collect();

    // best-decile threshold from a fresh 2000-point uniform pool
    let mut pool: Vec<f64> = (0..2000)
        .map(|i| {
            basin_distance(&space, &sample_uniform(&space, 50_000 + i).unwrap(), &target)
        })
        .collect();
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let decile = pool[pool.len() / 10];

    let hits = (0..100u64)
        .filter(|&s| {
            let c = bayesian_suggest(&history, &space, 7000 + s).unwrap();
            basin_distance(&space, &c, &target) <= decile
        })
        .count();
    assert!(hits >= 70, "only {hits}/100 suggestions in the best decile (cutoff {decile:.4})");
}

fn toy_objective(c: &LengthConfig) -> (f64, f64) {
    // accuracy saturates with total length, cost is linear: a real trade-off
    let s: f64 = c.lengths().iter().map(|&l| l as f64).sum();
    (s / (s + 20.0), s)
}

#[test]
fn run_search_spends_exactly_the_budget_and_logs_in_order() {
    let _guard = ENV_LOCK.lock().unwrap();
    let space = SearchSpace::new(4, 2, 24).unwrap();
    for strategy in [Strategy::Random, Strategy::Evolutionary, Strategy::Bayesian] {
        let result = run_search(strategy, 37, &toy_objective, &space, 11).unwrap();
        assert_eq!(result.trials.len(), 37);
        for (i, t) in result.trials.iter().enumerate() {
            assert_eq!(t.trial_index, i);
            assert_eq!(t.strategy_tag, strategy.to_string());
            assert!(validate_config(&space, t.config.lengths()).is_empty());
        }
        let got = sorted(result.archive.points().iter().map(|p| (p.f1, p.cost)).collect());
        let all: Vec<(f64, f64)> = result.trials.iter().map(|t| (t.f1, t.cost)).collect();
        assert_eq!(got, sorted(brute_front(&all)), "{strategy}: archive is not the log's front");
    }
}

#[test]
fn run_search_is_deterministic_per_seed() {
    let _guard = ENV_LOCK.lock().unwrap();
    let space = SearchSpace::new(4, 2, 24).unwrap();
    for strategy in [Strategy::Random, Strategy::Evolutionary, Strategy::Bayesian] {
        let a = run_search(strategy, 25, &toy_objective, &space, 3).unwrap();
        let b = run_search(strategy, 25, &toy_objective, &space, 3).unwrap();
        for (x, y) in a.trials.iter().zip(&b.trials) {
            assert_eq!(x.config.lengths(), y.config.lengths());
            assert_eq!(x.f1, y.f1);
            assert_eq!(x.cost, y.cost);
        }
        let c = run_search(strategy, 25, &toy_objective, &space, 4).unwrap();
        let same = a
            .trials
            .iter()
            .zip(&c.trials)
            .all(|(x, y)| x.config.lengths() == y.config.lengths());
        assert!(!same, "{strategy}: different seeds produced identical trial streams");
    }
}

#[test]
fn parallel_batches_cover_the_budget_and_stay_deterministic() {
    let _guard = ENV_LOCK.lock().unwrap();
    let space = SearchSpace::new(4, 2, 24).unwrap();
    let sequential = run_search(Strategy::Random, 30, &toy_objective, &space, 9).unwrap();

    std::env::set_var("LENOPT_THREADS", "4");
    let a = run_search(Strategy::Random, 30, &toy_objective, &space, 9).unwrap();
    let b = run_search(Strategy::Random, 30, &toy_objective, &space, 9).unwrap();
    let bayes = run_search(Strategy::Bayesian, 18, &toy_objective, &space, 9).unwrap();
    std::env::remove_var("LENOPT_THREADS");

    assert_eq!(a.trials.len(), 30);
    assert_eq!(bayes.trials.len(), 18);
    for (x, y) in a.trials.iter().zip(&b.trials) {
        assert_eq!(x.config.lengths(), y.config.lengths());
    }
    // random draws come off one stream in dispatch order, so the thread cap
    // cannot change the log
    for (x, y) in a.trials.iter().zip(&sequential.trials) {
        assert_eq!(x.config.lengths(), y.config.lengths());
    }
    let got = sorted(bayes.archive.points().iter().map(|p| (p.f1, p.cost)).collect());
    let all: Vec<(f64, f64)> = bayes.trials.iter().map(|t| (t.f1, t.cost)).collect();
    assert_eq!(got, sorted(brute_front(&all)));
}

#[test]
fn hypervolume_never_decreases_as_trials_accumulate() {
    let _guard = ENV_LOCK.lock().unwrap();
    let space = SearchSpace::new(4, 2, 24).unwrap();
    let result = run_search(Strategy::Evolutionary, 60, &toy_objective, &space, 21).unwrap();
    let reference = (0.0, 24.0 * 4.0 + 1.0);
    let mut archive = ParetoArchive::new();
    let mut last = 0.0;
    for t in &result.trials {
        archive.update(t.clone());
        let hv = archive.hypervolume(reference).unwrap();
        assert!(hv >= last - 1e-12, "hypervolume regressed: {last} -> {hv}");
        last = hv;
    }
    assert!(last > 0.0);
}
