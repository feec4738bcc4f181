//! Constrained multi-objective search over length configurations: a monotone
//! integer lattice, three strategies (random, evolutionary, Bayesian with a
//! GP surrogate), a Pareto archive, and hypervolume reporting.

mod gp;

use crate::encoder::LengthConfig;
use gp::{expected_improvement, Gp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

const GP_LENGTHSCALE: f64 = 0.35;
const GP_NOISE: f64 = 1e-6;
const CHEBYSHEV_RHO: f64 = 0.05;
const CANDIDATE_POOL: usize = 512;
const MUTATION_RATE: f64 = 0.3;
/// Fraction of evolutionary suggestions drawn fresh from the space instead
/// of bred from the front.
const IMMIGRANT_RATE: f64 = 0.2;

#[derive(Debug)]
pub enum HpoError {
    InfeasibleSpace { lower: usize, upper: usize },
    EmptyParents,
    UnknownStrategy { name: String },
    BadParameter { what: &'static str, value: f64 },
    ReferenceNotDominated { f1: f64, cost: f64 },
}

impl fmt::Display for HpoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HpoError::InfeasibleSpace { lower, upper } => {
                write!(f, "infeasible search space: lower {lower} > upper {upper}")
            }
            HpoError::EmptyParents => write!(f, "evolve needs at least one parent"),
            HpoError::UnknownStrategy { name } => write!(
                f,
                "unknown strategy {name:?} (expected random, evolutionary or bayesian)"
            ),
            HpoError::BadParameter { what, value } => write!(f, "bad parameter {what}: {value}"),
            HpoError::ReferenceNotDominated { f1, cost } => {
                write!(f, "archive point (f1 {f1}, cost {cost}) does not dominate the reference")
            }
        }
    }
}

impl std::error::Error for HpoError {}

/// Monotone integer lattice: num_vars lengths, each in [lower, upper],
/// non-increasing. The documented defaults follow the source setup (6
/// variables in [91, 384]; see `lower_bound_provenance` for where 91 comes
/// from).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub num_vars: usize,
    pub lower: usize,
    pub upper: usize,
    /// Always true in this artifact; kept explicit because the constraint is
    /// the whole point of the lattice.
    pub monotone: bool,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace { num_vars: 6, lower: 91, upper: 384, monotone: true }
    }
}

impl SearchSpace {
    pub fn new(num_vars: usize, lower: usize, upper: usize) -> Result<SearchSpace, HpoError> {
        if num_vars == 0 {
            return Err(HpoError::BadParameter { what: "num_vars", value: 0.0 });
        }
        if lower == 0 {
            return Err(HpoError::BadParameter { what: "lower", value: 0.0 });
        }
        if upper < lower {
            return Err(HpoError::InfeasibleSpace { lower, upper });
        }
        Ok(SearchSpace { num_vars, lower, upper, monotone: true })
    }

    pub fn feasible(&self) -> bool {
        self.num_vars >= 1 && self.lower >= 1 && self.lower <= self.upper
    }
}

/// Checks a raw candidate against the space; violations are data, not
/// errors, and each broken inequality is named.
pub fn validate_config(space: &SearchSpace, lengths: &[usize]) -> Vec<String> {
    let mut violations = Vec::new();
    if lengths.len() != space.num_vars {
        violations.push(format!("expected {} variables, got {}", space.num_vars, lengths.len()));
    }
    for (i, &l) in lengths.iter().enumerate() {
        if l < space.lower {
            violations.push(format!("x{i} < lower bound {}", space.lower));
        }
        if l > space.upper {
            violations.push(format!("x{i} > upper bound {}", space.upper));
        }
        if i > 0 && l > lengths[i - 1] {
            violations.push(format!("x{i} > x{}", i - 1));
        }
    }
    violations
}

fn sample_uniform_with(space: &SearchSpace, rng: &mut ChaCha8Rng) -> LengthConfig {
    let mut lengths: Vec<usize> =
        (0..space.num_vars).map(|_| rng.gen_range(space.lower..=space.upper)).collect();
    lengths.sort_unstable_by(|a, b| b.cmp(a));
    LengthConfig::new(lengths).expect("sorted draws are monotone")
}

/// Uniform sorted-draw sampling over the lattice: num_vars independent
/// uniforms in [lower, upper], sorted descending. Constructively valid.
pub fn sample_uniform(space: &SearchSpace, seed: u64) -> Result<LengthConfig, HpoError> {
    if !space.feasible() {
        return Err(HpoError::InfeasibleSpace { lower: space.lower, upper: space.upper });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_uniform_with(space, &mut rng))
}

/// Two-parent per-coordinate crossover, ±step mutation at `mutation_rate`
/// per coordinate, then a descending re-sort to restore monotonicity.
pub fn evolve_with(
    parents: &[TrialRecord],
    space: &SearchSpace,
    mutation_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LengthConfig, HpoError> {
    if parents.is_empty() {
        return Err(HpoError::EmptyParents);
    }
    if !space.feasible() {
        return Err(HpoError::InfeasibleSpace { lower: space.lower, upper: space.upper });
    }
    let a = &parents[rng.gen_range(0..parents.len())];
    let b = &parents[rng.gen_range(0..parents.len())];
    let step = ((space.upper - space.lower) / 16).max(1);
    let mut child: Vec<usize> = (0..space.num_vars)
        .map(|i| {
            let src = if rng.gen_bool(0.5) { a } else { b };
            let mut v = src.config.lengths()[i] as i64;
            if mutation_rate > 0.0 && rng.gen_bool(mutation_rate) {
                v += if rng.gen_bool(0.5) { step as i64 } else { -(step as i64) };
            }
            v.clamp(space.lower as i64, space.upper as i64) as usize
        })
        .collect();
    child.sort_unstable_by(|x, y| y.cmp(x));
    Ok(LengthConfig::new(child).expect("re-sorted child is monotone"))
}

pub fn evolve(
    parents: &[TrialRecord],
    space: &SearchSpace,
    seed: u64,
) -> Result<LengthConfig, HpoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    evolve_with(parents, space, MUTATION_RATE, &mut rng)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config: LengthConfig,
    pub f1: f64,
    pub cost: f64,
    pub trial_index: usize,
    pub strategy_tag: String,
}

fn dominates(a: &TrialRecord, b: &TrialRecord) -> bool {
    a.f1 >= b.f1 && a.cost <= b.cost && (a.f1 > b.f1 || a.cost < b.cost)
}

/// Non-dominated set under (maximize f1, minimize cost).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParetoArchive {
    points: Vec<TrialRecord>,
}

impl ParetoArchive {
    pub fn new() -> ParetoArchive {
        ParetoArchive { points: Vec::new() }
    }

    pub fn points(&self) -> &[TrialRecord] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Inserts unless dominated; evicts everything the point dominates.
    /// Returns whether the point was accepted.
    pub fn update(&mut self, point: TrialRecord) -> bool {
        if self.points.iter().any(|p| dominates(p, &point)) {
            return false;
        }
        self.points.retain(|p| !dominates(&point, p));
        self.points.push(point);
        true
    }

    /// Dominated area between the front and a reference corner
    /// (f1_ref below all points, cost_ref above all points), by a
    /// cost-ascending sweep.
    pub fn hypervolume(&self, reference: (f64, f64)) -> Result<f64, HpoError> {
        let (f1_ref, cost_ref) = reference;
        if self.points.is_empty() {
            return Ok(0.0);
        }
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(self.points.len());
        for p in &self.points {
            if !(p.f1 > f1_ref && p.cost < cost_ref) {
                return Err(HpoError::ReferenceNotDominated { f1: p.f1, cost: p.cost });
            }
            pts.push((p.cost, p.f1));
        }
        pts.sort_by(|a, b| a.partial_cmp(b).expect("finite objectives"));
        // on a clean front f1 rises with cost; duplicates and near-ties are
        // handled by always sweeping with the best f1 seen so far
        let mut area = 0.0;
        let mut best_f1 = f64::NEG_INFINITY;
        for i in 0..pts.len() {
            let (cost, f1) = pts[i];
            let next_cost = if i + 1 < pts.len() { pts[i + 1].0.min(cost_ref) } else { cost_ref };
            best_f1 = best_f1.max(f1);
            area += (best_f1 - f1_ref) * (next_cost - cost);
        }
        Ok(area)
    }
}

fn normalize(space: &SearchSpace, lengths: &[usize]) -> Vec<f64> {
    let range = (space.upper - space.lower) as f64;
    lengths
        .iter()
        .map(|&l| if range > 0.0 { (l - space.lower) as f64 / range } else { 0.5 })
        .collect()
}

fn norm01(v: f64, lo: f64, hi: f64) -> f64 {
    if hi - lo > 1e-12 {
        (v - lo) / (hi - lo)
    } else {
        0.5
    }
}

fn suggest_with(
    history: &[TrialRecord],
    space: &SearchSpace,
    rng: &mut ChaCha8Rng,
) -> Result<LengthConfig, HpoError> {
    if !space.feasible() {
        return Err(HpoError::InfeasibleSpace { lower: space.lower, upper: space.upper });
    }
    if history.is_empty() {
        return Ok(sample_uniform_with(space, rng));
    }

    let xs: Vec<Vec<f64>> = history.iter().map(|t| normalize(space, t.config.lengths())).collect();
    let f1s: Vec<f64> = history.iter().map(|t| t.f1).collect();
    let costs: Vec<f64> = history.iter().map(|t| t.cost).collect();
    let gp_f1 = Gp::fit(xs.clone(), &f1s, GP_LENGTHSCALE, GP_NOISE);
    let gp_cost = Gp::fit(xs, &costs, GP_LENGTHSCALE, GP_NOISE);

    let (f1_lo, f1_hi) = f1s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let (c_lo, c_hi) = costs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let f1_range = (f1_hi - f1_lo).max(1e-12);
    let c_range = (c_hi - c_lo).max(1e-12);

    // fresh random weights per suggestion trace different parts of the front
    let w_f1: f64 = rng.gen_range(0.05..0.95);
    let w_cost = 1.0 - w_f1;
    let cheb = |f1: f64, cost: f64| {
        let a = w_f1 * norm01(f1, f1_lo, f1_hi);
        let b = w_cost * (1.0 - norm01(cost, c_lo, c_hi));
        a.min(b) + CHEBYSHEV_RHO * (a + b)
    };
    let best =
        history.iter().map(|t| cheb(t.f1, t.cost)).fold(f64::NEG_INFINITY, f64::max);

    let mut best_cand: Option<LengthConfig> = None;
    let mut best_ei = f64::NEG_INFINITY;
    for _ in 0..CANDIDATE_POOL {
        let cand = sample_uniform_with(space, rng);
        let z = normalize(space, cand.lengths());
        let (mf, sf) = gp_f1.predict(&z);
        let (mc, sc) = gp_cost.predict(&z);
        let mean_s = cheb(mf, mc);
        // propagate per-objective posterior spread through the (linear up to
        // the min) scalarization on normalized scales
        let std_s =
            ((w_f1 * sf / f1_range).powi(2) + (w_cost * sc / c_range).powi(2)).sqrt();
        let ei = expected_improvement(mean_s, std_s, best);
        if ei > best_ei {
            best_ei = ei;
            best_cand = Some(cand);
        }
    }
    Ok(best_cand.expect("non-empty candidate pool"))
}

/// GP-surrogate proposal: independent posteriors per objective, random-weight
/// Chebyshev scalarization, expected improvement argmax over a 512-candidate
/// valid pool. Empty history falls back to a uniform sample.
pub fn bayesian_suggest(
    history: &[TrialRecord],
    space: &SearchSpace,
    seed: u64,
) -> Result<LengthConfig, HpoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    suggest_with(history, space, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Evolutionary,
    Bayesian,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::Evolutionary => "evolutionary",
            Strategy::Bayesian => "bayesian",
        })
    }
}

impl FromStr for Strategy {
    type Err = HpoError;

    fn from_str(s: &str) -> Result<Strategy, HpoError> {
        match s {
            "random" => Ok(Strategy::Random),
            "evolutionary" => Ok(Strategy::Evolutionary),
            "bayesian" => Ok(Strategy::Bayesian),
            other => Err(HpoError::UnknownStrategy { name: other.to_string() }),
        }
    }
}

/// Parallel evaluator cap from LENOPT_THREADS; defaults to 1 (sequential).
pub fn thread_cap() -> usize {
    std::env::var("LENOPT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
        .min(64)
}

pub struct SearchResult {
    pub archive: ParetoArchive,
    pub trials: Vec<TrialRecord>,
}

/// Runs exactly `budget` objective evaluations under the given strategy.
///
/// Configs for a batch are drawn sequentially from the seed-derived stream
/// (Bayesian batches impute in-flight results by constant-liar means), then
/// evaluated, possibly in parallel up to the LENOPT_THREADS cap. The trial
/// log preserves dispatch order, so a run is deterministic for a fixed
/// (strategy, seed, thread cap).
pub fn run_search(
    strategy: Strategy,
    budget: usize,
    objective: &(dyn Fn(&LengthConfig) -> (f64, f64) + Sync),
    space: &SearchSpace,
    seed: u64,
) -> Result<SearchResult, HpoError> {
    if budget == 0 {
        return Err(HpoError::BadParameter { what: "budget", value: 0.0 });
    }
    if !space.feasible() {
        return Err(HpoError::InfeasibleSpace { lower: space.lower, upper: space.upper });
    }
    let threads = thread_cap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials: Vec<TrialRecord> = Vec::with_capacity(budget);
    let mut archive = ParetoArchive::new();

    while trials.len() < budget {
        let k = threads.min(budget - trials.len());
        let mut batch: Vec<LengthConfig> = Vec::with_capacity(k);
        match strategy {
            Strategy::Random => {
                for _ in 0..k {
                    batch.push(sample_uniform_with(space, &mut rng));
                }
            }
            Strategy::Evolutionary => {
                for _ in 0..k {
                    // immigrants keep coverage when the early front is a
                    // single corner point
                    if archive.is_empty() || rng.gen_bool(IMMIGRANT_RATE) {
                        batch.push(sample_uniform_with(space, &mut rng));
                    } else {
                        batch.push(evolve_with(archive.points(), space, MUTATION_RATE, &mut rng)?);
                    }
                }
            }
            Strategy::Bayesian => {
                let mut lied = trials.clone();
                let lie = if trials.is_empty() {
                    (0.0, 0.0)
                } else {
                    let n = trials.len() as f64;
                    (
                        trials.iter().map(|t| t.f1).sum::<f64>() / n,
                        trials.iter().map(|t| t.cost).sum::<f64>() / n,
                    )
                };
                for _ in 0..k {
                    let cand = suggest_with(&lied, space, &mut rng)?;
                    lied.push(TrialRecord {
                        config: cand.clone(),
                        f1: lie.0,
                        cost: lie.1,
                        trial_index: lied.len(),
                        strategy_tag: "liar".to_string(),
                    });
                    batch.push(cand);
                }
            }
        }

        let results: Vec<(f64, f64)> = if k == 1 {
            batch.iter().map(|c| objective(c)).collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> =
                    batch.iter().map(|c| scope.spawn(move || objective(c))).collect();
                handles.into_iter().map(|h| h.join().expect("objective panicked")).collect()
            })
        };

        for (config, (f1, cost)) in batch.into_iter().zip(results) {
            let rec = TrialRecord {
                config,
                f1,
                cost,
                trial_index: trials.len(),
                strategy_tag: strategy.to_string(),
            };
            archive.update(rec.clone());
            trials.push(rec);
        }
    }
    Ok(SearchResult { archive, trials })
}
