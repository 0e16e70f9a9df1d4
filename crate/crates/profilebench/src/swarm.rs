//! Particle swarm optimization over reaction-network rate constants.
//!
//! The velocity update uses normalized coefficients: the three configured
//! weights (inertia, particle best, global best) are divided by their sum,
//! which keeps the published weight tables (inertias up to 10) bounded while
//! preserving their relative influence. Search runs in log10-parameter space
//! so rate constants spanning orders of magnitude are explored evenly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rankvec::{self, Direction, RankingVector};
use crate::reaction::{
    moment_cost, sample_population, MomentSummary, PopulationSimulator, PopulationSpec,
    ReactionNetwork,
};
use crate::seeds;

/// One weight configuration for the velocity update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmConfig {
    pub label: String,
    pub particle_best_weight: f64,
    pub global_best_weight: f64,
    pub inertia: f64,
}

impl SwarmConfig {
    pub fn new(label: &str, particle_best: f64, global_best: f64, inertia: f64) -> Self {
        SwarmConfig {
            label: label.to_string(),
            particle_best_weight: particle_best,
            global_best_weight: global_best,
            inertia,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("particle_best_weight", self.particle_best_weight),
            ("global_best_weight", self.global_best_weight),
            ("inertia", self.inertia),
        ] {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::invalid(format!(
                    "swarm config `{}`: {name} must be positive, got {w}",
                    self.label
                )));
            }
        }
        Ok(())
    }

    /// `(inertia', particle_best', global_best')`, each weight divided by
    /// the sum of the three. The normalized coefficients sum to 1.
    pub fn normalized(&self) -> (f64, f64, f64) {
        let sum = self.inertia + self.particle_best_weight + self.global_best_weight;
        (self.inertia / sum, self.particle_best_weight / sum, self.global_best_weight / sum)
    }

    /// The five published weight configurations A-E.
    pub fn standard_set() -> Vec<SwarmConfig> {
        vec![
            SwarmConfig::new("A", 3.0, 1.0, 6.0),
            SwarmConfig::new("B", 4.0, 2.0, 5.0),
            SwarmConfig::new("C", 5.0, 3.0, 4.0),
            SwarmConfig::new("D", 5.0, 2.0, 10.0),
            SwarmConfig::new("E", 3.0, 4.0, 3.0),
        ]
    }
}

/// Outcome of one swarm run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmResult {
    pub best_theta: Vec<f64>,
    pub best_cost: f64,
    /// Global-best cost after each epoch; non-increasing, last = `best_cost`.
    pub cost_history: Vec<f64>,
    pub seed: u64,
    /// Best cost over the initial particle placement.
    pub initial_best_cost: f64,
    /// Mean cost of the initial placement over finite evaluations (stiff
    /// guesses that diverge evaluate to +inf and are excluded).
    pub initial_mean_cost: f64,
}

/// Canonical velocity/position PSO with normalized coefficients.
///
/// Per particle and dimension: `v <- w'*v + c1'*r1*(pbest - x) + c2'*r2*(gbest - x)`,
/// then `x <- x + v`, with positions clamped to the bounds and velocities to
/// half the per-dimension search range. The global best updates synchronously
/// once per epoch. Non-finite cost evaluations count as +inf and are never
/// selected. Deterministic given the seed.
pub fn pso_run<F>(
    mut cost: F,
    dim: usize,
    bounds: &[(f64, f64)],
    config: &SwarmConfig,
    particles: usize,
    epochs: usize,
    seed: u64,
) -> Result<SwarmResult>
where
    F: FnMut(&[f64]) -> f64,
{
    config.validate()?;
    if dim == 0 {
        return Err(Error::invalid("pso_run: dim must be at least 1"));
    }
    if bounds.len() != dim {
        return Err(Error::ShapeMismatch(format!(
            "pso_run: {} bounds for {} dimensions",
            bounds.len(),
            dim
        )));
    }
    for &(low, high) in bounds {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(Error::invalid(format!("pso_run: invalid bound ({low}, {high})")));
        }
    }
    if particles < 2 {
        return Err(Error::invalid("pso_run: need at least 2 particles"));
    }
    if epochs == 0 {
        return Err(Error::invalid("pso_run: need at least 1 epoch"));
    }

    let sanitize = |c: f64| if c.is_finite() { c } else { f64::INFINITY };
    let vmax: Vec<f64> = bounds.iter().map(|(low, high)| 0.5 * (high - low)).collect();
    let (w_inertia, w_pbest, w_gbest) = config.normalized();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut positions = vec![vec![0.0f64; dim]; particles];
    let mut velocities = vec![vec![0.0f64; dim]; particles];
    for position in positions.iter_mut() {
        for (d, slot) in position.iter_mut().enumerate() {
            let (low, high) = bounds[d];
            *slot = low + rng.random::<f64>() * (high - low);
        }
    }
    for velocity in velocities.iter_mut() {
        for (d, slot) in velocity.iter_mut().enumerate() {
            *slot = (2.0 * rng.random::<f64>() - 1.0) * vmax[d];
        }
    }

    let mut pbest = positions.clone();
    let mut pbest_cost: Vec<f64> = positions.iter().map(|x| sanitize(cost(x))).collect();
    let finite: Vec<f64> = pbest_cost.iter().copied().filter(|c| c.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::AllInfiniteSwarm);
    }
    let initial_mean_cost = finite.iter().sum::<f64>() / finite.len() as f64;

    let mut gbest_idx = 0;
    for (i, &c) in pbest_cost.iter().enumerate() {
        if c < pbest_cost[gbest_idx] {
            gbest_idx = i;
        }
    }
    let mut gbest = pbest[gbest_idx].clone();
    let mut gbest_cost = pbest_cost[gbest_idx];
    let initial_best_cost = gbest_cost;

    let mut cost_history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        for i in 0..particles {
            for d in 0..dim {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let v = w_inertia * velocities[i][d]
                    + w_pbest * r1 * (pbest[i][d] - positions[i][d])
                    + w_gbest * r2 * (gbest[d] - positions[i][d]);
                velocities[i][d] = v.clamp(-vmax[d], vmax[d]);
                let (low, high) = bounds[d];
                positions[i][d] = (positions[i][d] + velocities[i][d]).clamp(low, high);
            }
            let c = sanitize(cost(&positions[i]));
            if c < pbest_cost[i] {
                pbest_cost[i] = c;
                pbest[i].copy_from_slice(&positions[i]);
            }
        }
        for i in 0..particles {
            if pbest_cost[i] < gbest_cost {
                gbest_cost = pbest_cost[i];
                gbest.copy_from_slice(&pbest[i]);
            }
        }
        cost_history.push(gbest_cost);
    }

    Ok(SwarmResult {
        best_theta: gbest,
        best_cost: gbest_cost,
        cost_history,
        seed,
        initial_best_cost,
        initial_mean_cost,
    })
}

/// Knobs for [`estimate_parameters`]; the defaults match the standardized
/// protocol (200 particles, 20 epochs, log10 bounds [-3, 3]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub particles: usize,
    pub epochs: usize,
    pub log10_low: f64,
    pub log10_high: f64,
    /// RK4 step for the objective; `None` means `t_max / 100`.
    pub step: Option<f64>,
    /// Seed for the simulated cell population. `None` reuses the run seed;
    /// pinning it to the seed that generated the observed data makes the
    /// objective deterministic across runs, with cost 0 at the true theta.
    pub population_seed: Option<u64>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            particles: 200,
            epochs: 20,
            log10_low: -3.0,
            log10_high: 3.0,
            step: None,
            population_seed: None,
        }
    }
}

impl EstimateOptions {
    pub fn objective_step(&self, times: &[f64]) -> f64 {
        self.step.unwrap_or_else(|| times.last().copied().unwrap_or(1.0) / 100.0)
    }
}

fn check_observed(
    network: &ReactionNetwork,
    observed: &MomentSummary,
    population: &PopulationSpec,
) -> Result<()> {
    if observed.n_species != network.species.len() {
        return Err(Error::ShapeMismatch(format!(
            "observed data has {} species, network has {}",
            observed.n_species,
            network.species.len()
        )));
    }
    if observed.points.len() != population.times.len() {
        return Err(Error::ShapeMismatch(format!(
            "observed data has {} time points, population spec has {}",
            observed.points.len(),
            population.times.len()
        )));
    }
    Ok(())
}

/// The estimation objective at one parameter point: moment mismatch between
/// `observed` and the population drawn with `population_seed` evolved under
/// `theta` (linear space).
pub fn objective_cost(
    network: &ReactionNetwork,
    observed: &MomentSummary,
    population: &PopulationSpec,
    population_seed: u64,
    theta: &[f64],
    step: f64,
) -> Result<f64> {
    check_observed(network, observed, population)?;
    let cells = sample_population(population, population_seed)?;
    let mut sim = PopulationSimulator::new(network)?;
    let simulated = sim.moments(theta, &cells, &population.times, step)?;
    moment_cost(observed, &simulated)
}

/// Estimate rate constants by moment matching.
///
/// The cell population is drawn once (from `opts.population_seed`, or the
/// run seed when unset); the swarm searches log10-parameter space with a
/// stream derived from the run seed and the best estimate is returned in
/// linear space. Divergent integrations evaluate to +inf.
pub fn estimate_parameters(
    network: &ReactionNetwork,
    observed: &MomentSummary,
    population: &PopulationSpec,
    config: &SwarmConfig,
    opts: &EstimateOptions,
    seed: u64,
) -> Result<SwarmResult> {
    check_observed(network, observed, population)?;
    let cells = sample_population(population, opts.population_seed.unwrap_or(seed))?;
    let mut sim = PopulationSimulator::new(network)?;
    let step = opts.objective_step(&population.times);
    let n_params = network.n_params;
    let mut theta_lin = vec![0.0; n_params];

    let cost = |log_theta: &[f64]| -> f64 {
        for (lin, log) in theta_lin.iter_mut().zip(log_theta) {
            *lin = 10f64.powf(*log);
        }
        match sim.moments(&theta_lin, &cells, &population.times, step) {
            Ok(simulated) => moment_cost(observed, &simulated).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        }
    };

    let bounds = vec![(opts.log10_low, opts.log10_high); n_params];
    let swarm_seed = seeds::derive_seed(seed, "swarm");
    let mut result =
        pso_run(cost, n_params, &bounds, config, opts.particles, opts.epochs, swarm_seed)?;
    for value in result.best_theta.iter_mut() {
        *value = 10f64.powf(*value);
    }
    result.seed = seed;
    Ok(result)
}

/// One dataset for the replicate study: a network, its observed moments, and
/// the population the estimates are simulated from. The population seed pins
/// the simulated cells so every replicate faces the same objective.
#[derive(Debug, Clone)]
pub struct EstimationDataset {
    pub id: String,
    pub network: ReactionNetwork,
    pub observed: MomentSummary,
    pub population: PopulationSpec,
    pub population_seed: u64,
}

/// Per-configuration aggregate over the replicates of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigAggregate {
    pub label: String,
    pub mean_cost: f64,
    /// Mean over parameters of the std of final estimates across runs.
    pub avg_std_dev: f64,
    pub cost_rank: usize,
    pub spread_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub dataset_id: String,
    pub configs: Vec<ConfigAggregate>,
    pub cost_ranking: RankingVector,
    pub spread_ranking: RankingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingDistanceRow {
    pub metric: String,
    pub dataset_a: String,
    pub dataset_b: String,
    pub euclidean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub reports: Vec<ReplicateReport>,
    pub distances: Vec<RankingDistanceRow>,
}

/// Run every configuration `runs` times against every dataset, rank
/// configurations per dataset by mean cost and by estimate spread (rank 1 =
/// smallest), and compute cross-dataset Euclidean distances of the ranking
/// vectors.
///
/// Replicate r of config c on dataset d uses the seed
/// `fnv1a(base_seed, c.label, d.id, r)`, so results do not depend on
/// execution order.
pub fn replicate_study(
    configs: &[SwarmConfig],
    datasets: &[EstimationDataset],
    runs: usize,
    base_seed: u64,
    opts: &EstimateOptions,
) -> Result<StudyReport> {
    if configs.len() < 2 {
        return Err(Error::invalid("replicate_study: need at least 2 configurations"));
    }
    if runs == 0 {
        return Err(Error::invalid("replicate_study: need at least 1 run"));
    }
    if datasets.is_empty() {
        return Err(Error::invalid("replicate_study: no datasets"));
    }
    let labels: Vec<String> = configs.iter().map(|c| c.label.clone()).collect();
    for (i, label) in labels.iter().enumerate() {
        if labels[..i].contains(label) {
            return Err(Error::DuplicateModel { model: label.clone() });
        }
    }

    let tasks: Vec<(usize, usize, usize)> = (0..datasets.len())
        .flat_map(|d| {
            (0..configs.len()).flat_map(move |c| (0..runs).map(move |r| (d, c, r)))
        })
        .collect();
    let results: Vec<SwarmResult> = tasks
        .par_iter()
        .map(|&(d, c, r)| {
            let dataset = &datasets[d];
            let config = &configs[c];
            let seed = seeds::replicate_seed(base_seed, &config.label, &dataset.id, r);
            let run_opts =
                EstimateOptions { population_seed: Some(dataset.population_seed), ..opts.clone() };
            estimate_parameters(
                &dataset.network,
                &dataset.observed,
                &dataset.population,
                config,
                &run_opts,
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::with_capacity(datasets.len());
    for (d, dataset) in datasets.iter().enumerate() {
        let mut aggregates = Vec::with_capacity(configs.len());
        for (c, config) in configs.iter().enumerate() {
            let slice: Vec<&SwarmResult> = (0..runs)
                .map(|r| &results[(d * configs.len() + c) * runs + r])
                .collect();
            let mean_cost =
                slice.iter().map(|res| res.best_cost).sum::<f64>() / runs as f64;
            let n_params = dataset.network.n_params;
            let mut spread_sum = 0.0;
            for p in 0..n_params {
                let mean =
                    slice.iter().map(|res| res.best_theta[p]).sum::<f64>() / runs as f64;
                let var = slice
                    .iter()
                    .map(|res| {
                        let d = res.best_theta[p] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / runs as f64;
                spread_sum += var.sqrt();
            }
            let avg_std_dev = spread_sum / n_params as f64;
            aggregates.push(ConfigAggregate {
                label: config.label.clone(),
                mean_cost,
                avg_std_dev,
                cost_rank: 0,
                spread_rank: 0,
            });
        }
        let cost_values: Vec<(String, f64)> =
            aggregates.iter().map(|a| (a.label.clone(), a.mean_cost)).collect();
        let spread_values: Vec<(String, f64)> =
            aggregates.iter().map(|a| (a.label.clone(), a.avg_std_dev)).collect();
        let cost_ranks = rankvec::rank_models(&labels, &cost_values, Direction::Ascending)?;
        let spread_ranks = rankvec::rank_models(&labels, &spread_values, Direction::Ascending)?;
        for (i, aggregate) in aggregates.iter_mut().enumerate() {
            aggregate.cost_rank = cost_ranks[i];
            aggregate.spread_rank = spread_ranks[i];
        }
        reports.push(ReplicateReport {
            dataset_id: dataset.id.clone(),
            configs: aggregates,
            cost_ranking: RankingVector {
                dataset_id: dataset.id.clone(),
                metric_id: "cost".into(),
                ranks: cost_ranks,
            },
            spread_ranking: RankingVector {
                dataset_id: dataset.id.clone(),
                metric_id: "spread".into(),
                ranks: spread_ranks,
            },
        });
    }

    let mut distances = Vec::new();
    for i in 0..reports.len() {
        for j in (i + 1)..reports.len() {
            distances.push(RankingDistanceRow {
                metric: "cost".into(),
                dataset_a: reports[i].dataset_id.clone(),
                dataset_b: reports[j].dataset_id.clone(),
                euclidean: rankvec::euclidean_distance(
                    &reports[i].cost_ranking,
                    &reports[j].cost_ranking,
                )?,
            });
            distances.push(RankingDistanceRow {
                metric: "spread".into(),
                dataset_a: reports[i].dataset_id.clone(),
                dataset_b: reports[j].dataset_id.clone(),
                euclidean: rankvec::euclidean_distance(
                    &reports[i].spread_ranking,
                    &reports[j].spread_ranking,
                )?,
            });
        }
    }
    Ok(StudyReport { reports, distances })
}
