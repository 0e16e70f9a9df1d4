//! Mass-action ODE reaction networks and population moment summaries.
//!
//! A network is a list of reactions, each tied to one rate constant from the
//! parameter vector theta. A cell population is drawn from a multivariate
//! lognormal, every cell evolved with fixed-step RK4 to the requested time
//! points, and the population's means, variances, and covariances summarize
//! each time point. The squared difference between two such summaries is the
//! estimation objective used by the swarm module.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One reaction: reactant/product stoichiometries by species name and the
/// index of its rate constant in theta.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reaction {
    pub reactants: BTreeMap<String, u32>,
    pub products: BTreeMap<String, u32>,
    pub theta_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReactionNetwork {
    pub species: Vec<String>,
    pub reactions: Vec<Reaction>,
    pub n_params: usize,
}

impl ReactionNetwork {
    /// Reversible binding A + B <-> C; theta[0] forward, theta[1] reverse.
    pub fn reversible_binding() -> Self {
        let one = |name: &str| BTreeMap::from([(name.to_string(), 1u32)]);
        let a_and_b = BTreeMap::from([("A".to_string(), 1u32), ("B".to_string(), 1u32)]);
        ReactionNetwork {
            species: vec!["A".into(), "B".into(), "C".into()],
            reactions: vec![
                Reaction { reactants: a_and_b.clone(), products: one("C"), theta_index: 0 },
                Reaction { reactants: one("C"), products: a_and_b, theta_index: 1 },
            ],
            n_params: 2,
        }
    }

    /// Linear cascade A -> B -> C; theta[0] and theta[1] are the step rates.
    pub fn linear_cascade() -> Self {
        let one = |name: &str| BTreeMap::from([(name.to_string(), 1u32)]);
        ReactionNetwork {
            species: vec!["A".into(), "B".into(), "C".into()],
            reactions: vec![
                Reaction { reactants: one("A"), products: one("B"), theta_index: 0 },
                Reaction { reactants: one("B"), products: one("C"), theta_index: 1 },
            ],
            n_params: 2,
        }
    }

    /// Look up a built-in network by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "binding" => Some(Self::reversible_binding()),
            "cascade" => Some(Self::linear_cascade()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.species.is_empty() {
            return Err(Error::invalid("network has no species"));
        }
        for reaction in &self.reactions {
            if reaction.theta_index >= self.n_params {
                return Err(Error::invalid(format!(
                    "theta index {} out of range (n_params = {})",
                    reaction.theta_index, self.n_params
                )));
            }
            for name in reaction.reactants.keys().chain(reaction.products.keys()) {
                if !self.species.contains(name) {
                    return Err(Error::invalid(format!("unknown species `{name}` in reaction")));
                }
            }
        }
        Ok(())
    }

    /// Mass-action time derivative: each reaction contributes
    /// `rate = theta[i] * prod(state[s]^stoich[s])`, and the derivative of a
    /// species is the sum of `(products - reactants) * rate` over reactions.
    pub fn derivatives(&self, state: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let sim = Simulator::new(self)?;
        sim.check_theta(theta)?;
        if state.len() != self.species.len() {
            return Err(Error::ShapeMismatch(format!(
                "state has {} entries, network has {} species",
                state.len(),
                self.species.len()
            )));
        }
        let mut out = vec![0.0; state.len()];
        sim.compiled_derivatives(state, theta, &mut out);
        Ok(out)
    }

    /// Default RK4 step size for a trajectory ending at `t_max`.
    pub fn default_step(t_max: f64) -> f64 {
        t_max / 1000.0
    }
}

struct CompiledReaction {
    theta_index: usize,
    reactant_orders: Vec<(usize, u32)>,
    net_change: Vec<(usize, f64)>,
}

/// Reusable integrator for one network; holds the RK4 scratch buffers so the
/// per-step cost stays allocation-free when sweeping many parameter guesses.
pub struct Simulator {
    n_species: usize,
    reactions: Vec<CompiledReaction>,
    n_params: usize,
    y: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl Simulator {
    pub fn new(network: &ReactionNetwork) -> Result<Self> {
        network.validate()?;
        let index_of = |name: &String| network.species.iter().position(|s| s == name).unwrap();
        let mut reactions = Vec::with_capacity(network.reactions.len());
        for reaction in &network.reactions {
            let reactant_orders: Vec<(usize, u32)> =
                reaction.reactants.iter().map(|(s, &k)| (index_of(s), k)).collect();
            let mut delta: BTreeMap<usize, f64> = BTreeMap::new();
            for (s, &k) in &reaction.reactants {
                *delta.entry(index_of(s)).or_insert(0.0) -= f64::from(k);
            }
            for (s, &k) in &reaction.products {
                *delta.entry(index_of(s)).or_insert(0.0) += f64::from(k);
            }
            let net_change: Vec<(usize, f64)> =
                delta.into_iter().filter(|(_, d)| *d != 0.0).collect();
            reactions.push(CompiledReaction {
                theta_index: reaction.theta_index,
                reactant_orders,
                net_change,
            });
        }
        let n = network.species.len();
        Ok(Simulator {
            n_species: n,
            reactions,
            n_params: network.n_params,
            y: vec![0.0; n],
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            stage: vec![0.0; n],
        })
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params {
            return Err(Error::ShapeMismatch(format!(
                "theta has {} entries, network expects {}",
                theta.len(),
                self.n_params
            )));
        }
        if let Some(bad) = theta.iter().find(|t| **t < 0.0 || !t.is_finite()) {
            return Err(Error::invalid(format!("rate constants must be nonnegative, got {bad}")));
        }
        Ok(())
    }

    fn compiled_derivatives(&self, state: &[f64], theta: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for reaction in &self.reactions {
            let mut rate = theta[reaction.theta_index];
            for &(idx, order) in &reaction.reactant_orders {
                let v = state[idx];
                rate *= match order {
                    1 => v,
                    2 => v * v,
                    _ => v.powi(order as i32),
                };
            }
            for &(idx, delta) in &reaction.net_change {
                out[idx] += delta * rate;
            }
        }
    }

    fn rk4_step(&mut self, theta: &[f64], h: f64) {
        let n = self.n_species;
        let (y, k1, k2, k3, k4, stage) =
            (&mut self.y, &mut self.k1, &mut self.k2, &mut self.k3, &mut self.k4, &mut self.stage);

        derivatives_of(&self.reactions, y, theta, k1);
        for i in 0..n {
            stage[i] = y[i] + 0.5 * h * k1[i];
        }
        derivatives_of(&self.reactions, stage, theta, k2);
        for i in 0..n {
            stage[i] = y[i] + 0.5 * h * k2[i];
        }
        derivatives_of(&self.reactions, stage, theta, k3);
        for i in 0..n {
            stage[i] = y[i] + h * k3[i];
        }
        derivatives_of(&self.reactions, stage, theta, k4);
        for i in 0..n {
            let next = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            // Abundances are physical; clamping prevents spurious blowups
            // for stiff parameter guesses.
            y[i] = if next < 0.0 { 0.0 } else { next };
        }
    }

    /// Integrate from t = 0, writing the state at each requested time into
    /// consecutive rows of `out` (length `times.len() * n_species`).
    pub fn run_into(
        &mut self,
        theta: &[f64],
        initial: &[f64],
        times: &[f64],
        step: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_theta(theta)?;
        check_times(times)?;
        if !(step > 0.0) {
            return Err(Error::invalid(format!("step must be positive, got {step}")));
        }
        if initial.len() != self.n_species {
            return Err(Error::ShapeMismatch(format!(
                "initial state has {} entries, network has {} species",
                initial.len(),
                self.n_species
            )));
        }
        if let Some(bad) = initial.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid(format!("initial abundances must be nonnegative, got {bad}")));
        }
        assert_eq!(out.len(), times.len() * self.n_species);

        self.y.copy_from_slice(initial);
        let mut t = 0.0;
        for (row, &target) in times.iter().enumerate() {
            let span = target - t;
            if span > 0.0 {
                let n_full = (span / step).floor() as u64;
                for _ in 0..n_full {
                    self.rk4_step(theta, step);
                }
                let remainder = span - n_full as f64 * step;
                if remainder > step * 1e-12 {
                    self.rk4_step(theta, remainder);
                }
                t = target;
                if self.y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { time: t });
                }
            }
            out[row * self.n_species..(row + 1) * self.n_species].copy_from_slice(&self.y);
        }
        Ok(())
    }
}

// Free function so rk4_step can borrow y and a k-buffer simultaneously.
fn derivatives_of(reactions: &[CompiledReaction], state: &[f64], theta: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for reaction in reactions {
        let mut rate = theta[reaction.theta_index];
        for &(idx, order) in &reaction.reactant_orders {
            let v = state[idx];
            rate *= match order {
                1 => v,
                2 => v * v,
                _ => v.powi(order as i32),
            };
        }
        for &(idx, delta) in &reaction.net_change {
            out[idx] += delta * rate;
        }
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::invalid("no time points requested"));
    }
    if times[0] < 0.0 {
        return Err(Error::invalid("time points must be nonnegative"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("time points must be strictly increasing"));
    }
    Ok(())
}

/// Fixed-step classical RK4 from t = 0, one output row per requested time.
pub fn integrate(
    network: &ReactionNetwork,
    theta: &[f64],
    initial_state: &[f64],
    times: &[f64],
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut sim = Simulator::new(network)?;
    let mut flat = vec![0.0; times.len() * sim.n_species()];
    sim.run_into(theta, initial_state, times, step, &mut flat)?;
    Ok(flat.chunks_exact(sim.n_species()).map(|row| row.to_vec()).collect())
}

/// Row-major matrix of per-cell states (one row per cell).
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix {
    n_species: usize,
    data: Vec<f64>,
}

impl StateMatrix {
    pub fn zeros(n_rows: usize, n_species: usize) -> Self {
        StateMatrix { n_species, data: vec![0.0; n_rows * n_species] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_species = rows.first().map(|r| r.len()).ok_or_else(|| {
            Error::invalid("state matrix needs at least one row")
        })?;
        let mut data = Vec::with_capacity(rows.len() * n_species);
        for row in rows {
            if row.len() != n_species {
                return Err(Error::ShapeMismatch("ragged state matrix".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(StateMatrix { n_species, data })
    }

    pub fn n_rows(&self) -> usize {
        if self.n_species == 0 { 0 } else { self.data.len() / self.n_species }
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_species..(i + 1) * self.n_species]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_species..(i + 1) * self.n_species]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_species)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Initial-condition distribution and observation times for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    /// Per-species mean of the log abundances.
    pub log_mean: Vec<f64>,
    /// Covariance of the log abundances; symmetric positive semi-definite.
    pub log_cov: Vec<Vec<f64>>,
    pub n_cells: usize,
    /// Observation times in minutes, strictly increasing.
    pub times: Vec<f64>,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.log_mean.len();
        if n == 0 {
            return Err(Error::invalid("population spec has no species"));
        }
        if self.log_cov.len() != n || self.log_cov.iter().any(|row| row.len() != n) {
            return Err(Error::ShapeMismatch(format!("log_cov must be {n}x{n}")));
        }
        let scale = 1.0
            + self
                .log_cov
                .iter()
                .enumerate()
                .map(|(i, row)| row[i].abs())
                .fold(0.0f64, f64::max);
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.log_cov[i][j] - self.log_cov[j][i]).abs() > 1e-9 * scale {
                    return Err(Error::invalid("log_cov is not symmetric"));
                }
            }
        }
        if self.n_cells == 0 {
            return Err(Error::invalid("n_cells must be positive"));
        }
        check_times(&self.times)?;
        psd_cholesky(&self.log_cov)?;
        Ok(())
    }
}

/// Cholesky factor of a positive semi-definite matrix, tolerating zero (or
/// numerically tiny) pivots so degenerate covariances sample exactly.
fn psd_cholesky(matrix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = matrix.len();
    let scale = 1.0 + matrix.iter().enumerate().map(|(i, r)| r[i].abs()).fold(0.0f64, f64::max);
    let tol = 1e-10 * scale;
    let mut lower = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut diag = matrix[j][j];
        for k in 0..j {
            diag -= lower[j][k] * lower[j][k];
        }
        if diag < -tol {
            return Err(Error::NotPositiveSemiDefinite { row: j, pivot: diag });
        }
        let pivot = if diag > tol { diag.sqrt() } else { 0.0 };
        lower[j][j] = pivot;
        for i in (j + 1)..n {
            if pivot == 0.0 {
                lower[i][j] = 0.0;
                continue;
            }
            let mut value = matrix[i][j];
            for k in 0..j {
                value -= lower[i][k] * lower[j][k];
            }
            lower[i][j] = value / pivot;
        }
    }
    Ok(lower)
}

/// Draw the initial-state matrix: `exp` of multivariate normal draws in log
/// space via the Cholesky factor. Deterministic given the seed.
pub fn sample_population(spec: &PopulationSpec, seed: u64) -> Result<StateMatrix> {
    spec.validate()?;
    let n = spec.log_mean.len();
    let lower = psd_cholesky(&spec.log_cov)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut cells = StateMatrix::zeros(spec.n_cells, n);
    let mut z = vec![0.0; n];
    for cell in 0..spec.n_cells {
        for slot in z.iter_mut() {
            *slot = StandardNormal.sample(&mut rng);
        }
        let row = cells.row_mut(cell);
        for i in 0..n {
            let mut log_value = spec.log_mean[i];
            for (k, &zk) in z.iter().enumerate().take(i + 1) {
                log_value += lower[i][k] * zk;
            }
            row[i] = log_value.exp();
        }
    }
    Ok(cells)
}

/// Population moments per time point: means and variances per species,
/// covariances for species pairs i < j (row-major upper triangle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPoint {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub covariances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub n_species: usize,
    pub points: Vec<MomentPoint>,
}

impl MomentSummary {
    pub fn validate(&self) -> Result<()> {
        let pairs = self.n_species * self.n_species.saturating_sub(1) / 2;
        for point in &self.points {
            if point.means.len() != self.n_species
                || point.variances.len() != self.n_species
                || point.covariances.len() != pairs
            {
                return Err(Error::ShapeMismatch("moment point sizes disagree".into()));
            }
            if point.variances.iter().any(|v| *v < 0.0) {
                return Err(Error::invalid("negative variance in moment summary"));
            }
            let mut k = 0;
            for i in 0..self.n_species {
                for j in (i + 1)..self.n_species {
                    let bound = (point.variances[i] * point.variances[j]).sqrt() + 1e-9;
                    if point.covariances[k].abs() > bound {
                        return Err(Error::invalid(format!(
                            "covariance ({i},{j}) violates the Cauchy-Schwarz bound"
                        )));
                    }
                    k += 1;
                }
            }
        }
        Ok(())
    }

    fn same_shape(&self, other: &MomentSummary) -> bool {
        self.n_species == other.n_species && self.points.len() == other.points.len()
    }
}

/// Population moments (divide by n) of each per-time state matrix.
pub fn compute_moments(states_per_time: &[StateMatrix]) -> Result<MomentSummary> {
    let first = states_per_time
        .first()
        .ok_or_else(|| Error::invalid("compute_moments: no time points"))?;
    let n_species = first.n_species();
    let mut points = Vec::with_capacity(states_per_time.len());
    for matrix in states_per_time {
        if matrix.n_species() != n_species {
            return Err(Error::ShapeMismatch("state matrices have differing species".into()));
        }
        let n_rows = matrix.n_rows();
        if n_rows == 0 {
            return Err(Error::invalid("compute_moments: empty state matrix"));
        }
        let inv_n = 1.0 / n_rows as f64;
        let mut means = vec![0.0; n_species];
        for row in matrix.rows() {
            for (m, &v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in means.iter_mut() {
            *m *= inv_n;
        }
        let mut variances = vec![0.0; n_species];
        let mut covariances = vec![0.0; n_species * (n_species - 1) / 2];
        for row in matrix.rows() {
            for i in 0..n_species {
                let di = row[i] - means[i];
                variances[i] += di * di;
            }
            let mut k = 0;
            for i in 0..n_species {
                let di = row[i] - means[i];
                for j in (i + 1)..n_species {
                    covariances[k] += di * (row[j] - means[j]);
                    k += 1;
                }
            }
        }
        for v in variances.iter_mut() {
            *v *= inv_n;
        }
        for c in covariances.iter_mut() {
            *c *= inv_n;
        }
        points.push(MomentPoint { means, variances, covariances });
    }
    Ok(MomentSummary { n_species, points })
}

/// Moment-matching objective: the summed squared difference of means,
/// variances, and covariances over all time points.
pub fn moment_cost(observed: &MomentSummary, simulated: &MomentSummary) -> Result<f64> {
    if !observed.same_shape(simulated) {
        return Err(Error::ShapeMismatch(format!(
            "moment summaries disagree: {} species x {} times vs {} species x {} times",
            observed.n_species,
            observed.points.len(),
            simulated.n_species,
            simulated.points.len()
        )));
    }
    let mut cost = 0.0;
    for (a, b) in observed.points.iter().zip(&simulated.points) {
        for (x, y) in a.means.iter().zip(&b.means) {
            cost += (x - y) * (x - y);
        }
        for (x, y) in a.variances.iter().zip(&b.variances) {
            cost += (x - y) * (x - y);
        }
        for (x, y) in a.covariances.iter().zip(&b.covariances) {
            cost += (x - y) * (x - y);
        }
    }
    Ok(cost)
}

/// Evolves every cell of a population and summarizes the moments at each
/// time point, reusing buffers across calls.
///
/// All cells share one fixed step schedule, so the population advances in
/// lockstep: each RK4 stage is computed for every cell over contiguous
/// buffers. This is the hot path of swarm estimation (hundreds of thousands
/// of objective evaluations), hence the batch layout.
pub struct PopulationSimulator {
    sim: Simulator,
    per_time: Vec<StateMatrix>,
    states: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl PopulationSimulator {
    pub fn new(network: &ReactionNetwork) -> Result<Self> {
        let sim = Simulator::new(network)?;
        Ok(PopulationSimulator {
            sim,
            per_time: Vec::new(),
            states: Vec::new(),
            k1: Vec::new(),
            k2: Vec::new(),
            k3: Vec::new(),
            k4: Vec::new(),
            stage: Vec::new(),
        })
    }

    fn batch_derivatives(&self, use_stage: bool, theta: &[f64], out: &mut [f64]) {
        let n = self.sim.n_species;
        let source = if use_stage { &self.stage } else { &self.states };
        out.fill(0.0);
        for reaction in &self.sim.reactions {
            let k = theta[reaction.theta_index];
            for (state, slot) in source.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                let mut rate = k;
                for &(idx, order) in &reaction.reactant_orders {
                    let v = state[idx];
                    rate *= match order {
                        1 => v,
                        2 => v * v,
                        _ => v.powi(order as i32),
                    };
                }
                for &(idx, delta) in &reaction.net_change {
                    slot[idx] += delta * rate;
                }
            }
        }
    }

    fn batch_rk4_step(&mut self, theta: &[f64], h: f64) {
        let half = 0.5 * h;
        let sixth = h / 6.0;
        let mut k1 = std::mem::take(&mut self.k1);
        let mut k2 = std::mem::take(&mut self.k2);
        let mut k3 = std::mem::take(&mut self.k3);
        let mut k4 = std::mem::take(&mut self.k4);

        self.batch_derivatives(false, theta, &mut k1);
        for ((s, y), k) in self.stage.iter_mut().zip(&self.states).zip(&k1) {
            *s = y + half * k;
        }
        self.batch_derivatives(true, theta, &mut k2);
        for ((s, y), k) in self.stage.iter_mut().zip(&self.states).zip(&k2) {
            *s = y + half * k;
        }
        self.batch_derivatives(true, theta, &mut k3);
        for ((s, y), k) in self.stage.iter_mut().zip(&self.states).zip(&k3) {
            *s = y + h * k;
        }
        self.batch_derivatives(true, theta, &mut k4);
        for (i, y) in self.states.iter_mut().enumerate() {
            let next = *y + sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            *y = if next < 0.0 { 0.0 } else { next };
        }

        self.k1 = k1;
        self.k2 = k2;
        self.k3 = k3;
        self.k4 = k4;
    }

    pub fn moments(
        &mut self,
        theta: &[f64],
        cells: &StateMatrix,
        times: &[f64],
        step: f64,
    ) -> Result<MomentSummary> {
        let n = self.sim.n_species();
        self.sim.check_theta(theta)?;
        check_times(times)?;
        if !(step > 0.0) {
            return Err(Error::invalid(format!("step must be positive, got {step}")));
        }
        if cells.n_species() != n {
            return Err(Error::ShapeMismatch("population species differ from network".into()));
        }
        if let Some(bad) = cells.as_slice().iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid(format!(
                "initial abundances must be nonnegative, got {bad}"
            )));
        }
        let n_rows = cells.n_rows();
        if self.per_time.len() != times.len() || self.per_time[0].n_rows() != n_rows {
            self.per_time = (0..times.len()).map(|_| StateMatrix::zeros(n_rows, n)).collect();
        }
        let len = n_rows * n;
        self.states.clear();
        self.states.extend_from_slice(cells.as_slice());
        for buf in [&mut self.k1, &mut self.k2, &mut self.k3, &mut self.k4, &mut self.stage] {
            buf.resize(len, 0.0);
        }

        let mut t = 0.0;
        for (row, &target) in times.iter().enumerate() {
            let span = target - t;
            if span > 0.0 {
                let n_full = (span / step).floor() as u64;
                for _ in 0..n_full {
                    self.batch_rk4_step(theta, step);
                }
                let remainder = span - n_full as f64 * step;
                if remainder > step * 1e-12 {
                    self.batch_rk4_step(theta, remainder);
                }
                t = target;
                // Non-finite states propagate harmlessly between recording
                // points; the check happens where values are observed.
                if self.states.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { time: t });
                }
            }
            self.per_time[row].data.copy_from_slice(&self.states);
        }
        compute_moments(&self.per_time)
    }
}

/// Observed-data file payload: times plus per-time moment vectors
/// (covariances are the upper triangle, row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedData {
    pub times: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
}

impl ObservedData {
    pub fn from_summary(times: &[f64], summary: &MomentSummary) -> Self {
        ObservedData {
            times: times.to_vec(),
            means: summary.points.iter().map(|p| p.means.clone()).collect(),
            variances: summary.points.iter().map(|p| p.variances.clone()).collect(),
            covariances: summary.points.iter().map(|p| p.covariances.clone()).collect(),
        }
    }

    pub fn to_summary(&self) -> Result<MomentSummary> {
        let n_times = self.times.len();
        check_times(&self.times)?;
        if self.means.len() != n_times
            || self.variances.len() != n_times
            || self.covariances.len() != n_times
        {
            return Err(Error::ShapeMismatch(
                "observed data arrays disagree with the time list".into(),
            ));
        }
        let n_species = self.means.first().map(|m| m.len()).unwrap_or(0);
        let summary = MomentSummary {
            n_species,
            points: (0..n_times)
                .map(|t| MomentPoint {
                    means: self.means[t].clone(),
                    variances: self.variances[t].clone(),
                    covariances: self.covariances[t].clone(),
                })
                .collect(),
        };
        summary.validate()?;
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binding_theta() -> Vec<f64> {
        vec![0.3, 0.2]
    }

    #[test]
    fn first_order_derivative() {
        let network = ReactionNetwork {
            species: vec!["A".into(), "B".into()],
            reactions: vec![Reaction {
                reactants: BTreeMap::from([("A".to_string(), 1)]),
                products: BTreeMap::from([("B".to_string(), 1)]),
                theta_index: 0,
            }],
            n_params: 1,
        };
        let d = network.derivatives(&[2.0, 0.0], &[1.0]).unwrap();
        assert_eq!(d, vec![-2.0, 2.0]);
    }

    #[test]
    fn bimolecular_derivative() {
        let network = ReactionNetwork::reversible_binding();
        // Only the forward reaction fires when C = 0.
        let d = network.derivatives(&[1.0, 2.0, 0.0], &[0.5, 0.0]).unwrap();
        assert_eq!(d, vec![-1.0, -1.0, 1.0]);
    }

    #[test]
    fn zero_state_gives_zero_rates() {
        let network = ReactionNetwork::reversible_binding();
        let d = network.derivatives(&[0.0, 0.0, 0.0], &binding_theta()).unwrap();
        assert_eq!(d, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn negative_theta_is_rejected() {
        let network = ReactionNetwork::linear_cascade();
        assert!(network.derivatives(&[1.0, 0.0, 0.0], &[-0.1, 0.2]).is_err());
    }

    fn decay_network() -> ReactionNetwork {
        ReactionNetwork {
            species: vec!["A".into(), "B".into()],
            reactions: vec![Reaction {
                reactants: BTreeMap::from([("A".to_string(), 1)]),
                products: BTreeMap::from([("B".to_string(), 1)]),
                theta_index: 0,
            }],
            n_params: 1,
        }
    }

    #[test]
    fn integrate_matches_exponential_decay() {
        let network = decay_network();
        let k = 0.7;
        let a0 = 5.0;
        let times = [0.5, 1.0, 2.0];
        let step = 1e-3 * times[2];
        let states = integrate(&network, &[k], &[a0, 0.0], &times, step).unwrap();
        for (state, t) in states.iter().zip(times) {
            let exact = a0 * (-k * t).exp();
            assert!(
                (state[0] - exact).abs() / exact < 1e-6,
                "t = {t}: {} vs {exact}",
                state[0]
            );
        }
    }

    #[test]
    fn zero_theta_keeps_trajectory_constant() {
        let network = ReactionNetwork::reversible_binding();
        let initial = [2.0, 3.0, 1.0];
        let states =
            integrate(&network, &[0.0, 0.0], &initial, &[0.0, 1.0, 2.0], 0.01).unwrap();
        for state in states {
            assert_eq!(state, initial.to_vec());
        }
    }

    #[test]
    fn binding_conserves_linear_combinations() {
        // A + C and B + C are invariant under A + B <-> C.
        let network = ReactionNetwork::reversible_binding();
        let initial = [2.0, 3.0, 0.5];
        let states =
            integrate(&network, &binding_theta(), &initial, &[0.5, 1.0, 5.0], 1e-3).unwrap();
        let a_plus_c = initial[0] + initial[2];
        let b_plus_c = initial[1] + initial[2];
        for state in states {
            assert!((state[0] + state[2] - a_plus_c).abs() < 1e-9);
            assert!((state[1] + state[2] - b_plus_c).abs() < 1e-9);
        }
    }

    #[test]
    fn rk4_error_shrinks_at_fourth_order() {
        let network = decay_network();
        let k = 1.0f64;
        let a0 = 1.0f64;
        let t = 1.0f64;
        let exact = a0 * (-k * t).exp();
        let error_at = |step: f64| {
            let states = integrate(&network, &[k], &[a0, 0.0], &[t], step).unwrap();
            (states[0][0] - exact).abs()
        };
        let steps = [0.1, 0.05, 0.025, 0.0125];
        for pair in steps.windows(2) {
            let ratio = error_at(pair[0]) / error_at(pair[1]);
            assert!(
                (8.0..=32.0).contains(&ratio),
                "error ratio {ratio} outside the fourth-order window"
            );
        }
    }

    #[test]
    fn divergence_is_reported_with_a_time() {
        // A stiff guess under a large fixed step overflows; the error carries
        // the time of failure.
        let network = ReactionNetwork {
            species: vec!["A".into()],
            reactions: vec![Reaction {
                reactants: BTreeMap::from([("A".to_string(), 2)]),
                products: BTreeMap::from([("A".to_string(), 3)]),
                theta_index: 0,
            }],
            n_params: 1,
        };
        let result = integrate(&network, &[1e6], &[10.0], &[1.0, 2.0], 0.5);
        assert!(matches!(result, Err(Error::Divergence { .. })));
    }

    fn small_spec() -> PopulationSpec {
        PopulationSpec {
            log_mean: vec![1.0, 0.5],
            log_cov: vec![vec![0.25, 0.05], vec![0.05, 0.25]],
            n_cells: 10,
            times: vec![0.0, 1.0],
        }
    }

    #[test]
    fn degenerate_population_is_the_pointwise_exp() {
        let spec = PopulationSpec {
            log_mean: vec![1.0, -0.5],
            log_cov: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            n_cells: 5,
            times: vec![0.0, 1.0],
        };
        let cells = sample_population(&spec, 9).unwrap();
        for row in cells.rows() {
            assert_eq!(row, &[1.0f64.exp(), (-0.5f64).exp()]);
        }
    }

    #[test]
    fn sample_mean_of_logs_is_within_the_clt_bound() {
        let sigma = 0.5;
        let spec = PopulationSpec {
            log_mean: vec![1.0, -1.0],
            log_cov: vec![vec![sigma * sigma, 0.0], vec![0.0, sigma * sigma]],
            n_cells: 10_000,
            times: vec![0.0, 1.0],
        };
        let cells = sample_population(&spec, 123).unwrap();
        let bound = 4.0 * sigma / (spec.n_cells as f64).sqrt();
        for (i, target) in spec.log_mean.iter().enumerate() {
            let mean: f64 =
                cells.rows().map(|row| row[i].ln()).sum::<f64>() / spec.n_cells as f64;
            assert!(
                (mean - target).abs() < bound,
                "component {i}: sample mean {mean} vs {target} (bound {bound})"
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let spec = small_spec();
        assert_eq!(sample_population(&spec, 7).unwrap(), sample_population(&spec, 7).unwrap());
        assert_ne!(sample_population(&spec, 7).unwrap(), sample_population(&spec, 8).unwrap());
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let spec = PopulationSpec {
            log_mean: vec![0.0, 0.0],
            log_cov: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
            n_cells: 3,
            times: vec![1.0],
        };
        assert!(matches!(
            sample_population(&spec, 1),
            Err(Error::NotPositiveSemiDefinite { .. })
        ));
    }

    #[test]
    fn single_cell_has_zero_spread() {
        let matrix = StateMatrix::from_rows(&[vec![3.0, 4.0, 5.0]]).unwrap();
        let summary = compute_moments(&[matrix]).unwrap();
        assert_eq!(summary.points[0].variances, vec![0.0, 0.0, 0.0]);
        assert_eq!(summary.points[0].covariances, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn population_variance_divides_by_n() {
        let matrix = StateMatrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let summary = compute_moments(&[matrix]).unwrap();
        assert_eq!(summary.points[0].means, vec![1.0]);
        assert_eq!(summary.points[0].variances, vec![1.0]);
    }

    #[test]
    fn duplicated_species_covariance_equals_variance() {
        let matrix =
            StateMatrix::from_rows(&[vec![1.0, 1.0], vec![4.0, 4.0], vec![2.5, 2.5]]).unwrap();
        let summary = compute_moments(&[matrix]).unwrap();
        let point = &summary.points[0];
        assert!((point.covariances[0] - point.variances[0]).abs() < 1e-12);
    }

    #[test]
    fn moment_cost_examples() {
        let base = MomentSummary {
            n_species: 2,
            points: vec![MomentPoint {
                means: vec![1.0, 2.0],
                variances: vec![0.5, 0.5],
                covariances: vec![0.1],
            }],
        };
        assert_eq!(moment_cost(&base, &base).unwrap(), 0.0);
        let mut shifted = base.clone();
        shifted.points[0].means[1] += 1.0;
        assert_eq!(moment_cost(&base, &shifted).unwrap(), 1.0);
        let short = MomentSummary { n_species: 2, points: vec![] };
        assert!(moment_cost(&base, &short).is_err());
    }

    #[test]
    fn observed_data_round_trips() {
        let matrix =
            StateMatrix::from_rows(&[vec![1.0, 2.0, 0.5], vec![2.0, 1.0, 1.5]]).unwrap();
        let summary = compute_moments(&[matrix.clone(), matrix]).unwrap();
        let times = [0.0, 1.5];
        let observed = ObservedData::from_summary(&times, &summary);
        assert_eq!(observed.to_summary().unwrap(), summary);
    }

    #[test]
    fn population_simulator_matches_integrate_plus_moments() {
        let network = ReactionNetwork::reversible_binding();
        let spec = PopulationSpec {
            log_mean: vec![1.0, 0.8, -0.5],
            log_cov: vec![
                vec![0.16, 0.02, 0.0],
                vec![0.02, 0.16, 0.0],
                vec![0.0, 0.0, 0.09],
            ],
            n_cells: 12,
            times: vec![0.0, 1.5],
        };
        let cells = sample_population(&spec, 11).unwrap();
        let step = 0.01;
        let mut pop_sim = PopulationSimulator::new(&network).unwrap();
        let fast = pop_sim.moments(&binding_theta(), &cells, &spec.times, step).unwrap();

        let mut per_time: Vec<Vec<Vec<f64>>> = vec![Vec::new(); spec.times.len()];
        for cell in 0..cells.n_rows() {
            let states =
                integrate(&network, &binding_theta(), cells.row(cell), &spec.times, step).unwrap();
            for (t, state) in states.into_iter().enumerate() {
                per_time[t].push(state);
            }
        }
        let matrices: Vec<StateMatrix> =
            per_time.iter().map(|rows| StateMatrix::from_rows(rows).unwrap()).collect();
        let slow = compute_moments(&matrices).unwrap();
        assert_eq!(fast, slow);
    }

    proptest! {
        #[test]
        fn derivative_is_homogeneous_in_theta(
            state in prop::collection::vec(0.0f64..10.0, 3),
            theta in prop::collection::vec(0.0f64..5.0, 2),
        ) {
            let network = ReactionNetwork::reversible_binding();
            let single = network.derivatives(&state, &theta).unwrap();
            let doubled_theta: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
            let doubled = network.derivatives(&state, &doubled_theta).unwrap();
            for (d2, d1) in doubled.iter().zip(&single) {
                prop_assert!((d2 - 2.0 * d1).abs() <= 1e-12 * (1.0 + d1.abs()));
            }
        }

        #[test]
        fn moments_are_row_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 3), 2..20),
            seed in 0u64..1000,
        ) {
            let matrix = StateMatrix::from_rows(&rows).unwrap();
            let mut shuffled = rows.clone();
            // Cheap deterministic shuffle.
            let mut state = seed;
            for i in (1..shuffled.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (state >> 33) as usize % (i + 1);
                shuffled.swap(i, j);
            }
            let shuffled_matrix = StateMatrix::from_rows(&shuffled).unwrap();
            let a = compute_moments(&[matrix]).unwrap();
            let b = compute_moments(&[shuffled_matrix]).unwrap();
            for (pa, pb) in a.points.iter().zip(&b.points) {
                for (x, y) in pa.means.iter().zip(&pb.means) {
                    prop_assert!((x - y).abs() < 1e-10 * (1.0 + x.abs()));
                }
                for (x, y) in pa.variances.iter().zip(&pb.variances) {
                    prop_assert!((x - y).abs() < 1e-10 * (1.0 + x.abs()));
                }
                for (x, y) in pa.covariances.iter().zip(&pb.covariances) {
                    prop_assert!((x - y).abs() < 1e-10 * (1.0 + x.abs()));
                }
            }
        }

        #[test]
        fn cost_is_symmetric(
            means_a in prop::collection::vec(-5.0f64..5.0, 3),
            means_b in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let point = |means: &Vec<f64>| MomentPoint {
                means: means.clone(),
                variances: vec![1.0; 3],
                covariances: vec![0.0; 3],
            };
            let a = MomentSummary { n_species: 3, points: vec![point(&means_a)] };
            let b = MomentSummary { n_species: 3, points: vec![point(&means_b)] };
            let ab = moment_cost(&a, &b).unwrap();
            let ba = moment_cost(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0);
        }
    }
}
