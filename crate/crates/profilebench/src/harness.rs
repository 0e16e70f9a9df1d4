//! Experiment orchestration: config-disjoint splits, epoch-cap sweeps, and
//! the end-to-end pipeline behind the CLI.
//!
//! The pipeline is a pure function of its experiment config and the seeds in
//! it: rerunning with the same inputs rewrites byte-identical artifacts. A
//! failing stage leaves a `FAILED` marker file naming the stage and cause.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boost::{self, BoostModel, BoostParams, EvalReport};
use crate::error::{Error, Result};
use crate::fsio;
use crate::rankvec::{self, Direction, MetricTable, RankingVector};
use crate::reaction::{
    ObservedData, PopulationSimulator, PopulationSpec, ReactionNetwork,
};
use crate::seeds;
use crate::swarm::{self, EstimateOptions, EstimationDataset, StudyReport, SwarmConfig};
use crate::tinynet::{self, FinalActivation, HyperConfig, Optimizer, SynthDatasetSpec};
use crate::weightstats::{
    self, build_table, cap_epochs, FeatureRow, ManifestConfig, ManifestSnapshot, RunManifest,
};

/// Config-level train/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_config_ids: Vec<String>,
    pub test_config_ids: Vec<String>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn validate_against(&self, manifest: &RunManifest) -> Result<()> {
        let all: Vec<&String> = manifest.configs.iter().map(|c| &c.config_id).collect();
        for id in self.train_config_ids.iter().chain(&self.test_config_ids) {
            if !all.contains(&id) {
                return Err(Error::invalid(format!("split names unknown config `{id}`")));
            }
        }
        for id in &self.test_config_ids {
            if self.train_config_ids.contains(id) {
                return Err(Error::invalid(format!("config `{id}` is in both split halves")));
            }
        }
        if self.train_config_ids.len() + self.test_config_ids.len() != all.len() {
            return Err(Error::invalid("split does not cover every config"));
        }
        if self.train_config_ids.is_empty() || self.test_config_ids.is_empty() {
            return Err(Error::invalid("both split halves must be non-empty"));
        }
        Ok(())
    }
}

/// Shuffle config ids with the seed and hold out the last
/// `round(test_fraction * n)` (at least 1, at most n-1) as the test side.
/// No test config's epochs ever reach training.
pub fn split_by_config(
    manifest: &RunManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    manifest.validate()?;
    if manifest.configs.len() < 2 {
        return Err(Error::invalid("split needs at least 2 configs"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut ids: Vec<String> = manifest.configs.iter().map(|c| c.config_id.clone()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let k = (((test_fraction * n as f64) + 0.5).floor() as usize).clamp(1, n - 1);
    let mut test: Vec<String> = ids.split_off(n - k);
    let mut train = ids;
    train.sort();
    test.sort();
    Ok(SplitPlan { train_config_ids: train, test_config_ids: test, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Representative epoch of the cap (`cap_epochs`).
    pub epoch: usize,
    pub training_time_percent: f64,
    /// Over all test rows with epoch <= cap.
    pub accuracy_percent: f64,
    pub rrmse: f64,
    /// Secondary view: only the rows at exactly the representative epoch.
    pub accuracy_cap_epoch_only: f64,
    pub rrmse_cap_epoch_only: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

pub struct SweepOutcome {
    pub report: SweepReport,
    /// Metrics on the 20% validation rows held out of the training table.
    pub validation: EvalReport,
    pub model: BoostModel,
}

pub const DEFAULT_CAPS: [f64; 6] = [0.05, 0.10, 0.25, 0.50, 0.75, 1.00];

fn check_caps(caps: &[f64]) -> Result<()> {
    if caps.is_empty() {
        return Err(Error::invalid("sweep needs at least one cap"));
    }
    for &cap in caps {
        if !(cap > 0.0 && cap <= 1.0) {
            return Err(Error::invalid(format!("cap {cap} outside (0, 1]")));
        }
    }
    if caps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("caps must be strictly increasing"));
    }
    Ok(())
}

/// Train one model on the full (cap 1.0) table of the training configs, then
/// evaluate the test-config table at every cap. The training table is split
/// 80/20 into fit/validation rows (by row, seeded); the model is fit on the
/// 80% and the validation metrics are reported alongside.
pub fn run_sweep(
    manifest: &RunManifest,
    root: &Path,
    split: &SplitPlan,
    params: &BoostParams,
    caps: &[f64],
    seed: u64,
) -> Result<SweepOutcome> {
    split.validate_against(manifest)?;
    check_caps(caps)?;
    let train_manifest = manifest.subset(&split.train_config_ids);
    let test_manifest = manifest.subset(&split.test_config_ids);

    let train_rows = build_table(&train_manifest, root, 1.0)?;
    if train_rows.len() < 2 {
        return Err(Error::invalid("training table needs at least 2 rows"));
    }
    let mut indices: Vec<usize> = (0..train_rows.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive_seed(seed, "row-split"));
    indices.shuffle(&mut rng);
    let n_val = ((0.2 * train_rows.len() as f64).round() as usize)
        .clamp(1, train_rows.len() - 1);
    let (fit_idx, val_idx) = indices.split_at(train_rows.len() - n_val);
    let fit_rows: Vec<FeatureRow> = fit_idx.iter().map(|&i| train_rows[i].clone()).collect();
    let val_rows: Vec<FeatureRow> = val_idx.iter().map(|&i| train_rows[i].clone()).collect();

    let model = boost::fit(&fit_rows, params, seeds::derive_seed(seed, "fit"))?;
    let val_preds = model.predict_rows(&val_rows)?;
    let val_targets: Vec<f64> = val_rows.iter().map(|r| r.target).collect();
    let validation = boost::evaluate(&val_preds, &val_targets)?;

    let mut rows = Vec::with_capacity(caps.len());
    for &cap in caps {
        let test_rows = build_table(&test_manifest, root, cap)?;
        let preds = model.predict_rows(&test_rows)?;
        let targets: Vec<f64> = test_rows.iter().map(|r| r.target).collect();
        let mut report = boost::evaluate(&preds, &targets)?;
        report.epoch_cap_fraction = cap;
        let epoch = cap_epochs(cap, manifest.max_epoch);
        let only: Vec<usize> = test_rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.epoch == epoch)
            .map(|(i, _)| i)
            .collect();
        if only.is_empty() {
            return Err(Error::invalid(format!(
                "no test rows at the representative epoch {epoch}"
            )));
        }
        let only_preds: Vec<f64> = only.iter().map(|&i| preds[i]).collect();
        let only_targets: Vec<f64> = only.iter().map(|&i| targets[i]).collect();
        let only_report = boost::evaluate(&only_preds, &only_targets)?;
        rows.push(SweepRow {
            epoch,
            training_time_percent: cap * 100.0,
            accuracy_percent: report.accuracy_percent,
            rrmse: report.rrmse,
            accuracy_cap_epoch_only: only_report.accuracy_percent,
            rrmse_cap_epoch_only: only_report.rrmse,
        });
    }
    Ok(SweepOutcome { report: SweepReport { rows }, validation, model })
}

pub fn write_sweep_report(path: &Path, report: &SweepReport) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.training_time_percent.to_string(),
                r.accuracy_percent.to_string(),
                r.rrmse.to_string(),
                r.accuracy_cap_epoch_only.to_string(),
                r.rrmse_cap_epoch_only.to_string(),
            ]
        })
        .collect();
    fsio::write_csv(
        path,
        &[
            "epoch",
            "training_time_percent",
            "accuracy_percent",
            "rrmse",
            "accuracy_cap_epoch_only",
            "rrmse_cap_epoch_only",
        ],
        &rows,
    )
}

pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    fsio::write_csv(
        path,
        &["accuracy_percent", "rrmse", "n_rows", "epoch_cap_fraction"],
        &[vec![
            report.accuracy_percent.to_string(),
            report.rrmse.to_string(),
            report.n_rows.to_string(),
            report.epoch_cap_fraction.to_string(),
        ]],
    )
}

/// `pso_report.csv`: one row per (dataset, config).
pub fn write_study_report(path: &Path, study: &StudyReport) -> Result<()> {
    let mut rows = Vec::new();
    for report in &study.reports {
        for aggregate in &report.configs {
            rows.push(vec![
                report.dataset_id.clone(),
                aggregate.label.clone(),
                aggregate.mean_cost.to_string(),
                aggregate.avg_std_dev.to_string(),
                aggregate.cost_rank.to_string(),
                aggregate.spread_rank.to_string(),
            ]);
        }
    }
    fsio::write_csv(
        path,
        &["dataset", "config", "mean_cost", "avg_std_dev", "cost_rank", "spread_rank"],
        &rows,
    )
}

pub fn write_study_distances(path: &Path, study: &StudyReport) -> Result<()> {
    let rows: Vec<Vec<String>> = study
        .distances
        .iter()
        .map(|d| {
            vec![
                d.metric.clone(),
                d.dataset_a.clone(),
                d.dataset_b.clone(),
                d.euclidean.to_string(),
            ]
        })
        .collect();
    fsio::write_csv(path, &["metric", "dataset_a", "dataset_b", "euclidean"], &rows)
}

/// Per-(dataset, metric) rank vectors and distance rows against a base
/// dataset.
pub struct RankOutputs {
    pub model_order: Vec<String>,
    pub rankings: Vec<RankingVector>,
    pub distances: Vec<RankDistanceRow>,
}

pub struct RankDistanceRow {
    pub base_dataset: String,
    pub dataset: String,
    pub metric: String,
    pub euclidean: f64,
    pub kendall_raw: usize,
    pub kendall_norm: f64,
}

pub fn rank_outputs(
    table: &MetricTable,
    base: &str,
    directions: &BTreeMap<String, Direction>,
    default_direction: Direction,
) -> Result<RankOutputs> {
    let datasets = table.dataset_ids();
    let metrics = table.metric_ids();
    if !datasets.iter().any(|d| d == base) {
        return Err(Error::invalid(format!("base dataset `{base}` not present in metrics")));
    }
    let mut rankings = Vec::new();
    for dataset in &datasets {
        for metric in &metrics {
            let direction = directions.get(metric).copied().unwrap_or(default_direction);
            let values = table.values_for(dataset, metric);
            let ranks = rankvec::rank_models(&table.model_order, &values, direction)?;
            rankings.push(RankingVector {
                dataset_id: dataset.clone(),
                metric_id: metric.clone(),
                ranks,
            });
        }
    }
    let mut distances = Vec::new();
    for metric in &metrics {
        let base_vec = rankings
            .iter()
            .find(|r| r.dataset_id == base && &r.metric_id == metric)
            .expect("base ranking exists");
        for dataset in &datasets {
            let other = rankings
                .iter()
                .find(|r| &r.dataset_id == dataset && &r.metric_id == metric)
                .expect("ranking exists");
            let euclidean = rankvec::euclidean_distance(base_vec, other)?;
            let (kendall_raw, kendall_norm) = rankvec::kendall_tau_distance(base_vec, other)?;
            distances.push(RankDistanceRow {
                base_dataset: base.to_string(),
                dataset: dataset.clone(),
                metric: metric.clone(),
                euclidean,
                kendall_raw,
                kendall_norm,
            });
        }
    }
    Ok(RankOutputs { model_order: table.model_order.clone(), rankings, distances })
}

pub fn write_rankings_csv(path: &Path, outputs: &RankOutputs) -> Result<()> {
    let mut rows = Vec::new();
    for ranking in &outputs.rankings {
        for (model, rank) in outputs.model_order.iter().zip(&ranking.ranks) {
            rows.push(vec![
                ranking.dataset_id.clone(),
                ranking.metric_id.clone(),
                model.clone(),
                rank.to_string(),
            ]);
        }
    }
    fsio::write_csv(path, &["dataset", "metric", "model", "rank"], &rows)
}

pub fn write_distances_csv(path: &Path, outputs: &RankOutputs) -> Result<()> {
    let rows: Vec<Vec<String>> = outputs
        .distances
        .iter()
        .map(|d| {
            vec![
                d.base_dataset.clone(),
                d.dataset.clone(),
                d.metric.clone(),
                d.euclidean.to_string(),
                d.kendall_raw.to_string(),
                d.kendall_norm.to_string(),
            ]
        })
        .collect();
    fsio::write_csv(
        path,
        &["base_dataset", "dataset", "metric", "euclidean", "kendall_raw", "kendall_norm"],
        &rows,
    )
}

fn default_epochs() -> usize {
    75
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_caps() -> Vec<f64> {
    DEFAULT_CAPS.to_vec()
}

fn default_runs() -> usize {
    30
}

fn default_particles() -> usize {
    200
}

fn default_pso_epochs() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub optimizers: Vec<Optimizer>,
    pub learning_rates: Vec<f64>,
    pub activations: Vec<FinalActivation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthStage {
    pub dataset: SynthDatasetSpec,
    /// `None` uses the default 36-config grid.
    pub grid: Option<GridSpec>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepStage {
    #[serde(default)]
    pub params: BoostParams,
    #[serde(default = "default_caps")]
    pub caps: Vec<f64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub split_seed: u64,
    pub model_seed: u64,
    /// Path to an existing manifest; defaults to the synth stage's output.
    #[serde(default)]
    pub manifest: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankStage {
    pub metrics: String,
    pub base: String,
    #[serde(default)]
    pub directions: BTreeMap<String, Direction>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkRef {
    Builtin(String),
    Inline(ReactionNetwork),
}

impl NetworkRef {
    pub fn resolve(&self) -> Result<ReactionNetwork> {
        match self {
            NetworkRef::Builtin(name) => ReactionNetwork::builtin(name)
                .ok_or_else(|| Error::invalid(format!("unknown built-in network `{name}`"))),
            NetworkRef::Inline(network) => {
                network.validate()?;
                Ok(network.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsoDatasetSpec {
    pub id: String,
    pub network: NetworkRef,
    /// Rate constants that generate the observed data.
    pub theta_true: Vec<f64>,
    pub population: PopulationSpec,
    pub data_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsoStage {
    pub datasets: Vec<PsoDatasetSpec>,
    /// `None` uses the published A-E weight table.
    #[serde(default)]
    pub configs: Option<Vec<SwarmConfig>>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_pso_epochs")]
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub step: Option<f64>,
}

/// One experiment: stages run in order (synth -> extract -> split -> sweep,
/// then rank and pso when present); every seed is explicit in the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub synth: Option<SynthStage>,
    #[serde(default)]
    pub sweep: Option<SweepStage>,
    #[serde(default)]
    pub rank: Option<RankStage>,
    #[serde(default)]
    pub pso: Option<PsoStage>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        fsio::read_json(path)
    }
}

#[derive(Debug)]
pub struct PipelineSummary {
    pub files: Vec<PathBuf>,
}

/// Generate a manifest by training every grid config against the dataset.
/// Config c trains with seed `fnv1a(seed, c.config_id)`; records are ordered
/// by config id regardless of completion order.
pub fn run_synth(stage: &SynthStage, out_dir: &Path) -> Result<(RunManifest, Vec<PathBuf>)> {
    let grid: Vec<HyperConfig> = match &stage.grid {
        Some(spec) => tinynet::config_grid(&spec.optimizers, &spec.learning_rates, &spec.activations)?,
        None => tinynet::default_grid(),
    };
    let dataset = tinynet::make_dataset(&stage.dataset)?;
    let mut records: Vec<(HyperConfig, tinynet::TrainRecord)> = grid
        .par_iter()
        .map(|config| {
            let seed = seeds::stable_hash(&[&stage.seed.to_le_bytes(), config.config_id.as_bytes()]);
            tinynet::train(config, &dataset, stage.epochs, None, seed)
                .map(|record| (config.clone(), record))
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.0.config_id.cmp(&b.0.config_id));

    let mut files = Vec::new();
    let mut configs = Vec::with_capacity(records.len());
    for (config, record) in &records {
        let mut snapshots = Vec::with_capacity(record.snapshots.len());
        for snapshot in &record.snapshots {
            let rel = format!("snapshots/{}/epoch_{:04}.json", config.config_id, snapshot.epoch);
            let path = out_dir.join(&rel);
            snapshot.save(&path)?;
            files.push(path);
            snapshots.push(ManifestSnapshot { epoch: snapshot.epoch, path: rel });
        }
        configs.push(ManifestConfig {
            config_id: config.config_id.clone(),
            hyperparameters: config.hyperparameter_map(),
            final_test_accuracy: record.final_test_accuracy,
            snapshots,
        });
    }
    let manifest = RunManifest { configs, max_epoch: stage.epochs };
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    files.push(manifest_path);
    Ok((manifest, files))
}

/// Build the estimation datasets of a pso stage, writing each dataset's
/// network/population/observed files under `pso_datasets/<id>/`.
pub fn materialize_pso_datasets(
    stage: &PsoStage,
    out_dir: &Path,
) -> Result<(Vec<EstimationDataset>, Vec<PathBuf>)> {
    let opts = EstimateOptions {
        particles: stage.particles,
        epochs: stage.epochs,
        step: stage.step,
        ..Default::default()
    };
    let mut datasets = Vec::with_capacity(stage.datasets.len());
    let mut files = Vec::new();
    for spec in &stage.datasets {
        let network = spec.network.resolve()?;
        let cells = crate::reaction::sample_population(&spec.population, spec.data_seed)?;
        let mut sim = PopulationSimulator::new(&network)?;
        let step = opts.objective_step(&spec.population.times);
        let observed = sim.moments(&spec.theta_true, &cells, &spec.population.times, step)?;

        let dir = out_dir.join("pso_datasets").join(&spec.id);
        let network_path = dir.join("network.json");
        fsio::write_json(&network_path, &network)?;
        let population_path = dir.join("population.json");
        fsio::write_json(&population_path, &spec.population)?;
        let observed_path = dir.join("observed.json");
        fsio::write_json(&observed_path, &ObservedData::from_summary(&spec.population.times, &observed))?;
        files.extend([network_path, population_path, observed_path]);

        datasets.push(EstimationDataset {
            id: spec.id.clone(),
            network,
            observed,
            population: spec.population.clone(),
            population_seed: spec.data_seed,
        });
    }
    Ok((datasets, files))
}

fn stage_err<T>(stage: &'static str, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::Stage { stage, source: Box::new(e) })
}

/// Execute the configured stages into `out_dir`. Idempotent given identical
/// config and seeds; on failure a `FAILED` marker names the stage and cause.
pub fn run_pipeline(config: &ExperimentConfig, out_dir: &Path) -> Result<PipelineSummary> {
    let marker = out_dir.join("FAILED");
    match run_pipeline_inner(config, out_dir) {
        Ok(summary) => {
            if marker.exists() {
                std::fs::remove_file(&marker)
                    .map_err(|e| Error::io(marker.display().to_string(), e))?;
            }
            Ok(summary)
        }
        Err(err) => {
            let _ = fsio::write_atomic(&marker, format!("{err}\n").as_bytes());
            Err(err)
        }
    }
}

fn run_pipeline_inner(config: &ExperimentConfig, out_dir: &Path) -> Result<PipelineSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut files = Vec::new();

    let mut manifest: Option<RunManifest> = None;
    if let Some(stage) = &config.synth {
        let (built, written) = stage_err("synth", run_synth(stage, out_dir))?;
        files.extend(written);
        manifest = Some(built);
    }

    if let Some(stage) = &config.sweep {
        let (manifest, root) = match (&stage.manifest, manifest.as_ref()) {
            (Some(path), _) => stage_err("sweep", RunManifest::load(Path::new(path)))?,
            (None, Some(built)) => (built.clone(), out_dir.to_path_buf()),
            (None, None) => {
                return Err(Error::Stage {
                    stage: "sweep",
                    source: Box::new(Error::invalid(
                        "sweep needs a synth stage or an explicit manifest path",
                    )),
                })
            }
        };
        let table = stage_err("extract", build_table(&manifest, &root, 1.0))?;
        let table_path = out_dir.join("feature_table.csv");
        stage_err("extract", weightstats::write_feature_table(&table_path, &table))?;
        files.push(table_path);

        let split =
            stage_err("split", split_by_config(&manifest, stage.test_fraction, stage.split_seed))?;
        let split_path = out_dir.join("split.json");
        stage_err("split", fsio::write_json(&split_path, &split))?;
        files.push(split_path);

        let outcome = stage_err(
            "sweep",
            run_sweep(&manifest, &root, &split, &stage.params, &stage.caps, stage.model_seed),
        )?;
        let report_path = out_dir.join("sweep_report.csv");
        stage_err("sweep", write_sweep_report(&report_path, &outcome.report))?;
        let validation_path = out_dir.join("validation.csv");
        stage_err("sweep", write_eval_report(&validation_path, &outcome.validation))?;
        let model_path = out_dir.join("model.json");
        stage_err("sweep", outcome.model.save(&model_path))?;
        files.extend([report_path, validation_path, model_path]);
    }

    if let Some(stage) = &config.rank {
        let table = stage_err("rank", MetricTable::from_csv(Path::new(&stage.metrics)))?;
        let outputs = stage_err(
            "rank",
            rank_outputs(&table, &stage.base, &stage.directions, Direction::Descending),
        )?;
        let rankings_path = out_dir.join("rankings.csv");
        stage_err("rank", write_rankings_csv(&rankings_path, &outputs))?;
        let distances_path = out_dir.join("distances.csv");
        stage_err("rank", write_distances_csv(&distances_path, &outputs))?;
        files.extend([rankings_path, distances_path]);
    }

    if let Some(stage) = &config.pso {
        let (datasets, written) = stage_err("pso", materialize_pso_datasets(stage, out_dir))?;
        files.extend(written);
        let configs = stage.configs.clone().unwrap_or_else(SwarmConfig::standard_set);
        let opts = EstimateOptions {
            particles: stage.particles,
            epochs: stage.epochs,
            step: stage.step,
            ..Default::default()
        };
        let study = stage_err(
            "pso",
            swarm::replicate_study(&configs, &datasets, stage.runs, stage.seed, &opts),
        )?;
        let report_path = out_dir.join("pso_report.csv");
        stage_err("pso", write_study_report(&report_path, &study))?;
        let distances_path = out_dir.join("pso_distances.csv");
        stage_err("pso", write_study_distances(&distances_path, &study))?;
        files.extend([report_path, distances_path]);
    }

    Ok(PipelineSummary { files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn manifest_with_ids(n: usize) -> RunManifest {
        RunManifest {
            configs: (0..n)
                .map(|i| ManifestConfig {
                    config_id: format!("cfg{i:02}"),
                    hyperparameters: BTreeMap::new(),
                    final_test_accuracy: 0.5,
                    snapshots: vec![],
                })
                .collect(),
            max_epoch: 10,
        }
    }

    #[test]
    fn thirty_six_configs_split_29_7() {
        let manifest = manifest_with_ids(36);
        let plan = split_by_config(&manifest, 0.2, 123).unwrap();
        assert_eq!(plan.train_config_ids.len(), 29);
        assert_eq!(plan.test_config_ids.len(), 7);
        plan.validate_against(&manifest).unwrap();
    }

    #[test]
    fn two_configs_split_one_and_one() {
        let manifest = manifest_with_ids(2);
        let plan = split_by_config(&manifest, 0.2, 5).unwrap();
        assert_eq!(plan.train_config_ids.len(), 1);
        assert_eq!(plan.test_config_ids.len(), 1);
    }

    #[test]
    fn split_is_deterministic_and_fraction_checked() {
        let manifest = manifest_with_ids(10);
        assert_eq!(
            split_by_config(&manifest, 0.2, 9).unwrap(),
            split_by_config(&manifest, 0.2, 9).unwrap()
        );
        assert!(split_by_config(&manifest, 0.0, 1).is_err());
        assert!(split_by_config(&manifest, 1.0, 1).is_err());
        assert!(split_by_config(&manifest, -0.5, 1).is_err());
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_cover_for_100_seeds(seed in 0u64..100) {
            let manifest = manifest_with_ids(17);
            let plan = split_by_config(&manifest, 0.2, seed).unwrap();
            let train: BTreeSet<&String> = plan.train_config_ids.iter().collect();
            let test: BTreeSet<&String> = plan.test_config_ids.iter().collect();
            prop_assert!(train.is_disjoint(&test));
            prop_assert_eq!(train.len() + test.len(), 17);
        }
    }

    fn tiny_synth_stage(epochs: usize) -> SynthStage {
        SynthStage {
            dataset: SynthDatasetSpec {
                n_samples: 150,
                n_features: 4,
                n_classes: 3,
                cluster_spread: 0.8,
                split: (0.7, 0.15, 0.15),
                seed: 3,
            },
            grid: Some(GridSpec {
                optimizers: vec![Optimizer::Sgd, Optimizer::Adam],
                learning_rates: vec![0.05, 0.01],
                activations: vec![FinalActivation::Softmax],
            }),
            epochs,
            seed: 11,
        }
    }

    #[test]
    fn sweep_with_constant_model_is_cap_independent() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = run_synth(&tiny_synth_stage(10), dir.path()).unwrap();
        let split = split_by_config(&manifest, 0.25, 7).unwrap();
        let params = BoostParams { n_trees: 0, ..Default::default() };
        let outcome = run_sweep(
            &manifest,
            dir.path(),
            &split,
            &params,
            &[0.5, 1.0],
            21,
        )
        .unwrap();
        assert_eq!(outcome.report.rows.len(), 2);
        let first = &outcome.report.rows[0];
        let second = &outcome.report.rows[1];
        // Identical up to summation order over the differing row counts.
        assert!((first.accuracy_percent - second.accuracy_percent).abs() < 1e-9);
        assert!((first.rrmse - second.rrmse).abs() < 1e-9);
        assert_eq!(first.epoch, 5);
        assert_eq!(second.epoch, 10);
    }

    #[test]
    fn sweep_full_cap_matches_direct_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = run_synth(&tiny_synth_stage(8), dir.path()).unwrap();
        let split = split_by_config(&manifest, 0.25, 2).unwrap();
        let params = BoostParams { n_trees: 16, ..Default::default() };
        let outcome =
            run_sweep(&manifest, dir.path(), &split, &params, &[1.0], 5).unwrap();

        let test_manifest = manifest.subset(&split.test_config_ids);
        let rows = build_table(&test_manifest, dir.path(), 1.0).unwrap();
        let preds = outcome.model.predict_rows(&rows).unwrap();
        let targets: Vec<f64> = rows.iter().map(|r| r.target).collect();
        let direct = boost::evaluate(&preds, &targets).unwrap();
        let row = &outcome.report.rows[0];
        assert_eq!(row.accuracy_percent, direct.accuracy_percent);
        assert_eq!(row.rrmse, direct.rrmse);
    }

    #[test]
    fn pipeline_smoke_produces_all_artifacts_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let config = ExperimentConfig {
            synth: Some(tiny_synth_stage(10)),
            sweep: Some(SweepStage {
                params: BoostParams { n_trees: 8, ..Default::default() },
                caps: vec![0.5, 1.0],
                test_fraction: 0.25,
                split_seed: 1,
                model_seed: 2,
                manifest: None,
            }),
            rank: None,
            pso: None,
        };
        let summary = run_pipeline(&config, &out).unwrap();
        for name in
            ["manifest.json", "feature_table.csv", "split.json", "sweep_report.csv", "model.json"]
        {
            assert!(out.join(name).exists(), "{name} missing");
        }
        assert!(!out.join("FAILED").exists());
        let report = std::fs::read(out.join("sweep_report.csv")).unwrap();
        // Two caps -> two report rows (plus header).
        assert_eq!(report.iter().filter(|&&b| b == b'\n').count(), 3);

        let before: Vec<Vec<u8>> = summary
            .files
            .iter()
            .map(|f| std::fs::read(f).unwrap())
            .collect();
        run_pipeline(&config, &out).unwrap();
        for (file, old) in summary.files.iter().zip(&before) {
            let new = std::fs::read(file).unwrap();
            assert_eq!(&new, old, "{} changed between reruns", file.display());
        }
    }

    #[test]
    fn failing_stage_writes_a_marker() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let config = ExperimentConfig {
            synth: None,
            sweep: None,
            rank: Some(RankStage {
                metrics: dir.path().join("missing.csv").display().to_string(),
                base: "x".into(),
                directions: BTreeMap::new(),
            }),
            pso: None,
        };
        let err = run_pipeline(&config, &out).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "rank", .. }));
        assert!(out.join("FAILED").exists());
    }

    #[test]
    fn rank_outputs_cover_every_dataset_and_metric() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut body = String::from("dataset,model,metric,value\n");
        for dataset in ["cifar", "leaf"] {
            for (i, model) in ["inception", "vgg", "effnet", "resnet"].iter().enumerate() {
                body.push_str(&format!("{dataset},{model},accuracy,{}\n", 0.9 - 0.05 * i as f64));
                body.push_str(&format!("{dataset},{model},loss,{}\n", 0.1 + 0.05 * i as f64));
            }
        }
        std::fs::write(&path, body).unwrap();
        let table = MetricTable::from_csv(&path).unwrap();
        let directions =
            BTreeMap::from([("loss".to_string(), Direction::Ascending)]);
        let outputs = rank_outputs(&table, "cifar", &directions, Direction::Descending).unwrap();
        assert_eq!(outputs.rankings.len(), 4); // 2 datasets x 2 metrics
        assert_eq!(outputs.distances.len(), 4);
        for distance in &outputs.distances {
            if distance.dataset == "cifar" {
                assert_eq!(distance.euclidean, 0.0);
                assert_eq!(distance.kendall_raw, 0);
            }
        }
        let dist_rows = outputs.distances.len();
        write_rankings_csv(&dir.path().join("rankings.csv"), &outputs).unwrap();
        write_distances_csv(&dir.path().join("distances.csv"), &outputs).unwrap();
        let distances = std::fs::read_to_string(dir.path().join("distances.csv")).unwrap();
        assert_eq!(distances.lines().count(), dist_rows + 1);
    }
}
