//! `profilebench` CLI: each pipeline stage as a subcommand.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use profilebench::boost::{self, BoostModel, BoostParams};
use profilebench::error::{Error, Result};
use profilebench::fsio;
use profilebench::harness::{
    rank_outputs, run_pipeline, run_sweep, run_synth, split_by_config, write_distances_csv,
    write_eval_report, write_rankings_csv, write_study_distances, write_study_report,
    write_sweep_report, ExperimentConfig, GridSpec, SynthStage, DEFAULT_CAPS,
};
use profilebench::rankvec::{Direction, MetricTable};
use profilebench::reaction::{
    integrate, sample_population, compute_moments, ObservedData, PopulationSpec, ReactionNetwork,
    StateMatrix,
};
use profilebench::seeds;
use profilebench::swarm::{replicate_study, EstimateOptions, EstimationDataset, SwarmConfig};
use profilebench::tinynet::SynthDatasetSpec;
use profilebench::weightstats::{build_table, read_feature_table, write_feature_table, RunManifest};

#[derive(Parser)]
#[command(
    name = "profilebench",
    version,
    about = "Dataset-specific profiling: rank distances, PSO moment matching, weight-statistics accuracy prediction"
)]
struct Cli {
    /// Seed for the seeded subcommands.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory (subcommand-dependent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment config file (used by `pipeline`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build ranking vectors from a metrics file and emit distances against a base dataset.
    Rank {
        /// Delimited metrics file with header dataset,model,metric,value.
        #[arg(long)]
        metrics: PathBuf,
        /// Dataset every distance is measured against.
        #[arg(long)]
        base: String,
        /// `asc`/`desc` for all metrics, or per-metric `metric=asc,metric=desc`
        /// (repeatable). Default: desc.
        #[arg(long)]
        direction: Vec<String>,
    },
    /// Evolve a sampled cell population under a network and write its moment summaries.
    Simulate {
        /// Network definition (JSON).
        #[arg(long)]
        network: PathBuf,
        /// Comma-separated rate constants.
        #[arg(long)]
        theta: String,
        /// Population spec (JSON: log_mean, log_cov, n_cells, times).
        #[arg(long)]
        population: PathBuf,
        /// RK4 step; defaults to t_max / 1000.
        #[arg(long)]
        step: Option<f64>,
    },
    /// Replicate PSO study over every dataset directory under --networks.
    Pso {
        /// Directory of dataset subdirectories (network.json, population.json, observed.json).
        #[arg(long)]
        networks: PathBuf,
        /// Swarm weight configurations (JSON list); default: the published A-E table.
        #[arg(long)]
        configs: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        runs: usize,
        #[arg(long, default_value_t = 200)]
        particles: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        /// Objective RK4 step; defaults to t_max / 100.
        #[arg(long)]
        step: Option<f64>,
    },
    /// Train the hyperparameter grid on a synthetic dataset, emitting snapshots and a manifest.
    Synth {
        /// Grid axes (JSON); default: the 36-config grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Synthetic dataset spec (JSON).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 75)]
        epochs: usize,
    },
    /// Extract the feature table from a manifest at an epoch cap.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        /// Epoch cap fraction in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        cap: f64,
    },
    /// Gradient-boosted model training and evaluation.
    Gbm {
        #[command(subcommand)]
        command: GbmCommand,
    },
    /// Config-disjoint split plus epoch-cap sweep from a manifest.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        /// Booster parameters (JSON); default: the tuned table.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Comma-separated cap fractions; default 0.05,0.1,0.25,0.5,0.75,1.0.
        #[arg(long)]
        caps: Option<String>,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Run an experiment config end to end (synth -> extract -> split -> sweep, rank, pso).
    Pipeline,
}

#[derive(Subcommand)]
enum GbmCommand {
    /// Fit a model on a feature table.
    Train {
        #[arg(long)]
        table: PathBuf,
        /// Booster parameters (JSON); default: the tuned table.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Output model path.
        #[arg(long)]
        model: PathBuf,
    },
    /// Evaluate a model on a feature table.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        table: PathBuf,
        /// Recorded in the report's epoch_cap_fraction column.
        #[arg(long)]
        cap: Option<f64>,
    },
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().ok_or_else(|| Error::Usage("--out is required".into()))
}

fn parse_directions(
    specs: &[String],
) -> Result<(BTreeMap<String, Direction>, Direction)> {
    let mut map = BTreeMap::new();
    let mut default = Direction::Descending;
    let parse_one = |token: &str| -> Result<Direction> {
        match token {
            "asc" | "ascending" => Ok(Direction::Ascending),
            "desc" | "descending" => Ok(Direction::Descending),
            other => Err(Error::Usage(format!(
                "direction must be asc or desc, got `{other}`"
            ))),
        }
    };
    for spec in specs {
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part.split_once('=') {
                Some((metric, dir)) => {
                    map.insert(metric.trim().to_string(), parse_one(dir.trim())?);
                }
                None => default = parse_one(part)?,
            }
        }
    }
    Ok((map, default))
}

fn parse_theta(theta: &str) -> Result<Vec<f64>> {
    theta
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| Error::Usage(format!("bad theta component `{s}`: {e}")))
        })
        .collect()
}

fn parse_caps(caps: &Option<String>) -> Result<Vec<f64>> {
    match caps {
        None => Ok(DEFAULT_CAPS.to_vec()),
        Some(list) => list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Usage(format!("bad cap `{s}`: {e}")))
            })
            .collect(),
    }
}

fn load_params(path: &Option<PathBuf>) -> Result<BoostParams> {
    match path {
        Some(path) => fsio::read_json(path),
        None => Ok(BoostParams::default()),
    }
}

#[derive(serde::Deserialize)]
struct DatasetMeta {
    population_seed: u64,
}

/// A dataset directory holds network.json, population.json, observed.json,
/// and optionally meta.json pinning the objective's population seed.
fn load_pso_datasets(dir: &Path, base_seed: u64) -> Result<Vec<EstimationDataset>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|path| path.is_dir())
        .collect();
    entries.sort();
    let mut datasets = Vec::new();
    for entry in entries {
        let id = entry
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let network: ReactionNetwork = fsio::read_json(&entry.join("network.json"))?;
        network.validate()?;
        let population: PopulationSpec = fsio::read_json(&entry.join("population.json"))?;
        let observed: ObservedData = fsio::read_json(&entry.join("observed.json"))?;
        let meta_path = entry.join("meta.json");
        let population_seed = if meta_path.exists() {
            fsio::read_json::<DatasetMeta>(&meta_path)?.population_seed
        } else {
            seeds::stable_hash(&[&base_seed.to_le_bytes(), id.as_bytes(), b"population"])
        };
        datasets.push(EstimationDataset {
            id,
            network,
            observed: observed.to_summary()?,
            population,
            population_seed,
        });
    }
    if datasets.is_empty() {
        return Err(Error::invalid(format!(
            "no dataset directories under {}",
            dir.display()
        )));
    }
    Ok(datasets)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Rank { metrics, base, direction } => {
            let out = require_out(&cli.out)?;
            let table = MetricTable::from_csv(&metrics)?;
            let (directions, default) = parse_directions(&direction)?;
            let outputs = rank_outputs(&table, &base, &directions, default)?;
            write_rankings_csv(&out.join("rankings.csv"), &outputs)?;
            write_distances_csv(&out.join("distances.csv"), &outputs)?;
            println!("wrote {}", out.join("rankings.csv").display());
            println!("wrote {}", out.join("distances.csv").display());
        }
        Command::Simulate { network, theta, population, step } => {
            let out = require_out(&cli.out)?;
            let network: ReactionNetwork = fsio::read_json(&network)?;
            network.validate()?;
            let population: PopulationSpec = fsio::read_json(&population)?;
            let theta = parse_theta(&theta)?;
            let cells = sample_population(&population, cli.seed)?;
            let t_max = population.times.last().copied().unwrap_or(1.0);
            let step = step.unwrap_or_else(|| ReactionNetwork::default_step(t_max));
            let mut per_time =
                vec![Vec::with_capacity(cells.n_rows()); population.times.len()];
            for cell in 0..cells.n_rows() {
                let states =
                    integrate(&network, &theta, cells.row(cell), &population.times, step)?;
                for (t, state) in states.into_iter().enumerate() {
                    per_time[t].push(state);
                }
            }
            let matrices: Vec<StateMatrix> = per_time
                .iter()
                .map(|rows| StateMatrix::from_rows(rows))
                .collect::<Result<_>>()?;
            let summary = compute_moments(&matrices)?;
            fsio::write_json(out, &ObservedData::from_summary(&population.times, &summary))?;
            println!("wrote {}", out.display());
        }
        Command::Pso { networks, configs, runs, particles, epochs, step } => {
            let out = require_out(&cli.out)?;
            let datasets = load_pso_datasets(&networks, cli.seed)?;
            let configs: Vec<SwarmConfig> = match configs {
                Some(path) => fsio::read_json(&path)?,
                None => SwarmConfig::standard_set(),
            };
            let opts = EstimateOptions { particles, epochs, step, ..Default::default() };
            let study = replicate_study(&configs, &datasets, runs, cli.seed, &opts)?;
            write_study_report(&out.join("pso_report.csv"), &study)?;
            write_study_distances(&out.join("pso_distances.csv"), &study)?;
            println!("wrote {}", out.join("pso_report.csv").display());
            println!("wrote {}", out.join("pso_distances.csv").display());
        }
        Command::Synth { grid, dataset, epochs } => {
            let out = require_out(&cli.out)?;
            let dataset: SynthDatasetSpec = fsio::read_json(&dataset)?;
            let grid: Option<GridSpec> = match grid {
                Some(path) => Some(fsio::read_json(&path)?),
                None => None,
            };
            let stage = SynthStage { dataset, grid, epochs, seed: cli.seed };
            let (manifest, _) = run_synth(&stage, out)?;
            println!(
                "wrote {} ({} configs x {} epochs)",
                out.join("manifest.json").display(),
                manifest.configs.len(),
                manifest.max_epoch
            );
        }
        Command::Extract { manifest, cap } => {
            let out = require_out(&cli.out)?;
            let (manifest, root) = RunManifest::load(&manifest)?;
            let rows = build_table(&manifest, &root, cap)?;
            write_feature_table(out, &rows)?;
            println!("wrote {} ({} rows)", out.display(), rows.len());
        }
        Command::Gbm { command } => match command {
            GbmCommand::Train { table, params, model } => {
                let rows = read_feature_table(&table)?;
                let params = load_params(&params)?;
                let fitted = boost::fit(&rows, &params, cli.seed)?;
                fitted.save(&model)?;
                println!("wrote {} ({} trees)", model.display(), fitted.trees.len());
            }
            GbmCommand::Eval { model, table, cap } => {
                let out = require_out(&cli.out)?;
                let model = BoostModel::load(&model)?;
                let rows = read_feature_table(&table)?;
                let preds = model.predict_rows(&rows)?;
                let targets: Vec<f64> = rows.iter().map(|r| r.target).collect();
                let mut report = boost::evaluate(&preds, &targets)?;
                if let Some(cap) = cap {
                    report.epoch_cap_fraction = cap;
                }
                write_eval_report(out, &report)?;
                println!(
                    "wrote {} (accuracy {:.2}%, rrmse {:.4})",
                    out.display(),
                    report.accuracy_percent,
                    report.rrmse
                );
            }
        },
        Command::Sweep { manifest, params, caps, test_fraction } => {
            let out = require_out(&cli.out)?;
            let (manifest, root) = RunManifest::load(&manifest)?;
            let params = load_params(&params)?;
            let caps = parse_caps(&caps)?;
            let split =
                split_by_config(&manifest, test_fraction, seeds::derive_seed(cli.seed, "split"))?;
            fsio::write_json(&out.join("split.json"), &split)?;
            let outcome = run_sweep(
                &manifest,
                &root,
                &split,
                &params,
                &caps,
                seeds::derive_seed(cli.seed, "model"),
            )?;
            write_sweep_report(&out.join("sweep_report.csv"), &outcome.report)?;
            write_eval_report(&out.join("validation.csv"), &outcome.validation)?;
            outcome.model.save(&out.join("model.json"))?;
            println!("wrote {}", out.join("sweep_report.csv").display());
        }
        Command::Pipeline => {
            let config_path = cli
                .config
                .as_deref()
                .ok_or_else(|| Error::Usage("--config is required for pipeline".into()))?;
            let out = require_out(&cli.out)?;
            let config = ExperimentConfig::load(config_path)?;
            let summary = run_pipeline(&config, out)?;
            println!("pipeline complete: {} files under {}", summary.files.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are not usage errors.
            if matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{err}");
                std::process::exit(0);
            }
            let _ = err.print();
            std::process::exit(1);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        let mut source = std::error::Error::source(&err);
        while let Some(cause) = source {
            eprintln!("  caused by: {cause}");
            source = cause.source();
        }
        std::process::exit(err.category().exit_code());
    }
}
