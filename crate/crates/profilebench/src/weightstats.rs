//! Per-layer weight summary statistics and the feature table they form.
//!
//! Each layer of a snapshot contributes a 2x7 block (kernel and bias, each
//! summarized as mean, variance, and the 0/25/50/75/100th percentiles), so an
//! L-layer network maps to a 14L-dimensional feature vector tied to its
//! configuration's final test accuracy.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;

/// mean, variance, q0, q25, q50, q75, q100.
pub const STATS_PER_ARRAY: usize = 7;
/// Kernel stats followed by bias stats.
pub const STATS_PER_LAYER: usize = 2 * STATS_PER_ARRAY;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub name: String,
    pub kernel_shape: Vec<usize>,
    /// Flattened row-major.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

/// All layer weights of one configuration at the end of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSnapshot {
    pub config_id: String,
    pub epoch: usize,
    pub layers: Vec<LayerWeights>,
}

impl WeightSnapshot {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("snapshot has no layers"));
        }
        for layer in &self.layers {
            if layer.kernel.is_empty() || layer.bias.is_empty() {
                return Err(Error::invalid(format!("layer `{}` has an empty array", layer.name)));
            }
            let expected: usize = layer.kernel_shape.iter().product();
            if layer.kernel_shape.is_empty() || expected != layer.kernel.len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{}`: kernel_shape {:?} does not match {} values",
                    layer.name,
                    layer.kernel_shape,
                    layer.kernel.len()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsio::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }
}

/// Summary statistics of one array: mean, population variance, and the
/// 0/25/50/75/100th percentiles (linear interpolation at `q/100 * (n-1)`).
/// All statistics are computed from the sorted array, so the result is
/// bit-identical under any permutation of the input.
pub fn layer_stats(values: &[f64]) -> Result<[f64; STATS_PER_ARRAY]> {
    if values.is_empty() {
        return Err(Error::invalid("layer_stats: empty array"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("layer statistics input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let variance = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let percentile = |q: f64| -> f64 {
        let idx = q / 100.0 * (sorted.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let frac = idx - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    };
    Ok([
        mean,
        variance,
        sorted[0],
        percentile(25.0),
        percentile(50.0),
        percentile(75.0),
        sorted[sorted.len() - 1],
    ])
}

/// Flatten a snapshot into its feature vector: per layer in order, the
/// kernel statistics then the bias statistics. Length is `14 * layers`.
pub fn snapshot_features(snapshot: &WeightSnapshot) -> Result<Vec<f64>> {
    snapshot.validate()?;
    let mut features = Vec::with_capacity(snapshot.layers.len() * STATS_PER_LAYER);
    for layer in &snapshot.layers {
        features.extend_from_slice(&layer_stats(&layer.kernel)?);
        features.extend_from_slice(&layer_stats(&layer.bias)?);
    }
    Ok(features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSnapshot {
    pub epoch: usize,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub config_id: String,
    pub hyperparameters: BTreeMap<String, String>,
    pub final_test_accuracy: f64,
    pub snapshots: Vec<ManifestSnapshot>,
}

/// Index of an experiment: configurations, their final accuracies, and where
/// each epoch's snapshot lives. Snapshot paths are relative to the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub configs: Vec<ManifestConfig>,
    pub max_epoch: usize,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if self.configs.is_empty() {
            return Err(Error::invalid("manifest lists no configurations"));
        }
        for config in &self.configs {
            if !(0.0..=1.0).contains(&config.final_test_accuracy) {
                return Err(Error::invalid(format!(
                    "config `{}`: final_test_accuracy {} outside [0, 1]",
                    config.config_id, config.final_test_accuracy
                )));
            }
            let mut epochs: Vec<usize> = config.snapshots.iter().map(|s| s.epoch).collect();
            epochs.sort_unstable();
            if epochs.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!(
                    "config `{}`: duplicate snapshot epochs",
                    config.config_id
                )));
            }
        }
        Ok(())
    }

    /// Load a manifest; the returned root is the directory snapshot paths
    /// are resolved against.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let manifest: RunManifest = fsio::read_json(path)?;
        manifest.validate()?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok((manifest, root))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    /// The manifest restricted to the given config ids, in manifest order.
    pub fn subset(&self, config_ids: &[String]) -> RunManifest {
        RunManifest {
            configs: self
                .configs
                .iter()
                .filter(|c| config_ids.contains(&c.config_id))
                .cloned()
                .collect(),
            max_epoch: self.max_epoch,
        }
    }
}

/// One feature-table row: the statistics of one snapshot, targeted at its
/// configuration's final test accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub config_id: String,
    pub epoch: usize,
    pub features: Vec<f64>,
    pub target: f64,
}

/// Highest admitted epoch for a cap fraction: `round(fraction * max_epoch)`
/// (half-up), at least 1.
pub fn cap_epochs(fraction: f64, max_epoch: usize) -> usize {
    let raw = (fraction * max_epoch as f64 + 0.5).floor() as usize;
    raw.max(1)
}

/// Build the feature table for every (config, epoch) with
/// `epoch <= cap_epochs(fraction, max_epoch)`, in manifest order then epoch
/// order. Every row of a config carries that config's final test accuracy.
pub fn build_table(
    manifest: &RunManifest,
    root: &Path,
    epoch_cap_fraction: f64,
) -> Result<Vec<FeatureRow>> {
    manifest.validate()?;
    if !(epoch_cap_fraction > 0.0 && epoch_cap_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "epoch cap fraction must lie in (0, 1], got {epoch_cap_fraction}"
        )));
    }
    let cap = cap_epochs(epoch_cap_fraction, manifest.max_epoch);
    let mut rows: Vec<FeatureRow> = Vec::new();
    let mut feature_len: Option<usize> = None;
    for config in &manifest.configs {
        let mut snapshots = config.snapshots.clone();
        snapshots.sort_by_key(|s| s.epoch);
        for entry in snapshots.into_iter().filter(|s| s.epoch <= cap) {
            let wrap = |source: Error| Error::Snapshot {
                config_id: config.config_id.clone(),
                epoch: entry.epoch,
                source: Box::new(source),
            };
            let snapshot = WeightSnapshot::load(&root.join(&entry.path)).map_err(&wrap)?;
            if snapshot.config_id != config.config_id || snapshot.epoch != entry.epoch {
                return Err(wrap(Error::invalid(format!(
                    "file claims config `{}` epoch {}",
                    snapshot.config_id, snapshot.epoch
                ))));
            }
            let features = snapshot_features(&snapshot).map_err(&wrap)?;
            if let Some(len) = feature_len {
                if features.len() != len {
                    return Err(wrap(Error::ShapeMismatch(format!(
                        "feature length {} differs from {} seen earlier",
                        features.len(),
                        len
                    ))));
                }
            } else {
                feature_len = Some(features.len());
            }
            rows.push(FeatureRow {
                config_id: config.config_id.clone(),
                epoch: entry.epoch,
                features,
                target: config.final_test_accuracy,
            });
        }
    }
    Ok(rows)
}

/// Write rows as `config_id, epoch, f0..f(14L-1), target`.
pub fn write_feature_table(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let n_features = rows.first().map(|r| r.features.len()).unwrap_or(0);
    let mut header: Vec<String> = vec!["config_id".into(), "epoch".into()];
    header.extend((0..n_features).map(|i| format!("f{i}")));
    header.push("target".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let mut record = vec![row.config_id.clone(), row.epoch.to_string()];
            record.extend(row.features.iter().map(|f| f.to_string()));
            record.push(row.target.to_string());
            record
        })
        .collect();
    fsio::write_csv(path, &header_refs, &csv_rows)
}

pub fn read_feature_table(path: &Path) -> Result<Vec<FeatureRow>> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv { path: display.clone(), source: Box::new(e) })?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::Csv { path: display.clone(), source: Box::new(e) })?;
        if record.len() < 3 {
            return Err(Error::invalid(format!("{display}: row with {} columns", record.len())));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("{display}: bad number `{s}`: {e}")))
        };
        let epoch = record[1]
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::invalid(format!("{display}: bad epoch `{}`: {e}", &record[1])))?;
        let features: Vec<f64> =
            (2..record.len() - 1).map(|i| parse(&record[i])).collect::<Result<_>>()?;
        rows.push(FeatureRow {
            config_id: record[0].to_string(),
            epoch,
            features,
            target: parse(&record[record.len() - 1])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn five_point_symmetric_array() {
        let stats = layer_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(stats, [3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn constant_array_has_no_spread() {
        let stats = layer_stats(&[2.5; 9]).unwrap();
        assert_eq!(stats, [2.5, 0.0, 2.5, 2.5, 2.5, 2.5, 2.5]);
    }

    #[test]
    fn empty_and_non_finite_arrays_are_rejected() {
        assert!(layer_stats(&[]).is_err());
        assert!(layer_stats(&[1.0, f64::NAN]).is_err());
        assert!(layer_stats(&[1.0, f64::INFINITY]).is_err());
    }

    // Independent oracle: plain sort plus direct formula evaluation.
    fn oracle_stats(values: &[f64]) -> [f64; 7] {
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len() as f64;
        let mean: f64 = s.iter().sum::<f64>() / n;
        let var: f64 = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let pct = |q: f64| {
            let rank = q / 100.0 * (s.len() as f64 - 1.0);
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            s[lo] * (1.0 - (rank - lo as f64)) + s[hi] * (rank - lo as f64)
        };
        [mean, var, s[0], pct(25.0), pct(50.0), pct(75.0), s[s.len() - 1]]
    }

    #[test]
    fn thousand_random_arrays_match_the_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(404);
        for trial in 0..1000 {
            let len = 1 + (trial % 97);
            let values: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
            let got = layer_stats(&values).unwrap();
            let want = oracle_stats(&values);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12, "trial {trial}: {g} vs {w}");
            }
        }
    }

    fn snapshot_with_layers(n_layers: usize) -> WeightSnapshot {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let layers = (0..n_layers)
            .map(|i| LayerWeights {
                name: format!("dense_{i}"),
                kernel_shape: vec![4, 3],
                kernel: (0..12).map(|_| rng.random::<f64>()).collect(),
                bias: (0..3).map(|_| rng.random::<f64>()).collect(),
            })
            .collect();
        WeightSnapshot { config_id: "cfg".into(), epoch: 1, layers }
    }

    #[test]
    fn seventeen_layers_give_238_features() {
        let features = snapshot_features(&snapshot_with_layers(17)).unwrap();
        assert_eq!(features.len(), 238);
    }

    #[test]
    fn three_layers_give_42_features() {
        let features = snapshot_features(&snapshot_with_layers(3)).unwrap();
        assert_eq!(features.len(), 42);
    }

    #[test]
    fn kernel_permutation_leaves_features_unchanged() {
        let snapshot = snapshot_with_layers(2);
        let mut permuted = snapshot.clone();
        permuted.layers[0].kernel.reverse();
        permuted.layers[1].kernel.rotate_left(5);
        assert_eq!(
            snapshot_features(&snapshot).unwrap(),
            snapshot_features(&permuted).unwrap()
        );
    }

    #[test]
    fn cap_arithmetic_reproduces_the_published_epoch_anchors() {
        let anchors = [(0.05, 4), (0.10, 8), (0.25, 19), (0.50, 38), (0.75, 56), (1.00, 75)];
        for (fraction, epoch) in anchors {
            assert_eq!(cap_epochs(fraction, 75), epoch, "fraction {fraction}");
        }
        assert_eq!(cap_epochs(0.001, 75), 1);
    }

    fn write_manifest_tree(
        dir: &Path,
        n_configs: usize,
        n_epochs: usize,
    ) -> (RunManifest, PathBuf) {
        let mut configs = Vec::new();
        for c in 0..n_configs {
            let config_id = format!("cfg{c:02}");
            let mut snapshots = Vec::new();
            for epoch in 1..=n_epochs {
                let rel = format!("snapshots/{config_id}/epoch_{epoch:04}.json");
                let snapshot = WeightSnapshot {
                    config_id: config_id.clone(),
                    epoch,
                    layers: vec![LayerWeights {
                        name: "dense_0".into(),
                        kernel_shape: vec![2, 2],
                        kernel: vec![c as f64, epoch as f64, 0.5, -0.5],
                        bias: vec![0.1, 0.2],
                    }],
                };
                snapshot.save(&dir.join(&rel)).unwrap();
                snapshots.push(ManifestSnapshot { epoch, path: rel });
            }
            configs.push(ManifestConfig {
                config_id,
                hyperparameters: BTreeMap::new(),
                final_test_accuracy: 0.5 + 0.4 * (c as f64) / n_configs as f64,
                snapshots,
            });
        }
        let manifest = RunManifest { configs, max_epoch: n_epochs };
        manifest.save(&dir.join("manifest.json")).unwrap();
        (manifest, dir.to_path_buf())
    }

    #[test]
    fn full_cap_yields_2625_rows_for_35_by_75() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, root) = write_manifest_tree(dir.path(), 35, 75);
        let rows = build_table(&manifest, &root, 1.0).unwrap();
        assert_eq!(rows.len(), 2625);
    }

    #[test]
    fn five_percent_cap_takes_epochs_up_to_4() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, root) = write_manifest_tree(dir.path(), 2, 75);
        let rows = build_table(&manifest, &root, 0.05).unwrap();
        assert_eq!(rows.len(), 2 * 4);
        assert!(rows.iter().all(|r| r.epoch <= 4));
    }

    #[test]
    fn rows_carry_their_configs_final_accuracy_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, root) = write_manifest_tree(dir.path(), 3, 5);
        let rows = build_table(&manifest, &root, 1.0).unwrap();
        let mut expected_order = Vec::new();
        for config in &manifest.configs {
            for epoch in 1..=5 {
                expected_order.push((config.config_id.clone(), epoch));
            }
        }
        let got_order: Vec<(String, usize)> =
            rows.iter().map(|r| (r.config_id.clone(), r.epoch)).collect();
        assert_eq!(got_order, expected_order);
        for row in &rows {
            let config =
                manifest.configs.iter().find(|c| c.config_id == row.config_id).unwrap();
            assert_eq!(row.target, config.final_test_accuracy);
        }
    }

    #[test]
    fn missing_snapshot_file_names_config_and_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let (mut manifest, root) = write_manifest_tree(dir.path(), 1, 3);
        manifest.configs[0].snapshots[1].path = "snapshots/nowhere.json".into();
        let err = build_table(&manifest, &root, 1.0).unwrap_err();
        match err {
            Error::Snapshot { config_id, epoch, .. } => {
                assert_eq!(config_id, "cfg00");
                assert_eq!(epoch, 2);
            }
            other => panic!("expected Snapshot error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_weight_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, root) = write_manifest_tree(dir.path(), 1, 2);
        let path = root.join(&manifest.configs[0].snapshots[0].path);
        let mut snapshot = WeightSnapshot::load(&path).unwrap();
        snapshot.layers[0].kernel[1] = f64::NAN;
        snapshot.save(&path).unwrap();
        let err = build_table(&manifest, &root, 1.0).unwrap_err();
        assert!(matches!(err, Error::Snapshot { .. }));
    }

    #[test]
    fn feature_table_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, root) = write_manifest_tree(dir.path(), 2, 3);
        let rows = build_table(&manifest, &root, 1.0).unwrap();
        let path = dir.path().join("table.csv");
        write_feature_table(&path, &rows).unwrap();
        let restored = read_feature_table(&path).unwrap();
        assert_eq!(rows, restored);
    }

    proptest! {
        #[test]
        fn stats_match_oracle_on_random_arrays(
            values in prop::collection::vec(-100.0f64..100.0, 1..200)
        ) {
            let got = layer_stats(&values).unwrap();
            let want = oracle_stats(&values);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
            }
        }

        #[test]
        fn build_table_row_count_formula(configs in 1usize..4, epochs in 1usize..12, cap in 0.01f64..1.0) {
            let dir = tempfile::tempdir().unwrap();
            let (manifest, root) = write_manifest_tree(dir.path(), configs, epochs);
            let rows = build_table(&manifest, &root, cap).unwrap();
            let cap_e = cap_epochs(cap, epochs).min(epochs);
            prop_assert_eq!(rows.len(), configs * cap_e);
        }
    }
}
