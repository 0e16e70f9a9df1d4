//! Gradient-boosted regression trees with a squared-error objective.
//!
//! Second-order boosting on squared loss (g = prediction - target, h = 1)
//! with exact greedy split search over sorted feature values, per-tree column
//! subsampling, L1 soft-thresholding of leaf sums (`alpha`) and L2 shrinkage
//! (`lambda`). Splits are accepted only on strictly positive gain, ties
//! resolved to the lowest feature index and then the lowest threshold, so
//! training is deterministic given the seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::weightstats::FeatureRow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub colsample_by_tree: f64,
    /// L1 regularization on leaf weights (soft-thresholds the gradient sum).
    pub alpha: f64,
    /// L2 regularization on leaf weights.
    pub lambda: f64,
    /// Minimum hessian sum (= row count for squared loss) per child.
    pub min_child_weight: f64,
    pub base_score: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            n_trees: 128,
            max_depth: 7,
            learning_rate: 0.1,
            colsample_by_tree: 0.3,
            alpha: 40.0,
            lambda: 1.0,
            min_child_weight: 1.0,
            base_score: 0.5,
        }
    }
}

impl BoostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.colsample_by_tree > 0.0 && self.colsample_by_tree <= 1.0) {
            return Err(Error::invalid(format!(
                "colsample_by_tree must lie in (0, 1], got {}",
                self.colsample_by_tree
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        for (name, v) in
            [("alpha", self.alpha), ("lambda", self.lambda), ("min_child_weight", self.min_child_weight)]
        {
            if !(v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !self.base_score.is_finite() {
            return Err(Error::invalid("base_score must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { weight: f64 },
}

/// Nodes in preorder; the root is index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn leaf_weight(&self, features: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { weight } => return *weight,
                TreeNode::Split { feature, threshold, left, right } => {
                    idx = if features[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }

    fn depth_from(&self, idx: usize) -> usize {
        match &self.nodes[idx] {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => {
                1 + self.depth_from(*left).max(self.depth_from(*right))
            }
        }
    }

    pub fn depth(&self) -> usize {
        self.depth_from(0)
    }

    pub fn split_features(&self) -> Vec<usize> {
        let mut features: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Split { feature, .. } => Some(*feature),
                TreeNode::Leaf { .. } => None,
            })
            .collect();
        features.sort_unstable();
        features.dedup();
        features
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    pub params: BoostParams,
    pub feature_count: usize,
    pub trees: Vec<Tree>,
}

impl BoostModel {
    /// `base_score + learning_rate * sum(reached-leaf weights)`; descends
    /// left when `feature < threshold`.
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.feature_count {
            return Err(Error::ShapeMismatch(format!(
                "expected {} features, got {}",
                self.feature_count,
                features.len()
            )));
        }
        let mut score = self.params.base_score;
        for tree in &self.trees {
            score += self.params.learning_rate * tree.leaf_weight(features);
        }
        Ok(score)
    }

    pub fn predict_rows(&self, rows: &[FeatureRow]) -> Result<Vec<f64>> {
        rows.iter().map(|row| self.predict(&row.features)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        for tree in &self.trees {
            if tree.depth() > self.params.max_depth {
                return Err(Error::invalid("tree exceeds max_depth"));
            }
            if tree.split_features().iter().any(|f| *f >= self.feature_count) {
                return Err(Error::invalid("split feature index out of range"));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: BoostModel = fsio::read_json(path)?;
        model.validate()?;
        Ok(model)
    }
}

/// Soft-thresholded leaf numerator.
fn thresholded(g_sum: f64, alpha: f64) -> f64 {
    if g_sum > alpha {
        g_sum - alpha
    } else if g_sum < -alpha {
        g_sum + alpha
    } else {
        0.0
    }
}

fn leaf_objective(g_sum: f64, h_sum: f64, alpha: f64, lambda: f64) -> f64 {
    let t = thresholded(g_sum, alpha);
    t * t / (h_sum + lambda)
}

fn leaf_weight(g_sum: f64, h_sum: f64, alpha: f64, lambda: f64) -> f64 {
    -thresholded(g_sum, alpha) / (h_sum + lambda)
}

struct TreeBuilder<'a> {
    columns: &'a [Vec<f64>],
    gradients: &'a [f64],
    params: &'a BoostParams,
    features: &'a [usize],
    nodes: Vec<TreeNode>,
    leaf_deltas: Vec<(u32, f64)>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl TreeBuilder<'_> {
    fn build(&mut self, rows: Vec<u32>, depth: usize) -> usize {
        let g_sum: f64 = rows.iter().map(|&r| self.gradients[r as usize]).sum();
        let h_sum = rows.len() as f64;
        let best = if depth < self.params.max_depth {
            self.best_split(&rows, g_sum, h_sum)
        } else {
            None
        };
        match best {
            Some(split) => {
                let column = &self.columns[split.feature];
                let (left_rows, right_rows): (Vec<u32>, Vec<u32>) =
                    rows.into_iter().partition(|&r| column[r as usize] < split.threshold);
                let idx = self.nodes.len();
                self.nodes.push(TreeNode::Split {
                    feature: split.feature,
                    threshold: split.threshold,
                    left: 0,
                    right: 0,
                });
                let left = self.build(left_rows, depth + 1);
                let right = self.build(right_rows, depth + 1);
                if let TreeNode::Split { left: l, right: r, .. } = &mut self.nodes[idx] {
                    *l = left;
                    *r = right;
                }
                idx
            }
            None => {
                let weight = leaf_weight(g_sum, h_sum, self.params.alpha, self.params.lambda);
                for &row in &rows {
                    self.leaf_deltas.push((row, weight));
                }
                let idx = self.nodes.len();
                self.nodes.push(TreeNode::Leaf { weight });
                idx
            }
        }
    }

    fn best_split(&self, rows: &[u32], g_sum: f64, h_sum: f64) -> Option<BestSplit> {
        let parent = leaf_objective(g_sum, h_sum, self.params.alpha, self.params.lambda);
        let mut best: Option<BestSplit> = None;
        let mut sorted: Vec<u32> = Vec::with_capacity(rows.len());
        for &feature in self.features {
            let column = &self.columns[feature];
            sorted.clear();
            sorted.extend_from_slice(rows);
            sorted.sort_by(|&a, &b| {
                column[a as usize].total_cmp(&column[b as usize]).then(a.cmp(&b))
            });
            let mut g_left = 0.0;
            let mut h_left = 0.0;
            for pair in sorted.windows(2) {
                let (lo, hi) = (pair[0] as usize, pair[1] as usize);
                g_left += self.gradients[lo];
                h_left += 1.0;
                let (v_lo, v_hi) = (column[lo], column[hi]);
                if v_lo == v_hi {
                    continue;
                }
                let h_right = h_sum - h_left;
                if h_left < self.params.min_child_weight
                    || h_right < self.params.min_child_weight
                {
                    continue;
                }
                let g_right = g_sum - g_left;
                let gain = 0.5
                    * (leaf_objective(g_left, h_left, self.params.alpha, self.params.lambda)
                        + leaf_objective(g_right, h_right, self.params.alpha, self.params.lambda)
                        - parent);
                if gain > 0.0 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mid = 0.5 * (v_lo + v_hi);
                    // Keep `x < threshold` equivalent to `x <= v_lo` even
                    // when the midpoint rounds onto an endpoint.
                    let threshold = if mid > v_lo { mid } else { v_hi };
                    best = Some(BestSplit { gain, feature, threshold });
                }
            }
        }
        best
    }
}

fn check_rows(rows: &[FeatureRow]) -> Result<usize> {
    let first = rows.first().ok_or_else(|| Error::invalid("fit: empty training table"))?;
    let n_features = first.features.len();
    for row in rows {
        if row.features.len() != n_features {
            return Err(Error::ShapeMismatch(format!(
                "row for `{}` epoch {} has {} features, expected {n_features}",
                row.config_id,
                row.epoch,
                row.features.len()
            )));
        }
        if row.features.iter().any(|v| !v.is_finite()) || !row.target.is_finite() {
            return Err(Error::NonFinite(format!(
                "training row for `{}` epoch {}",
                row.config_id, row.epoch
            )));
        }
    }
    Ok(n_features)
}

/// Additive training; returns the model plus the training RMSE after each
/// round.
pub fn fit_with_history(
    rows: &[FeatureRow],
    params: &BoostParams,
    seed: u64,
) -> Result<(BoostModel, Vec<f64>)> {
    params.validate()?;
    let n_features = check_rows(rows)?;
    let n_rows = rows.len();

    let mut columns: Vec<Vec<f64>> = vec![vec![0.0; n_rows]; n_features];
    for (r, row) in rows.iter().enumerate() {
        for (f, &v) in row.features.iter().enumerate() {
            columns[f][r] = v;
        }
    }
    let targets: Vec<f64> = rows.iter().map(|r| r.target).collect();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n_sampled = ((params.colsample_by_tree * n_features as f64).ceil() as usize)
        .clamp(1, n_features);

    let mut predictions = vec![params.base_score; n_rows];
    let mut gradients = vec![0.0; n_rows];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut history = Vec::with_capacity(params.n_trees);
    let all_features: Vec<usize> = (0..n_features).collect();

    for _ in 0..params.n_trees {
        let features: Vec<usize> = if n_sampled == n_features {
            all_features.clone()
        } else {
            // Partial Fisher-Yates over a scratch copy, then sorted so the
            // split scan visits candidates in ascending feature order.
            let mut pool = all_features.clone();
            for i in 0..n_sampled {
                let j = i + rng.random_range(0..pool.len() - i);
                pool.swap(i, j);
            }
            let mut picked = pool[..n_sampled].to_vec();
            picked.sort_unstable();
            picked
        };
        for (g, (p, t)) in gradients.iter_mut().zip(predictions.iter().zip(&targets)) {
            *g = p - t;
        }
        let mut builder = TreeBuilder {
            columns: &columns,
            gradients: &gradients,
            params,
            features: &features,
            nodes: Vec::new(),
            leaf_deltas: Vec::new(),
        };
        builder.build((0..n_rows as u32).collect(), 0);
        for &(row, weight) in &builder.leaf_deltas {
            predictions[row as usize] += params.learning_rate * weight;
        }
        trees.push(Tree { nodes: builder.nodes });
        let mse: f64 = predictions
            .iter()
            .zip(&targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n_rows as f64;
        history.push(mse.sqrt());
    }

    Ok((BoostModel { params: params.clone(), feature_count: n_features, trees }, history))
}

pub fn fit(rows: &[FeatureRow], params: &BoostParams, seed: u64) -> Result<BoostModel> {
    fit_with_history(rows, params, seed).map(|(model, _)| model)
}

/// Relative accuracy/error pair for a set of predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `100 * (1 - mean(|pred - target| / |target|))`, floored at 0.
    pub accuracy_percent: f64,
    /// RMSE divided by the mean magnitude of the targets.
    pub rrmse: f64,
    pub n_rows: usize,
    pub epoch_cap_fraction: f64,
}

pub fn evaluate(predictions: &[f64], targets: &[f64]) -> Result<EvalReport> {
    if predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::invalid("evaluate: empty input"));
    }
    if let Some(row) = targets.iter().position(|t| *t == 0.0) {
        return Err(Error::ZeroTarget { row });
    }
    let n = targets.len() as f64;
    let mean_rel_abs: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs() / t.abs())
        .sum::<f64>()
        / n;
    let rmse =
        (predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt();
    let mean_abs_target: f64 = targets.iter().map(|t| t.abs()).sum::<f64>() / n;
    Ok(EvalReport {
        accuracy_percent: (100.0 * (1.0 - mean_rel_abs)).max(0.0),
        rrmse: rmse / mean_abs_target,
        n_rows: targets.len(),
        epoch_cap_fraction: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn row(features: &[f64], target: f64) -> FeatureRow {
        FeatureRow { config_id: "c".into(), epoch: 1, features: features.to_vec(), target }
    }

    fn random_rows(n: usize, n_features: usize, seed: u64) -> Vec<FeatureRow> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let features: Vec<f64> = (0..n_features).map(|_| rng.random::<f64>()).collect();
                let target = features.iter().sum::<f64>() + 0.1;
                row(&features, target)
            })
            .collect()
    }

    #[test]
    fn zero_trees_predict_the_base_score() {
        let rows = random_rows(20, 3, 1);
        let params = BoostParams { n_trees: 0, ..Default::default() };
        let model = fit(&rows, &params, 1).unwrap();
        for r in &rows {
            assert_eq!(model.predict(&r.features).unwrap(), 0.5);
        }
    }

    #[test]
    fn single_stump_with_no_regularization_predicts_the_mean() {
        let rows =
            vec![row(&[0.0], 1.0), row(&[1.0], 2.0), row(&[2.0], 3.0), row(&[3.0], 6.0)];
        let params = BoostParams {
            n_trees: 1,
            max_depth: 0,
            learning_rate: 1.0,
            colsample_by_tree: 1.0,
            alpha: 0.0,
            lambda: 0.0,
            min_child_weight: 0.0,
            base_score: 0.0,
        };
        let model = fit(&rows, &params, 0).unwrap();
        let mean = (1.0 + 2.0 + 3.0 + 6.0) / 4.0;
        for r in &rows {
            assert!((model.predict(&r.features).unwrap() - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_targets_shrink_geometrically() {
        let rows: Vec<FeatureRow> =
            (0..50).map(|i| row(&[i as f64, (i * 7 % 13) as f64], 1.0)).collect();
        let params = BoostParams {
            alpha: 0.0,
            lambda: 0.0,
            colsample_by_tree: 1.0,
            ..Default::default()
        };
        let (model, history) = fit_with_history(&rows, &params, 3).unwrap();
        let expected = 0.9f64.powi(128) * 0.5;
        let residual = (model.predict(&rows[0].features).unwrap() - 1.0).abs();
        assert!(residual <= 1e-6, "residual {residual}");
        assert!((residual - expected).abs() < 1e-9);
        assert!((history.last().unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn hand_built_tree_evaluates_by_threshold() {
        let model = BoostModel {
            params: BoostParams { learning_rate: 0.1, base_score: 0.5, ..Default::default() },
            feature_count: 1,
            trees: vec![Tree {
                nodes: vec![
                    TreeNode::Split { feature: 0, threshold: 1.0, left: 1, right: 2 },
                    TreeNode::Leaf { weight: -1.0 },
                    TreeNode::Leaf { weight: 1.0 },
                ],
            }],
        };
        assert!((model.predict(&[0.0]).unwrap() - 0.4).abs() < 1e-15);
        assert!((model.predict(&[2.0]).unwrap() - 0.6).abs() < 1e-15);
        assert!(model.predict(&[0.0, 1.0]).is_err());
        // Pure: repeated calls agree bitwise.
        assert_eq!(model.predict(&[0.0]).unwrap(), model.predict(&[0.0]).unwrap());
    }

    #[test]
    fn unregularized_training_rmse_is_non_increasing() {
        let rows = random_rows(300, 4, 9);
        let params = BoostParams {
            n_trees: 60,
            alpha: 0.0,
            colsample_by_tree: 1.0,
            ..Default::default()
        };
        let (_, history) = fit_with_history(&rows, &params, 5).unwrap();
        assert_eq!(history.len(), 60);
        for pair in history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn huge_alpha_zeroes_every_leaf() {
        let rows = random_rows(100, 3, 2);
        let params =
            BoostParams { alpha: 1e6, colsample_by_tree: 1.0, ..Default::default() };
        let model = fit(&rows, &params, 7).unwrap();
        for r in &rows {
            assert_eq!(model.predict(&r.features).unwrap(), 0.5);
        }
    }

    #[test]
    fn trees_respect_depth_and_column_budget() {
        let rows = random_rows(400, 10, 11);
        let params = BoostParams {
            n_trees: 20,
            max_depth: 3,
            alpha: 0.0,
            colsample_by_tree: 0.3,
            ..Default::default()
        };
        let model = fit(&rows, &params, 13).unwrap();
        model.validate().unwrap();
        for tree in &model.trees {
            assert!(tree.depth() <= 3);
            assert!(tree.split_features().len() <= 3); // ceil(0.3 * 10)
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_models() {
        let rows = random_rows(150, 8, 21);
        let params = BoostParams { n_trees: 10, ..Default::default() };
        let a = fit(&rows, &params, 42).unwrap();
        let b = fit(&rows, &params, 42).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let c = fit(&rows, &params, 43).unwrap();
        assert_ne!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&c).unwrap());
    }

    #[test]
    fn model_serialization_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let rows = random_rows(120, 5, 33);
        let params = BoostParams { n_trees: 12, alpha: 0.5, ..Default::default() };
        let model = fit(&rows, &params, 4).unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let restored = BoostModel::load(&path).unwrap();
        assert_eq!(model, restored);
        let again = dir.path().join("model2.json");
        restored.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        for r in &rows {
            assert_eq!(model.predict(&r.features).unwrap(), restored.predict(&r.features).unwrap());
        }
    }

    #[test]
    fn mismatched_feature_lengths_are_rejected() {
        let rows = vec![row(&[1.0, 2.0], 1.0), row(&[1.0], 2.0)];
        assert!(fit(&rows, &BoostParams::default(), 0).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let perfect = evaluate(&[1.0, 0.5], &[1.0, 0.5]).unwrap();
        assert_eq!(perfect.accuracy_percent, 100.0);
        assert_eq!(perfect.rrmse, 0.0);
        assert_eq!(perfect.n_rows, 2);

        let single = evaluate(&[0.9], &[1.0]).unwrap();
        assert!((single.accuracy_percent - 90.0).abs() < 1e-12);
        assert!((single.rrmse - 0.1).abs() < 1e-12);

        assert!(matches!(evaluate(&[1.0], &[0.0]), Err(Error::ZeroTarget { row: 0 })));
        assert!(evaluate(&[], &[]).is_err());
        assert!(evaluate(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn additive_signal_is_learnable_without_l1() {
        let rows = random_rows(500, 5, 55);
        let params = BoostParams { alpha: 0.0, ..Default::default() };
        let (_, history) = fit_with_history(&rows, &params, 8).unwrap();
        let targets: Vec<f64> = rows.iter().map(|r| r.target).collect();
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        let std =
            (targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / targets.len() as f64)
                .sqrt();
        assert!(
            *history.last().unwrap() <= 0.05 * std,
            "rmse {} vs 5% of std {}",
            history.last().unwrap(),
            0.05 * std
        );
    }
}
