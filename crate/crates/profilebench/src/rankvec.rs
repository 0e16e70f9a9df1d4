//! Ranking vectors over per-dataset model metrics and distances between them.
//!
//! Each model is pinned to a fixed index (the model order); a ranking vector
//! stores, at that index, the model's rank under one metric on one dataset.
//! Distances between ranking vectors quantify how much a dataset permutes
//! the model ordering relative to another dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether rank 1 goes to the smallest or the largest value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Rank 1 = smallest value (losses, epoch counts).
    #[serde(alias = "asc")]
    Ascending,
    /// Rank 1 = largest value (accuracies).
    #[serde(alias = "desc")]
    Descending,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Ascending => write!(f, "asc"),
            Direction::Descending => write!(f, "desc"),
        }
    }
}

/// One row of a metrics file: a metric value for a (dataset, model) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset_id: String,
    pub model_id: String,
    pub metric_id: String,
    pub value: f64,
}

/// Raw metric values plus the model order that fixes vector index positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub model_order: Vec<String>,
}

/// Ranks aligned to a model order: `ranks[i]` is the rank of the i-th model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingVector {
    pub dataset_id: String,
    pub metric_id: String,
    pub ranks: Vec<usize>,
}

/// Category labels per dataset and mean distances between category pairs.
/// `averages` stores both orientations of every pair, so it is symmetric by
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryTable {
    pub categories: BTreeMap<String, String>,
    pub averages: BTreeMap<(String, String), f64>,
}

impl RankingVector {
    /// True when `ranks` is a permutation of 1..=n.
    pub fn is_permutation(&self) -> bool {
        let n = self.ranks.len();
        let mut seen = vec![false; n];
        for &r in &self.ranks {
            if r == 0 || r > n || seen[r - 1] {
                return false;
            }
            seen[r - 1] = true;
        }
        true
    }
}

impl MetricTable {
    /// Read a `dataset,model,metric,value` file. The model order is the
    /// order of first appearance in the file.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Csv { path: display.clone(), source: Box::new(e) })?;
        let mut rows = Vec::new();
        let mut model_order = Vec::new();
        let mut seen_models = BTreeSet::new();
        let mut seen_triples = BTreeSet::new();
        for record in reader.records() {
            let record =
                record.map_err(|e| Error::Csv { path: display.clone(), source: Box::new(e) })?;
            if record.len() != 4 {
                return Err(Error::invalid(format!(
                    "{display}: expected 4 columns (dataset,model,metric,value), got {}",
                    record.len()
                )));
            }
            let row = MetricRow {
                dataset_id: record[0].to_string(),
                model_id: record[1].to_string(),
                metric_id: record[2].to_string(),
                value: record[3].trim().parse::<f64>().map_err(|e| {
                    Error::invalid(format!("{display}: bad metric value `{}`: {e}", &record[3]))
                })?,
            };
            if !seen_triples.insert((
                row.dataset_id.clone(),
                row.model_id.clone(),
                row.metric_id.clone(),
            )) {
                return Err(Error::invalid(format!(
                    "{display}: duplicate row for ({}, {}, {})",
                    row.dataset_id, row.model_id, row.metric_id
                )));
            }
            if seen_models.insert(row.model_id.clone()) {
                model_order.push(row.model_id.clone());
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::invalid(format!("{display}: no metric rows")));
        }
        Ok(MetricTable { rows, model_order })
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for row in &self.rows {
            if !ids.contains(&row.dataset_id) {
                ids.push(row.dataset_id.clone());
            }
        }
        ids
    }

    pub fn metric_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for row in &self.rows {
            if !ids.contains(&row.metric_id) {
                ids.push(row.metric_id.clone());
            }
        }
        ids
    }

    /// Values for one (dataset, metric) cell, one entry per model.
    pub fn values_for(&self, dataset_id: &str, metric_id: &str) -> Vec<(String, f64)> {
        self.rows
            .iter()
            .filter(|r| r.dataset_id == dataset_id && r.metric_id == metric_id)
            .map(|r| (r.model_id.clone(), r.value))
            .collect()
    }
}

/// Rank the models of one (dataset, metric) cell.
///
/// Rank 1 goes to the best value under `direction`; ties are broken by
/// model-order index, earlier index winning the better rank. The returned
/// ranks are aligned to `model_order`.
pub fn rank_models(
    model_order: &[String],
    values: &[(String, f64)],
    direction: Direction,
) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::invalid("rank_models: empty value list"));
    }
    let n = model_order.len();
    let mut by_model: Vec<Option<f64>> = vec![None; n];
    for (model, value) in values {
        let idx = model_order
            .iter()
            .position(|m| m == model)
            .ok_or_else(|| Error::UnknownModel { model: model.clone() })?;
        if by_model[idx].replace(*value).is_some() {
            return Err(Error::DuplicateModel { model: model.clone() });
        }
    }
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(n);
    for (idx, slot) in by_model.iter().enumerate() {
        match slot {
            Some(v) => entries.push((idx, *v)),
            None => return Err(Error::MissingModel { model: model_order[idx].clone() }),
        }
    }
    entries.sort_by(|a, b| {
        let ord = a.1.total_cmp(&b.1);
        let ord = match direction {
            Direction::Ascending => ord,
            Direction::Descending => ord.reverse(),
        };
        ord.then(a.0.cmp(&b.0))
    });
    let mut ranks = vec![0usize; n];
    for (position, (idx, _)) in entries.iter().enumerate() {
        ranks[*idx] = position + 1;
    }
    Ok(ranks)
}

/// L2 norm of the rank differences.
pub fn euclidean_distance(a: &RankingVector, b: &RankingVector) -> Result<f64> {
    if a.ranks.len() != b.ranks.len() {
        return Err(Error::RankLengthMismatch { left: a.ranks.len(), right: b.ranks.len() });
    }
    let sum: f64 = a
        .ranks
        .iter()
        .zip(&b.ranks)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum.sqrt())
}

/// Count of model pairs ordered oppositely by the two rankings, raw and
/// normalized by C(n, 2).
pub fn kendall_tau_distance(a: &RankingVector, b: &RankingVector) -> Result<(usize, f64)> {
    let n = a.ranks.len();
    if n != b.ranks.len() {
        return Err(Error::RankLengthMismatch { left: n, right: b.ranks.len() });
    }
    if n < 2 {
        return Err(Error::invalid("kendall_tau_distance: need at least 2 models"));
    }
    let mut discordant = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let da = a.ranks[i].cmp(&a.ranks[j]);
            let db = b.ranks[i].cmp(&b.ranks[j]);
            if da != db {
                discordant += 1;
            }
        }
    }
    let pairs = n * (n - 1) / 2;
    Ok((discordant, discordant as f64 / pairs as f64))
}

fn pair_distance(
    distances: &BTreeMap<(String, String), f64>,
    a: &str,
    b: &str,
) -> Option<f64> {
    distances
        .get(&(a.to_string(), b.to_string()))
        .or_else(|| distances.get(&(b.to_string(), a.to_string())))
        .copied()
}

/// Average the pairwise distances by category pair.
///
/// Every distinct-dataset pair contributes once to the (category-of-a,
/// category-of-b) cell; self-pairs are excluded, so within-category cells
/// average distinct-dataset pairs only. Cells with no contributing pair are
/// omitted.
pub fn category_averages(
    distances: &BTreeMap<(String, String), f64>,
    categories: &BTreeMap<String, String>,
) -> Result<CategoryTable> {
    let mut datasets: BTreeSet<String> = BTreeSet::new();
    for (a, b) in distances.keys() {
        datasets.insert(a.clone());
        datasets.insert(b.clone());
    }
    for dataset in &datasets {
        if !categories.contains_key(dataset) {
            return Err(Error::MissingCategory { dataset: dataset.clone() });
        }
    }
    let ordered: Vec<String> = datasets.into_iter().collect();
    let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for i in 0..ordered.len() {
        for j in (i + 1)..ordered.len() {
            let (a, b) = (&ordered[i], &ordered[j]);
            let d = pair_distance(distances, a, b)
                .ok_or_else(|| Error::MissingDistance { a: a.clone(), b: b.clone() })?;
            let mut cats = [categories[a].clone(), categories[b].clone()];
            cats.sort();
            let [c1, c2] = cats;
            let entry = sums.entry((c1, c2)).or_insert((0.0, 0));
            entry.0 += d;
            entry.1 += 1;
        }
    }
    let mut averages = BTreeMap::new();
    for ((c1, c2), (sum, count)) in sums {
        let mean = sum / count as f64;
        averages.insert((c1.clone(), c2.clone()), mean);
        averages.insert((c2, c1), mean);
    }
    Ok(CategoryTable { categories: categories.clone(), averages })
}
