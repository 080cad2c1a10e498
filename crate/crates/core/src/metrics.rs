//! Evaluation measures and the per-experiment metrics report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reference distances below this fall back to the dataset-level scale.
pub const MIN_REFERENCE_DISTANCE: f64 = 1e-6;

fn argmax(row: &[f64]) -> usize {
    // strict comparison keeps the lowest index on ties
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose arg-max matches the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, _) = logits.dims2()?;
    if b == 0 || labels.len() != b {
        return Err(Error::dim("top1_accuracy", logits.shape(), &[labels.len()]));
    }
    if !logits.all_finite() {
        return Err(Error::Evaluation("logits contain non-finite values".into()));
    }
    let hits = (0..b).filter(|&i| argmax(logits.row(i)) == labels[i]).count();
    Ok(hits as f64 / b as f64)
}

/// Mean over samples of the mean per-keypoint Euclidean error divided by
/// that sample's reference distance.
pub fn nrmse(pred: &Tensor, truth: &Tensor, norm_ref: &[f64]) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim("nrmse", pred.shape(), truth.shape()));
    }
    let (b, coords) = pred.dims2()?;
    if !pred.all_finite() {
        return Err(Error::Evaluation("predicted keypoints contain non-finite values".into()));
    }
    if coords % 2 != 0 {
        return Err(Error::contract("keypoint vectors must hold (x, y) pairs"));
    }
    if norm_ref.len() != b {
        return Err(Error::dim("nrmse", pred.shape(), &[norm_ref.len()]));
    }
    if let Some(bad) = norm_ref.iter().find(|&&r| !(r > 0.0)) {
        return Err(Error::contract(format!("normalization distance must be positive, got {bad}")));
    }
    let k = (coords / 2) as f64;
    let total: f64 = (0..b)
        .map(|i| {
            let err: f64 = pred
                .row(i)
                .chunks_exact(2)
                .zip(truth.row(i).chunks_exact(2))
                .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
                .sum();
            err / k / norm_ref[i]
        })
        .sum();
    Ok(total / b as f64)
}

/// Per-sample distance between keypoints 0 and 1 of the ground truth, or
/// `fallback` where that distance degenerates.
pub fn reference_distances(truth: &Tensor, fallback: f64) -> Result<Vec<f64>> {
    let (b, coords) = truth.dims2()?;
    if coords < 4 {
        return Err(Error::contract("reference distance needs at least two keypoints"));
    }
    Ok((0..b)
        .map(|i| {
            let r = truth.row(i);
            let d = ((r[0] - r[2]).powi(2) + (r[1] - r[3]).powi(2)).sqrt();
            if d < MIN_REFERENCE_DISTANCE {
                fallback
            } else {
                d
            }
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of samples whose nearest other sample shares their identity.
/// Ties resolve to the lowest index.
pub fn verification_top1(embeddings: &Tensor, identities: &[usize]) -> Result<f64> {
    let (n, _) = embeddings.dims2()?;
    if identities.len() != n {
        return Err(Error::dim("verification_top1", embeddings.shape(), &[identities.len()]));
    }
    if n < 2 {
        return Err(Error::contract("verification needs at least two samples"));
    }
    if !embeddings.all_finite() {
        return Err(Error::Evaluation("embeddings contain non-finite values".into()));
    }
    let hits: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = embeddings.row(i);
            let mut best: Option<(f64, usize)> = None;
            for j in (0..n).filter(|&j| j != i) {
                let d = sq_dist(row, embeddings.row(j));
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            let (_, j) = best.expect("n >= 2");
            usize::from(identities[j] == identities[i])
        })
        .sum();
    Ok(hits as f64 / n as f64)
}

/// Best accuracy of "same iff distance ≤ t" over all thresholds that split
/// the observed distances differently. Returns `(accuracy, threshold)`.
pub fn best_threshold_accuracy(same: &[f64], diff: &[f64]) -> Result<(f64, f64)> {
    if same.is_empty() || diff.is_empty() {
        return Err(Error::contract("pair verification needs same- and different-identity pairs"));
    }
    let mut all: Vec<(f64, bool)> = same
        .iter()
        .map(|&d| (d, true))
        .chain(diff.iter().map(|&d| (d, false)))
        .collect();
    if all.iter().any(|(d, _)| !d.is_finite()) {
        return Err(Error::Evaluation("non-finite pair distance".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = all.len() as f64;

    // threshold below everything: every pair predicted "different"
    let mut correct = diff.len();
    let mut best = (correct, all[0].0 - 1.0);
    let mut i = 0;
    while i < all.len() {
        let d = all[i].0;
        while i < all.len() && all[i].0 == d {
            if all[i].1 {
                correct += 1;
            } else {
                correct -= 1;
            }
            i += 1;
        }
        let t = if i < all.len() { 0.5 * (d + all[i].0) } else { d + 1.0 };
        if correct > best.0 {
            best = (correct, t);
        }
    }
    Ok((best.0 as f64 / total, best.1))
}

/// Threshold-swept pair verification accuracy on embedding distances.
pub fn pair_verification_accuracy(
    embeddings: &Tensor,
    same_pairs: &[(usize, usize)],
    diff_pairs: &[(usize, usize)],
) -> Result<f64> {
    let n = embeddings.rows();
    let dist = |pairs: &[(usize, usize)]| -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|&(a, b)| {
                if a >= n || b >= n {
                    return Err(Error::contract(format!("pair ({a}, {b}) out of range for {n} samples")));
                }
                Ok(sq_dist(embeddings.row(a), embeddings.row(b)).sqrt())
            })
            .collect()
    };
    Ok(best_threshold_accuracy(&dist(same_pairs)?, &dist(diff_pairs)?)?.0)
}

/// Up to `count` same-identity and `count` different-identity pairs, drawn
/// without replacement-checking but deterministically per seed.
pub fn sample_pairs(identities: &[usize], count: usize, seed: u64) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let n = identities.len();
    let mut same_all = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if identities[i] == identities[j] {
                same_all.push((i, j));
            }
        }
    }
    if same_all.is_empty() || identities.iter().all(|&id| id == identities[0]) {
        return Err(Error::Data("need both same- and different-identity pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let same = if same_all.len() <= count {
        same_all
    } else {
        (0..count).map(|_| same_all[rng.random_range(0..same_all.len())]).collect()
    };
    let mut diff = Vec::with_capacity(count);
    while diff.len() < count {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if identities[a] != identities[b] {
            diff.push((a.min(b), a.max(b)));
        }
    }
    Ok((same, diff))
}

/// Metric names, in table column order.
pub const TOP1: &str = "top1";
pub const NRMSE: &str = "nrmse";
pub const VERIF_TOP1: &str = "verif_top1";
pub const PAIR_ACC: &str = "pair_acc";
const COLUMNS: [&str; 4] = [TOP1, NRMSE, VERIF_TOP1, PAIR_ACC];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub network: String,
    pub init: String,
    pub alpha: f64,
    pub beta: f64,
    pub metrics: BTreeMap<String, f64>,
}

impl ReportRow {
    pub fn key(&self) -> (&str, &str, f64, f64) {
        (&self.network, &self.init, self.alpha, self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricsReport {
    rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if self.rows.iter().any(|r| r.key() == row.key()) {
            return Err(Error::contract(format!(
                "duplicate report row {:?}",
                row.key()
            )));
        }
        for (name, &v) in &row.metrics {
            let ok = if name == NRMSE { v >= 0.0 } else { (0.0..=1.0).contains(&v) };
            if !ok {
                return Err(Error::contract(format!("metric {name} = {v} out of range")));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, network: &str, init: &str, alpha: f64, beta: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.key() == (network, init, alpha, beta))
    }

    pub fn extend(&mut self, other: MetricsReport) -> Result<()> {
        other.rows.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<MetricsReport> {
        let rows: Vec<ReportRow> =
            serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
        let mut report = MetricsReport::new();
        for r in rows {
            report.push(r)?;
        }
        Ok(report)
    }

    /// Aligned text table; every metric is printed as a percentage.
    pub fn to_table(&self) -> String {
        let mut header = vec!["network".to_string(), "init".into(), "alpha".into(), "beta".into()];
        header.extend(COLUMNS.iter().map(|c| format!("{c}(%)")));
        let mut cells = vec![header];
        for r in &self.rows {
            let mut line = vec![r.network.clone(), r.init.clone(), r.alpha.to_string(), r.beta.to_string()];
            for c in COLUMNS {
                line.push(r.metrics.get(c).map_or("-".into(), |v| format!("{:.8}", v * 100.0)));
            }
            cells.push(line);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in cells.iter().enumerate() {
            let padded: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        out
    }
}
