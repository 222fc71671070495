//! Pair verification: a pair is declared "same" when its CSCR distance is
//! strictly below a threshold. ROC curves and AUC are computed from the
//! per-pair distances.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::dataset::FeatureSet;
use crate::cscr::{solve_pair, Hyperparams, PairLabel};
use crate::error::{Error, Result};
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub distances: Vec<f64>,
    pub same: Vec<bool>,
    /// Decision threshold: the most accurate of the requested thresholds
    /// (earliest on ties).
    pub threshold: f64,
    pub decisions: Vec<bool>,
    /// ROC at each requested threshold, in the order requested.
    pub threshold_points: Vec<RocPoint>,
    /// Full empirical ROC, from `(0, 0)` at `-inf` to `(1, 1)` at `+inf`,
    /// ascending in threshold.
    pub roc: Vec<RocPoint>,
    /// Trapezoid area under `roc`.
    pub auc: f64,
}

impl VerificationResult {
    /// `threshold,fpr,tpr` rows at the requested thresholds followed by a
    /// `# auc,<value>` trailer line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "threshold,fpr,tpr")?;
        for p in &self.threshold_points {
            writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        writeln!(w, "# auc,{}", self.auc)?;
        Ok(())
    }
}

fn roc_point(
    distances: &[f64],
    same: &[bool],
    threshold: f64,
    positives: usize,
    negatives: usize,
) -> RocPoint {
    let (mut tp, mut fp) = (0usize, 0usize);
    for (&d, &s) in distances.iter().zip(same) {
        if d < threshold {
            if s {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    RocPoint {
        threshold,
        fpr: fp as f64 / negatives as f64,
        tpr: tp as f64 / positives as f64,
    }
}

pub fn trapezoid_auc(roc: &[RocPoint]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// ROC, AUC and decisions from precomputed distances.
pub fn verification_metrics(
    distances: &[f64],
    same: &[bool],
    thresholds: &[f64],
) -> Result<VerificationResult> {
    if distances.is_empty() {
        return Err(Error::EmptyInput("no pairs".into()));
    }
    if distances.len() != same.len() {
        return Err(Error::dims(format!(
            "{} distances for {} labels",
            distances.len(),
            same.len()
        )));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("pair distance".into()));
    }
    let positives = same.iter().filter(|&&s| s).count();
    let negatives = same.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels(
            "ROC needs both same and different pairs".into(),
        ));
    }

    let mut cuts: Vec<f64> = distances.to_vec();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut roc = Vec::with_capacity(cuts.len() + 2);
    roc.push(roc_point(
        distances,
        same,
        f64::NEG_INFINITY,
        positives,
        negatives,
    ));
    for &c in &cuts {
        roc.push(roc_point(distances, same, c, positives, negatives));
    }
    roc.push(roc_point(
        distances,
        same,
        f64::INFINITY,
        positives,
        negatives,
    ));
    let auc = trapezoid_auc(&roc);

    let threshold_points: Vec<RocPoint> = thresholds
        .iter()
        .map(|&t| roc_point(distances, same, t, positives, negatives))
        .collect();

    let accuracy = |t: f64| {
        distances
            .iter()
            .zip(same)
            .filter(|(&d, &s)| (d < t) == s)
            .count()
    };
    let candidates: Vec<f64> = if thresholds.is_empty() {
        roc.iter().map(|p| p.threshold).collect()
    } else {
        thresholds.to_vec()
    };
    let mut threshold = candidates[0];
    let mut best = accuracy(threshold);
    for &t in &candidates[1..] {
        let a = accuracy(t);
        if a > best {
            best = a;
            threshold = t;
        }
    }
    let decisions = distances.iter().map(|&d| d < threshold).collect();

    Ok(VerificationResult {
        distances: distances.to_vec(),
        same: same.to_vec(),
        threshold,
        decisions,
        threshold_points,
        roc,
        auc,
    })
}

/// Solves every pair (independently, under `exec`) with the `branch` choice of
/// `mu`, then scores the distances.
pub fn verify_pairs(
    pairs: &[(FeatureSet, FeatureSet, bool)],
    h: &Hyperparams,
    thresholds: &[f64],
    branch: PairLabel,
    exec: Exec,
) -> Result<VerificationResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no pairs".into()));
    }
    let distances = exec.try_map(pairs, |(a, b, _)| {
        solve_pair(&a.features, &b.features, branch, h).map(|s| s.distance)
    })?;
    let same: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    verification_metrics(&distances, &same, thresholds)
}
