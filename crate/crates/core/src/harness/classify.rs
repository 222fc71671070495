//! Nearest-set classification: a probe takes the label of the gallery set at
//! the smallest CSCR distance.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::dataset::FeatureSet;
use crate::cscr::{solve_pair, Hyperparams, PairLabel};
use crate::error::{Error, Result};
use crate::par::Exec;

/// Label of the nearest gallery set and the distance to every gallery set,
/// in gallery order. Ties go to the earliest gallery set. `branch` selects
/// which `mu` the pair problem uses.
pub fn classify_probe(
    gallery: &[FeatureSet],
    probe: &FeatureSet,
    h: &Hyperparams,
    branch: PairLabel,
) -> Result<(String, Vec<f64>)> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let distances = gallery
        .iter()
        .map(|g| solve_pair(&g.features, &probe.features, branch, h).map(|s| s.distance))
        .collect::<Result<Vec<_>>>()?;
    let best = argmin_first(&distances);
    Ok((gallery[best].label.clone(), distances))
}

fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &d) in v.iter().enumerate().skip(1) {
        if d < v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe_id: String,
    pub true_label: String,
    pub predicted: String,
    /// Minimal distance per gallery class, classes in order of first
    /// appearance in the gallery.
    pub class_distances: Vec<(String, f64)>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub probes: Vec<ProbeResult>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl ClassificationResult {
    /// `probe_id,predicted,true,correct` rows followed by a
    /// `# accuracy,<value>` trailer line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "probe_id,predicted,true,correct")?;
        for p in &self.probes {
            writeln!(
                w,
                "{},{},{},{}",
                p.probe_id, p.predicted, p.true_label, p.correct
            )?;
        }
        writeln!(w, "# accuracy,{}", self.accuracy)?;
        Ok(())
    }
}

fn class_minima(gallery: &[FeatureSet], distances: &[f64]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for (g, &d) in gallery.iter().zip(distances) {
        match out.iter_mut().find(|(l, _)| *l == g.label) {
            Some((_, best)) => *best = best.min(d),
            None => out.push((g.label.clone(), d)),
        }
    }
    out
}

/// Classifies every probe; probes run independently under `exec` and results
/// keep probe order.
pub fn classify_all(
    gallery: &[FeatureSet],
    probes: &[FeatureSet],
    h: &Hyperparams,
    branch: PairLabel,
    exec: Exec,
) -> Result<ClassificationResult> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if probes.is_empty() {
        return Err(Error::EmptyInput("no probe sets".into()));
    }
    let results = exec.try_map(probes, |p| -> Result<ProbeResult> {
        let (predicted, distances) = classify_probe(gallery, p, h, branch)?;
        Ok(ProbeResult {
            probe_id: p.id.clone(),
            correct: predicted == p.label,
            true_label: p.label.clone(),
            predicted,
            class_distances: class_minima(gallery, &distances),
        })
    })?;
    let correct = results.iter().filter(|r| r.correct).count();
    let total = results.len();
    Ok(ClassificationResult {
        probes: results,
        correct,
        total,
        accuracy: correct as f64 / total as f64,
    })
}
