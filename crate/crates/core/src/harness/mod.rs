//! Dataset files, synthetic data, and the classification and verification
//! protocols.

mod classify;
mod dataset;
mod synth;
mod verify;

pub use classify::{classify_all, classify_probe, ClassificationResult, ProbeResult};
pub use dataset::{
    load_dataset, load_model, load_pairs, load_set, save_dataset, save_model, save_pairs, save_set,
    Dataset, FeatureKind, FeatureSet, ImageSet, PairsFile, SetPair,
};
pub use synth::{gen_synthetic, synthetic_centers, SynthConfig};
pub use verify::{trapezoid_auc, verification_metrics, verify_pairs, RocPoint, VerificationResult};

use crate::cscr::{Hyperparams, PairLabel};
use crate::error::Result;
use crate::features::Model;
use crate::par::Exec;

/// Gallery/probe classification of two datasets through `model`.
pub fn classify_datasets(
    gallery: &Dataset,
    probes: &Dataset,
    model: Option<&Model>,
    h: &Hyperparams,
    branch: PairLabel,
    exec: Exec,
) -> Result<ClassificationResult> {
    let g = gallery.featurize(model, exec)?;
    let p = probes.featurize(model, exec)?;
    classify_all(&g, &p, h, branch, exec)
}

/// Verification over a pairs file through `model`.
pub fn verify_pairs_file(
    pairs: &PairsFile,
    model: Option<&Model>,
    h: &Hyperparams,
    thresholds: &[f64],
    branch: PairLabel,
    exec: Exec,
) -> Result<VerificationResult> {
    pairs.validate()?;
    let featured = pairs
        .pairs
        .iter()
        .map(|p| {
            Ok((
                FeatureSet::from_set(&p.a, pairs.feature_kind, model, exec)?,
                FeatureSet::from_set(&p.b, pairs.feature_kind, model, exec)?,
                p.same,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    verify_pairs(&featured, h, thresholds, branch, exec)
}
