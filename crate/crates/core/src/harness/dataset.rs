use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{set_features, Model};
use crate::numkernel::Matrix;
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    RawPixels,
    PrecomputedEmbeddings,
}

/// One image set: an unordered collection of frame vectors sharing a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSet {
    pub id: String,
    pub label: String,
    pub frames: Vec<Vec<f64>>,
}

impl ImageSet {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::EmptySet(format!("set `{}` has no frames", self.id)));
        }
        for (k, f) in self.frames.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::dims(format!(
                    "set `{}` frame {k} has length {}, expected {dim}",
                    self.id,
                    f.len()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("set `{}` frame {k}", self.id)));
            }
        }
        Ok(())
    }

    /// Frames as the columns of a `dim x m` matrix.
    pub fn frame_matrix(&self) -> Result<Matrix> {
        if self.frames.is_empty() {
            return Err(Error::EmptySet(format!("set `{}` has no frames", self.id)));
        }
        Matrix::from_columns(&self.frames)
    }
}

/// Labeled sets with a declared frame dimension.
///
/// On disk: `{"feature_kind": "raw_pixels" | "precomputed_embeddings",
/// "dim": int, "sets": [{"id", "label", "frames": [[f64, ...], ...]}, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_kind: FeatureKind,
    pub dim: usize,
    pub sets: Vec<ImageSet>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::dims("dataset dim must be positive"));
        }
        let mut ids = HashSet::new();
        for s in &self.sets {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::DuplicateSetId(s.id.clone()));
            }
            s.validate(self.dim)?;
        }
        Ok(())
    }

    pub fn is_raw_pixels(&self) -> bool {
        self.feature_kind == FeatureKind::RawPixels
    }

    pub fn labels(&self) -> Vec<&str> {
        self.sets.iter().map(|s| s.label.as_str()).collect()
    }

    /// Distinct labels in order of first appearance.
    pub fn class_names(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.sets
            .iter()
            .filter(|s| seen.insert(s.label.as_str()))
            .map(|s| s.label.clone())
            .collect()
    }

    /// A dataset with the same kind and dim holding the given sets.
    pub fn with_sets(&self, sets: Vec<ImageSet>) -> Dataset {
        Dataset {
            feature_kind: self.feature_kind,
            dim: self.dim,
            sets,
        }
    }

    /// Splits off the first set of every class as the gallery; the remaining
    /// sets, in order, are probes.
    pub fn split_gallery_probe(&self) -> (Dataset, Dataset) {
        let mut seen = HashSet::new();
        let (gallery, probes): (Vec<_>, Vec<_>) = self
            .sets
            .iter()
            .cloned()
            .partition(|s| seen.insert(s.label.clone()));
        (self.with_sets(gallery), self.with_sets(probes))
    }

    /// Feature matrices of every set. Raw-pixel datasets go through `model`;
    /// precomputed embeddings are used as they are.
    pub fn featurize(&self, model: Option<&Model>, exec: Exec) -> Result<Vec<FeatureSet>> {
        self.validate()?;
        self.sets
            .iter()
            .map(|s| FeatureSet::from_set(s, self.feature_kind, model, exec))
            .collect()
    }
}

/// A set after feature extraction: columns are per-frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub id: String,
    pub label: String,
    pub features: Matrix,
}

impl FeatureSet {
    pub fn from_set(
        set: &ImageSet,
        kind: FeatureKind,
        model: Option<&Model>,
        exec: Exec,
    ) -> Result<FeatureSet> {
        let features = match (kind, model) {
            (FeatureKind::RawPixels, Some(m)) => set_features(&set.frames, m, exec)?,
            (FeatureKind::RawPixels, None) => {
                return Err(Error::InvalidConfig(format!(
                    "set `{}` holds raw pixels but no model was given",
                    set.id
                )))
            }
            (FeatureKind::PrecomputedEmbeddings, _) => set.frame_matrix()?,
        };
        Ok(FeatureSet {
            id: set.id.clone(),
            label: set.label.clone(),
            features,
        })
    }
}

/// One labeled pair for verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetPair {
    pub a: ImageSet,
    pub b: ImageSet,
    pub same: bool,
}

/// On disk: `{"feature_kind", "dim", "pairs": [{"a": set, "b": set, "same": bool}, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsFile {
    pub feature_kind: FeatureKind,
    pub dim: usize,
    pub pairs: Vec<SetPair>,
}

impl PairsFile {
    pub fn validate(&self) -> Result<()> {
        for p in &self.pairs {
            p.a.validate(self.dim)?;
            p.b.validate(self.dim)?;
        }
        Ok(())
    }

    /// Every unordered pair of sets of `data`, labeled by class agreement.
    pub fn all_pairs(data: &Dataset) -> PairsFile {
        let mut pairs = Vec::new();
        for i in 0..data.sets.len() {
            for j in (i + 1)..data.sets.len() {
                let (a, b) = (&data.sets[i], &data.sets[j]);
                pairs.push(SetPair {
                    a: a.clone(),
                    b: b.clone(),
                    same: a.label == b.label,
                });
            }
        }
        PairsFile {
            feature_kind: data.feature_kind,
            dim: data.dim,
            pairs,
        }
    }
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let d: Dataset = read_json(path.as_ref())?;
    d.validate()?;
    Ok(d)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    write_json(dataset, path.as_ref())
}

pub fn load_set(path: impl AsRef<Path>) -> Result<ImageSet> {
    let s: ImageSet = read_json(path.as_ref())?;
    let dim = s.frames.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(Error::EmptySet(format!("set `{}` has no frames", s.id)));
    }
    s.validate(dim)?;
    Ok(s)
}

pub fn save_set(set: &ImageSet, path: impl AsRef<Path>) -> Result<()> {
    write_json(set, path.as_ref())
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<PairsFile> {
    let p: PairsFile = read_json(path.as_ref())?;
    p.validate()?;
    Ok(p)
}

pub fn save_pairs(pairs: &PairsFile, path: impl AsRef<Path>) -> Result<()> {
    pairs.validate()?;
    write_json(pairs, path.as_ref())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let m: Model = read_json(path.as_ref())?;
    m.validate()?;
    Ok(m)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    model.validate()?;
    write_json(model, path.as_ref())
}
