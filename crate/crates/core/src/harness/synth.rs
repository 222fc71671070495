use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, FeatureKind, ImageSet};
use crate::error::{Error, Result};
use crate::numkernel::norm_sq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub sets_per_class: usize,
    pub frames_per_set: usize,
    pub dim: usize,
    /// Radius of the sphere the class centers are drawn on.
    pub separation: f64,
    /// Standard deviation of the per-frame Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

/// Class centers uniform on a sphere of radius `separation`; every frame is
/// its class center plus isotropic Gaussian noise. Sets are emitted class by
/// class with ids `c{k}_s{s}` and labels `class{k}`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.sets_per_class == 0 || cfg.frames_per_set == 0 || cfg.dim == 0 {
        return Err(Error::InvalidConfig("all counts must be at least 1".into()));
    }
    if !(cfg.separation > 0.0 && cfg.separation.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "separation must be positive, got {}",
            cfg.separation
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise must be >= 0, got {}",
            cfg.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gauss = move || -> f64 { StandardNormal.sample(&mut rng) };

    let centers: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..cfg.dim).map(|_| gauss()).collect();
            let n = norm_sq(&v).sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x * cfg.separation / n).collect();
            }
        })
        .collect();

    let mut sets = Vec::with_capacity(cfg.classes * cfg.sets_per_class);
    for (k, center) in centers.iter().enumerate() {
        for s in 0..cfg.sets_per_class {
            let frames = (0..cfg.frames_per_set)
                .map(|_| center.iter().map(|c| c + cfg.noise * gauss()).collect())
                .collect();
            sets.push(ImageSet {
                id: format!("c{k}_s{s}"),
                label: format!("class{k}"),
                frames,
            });
        }
    }
    Ok(Dataset {
        feature_kind: FeatureKind::RawPixels,
        dim: cfg.dim,
        sets,
    })
}

/// The class centers [`gen_synthetic`] draws for `cfg`.
pub fn synthetic_centers(cfg: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    let noiseless = SynthConfig {
        noise: 0.0,
        sets_per_class: 1,
        frames_per_set: 1,
        ..cfg.clone()
    };
    Ok(gen_synthetic(&noiseless)?
        .sets
        .into_iter()
        .map(|s| s.frames.into_iter().next().expect("one frame"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            classes: 4,
            sets_per_class: 3,
            frames_per_set: 10,
            dim: 16,
            separation: 10.0,
            noise: 0.5,
            seed: 42,
        }
    }

    #[test]
    fn noiseless_frames_equal_centers() {
        let c = SynthConfig {
            noise: 0.0,
            ..cfg()
        };
        let d = gen_synthetic(&c).unwrap();
        let centers = synthetic_centers(&c).unwrap();
        for (i, s) in d.sets.iter().enumerate() {
            for f in &s.frames {
                assert_eq!(f, &centers[i / c.sets_per_class]);
            }
        }
        for center in &centers {
            assert!((norm_sq(center).sqrt() - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            gen_synthetic(&cfg()).unwrap(),
            gen_synthetic(&cfg()).unwrap()
        );
        let other = SynthConfig { seed: 43, ..cfg() };
        assert_ne!(
            gen_synthetic(&cfg()).unwrap(),
            gen_synthetic(&other).unwrap()
        );
    }

    #[test]
    fn set_means_near_centers() {
        let c = cfg();
        let d = gen_synthetic(&c).unwrap();
        let centers = synthetic_centers(&c).unwrap();
        let bound = 3.0 * c.noise / (c.frames_per_set as f64).sqrt();
        for (k, center) in centers.iter().enumerate() {
            let frames: Vec<&Vec<f64>> = d.sets[k * c.sets_per_class..(k + 1) * c.sets_per_class]
                .iter()
                .flat_map(|s| &s.frames)
                .collect();
            for dim in 0..c.dim {
                let mean = frames.iter().map(|f| f[dim]).sum::<f64>() / frames.len() as f64;
                assert!((mean - center[dim]).abs() <= bound, "class {k} dim {dim}");
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(gen_synthetic(&SynthConfig {
            classes: 0,
            ..cfg()
        })
        .is_err());
        assert!(gen_synthetic(&SynthConfig {
            separation: 0.0,
            ..cfg()
        })
        .is_err());
        assert!(gen_synthetic(&SynthConfig {
            noise: -1.0,
            ..cfg()
        })
        .is_err());
    }
}
