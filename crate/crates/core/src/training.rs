//! Contrastive loss on set pairs and the two-level training procedure.
//!
//! Level 1 pretrains the embedding and softmax head with per-frame
//! cross-entropy. Level 2 alternates, once per epoch, between solving the
//! coefficient problem of every sampled pair with the current embedding held
//! fixed, and plain SGD steps on the embedding, one pair at a time in sampled
//! order, with the coefficients held fixed.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cscr::{set_distance, solve_pair, CscrSolution, Hyperparams, PairLabel};
use crate::error::{Error, Result};
use crate::features::{pooled_features, softmax_xent_raw, Model};
use crate::harness::Dataset;
use crate::numkernel::{norm_sq, sub, Matrix};
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub i: usize,
    pub j: usize,
    pub label: PairLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_level1: usize,
    pub epochs_level2: usize,
    pub learning_rate_level1: f64,
    pub learning_rate_level2: f64,
    /// Minibatch size for level 1. Level 2 always steps per pair.
    pub batch_size: usize,
    pub seed: u64,
    pub pairs_per_epoch: usize,
    pub positive_fraction: f64,
    /// Draw a fresh pair list every level-2 epoch instead of reusing the
    /// epoch-0 list.
    pub resample_pairs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_level1: 30,
            epochs_level2: 30,
            learning_rate_level1: 0.1,
            learning_rate_level2: 1e-3,
            batch_size: 16,
            seed: 0,
            pairs_per_epoch: 64,
            positive_fraction: 0.5,
            resample_pairs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.pairs_per_epoch == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and pairs_per_epoch must be positive".into(),
            ));
        }
        for (name, lr) in [
            ("learning_rate_level1", self.learning_rate_level1),
            ("learning_rate_level2", self.learning_rate_level2),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "positive_fraction must lie in (0, 1), got {}",
                self.positive_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub mean_abs_residual: f64,
    pub max_abs_residual: f64,
    pub converged_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Present for level-2 epochs only.
    pub solver: Option<SolverStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.mean_loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_loss)
    }

    /// `epoch,mean_loss,converged_fraction`; the last column is empty for
    /// epochs without pair solves.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,mean_loss,converged_fraction")?;
        for r in &self.records {
            match r.solver {
                Some(s) => writeln!(w, "{},{},{}", r.epoch, r.mean_loss, s.converged_fraction)?,
                None => writeln!(w, "{},{},", r.epoch, r.mean_loss)?,
            }
        }
        Ok(())
    }
}

/// `y μ1 d + (1 - y) μ2 max(0, margin - d) + λ1 ||α||² + λ2 ||β||²` with
/// `d = ||Xα - Yβ||²`.
pub fn contrastive_loss(
    x: &Matrix,
    y: &Matrix,
    label: PairLabel,
    sol: &CscrSolution,
    h: &Hyperparams,
) -> Result<f64> {
    let d = set_distance(x, y, sol)?;
    Ok(loss_from_distance(d, label, &sol.alpha, &sol.beta, h))
}

pub fn loss_from_distance(
    d: f64,
    label: PairLabel,
    alpha: &[f64],
    beta: &[f64],
    h: &Hyperparams,
) -> f64 {
    let fit = match label {
        PairLabel::Same => h.mu1 * d,
        PairLabel::Different => h.mu2 * (h.margin - d).max(0.0),
    };
    fit + h.lambda1 * norm_sq(alpha) + h.lambda2 * norm_sq(beta)
}

/// Gradient of the contrastive loss with respect to the embedding `W`, with
/// the coefficients held fixed.
///
/// `pooled_x`, `pooled_y` are the pre-embedding features (`C x m`, `C x n`).
/// With `u = Pₓα - Pᵧβ` and `r = W u` the gradient is `2μ1 r uᵀ` for same-class
/// pairs, `-2μ2 r uᵀ` for different-class pairs inside the margin, and zero
/// otherwise (including `d = margin`).
pub fn loss_grad_embedding(
    pooled_x: &Matrix,
    pooled_y: &Matrix,
    embedding: &Matrix,
    label: PairLabel,
    sol: &CscrSolution,
    h: &Hyperparams,
) -> Result<Matrix> {
    if pooled_x.rows() != embedding.cols() || pooled_y.rows() != embedding.cols() {
        return Err(Error::dims(format!(
            "pooled features of width {} / {} for embedding {:?}",
            pooled_x.rows(),
            pooled_y.rows(),
            embedding.shape()
        )));
    }
    if sol.alpha.len() != pooled_x.cols() || sol.beta.len() != pooled_y.cols() {
        return Err(Error::dims("coefficients do not match set sizes"));
    }
    let u = sub(&pooled_x.matvec(&sol.alpha)?, &pooled_y.matvec(&sol.beta)?);
    let r = embedding.matvec(&u)?;
    let d = norm_sq(&r);
    let coef = match label {
        PairLabel::Same => 2.0 * h.mu1,
        PairLabel::Different if d < h.margin => -2.0 * h.mu2,
        PairLabel::Different => 0.0,
    };
    let mut g = Matrix::zeros(embedding.rows(), embedding.cols());
    if coef != 0.0 {
        g.add_outer(coef, &r, &u)?;
    }
    Ok(g)
}

/// Deterministic pair list for `(config.seed, epoch)`.
///
/// Exactly `round(positive_fraction * pairs_per_epoch)` pairs are same-class.
/// Pairs are drawn uniformly with replacement from all same-class and all
/// different-class index pairs `i < j`, then shuffled together. Requesting
/// positive pairs from a dataset where no class has two sets is an error.
pub fn sample_pairs<S: AsRef<str>>(
    labels: &[S],
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<PairSample>> {
    config.validate()?;
    if labels.len() < 2 {
        return Err(Error::InsufficientSets(format!(
            "need at least 2 sets, have {}",
            labels.len()
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            if labels[i].as_ref() == labels[j].as_ref() {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    if neg.is_empty() {
        return Err(Error::InsufficientClasses(
            "all sets share one label; no different-class pair exists".into(),
        ));
    }
    let n_pos = (config.positive_fraction * config.pairs_per_epoch as f64).round() as usize;
    let n_neg = config.pairs_per_epoch - n_pos;
    if n_pos > 0 && pos.is_empty() {
        return Err(Error::InsufficientSets(
            "no class has two sets; cannot form same-class pairs".into(),
        ));
    }

    let mut rng = epoch_rng(config.seed, 2 * epoch as u64);
    let mut out = Vec::with_capacity(config.pairs_per_epoch);
    for _ in 0..n_pos {
        let (i, j) = pos[rng.random_range(0..pos.len())];
        out.push(PairSample {
            i,
            j,
            label: PairLabel::Same,
        });
    }
    for _ in 0..n_neg {
        let (i, j) = neg[rng.random_range(0..neg.len())];
        out.push(PairSample {
            i,
            j,
            label: PairLabel::Different,
        });
    }
    out.shuffle(&mut rng);
    Ok(out)
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn class_indices(dataset: &Dataset, model: &Model) -> Result<Vec<usize>> {
    dataset
        .sets
        .iter()
        .map(|s| {
            model.class_index(&s.label).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "label `{}` of set `{}` is not a model class",
                    s.label, s.id
                ))
            })
        })
        .collect()
}

fn check_pixels(dataset: &Dataset, model: &Model) -> Result<()> {
    dataset.validate()?;
    if !dataset.is_raw_pixels() {
        return Err(Error::InvalidConfig(
            "training needs a raw_pixels dataset".into(),
        ));
    }
    if dataset.dim != model.config.pixel_dim {
        return Err(Error::dims(format!(
            "dataset dim {} but model expects {} pixels",
            dataset.dim, model.config.pixel_dim
        )));
    }
    Ok(())
}

/// Pre-embedding features of every set, in dataset order.
pub fn pooled_sets(dataset: &Dataset, model: &Model, exec: Exec) -> Result<Vec<Matrix>> {
    dataset
        .sets
        .iter()
        .map(|s| pooled_features(&s.frames, model, exec))
        .collect()
}

/// Per-frame cross-entropy SGD on the embedding and head.
pub fn pretrain_level1(
    dataset: &Dataset,
    model: &Model,
    config: &TrainConfig,
    exec: Exec,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    check_pixels(dataset, model)?;
    let set_classes = class_indices(dataset, model)?;
    let pooled = pooled_sets(dataset, model, exec)?;

    // (pooled frame feature, class)
    let mut frames: Vec<(Vec<f64>, usize)> = Vec::new();
    for (p, &k) in pooled.iter().zip(&set_classes) {
        for c in 0..p.cols() {
            frames.push((p.column(c), k));
        }
    }

    let mut model = model.clone();
    let mut history = TrainHistory::default();
    let lr = config.learning_rate_level1;
    let mut losses = vec![0.0; frames.len()];
    let mut order: Vec<usize> = (0..frames.len()).collect();

    for epoch in 0..config.epochs_level1 {
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(config.seed, 2 * epoch as u64 + 1));
        for batch in order.chunks(config.batch_size) {
            let mut g_emb = Matrix::zeros(model.embedding.rows(), model.embedding.cols());
            let mut g_head = Matrix::zeros(model.head.rows(), model.head.cols());
            let mut g_bias = vec![0.0; model.bias.len()];
            for &f in batch {
                let (p, k) = &frames[f];
                let z = model.embedding.matvec(p)?;
                let out = softmax_xent_raw(&z, *k, &model.head, &model.bias)?;
                losses[f] = out.loss;
                g_emb.add_outer(1.0, &out.grad_input, p)?;
                g_head.add_scaled(1.0, &out.grad_head)?;
                for (g, d) in g_bias.iter_mut().zip(&out.grad_bias) {
                    *g += d;
                }
            }
            let step = lr / batch.len() as f64;
            if step != 0.0 {
                model.embedding.add_scaled(-step, &g_emb)?;
                model.head.add_scaled(-step, &g_head)?;
                for (b, g) in model.bias.iter_mut().zip(&g_bias) {
                    *b -= step * g;
                }
            }
            model.check_finite()?;
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite(format!("level-1 loss at epoch {epoch}")));
        }
        log::debug!("level 1 epoch {epoch}: mean cross-entropy {mean_loss:.6}");
        history.records.push(EpochRecord {
            epoch,
            mean_loss,
            solver: None,
        });
    }
    Ok((model, history))
}

/// Level-2 training on pairs drawn by [`sample_pairs`].
pub fn train_level2(
    dataset: &Dataset,
    model: &Model,
    config: &TrainConfig,
    h: &Hyperparams,
    exec: Exec,
) -> Result<(Model, TrainHistory)> {
    let labels = dataset.labels();
    let fixed = sample_pairs(&labels, config, 0)?;
    let source = |epoch: usize| -> Result<Vec<PairSample>> {
        if config.resample_pairs && epoch > 0 {
            sample_pairs(&labels, config, epoch)
        } else {
            Ok(fixed.clone())
        }
    };
    train_level2_with(dataset, model, config, h, exec, source)
}

/// Level-2 training with a caller-supplied pair list per epoch.
pub fn train_level2_with<F>(
    dataset: &Dataset,
    model: &Model,
    config: &TrainConfig,
    h: &Hyperparams,
    exec: Exec,
    mut pairs_for_epoch: F,
) -> Result<(Model, TrainHistory)>
where
    F: FnMut(usize) -> Result<Vec<PairSample>>,
{
    config.validate()?;
    h.validate()?;
    check_pixels(dataset, model)?;
    let pooled = pooled_sets(dataset, model, exec)?;
    let mut model = model.clone();
    let mut history = TrainHistory::default();
    let lr = config.learning_rate_level2;

    for epoch in 0..config.epochs_level2 {
        let pairs = pairs_for_epoch(epoch)?;
        if pairs.is_empty() {
            return Err(Error::EmptyInput("no training pairs".into()));
        }
        for p in &pairs {
            if p.i >= pooled.len() || p.j >= pooled.len() {
                return Err(Error::dims(format!("pair ({}, {}) out of range", p.i, p.j)));
            }
        }

        // Step 1: coefficients for every pair with the embedding fixed.
        let embedded = exec.try_map(&pooled, |p| model.embedding.matmul(p))?;
        let solved = exec.try_map(&pairs, |p| -> Result<(CscrSolution, f64)> {
            let (x, y) = (&embedded[p.i], &embedded[p.j]);
            let sol = solve_pair(x, y, p.label, h)?;
            let loss = contrastive_loss(x, y, p.label, &sol, h)?;
            Ok((sol, loss))
        })?;

        // Step 2: SGD on the embedding with the coefficients fixed, in pair order.
        for (p, (sol, _)) in pairs.iter().zip(&solved) {
            if lr == 0.0 {
                break;
            }
            let g = loss_grad_embedding(
                &pooled[p.i],
                &pooled[p.j],
                &model.embedding,
                p.label,
                sol,
                h,
            )?;
            model.embedding.add_scaled(-lr, &g)?;
            if !model.embedding.is_finite() {
                return Err(Error::NonFinite(format!(
                    "embedding at level-2 epoch {epoch}"
                )));
            }
        }

        let n = solved.len() as f64;
        let mean_loss = solved.iter().map(|(_, l)| l).sum::<f64>() / n;
        let residuals: Vec<f64> = solved
            .iter()
            .map(|(s, _)| {
                s.constraint_residuals
                    .0
                    .abs()
                    .max(s.constraint_residuals.1.abs())
            })
            .collect();
        let stats = SolverStats {
            mean_abs_residual: residuals.iter().sum::<f64>() / n,
            max_abs_residual: residuals.iter().copied().fold(0.0, f64::max),
            converged_fraction: solved.iter().filter(|(s, _)| s.converged).count() as f64 / n,
        };
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite(format!("level-2 loss at epoch {epoch}")));
        }
        log::debug!(
            "level 2 epoch {epoch}: mean loss {mean_loss:.6}, converged {:.3}",
            stats.converged_fraction
        );
        history.records.push(EpochRecord {
            epoch,
            mean_loss,
            solver: Some(stats),
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{gen_synthetic, SynthConfig};

    fn forced(alpha: f64, beta: f64) -> CscrSolution {
        CscrSolution {
            alpha: vec![alpha],
            beta: vec![beta],
            distance: 0.0,
            iterations: 0,
            constraint_residuals: (0.0, 0.0),
            converged: true,
        }
    }

    #[test]
    fn loss_zero_distance_is_regularizers() {
        let h = Hyperparams::default();
        let x = Matrix::column_vector(&[1.0, 2.0]);
        let sol = forced(1.0, 1.0);
        let l = contrastive_loss(&x, &x, PairLabel::Same, &sol, &h).unwrap();
        assert_eq!(l, h.lambda1 + h.lambda2);
    }

    #[test]
    fn loss_inactive_hinge() {
        let h = Hyperparams::default();
        let x = Matrix::column_vector(&[0.0, 0.0]);
        let y = Matrix::column_vector(&[2.0, 0.0]);
        let l = contrastive_loss(&x, &y, PairLabel::Different, &forced(1.0, 1.0), &h).unwrap();
        assert_eq!(l, h.lambda1 + h.lambda2);
    }

    #[test]
    fn loss_negative_pair_by_hand() {
        let h = Hyperparams {
            mu2: 0.001,
            lambda1: 0.1,
            lambda2: 0.5,
            margin: 2.0,
            ..Hyperparams::default()
        };
        let x = Matrix::column_vector(&[0.0, 0.0]);
        let y = Matrix::column_vector(&[1.0, 0.0]);
        let sol = solve_pair(&x, &y, PairLabel::Different, &h).unwrap();
        let l = contrastive_loss(&x, &y, PairLabel::Different, &sol, &h).unwrap();
        assert!((l - 0.601).abs() < 1e-15);
    }

    #[test]
    fn gradient_zero_cases() {
        let h = Hyperparams::default();
        let w = Matrix::identity(2);
        let p = Matrix::column_vector(&[1.0, -1.0]);
        let g = loss_grad_embedding(&p, &p, &w, PairLabel::Same, &forced(1.0, 1.0), &h).unwrap();
        assert_eq!(g, Matrix::zeros(2, 2));
        let q = Matrix::column_vector(&[5.0, -1.0]);
        let g =
            loss_grad_embedding(&p, &q, &w, PairLabel::Different, &forced(1.0, 1.0), &h).unwrap();
        assert_eq!(g, Matrix::zeros(2, 2));
        // exactly on the margin: subgradient zero
        let q = Matrix::column_vector(&[1.0, -1.0 + 2f64.sqrt()]);
        let sol = forced(1.0, 1.0);
        let d = norm_sq(&sub(&p.column(0), &q.column(0)));
        let h_kink = Hyperparams { margin: d, ..h };
        let g = loss_grad_embedding(&p, &q, &w, PairLabel::Different, &sol, &h_kink).unwrap();
        assert_eq!(g, Matrix::zeros(2, 2));
    }

    #[test]
    fn sampling_policy() {
        let cfg = TrainConfig {
            pairs_per_epoch: 10,
            positive_fraction: 0.5,
            seed: 3,
            ..TrainConfig::default()
        };
        let labels = ["a", "a", "b", "b", "c", "c"];
        let pairs = sample_pairs(&labels, &cfg, 4).unwrap();
        assert_eq!(pairs.len(), 10);
        let positives = pairs.iter().filter(|p| p.label == PairLabel::Same).count();
        assert_eq!(positives, 5);
        for p in &pairs {
            assert_eq!(p.label == PairLabel::Same, labels[p.i] == labels[p.j]);
            assert!(p.i < p.j);
        }
        assert_eq!(pairs, sample_pairs(&labels, &cfg, 4).unwrap());
        assert_ne!(pairs, sample_pairs(&labels, &cfg, 5).unwrap());

        assert!(matches!(
            sample_pairs(&["a", "b"], &cfg, 0),
            Err(Error::InsufficientSets(_))
        ));
        assert!(matches!(
            sample_pairs(&["a", "a", "a"], &cfg, 0),
            Err(Error::InsufficientClasses(_))
        ));
        assert!(matches!(
            sample_pairs(&["a"], &cfg, 0),
            Err(Error::InsufficientSets(_))
        ));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            positive_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn history_csv_columns() {
        let h = TrainHistory {
            records: vec![
                EpochRecord {
                    epoch: 0,
                    mean_loss: 0.5,
                    solver: None,
                },
                EpochRecord {
                    epoch: 1,
                    mean_loss: 0.25,
                    solver: Some(SolverStats {
                        mean_abs_residual: 0.0,
                        max_abs_residual: 0.0,
                        converged_fraction: 1.0,
                    }),
                },
            ],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,mean_loss,converged_fraction\n0,0.5,\n1,0.25,1\n"
        );
    }

    fn small_data(classes: usize) -> (Dataset, Model) {
        let d = gen_synthetic(&SynthConfig {
            classes,
            sets_per_class: 2,
            frames_per_set: 4,
            dim: 16,
            separation: 3.0,
            noise: 0.5,
            seed: 1,
        })
        .unwrap();
        let cfg = crate::ModelConfig::new(16, classes)
            .with_grid(2, 2)
            .with_seed(2);
        let m = Model::with_classes(cfg, d.class_names()).unwrap();
        (d, m)
    }

    #[test]
    fn zero_learning_rate_is_inert() {
        let (d, m) = small_data(3);
        let cfg = TrainConfig {
            epochs_level1: 3,
            epochs_level2: 3,
            learning_rate_level1: 0.0,
            learning_rate_level2: 0.0,
            pairs_per_epoch: 8,
            ..TrainConfig::default()
        };
        let (m1, h1) = pretrain_level1(&d, &m, &cfg, Exec::default()).unwrap();
        assert_eq!(m1, m);
        assert!(h1
            .records
            .iter()
            .all(|r| r.mean_loss == h1.records[0].mean_loss));
        let (m2, h2) =
            train_level2(&d, &m, &cfg, &Hyperparams::default(), Exec::default()).unwrap();
        assert_eq!(m2, m);
        assert!(h2
            .records
            .iter()
            .all(|r| r.mean_loss == h2.records[0].mean_loss));
    }

    #[test]
    fn single_class_pretraining_drives_loss_to_zero() {
        let (mut d, _) = small_data(2);
        for s in d.sets.iter_mut() {
            s.label = "only".into();
        }
        let cfg = crate::ModelConfig::new(16, 1).with_grid(2, 2);
        let m = Model::with_classes(cfg, vec!["only".into()]).unwrap();
        let tc = TrainConfig {
            epochs_level1: 2,
            ..TrainConfig::default()
        };
        let (_, h) = pretrain_level1(&d, &m, &tc, Exec::default()).unwrap();
        assert!(h.records.iter().all(|r| r.mean_loss <= 1e-12));
    }

    #[test]
    fn unknown_label_is_rejected() {
        let (d, _) = small_data(2);
        let cfg = crate::ModelConfig::new(16, 2).with_grid(2, 2);
        let m = Model::new(cfg).unwrap();
        assert!(matches!(
            pretrain_level1(&d, &m, &TrainConfig::default(), Exec::default()),
            Err(Error::InvalidConfig(_))
        ));
    }
}
