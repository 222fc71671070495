//! Frame-level feature pipeline.
//!
//! A frame (flat pixel vector) is projected by a fixed random encoder with
//! orthonormal rows, reshaped into an `H x W x C` feature map, optionally
//! passed through a residual non-local attention block, average-pooled over
//! space, and finally mapped by the trainable linear embedding. A softmax head
//! on top of the embedding is used only for cross-entropy pretraining.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{dot, norm_sq, Matrix};
use crate::par::Exec;

/// Sums `values` after sorting them, which makes the result independent of
/// the order the values were produced in.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    /// `(h, w, c)` at `(h * width + w) * channels + c`
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dims(format!(
                "feature map shape {height}x{width}x{channels} must be positive"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, v: f64) -> Result<Self> {
        FeatureMap::new(height, width, channels, vec![v; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(h * self.width + w) * self.channels + c]
    }

    /// Channel vector at flattened spatial index `p = h * width + w`.
    pub fn position(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Reorders spatial positions: output position `p` holds input position
    /// `perm[p]`. The grid shape is kept.
    pub fn permute_positions(&self, perm: &[usize]) -> Result<FeatureMap> {
        if perm.len() != self.positions() {
            return Err(Error::dims(format!(
                "permutation of length {} for {} positions",
                perm.len(),
                self.positions()
            )));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.position(p));
        }
        FeatureMap::new(self.height, self.width, self.channels, data)
    }
}

/// Embedded-Gaussian non-local block parameters. Projections map `C` channels
/// to `C' = max(1, C / 2)` and back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
}

pub fn reduced_channels(channels: usize) -> usize {
    (channels / 2).max(1)
}

impl AttentionParams {
    /// Random query/key/value projections and a zero output projection, so
    /// the block starts out as the identity.
    pub fn identity_init(channels: usize, seed: u64) -> Self {
        let inner = reduced_channels(channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (channels as f64).sqrt();
        let mut gauss = |r, c| {
            Matrix::from_fn(r, c, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        let query = gauss(inner, channels);
        let key = gauss(inner, channels);
        let value = gauss(inner, channels);
        AttentionParams {
            query,
            key,
            value,
            output: Matrix::zeros(channels, inner),
        }
    }

    pub fn channels(&self) -> usize {
        self.query.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (inner, c) = self.query.shape();
        let ok = self.key.shape() == (inner, c)
            && self.value.shape() == (inner, c)
            && self.output.shape() == (c, inner);
        if !ok {
            return Err(Error::dims(format!(
                "attention projections inconsistent: q {:?} k {:?} v {:?} out {:?}",
                self.query.shape(),
                self.key.shape(),
                self.value.shape(),
                self.output.shape()
            )));
        }
        for m in [&self.query, &self.key, &self.value, &self.output] {
            if !m.is_finite() {
                return Err(Error::NonFinite("attention parameters".into()));
            }
        }
        Ok(())
    }
}

/// Residual self-attention over all spatial positions.
///
/// For positions `i, j`: `s_ij = (Wq x_i)·(Wk x_j)`, `w_i = softmax_j(s_ij)`,
/// `z_i = x_i + Wo Σ_j w_ij (Wv x_j)`. Sums over `j` are taken in an order
/// fixed by the values themselves, so permuting positions permutes the output
/// exactly.
pub fn nonlocal_attention(map: &FeatureMap, params: &AttentionParams) -> Result<FeatureMap> {
    params.validate()?;
    if params.channels() != map.channels() {
        return Err(Error::dims(format!(
            "attention expects {} channels, map has {}",
            params.channels(),
            map.channels()
        )));
    }
    let n = map.positions();
    let inner = params.query.rows();
    let proj = |m: &Matrix| -> Vec<Vec<f64>> {
        (0..n)
            .map(|p| m.matvec(map.position(p)).expect("checked dims"))
            .collect()
    };
    let q = proj(&params.query);
    let k = proj(&params.key);
    let v = proj(&params.value);

    let mut out = Vec::with_capacity(map.as_slice().len());
    let mut order: Vec<usize> = (0..n).collect();
    for (i, qi) in q.iter().enumerate() {
        let scores: Vec<f64> = k.iter().map(|kj| dot(qi, kj)).collect();
        order.sort_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then_with(|| cmp_slices(map.position(a), map.position(b)))
        });
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let mut denom = 0.0;
        for &j in &order {
            denom += weights[j];
        }
        let mut agg = vec![0.0; inner];
        for &j in &order {
            let w = weights[j] / denom;
            for (a, vj) in agg.iter_mut().zip(&v[j]) {
                *a += w * vj;
            }
        }
        let delta = params.output.matvec(&agg)?;
        out.extend(map.position(i).iter().zip(&delta).map(|(x, d)| x + d));
    }
    FeatureMap::new(map.height, map.width, map.channels, out)
}

fn cmp_slices(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.total_cmp(y);
        if o.is_ne() {
            return o;
        }
    }
    std::cmp::Ordering::Equal
}

/// Global average pooling: per-channel mean over all spatial positions.
pub fn gap(map: &FeatureMap) -> Vec<f64> {
    let n = map.positions();
    let mut buf = Vec::with_capacity(n);
    (0..map.channels)
        .map(|c| {
            buf.clear();
            buf.extend((0..n).map(|p| map.position(p)[c]));
            order_free_sum(&mut buf) / n as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Length `P` of an input pixel vector.
    pub pixel_dim: usize,
    /// Encoder output length `D_enc = H * W * C`.
    pub encoder_dim: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub embedding_dim: usize,
    pub attention: bool,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// `encoder_dim = pixel_dim` on the default 4x4 grid, embedding of the
    /// pooled channel width, attention enabled.
    pub fn new(pixel_dim: usize, num_classes: usize) -> Self {
        let channels = pixel_dim / 16;
        ModelConfig {
            pixel_dim,
            encoder_dim: pixel_dim,
            grid_height: 4,
            grid_width: 4,
            embedding_dim: channels.max(1),
            attention: true,
            num_classes,
            seed: 0,
        }
    }

    pub fn with_grid(mut self, height: usize, width: usize) -> Self {
        self.grid_height = height;
        self.grid_width = width;
        self.embedding_dim = (self.encoder_dim / (height * width).max(1)).max(1);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn channels(&self) -> Result<usize> {
        let cells = self.grid_height * self.grid_width;
        if cells == 0 || self.encoder_dim == 0 || !self.encoder_dim.is_multiple_of(cells) {
            return Err(Error::ShapeNotFactorable {
                len: self.encoder_dim,
                height: self.grid_height,
                width: self.grid_width,
            });
        }
        Ok(self.encoder_dim / cells)
    }

    pub fn validate(&self) -> Result<()> {
        self.channels()?;
        if self.pixel_dim == 0 || self.embedding_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig(
                "pixel_dim, embedding_dim and num_classes must be positive".into(),
            ));
        }
        if self.encoder_dim > self.pixel_dim {
            return Err(Error::InvalidConfig(format!(
                "encoder_dim {} exceeds pixel_dim {}; rows cannot be orthonormal",
                self.encoder_dim, self.pixel_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    /// Class names in head order.
    pub classes: Vec<String>,
    /// `D_enc x P`, fixed.
    pub encoder: Matrix,
    /// Fixed after construction.
    pub attention: Option<AttentionParams>,
    /// `D_emb x C`, trainable.
    pub embedding: Matrix,
    /// `K x D_emb`, trained during pretraining only.
    pub head: Matrix,
    pub bias: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let classes = (0..config.num_classes).map(|k| k.to_string()).collect();
        Model::with_classes(config, classes)
    }

    pub fn with_classes(config: ModelConfig, classes: Vec<String>) -> Result<Self> {
        config.validate()?;
        if classes.len() != config.num_classes {
            return Err(Error::InvalidConfig(format!(
                "{} class names for {} classes",
                classes.len(),
                config.num_classes
            )));
        }
        let channels = config.channels()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = orthonormal_rows(config.encoder_dim, config.pixel_dim, &mut rng)?;
        let attention = config
            .attention
            .then(|| AttentionParams::identity_init(channels, config.seed.wrapping_add(1)));
        let embedding = Matrix::from_fn(config.embedding_dim, channels, |r, c| {
            if r == c {
                1.0
            } else {
                0.0
            }
        });
        let head_scale = 0.01;
        let head = Matrix::from_fn(config.num_classes, config.embedding_dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * head_scale
        });
        let bias = vec![0.0; config.num_classes];
        Ok(Model {
            config,
            classes,
            encoder,
            attention,
            embedding,
            head,
            bias,
        })
    }

    pub fn channels(&self) -> usize {
        self.embedding.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.head.rows()
    }

    /// Shape and finiteness checks, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let channels = cfg.channels()?;
        let shapes_ok = self.encoder.shape() == (cfg.encoder_dim, cfg.pixel_dim)
            && self.embedding.shape() == (cfg.embedding_dim, channels)
            && self.head.shape() == (cfg.num_classes, cfg.embedding_dim)
            && self.bias.len() == cfg.num_classes
            && self.classes.len() == cfg.num_classes;
        if !shapes_ok {
            return Err(Error::dims("model parameters do not match model config"));
        }
        if let Some(att) = &self.attention {
            att.validate()?;
            if att.channels() != channels {
                return Err(Error::dims("attention channels do not match grid"));
            }
        }
        self.check_finite()
    }

    pub fn check_finite(&self) -> Result<()> {
        let finite = self.encoder.is_finite()
            && self.embedding.is_finite()
            && self.head.is_finite()
            && self.bias.iter().all(|b| b.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite("model parameters".into()))
        }
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }
}

/// Gaussian rows orthonormalized by two passes of modified Gram-Schmidt.
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut attempts = 0;
        loop {
            let mut v: Vec<f64> = (0..cols)
                .map(|_| StandardNormal.sample(&mut *rng))
                .collect();
            for _ in 0..2 {
                for u in &out {
                    let p = dot(&v, u);
                    for (vi, ui) in v.iter_mut().zip(u) {
                        *vi -= p * ui;
                    }
                }
            }
            let n = norm_sq(&v).sqrt();
            if n > 1e-8 {
                v.iter_mut().for_each(|x| *x /= n);
                out.push(v);
                break;
            }
            attempts += 1;
            if attempts > 16 {
                return Err(Error::NumericalFailure("encoder orthonormalization".into()));
            }
        }
    }
    Matrix::from_rows(&out)
}

/// Applies the fixed encoder and reshapes the result into the configured grid.
pub fn encode_frame(pixels: &[f64], model: &Model) -> Result<FeatureMap> {
    let cfg = &model.config;
    if pixels.len() != model.encoder.cols() {
        return Err(Error::dims(format!(
            "frame has {} pixels, model expects {}",
            pixels.len(),
            model.encoder.cols()
        )));
    }
    let channels = cfg.channels()?;
    let enc = model.encoder.matvec(pixels)?;
    FeatureMap::new(cfg.grid_height, cfg.grid_width, channels, enc)
}

/// Encoder, optional attention and pooling: the fixed part of the pipeline.
pub fn pooled_feature(pixels: &[f64], model: &Model) -> Result<Vec<f64>> {
    let map = encode_frame(pixels, model)?;
    let map = match &model.attention {
        Some(att) => nonlocal_attention(&map, att)?,
        None => map,
    };
    Ok(gap(&map))
}

pub fn embed(z: &[f64], model: &Model) -> Result<Vec<f64>> {
    model.embedding.matvec(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct XentOutput {
    pub loss: f64,
    pub grad_head: Matrix,
    pub grad_bias: Vec<f64>,
    /// Gradient with respect to the embedded input `z`.
    pub grad_input: Vec<f64>,
}

pub const PROB_FLOOR: f64 = 1e-300;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of the softmax head at embedded input `z`.
pub fn softmax_xent(z: &[f64], label: usize, model: &Model) -> Result<XentOutput> {
    softmax_xent_raw(z, label, &model.head, &model.bias)
}

pub fn softmax_xent_raw(
    z: &[f64],
    label: usize,
    head: &Matrix,
    bias: &[f64],
) -> Result<XentOutput> {
    let k = head.rows();
    if label >= k {
        return Err(Error::InvalidLabel { label, classes: k });
    }
    if bias.len() != k {
        return Err(Error::dims(format!(
            "bias length {} for {k} classes",
            bias.len()
        )));
    }
    let mut logits = head.matvec(z)?;
    for (l, b) in logits.iter_mut().zip(bias) {
        *l += b;
    }
    // log-sum-exp with the max subtracted
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    let loss = (-probs[label].max(PROB_FLOOR).ln()).max(0.0);

    let mut delta = probs;
    delta[label] -= 1.0;
    let mut grad_head = Matrix::zeros(k, z.len());
    grad_head.add_outer(1.0, &delta, z)?;
    let grad_input = head.tr_matvec(&delta)?;
    Ok(XentOutput {
        loss,
        grad_head,
        grad_bias: delta,
        grad_input,
    })
}

/// Pooled (pre-embedding) features of each frame, stacked as columns `C x m`.
pub fn pooled_features<F: AsRef<[f64]> + Sync>(
    frames: &[F],
    model: &Model,
    exec: Exec,
) -> Result<Matrix> {
    if frames.is_empty() {
        return Err(Error::EmptySet("no frames".into()));
    }
    let cols = exec.try_map(frames, |f| pooled_feature(f.as_ref(), model))?;
    Matrix::from_columns(&cols)
}

/// Embedded features of each frame, stacked as columns `D_emb x m`, in frame
/// order.
pub fn set_features<F: AsRef<[f64]> + Sync>(
    frames: &[F],
    model: &Model,
    exec: Exec,
) -> Result<Matrix> {
    let pooled = pooled_features(frames, model, exec)?;
    model.embedding.matmul(&pooled)
}
