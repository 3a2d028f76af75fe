//! User embedder: a small strided convolutional encoder mapping a normalized
//! velocity sequence to a unit-norm identity embedding.
//!
//! It is trained as a user classifier (softmax over a linear head applied to
//! the normalized embedding); only the embedding path is used afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ParamSet, Real, Tensor};
use crate::rng;
use crate::training::AdamState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub sequence_length: usize,
    pub embedding_dim: usize,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    pub n_users: usize,
    /// Inputs pass through `asinh(g·x)/asinh(g)` before the first conv so
    /// that small fixational velocities are not swamped by saccades; 0
    /// disables it.
    pub input_gain: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            sequence_length: 1000,
            embedding_dim: 32,
            channels: vec![16, 32, 32, 32],
            kernel_size: 7,
            stride: 4,
            n_users: 8,
            input_gain: 100.0,
        }
    }
}

impl EmbedderConfig {
    fn pad(&self) -> usize {
        self.kernel_size / 2
    }

    /// Sequence length after each conv layer.
    pub fn layer_lengths(&self) -> Vec<usize> {
        let mut len = self.sequence_length;
        self.channels
            .iter()
            .map(|_| {
                len = nn::strided_len(len, self.kernel_size, self.stride, self.pad());
                len
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.embedding_dim == 0 || self.n_users < 2 {
            return Err(Error::InvalidArgument(
                "embedder needs conv layers, a positive dimension and >= 2 users".into(),
            ));
        }
        if self.kernel_size.is_multiple_of(2) || self.stride == 0 {
            return Err(Error::InvalidArgument(
                "embedder kernel must be odd and stride positive".into(),
            ));
        }
        if !(self.input_gain >= 0.0 && self.input_gain.is_finite()) {
            return Err(Error::InvalidArgument(
                "input gain must be finite and >= 0".into(),
            ));
        }
        if self.sequence_length < self.kernel_size {
            return Err(Error::TooShort {
                len: self.sequence_length,
                min: self.kernel_size,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams<F> {
    pub config: EmbedderConfig,
    pub conv_w: Vec<Tensor<F>>,
    pub conv_b: Vec<Tensor<F>>,
    pub dense_w: Tensor<F>,
    pub dense_b: Tensor<F>,
    /// Classification head, used only while training.
    pub cls_w: Tensor<F>,
    pub cls_b: Tensor<F>,
}

impl<F: Real> ParamSet<F> for EmbedderParams<F> {
    fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v = Vec::new();
        for (i, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            v.push((format!("conv.{i}.weight"), w));
            v.push((format!("conv.{i}.bias"), b));
        }
        v.push(("dense.weight".into(), &self.dense_w));
        v.push(("dense.bias".into(), &self.dense_b));
        v.push(("classifier.weight".into(), &self.cls_w));
        v.push(("classifier.bias".into(), &self.cls_b));
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v = Vec::new();
        for (i, (w, b)) in self
            .conv_w
            .iter_mut()
            .zip(self.conv_b.iter_mut())
            .enumerate()
        {
            v.push((format!("conv.{i}.weight"), w));
            v.push((format!("conv.{i}.bias"), b));
        }
        v.push(("dense.weight".into(), &mut self.dense_w));
        v.push(("dense.bias".into(), &mut self.dense_b));
        v.push(("classifier.weight".into(), &mut self.cls_w));
        v.push(("classifier.bias".into(), &mut self.cls_b));
        v
    }
}

impl<F: Real> EmbedderParams<F> {
    pub fn zeros(config: EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let mut cin = 2;
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for &cout in &config.channels {
            conv_w.push(Tensor::zeros(&[cout, cin, k]));
            conv_b.push(Tensor::zeros(&[cout]));
            cin = cout;
        }
        let d = config.embedding_dim;
        Ok(EmbedderParams {
            dense_w: Tensor::zeros(&[d, cin]),
            dense_b: Tensor::zeros(&[d]),
            cls_w: Tensor::zeros(&[config.n_users, d]),
            cls_b: Tensor::zeros(&[config.n_users]),
            conv_w,
            conv_b,
            config,
        })
    }

    pub fn init(config: EmbedderConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = rng::stream(seed, &[rng::tag::EMBEDDER_INIT]);
        let k = p.config.kernel_size;
        let mut cin = 2;
        for i in 0..p.conv_w.len() {
            let shape = p.conv_w[i].shape.clone();
            p.conv_w[i] = Tensor::uniform_fan_in(&shape, cin * k, &mut rng);
            p.conv_b[i] = Tensor::uniform_fan_in(&[shape[0]], cin * k, &mut rng);
            cin = shape[0];
        }
        let d = p.config.embedding_dim;
        p.dense_w = Tensor::uniform_fan_in(&[d, cin], cin, &mut rng);
        p.dense_b = Tensor::uniform_fan_in(&[d], cin, &mut rng);
        p.cls_w = Tensor::uniform_fan_in(&[p.config.n_users, d], d, &mut rng);
        Ok(p)
    }
}

#[derive(Debug, Clone)]
pub struct EmbedCache<F> {
    raw: Vec<F>,
    input: Vec<F>,
    /// Post-ReLU activations of each conv layer.
    acts: Vec<Vec<F>>,
    pooled: Vec<F>,
    norm: F,
    pub embedding: Vec<F>,
}

impl<F: Real> EmbedCache<F> {
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.acts.iter().flatten().map(|v| *v > F::zero()).collect()
    }
}

/// Embeds a channel-major `2 × L` normalized velocity sequence.
pub fn embed_forward<F: Real>(params: &EmbedderParams<F>, x: &[F]) -> Result<EmbedCache<F>> {
    let cfg = &params.config;
    if x.len() != 2 * cfg.sequence_length {
        return Err(Error::Shape(format!(
            "embedder expects {} samples per channel, got {}",
            cfg.sequence_length,
            x.len() / 2
        )));
    }
    let input: Vec<F> = if cfg.input_gain > 0.0 {
        let (g, inv) = (F::of(cfg.input_gain), F::of(1.0 / cfg.input_gain.asinh()));
        x.iter().map(|&v| (g * v).asinh() * inv).collect()
    } else {
        x.to_vec()
    };
    let mut acts: Vec<Vec<F>> = Vec::with_capacity(cfg.channels.len());
    let mut len = cfg.sequence_length;
    for (w, b) in params.conv_w.iter().zip(&params.conv_b) {
        let src = acts.last().map_or(input.as_slice(), |a| a.as_slice());
        let (mut out, out_len) = nn::conv1d_strided(src, len, w, &b.data, cfg.stride, cfg.pad());
        nn::relu_in_place(&mut out);
        acts.push(out);
        len = out_len;
    }
    let last = acts.last().expect("at least one conv layer");
    let channels = last.len() / len;
    let inv = F::of(1.0 / len as f64);
    let pooled: Vec<F> = (0..channels)
        .map(|c| nn::sum(&last[c * len..(c + 1) * len]) * inv)
        .collect();
    let z = nn::dense(&params.dense_w, Some(&params.dense_b), &pooled);
    let norm = nn::dot(&z, &z).sqrt();
    if !(norm > F::zero()) || !norm.is_finite() {
        return Err(Error::ZeroNorm("user embedding"));
    }
    let embedding = z.iter().map(|&v| v / norm).collect();
    Ok(EmbedCache {
        raw: x.to_vec(),
        input,
        acts,
        pooled,
        norm,
        embedding,
    })
}

pub fn embed<F: Real>(params: &EmbedderParams<F>, x: &[F]) -> Result<Vec<F>> {
    embed_forward(params, x).map(|c| c.embedding)
}

/// Backpropagates a gradient on the unit embedding.
///
/// Parameter gradients are accumulated into `grads` when given; the gradient
/// with respect to the input sequence is always returned.
pub fn embed_backward<F: Real>(
    params: &EmbedderParams<F>,
    cache: &EmbedCache<F>,
    grad_embedding: &[F],
    mut grads: Option<&mut EmbedderParams<F>>,
) -> Vec<F> {
    let cfg = &params.config;
    let e = &cache.embedding;
    // e = z/‖z‖ ⇒ dz = (g − e(e·g))/‖z‖
    let proj = nn::dot(e, grad_embedding);
    let g_z: Vec<F> = grad_embedding
        .iter()
        .zip(e)
        .map(|(&g, &ev)| (g - ev * proj) / cache.norm)
        .collect();

    let g_pooled = match grads.as_deref_mut() {
        Some(gp) => nn::dense_backward(
            &params.dense_w,
            &cache.pooled,
            &g_z,
            &mut gp.dense_w,
            Some(&mut gp.dense_b),
        ),
        None => {
            let mut scratch = Tensor::zeros(&params.dense_w.shape);
            nn::dense_backward(&params.dense_w, &cache.pooled, &g_z, &mut scratch, None)
        }
    };

    let lens = cfg.layer_lengths();
    let n_layers = cfg.channels.len();
    let last_len = lens[n_layers - 1];
    let inv = F::of(1.0 / last_len as f64);
    let mut g_act: Vec<F> = g_pooled
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, last_len))
        .collect();

    for i in (0..n_layers).rev() {
        nn::relu_backward_in_place(&cache.acts[i], &mut g_act);
        let (src, src_len) = if i == 0 {
            (&cache.input, cfg.sequence_length)
        } else {
            (&cache.acts[i - 1], lens[i - 1])
        };
        let mut g_src = vec![F::zero(); src.len()];
        let param_grads = grads.as_deref_mut().map(|gp| {
            let (w, b) = (&mut gp.conv_w[i], &mut gp.conv_b[i]);
            (w, b.data.as_mut_slice())
        });
        nn::conv1d_strided_backward(
            src,
            src_len,
            &params.conv_w[i],
            cfg.stride,
            cfg.pad(),
            &g_act,
            param_grads,
            Some(&mut g_src),
        );
        g_act = g_src;
    }
    if cfg.input_gain > 0.0 {
        let (g, inv) = (F::of(cfg.input_gain), F::of(1.0 / cfg.input_gain.asinh()));
        for (d, &v) in g_act.iter_mut().zip(&cache.raw) {
            let gv = g * v;
            *d *= g * inv / (F::one() + gv * gv).sqrt();
        }
    }
    g_act
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "embeddings of dimension {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine similarity operand"));
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// Softmax cross-entropy of the classification head for one sequence.
///
/// Returns `(loss, predicted class, gradient w.r.t. the embedding)` and
/// accumulates head gradients into `grads`.
fn classify_step<F: Real>(
    params: &EmbedderParams<F>,
    embedding: &[F],
    label: usize,
    grads: &mut EmbedderParams<F>,
) -> (f64, usize, Vec<F>) {
    let logits = nn::dense(&params.cls_w, Some(&params.cls_b), embedding);
    let max = logits.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    let probs: Vec<F> = exps.iter().map(|&v| v / total).collect();
    let loss = -(probs[label].as_f64().max(1e-30)).ln();
    let pred = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let g_logits: Vec<F> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == label { p - F::one() } else { p })
        .collect();
    let g_e = nn::dense_backward(
        &params.cls_w,
        embedding,
        &g_logits,
        &mut grads.cls_w,
        Some(&mut grads.cls_b),
    );
    (loss, pred, g_e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Randomly mirror each axis of every training example.
    pub augment_flips: bool,
    /// Add white noise with a standard deviation drawn from `[0, augment_noise)`.
    pub augment_noise: f64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig {
            epochs: 60,
            batch_size: 16,
            learning_rate: 2e-3,
            augment_flips: true,
            augment_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderTrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains the embedder as a user classifier on `(user index, sequence)` pairs.
pub fn train_embedder(
    examples: &[(usize, Vec<f32>)],
    config: EmbedderConfig,
    train: EmbedderTrainConfig,
    seed: u64,
) -> Result<(EmbedderParams<f32>, EmbedderTrainReport)> {
    config.validate()?;
    let mut per_user = vec![0usize; config.n_users];
    for (u, _) in examples {
        if *u >= config.n_users {
            return Err(Error::InvalidArgument(format!(
                "label {u} outside 0..{}",
                config.n_users
            )));
        }
        per_user[*u] += 1;
    }
    if per_user.iter().filter(|&&c| c >= 2).count() < 2 || per_user.iter().any(|&c| c == 1) {
        return Err(Error::Degenerate(
            "embedder training needs >= 2 users with >= 2 sequences each".into(),
        ));
    }
    if train.batch_size == 0 || train.epochs == 0 {
        return Err(Error::InvalidArgument(
            "epochs and batch size must be positive".into(),
        ));
    }
    if !(train.augment_noise >= 0.0 && train.augment_noise.is_finite()) {
        return Err(Error::InvalidArgument(
            "augment_noise must be finite and >= 0".into(),
        ));
    }
    let mut params = EmbedderParams::<f32>::init(config, seed)?;
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = rng::stream(seed, &[rng::tag::EMBEDDER_SHUFFLE]);
    let mut epoch_loss = Vec::with_capacity(train.epochs);
    let mut correct = 0usize;

    for _ in 0..train.epochs {
        use rand::seq::SliceRandom;
        use rand::Rng;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        correct = 0;
        for batch in order.chunks(train.batch_size) {
            let mut grads = params.zeros_like();
            for &i in batch {
                let (label, x) = (&examples[i].0, &examples[i].1);
                let cache = if train.augment_flips || train.augment_noise > 0.0 {
                    let n = params.config.sequence_length;
                    let flips: [bool; 2] = if train.augment_flips {
                        [shuffle_rng.random(), shuffle_rng.random()]
                    } else {
                        [false; 2]
                    };
                    let sigma = if train.augment_noise > 0.0 {
                        shuffle_rng.random_range(0.0..train.augment_noise) as f32
                    } else {
                        0.0
                    };
                    let noise: Vec<f32> = rng::standard_normal(&mut shuffle_rng, 2 * n);
                    let augmented: Vec<f32> = x
                        .iter()
                        .zip(&noise)
                        .enumerate()
                        .map(|(j, (&v, &z))| if flips[j / n] { -v } else { v } + sigma * z)
                        .collect();
                    embed_forward(&params, &augmented)?
                } else {
                    embed_forward(&params, x)?
                };
                let (loss, pred, g_e) =
                    classify_step(&params, &cache.embedding, *label, &mut grads);
                embed_backward(&params, &cache, &g_e, Some(&mut grads));
                loss_sum += loss;
                correct += (pred == *label) as usize;
            }
            grads.scale(1.0 / batch.len() as f32);
            adam.step(&mut params, &grads, train.learning_rate)?;
        }
        epoch_loss.push(loss_sum / examples.len() as f64);
    }
    Ok((
        params,
        EmbedderTrainReport {
            epoch_loss,
            train_accuracy: correct as f64 / examples.len() as f64,
        },
    ))
}
