//! Self-supervised training of the denoiser: noise-prediction loss plus the
//! user identity guidance term, optimized with Adam.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{self, DenoiserParams, Gradients};
use crate::diffusion::{self, Conditioning, NoiseSchedule, ScheduleConfig};
use crate::embedder::{self, EmbedderParams};
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Real};
use crate::rng;
use crate::signal::{self, GazeSequence};

/// Adam moments and step counter; `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
#[derive(Debug, Clone)]
pub struct AdamState<P> {
    m: P,
    v: P,
    pub step: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<P> AdamState<P> {
    pub fn new<F: Real>(params: &P) -> Self
    where
        P: ParamSet<F>,
    {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step<F: Real>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()>
    where
        P: ParamSet<F>,
    {
        grads.check_finite("gradient")?;
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let (b1, b2) = (F::of(BETA1), F::of(BETA2));
        let (one_b1, one_b2) = (F::of(1.0 - BETA1), F::of(1.0 - BETA2));
        let (inv_bc1, inv_bc2) = (F::of(1.0 / bc1), F::of(1.0 / bc2));
        let (lr, eps) = (F::of(lr), F::of(ADAM_EPS));
        let tensors = params
            .named_mut()
            .into_iter()
            .zip(grads.named())
            .zip(self.m.named_mut().into_iter().zip(self.v.named_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + one_b1 * gi;
                v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
                let m_hat = m.data[i] * inv_bc1;
                let v_hat = v.data[i] * inv_bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseNorm {
    L1,
    L2,
}

/// How the two loss terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    /// `L_noise/sg(L_noise) + 0.5·L_id/sg(L_id)`.
    Normalized,
    /// `L_noise + λ·L_id`.
    Weighted { lambda: f64 },
    /// `L_noise` alone (ablation without identity guidance).
    NoiseOnly,
}

impl Objective {
    pub fn uses_identity(&self) -> bool {
        !matches!(self, Objective::NoiseOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub objective: Objective,
    pub noise_norm: NoiseNorm,
    pub schedule: ScheduleConfig,
    /// Rate (Hz) the identity-removal step downsamples to.
    pub low_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 2e-4,
            steps: 2000,
            objective: Objective::Normalized,
            noise_norm: NoiseNorm::L1,
            schedule: ScheduleConfig::default(),
            low_rate: 20.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "batch size, steps and learning rate must be positive".into(),
            ));
        }
        if let Objective::Weighted { lambda } = self.objective {
            if !(lambda >= 0.0) {
                return Err(Error::InvalidArgument("lambda must be non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_noise: f64,
    pub loss_id: f64,
    pub combined: f64,
}

/// Mean noise-prediction error and its gradient with respect to `eps_hat`
/// (scaled by `1/N`).
pub fn loss_noise<F: Real>(eps: &[F], eps_hat: &[F], norm: NoiseNorm) -> Result<(f64, Vec<F>)> {
    if eps.len() != eps_hat.len() || eps.is_empty() {
        return Err(Error::Shape(format!(
            "noise {} vs prediction {}",
            eps.len(),
            eps_hat.len()
        )));
    }
    let n = eps.len() as f64;
    let inv = F::of(1.0 / n);
    let mut total = 0.0;
    let grad = eps
        .iter()
        .zip(eps_hat)
        .map(|(&e, &p)| {
            let d = p - e;
            match norm {
                NoiseNorm::L1 => {
                    total += d.abs().as_f64();
                    if d > F::zero() {
                        inv
                    } else if d < F::zero() {
                        -inv
                    } else {
                        F::zero()
                    }
                }
                NoiseNorm::L2 => {
                    total += (d * d).as_f64();
                    F::of(2.0) * d * inv
                }
            }
        })
        .collect();
    Ok((total / n, grad))
}

/// `1 − cos(E(x₀), E(x̂₀))`.
pub fn loss_id(target: &[f64], estimate: &[f64]) -> Result<f64> {
    Ok(1.0 - embedder::cosine_similarity(target, estimate)?)
}

/// Combined objective value and the multipliers applied to each term's raw
/// gradient.
pub fn combined_loss(loss_noise: f64, loss_id: f64, objective: Objective) -> (f64, f64, f64) {
    match objective {
        Objective::Normalized => {
            let (noise_value, noise_scale) = if loss_noise > 0.0 {
                (1.0, 1.0 / loss_noise)
            } else {
                (loss_noise, 1.0)
            };
            let (id_value, id_scale) = if loss_id > 0.0 {
                (0.5, 0.5 / loss_id)
            } else {
                (0.5 * loss_id, 0.5)
            };
            (noise_value + id_value, noise_scale, id_scale)
        }
        Objective::Weighted { lambda } => (loss_noise + lambda * loss_id, 1.0, lambda),
        Objective::NoiseOnly => (loss_noise, 1.0, 0.0),
    }
}

/// A training sequence after identity removal, velocity estimation and
/// normalization, with its frozen target embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub user: usize,
    /// Clean normalized velocities, channel-major `2 × L`.
    pub x0: Vec<f32>,
    /// Identity-removed normalized velocities, channel-major `2 × L`.
    pub observation: Vec<f32>,
    pub embedding: Vec<f32>,
}

pub fn normalized_velocity(g: &GazeSequence) -> Result<Vec<f32>> {
    let v = signal::preprocess(&signal::savgol_derivative(g)?);
    Ok(v.to_channel_major().into_iter().map(|x| x as f32).collect())
}

impl TrainingExample {
    pub fn from_gaze(
        user: usize,
        g: &GazeSequence,
        embedder: &EmbedderParams<f32>,
        low_rate: f64,
    ) -> Result<Self> {
        let x0 = normalized_velocity(g)?;
        let observation = normalized_velocity(&signal::remove_identity(g, low_rate)?)?;
        let embedding = embedder::embed(embedder, &x0)?;
        Ok(TrainingExample {
            user,
            x0,
            observation,
            embedding,
        })
    }
}

struct ItemForward {
    cache: denoiser::ForwardCache<f32>,
    noise_loss: f64,
    noise_grad: Vec<f32>,
    id: Option<(f64, Vec<f32>)>,
}

/// One optimization step's worth of losses and summed gradients.
pub fn train_step<R: Rng>(
    batch: &[&TrainingExample],
    params: &DenoiserParams<f32>,
    embedder: &EmbedderParams<f32>,
    sched: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, Gradients<f32>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = 2 * params.config.sequence_length;
    let draws: Vec<(usize, Vec<f32>)> = batch
        .iter()
        .map(|_| {
            let t = rng.random_range(1..=sched.steps());
            (t, rng::standard_normal::<f32, _>(rng, n))
        })
        .collect();
    let use_id = config.objective.uses_identity();

    let items: Vec<ItemForward> = batch
        .par_iter()
        .zip(draws.into_par_iter())
        .map(|(ex, (t, eps))| -> Result<ItemForward> {
            let x_t = diffusion::q_sample(&ex.x0, t, &eps, sched)?;
            let cond = Conditioning {
                observation: ex.observation.clone(),
                embedding: ex.embedding.clone(),
            };
            let (eps_hat, cache) = denoiser::forward(params, &x_t, t, &cond)?;
            if eps_hat.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("denoiser output".into()));
            }
            let (noise_loss, noise_grad) = loss_noise(&eps, &eps_hat, config.noise_norm)?;
            let id = if use_id {
                let x0_hat = diffusion::estimate_x0(&x_t, t, &eps_hat, sched)?;
                let ec = embedder::embed_forward(embedder, &x0_hat)?;
                let target: Vec<f64> = ex.embedding.iter().map(|&v| v as f64).collect();
                let estimate: Vec<f64> = ec.embedding.iter().map(|&v| v as f64).collect();
                let value = loss_id(&target, &estimate)?;
                // Both embeddings are unit norm, so ∂(1 − e₀·ê)/∂ê = −e₀.
                let g_e: Vec<f32> = ex.embedding.iter().map(|&v| -v).collect();
                let g_x0_hat = embedder::embed_backward(embedder, &ec, &g_e, None);
                let (_, c) = diffusion::x0_coefficients(t, sched)?;
                let c = c as f32;
                let g_eps: Vec<f32> = g_x0_hat.iter().map(|&g| -c * g).collect();
                Some((value, g_eps))
            } else {
                None
            };
            Ok(ItemForward {
                cache,
                noise_loss,
                noise_grad,
                id,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let b = items.len() as f64;
    let ln = items.iter().map(|i| i.noise_loss).sum::<f64>() / b;
    let lid = if use_id {
        items
            .iter()
            .map(|i| i.id.as_ref().map_or(0.0, |x| x.0))
            .sum::<f64>()
            / b
    } else {
        0.0
    };
    let (combined, noise_scale, id_scale) = combined_loss(ln, lid, config.objective);
    if !combined.is_finite() {
        return Err(Error::NonFinite("combined loss".into()));
    }
    let noise_scale = (noise_scale / b) as f32;
    let id_scale = (id_scale / b) as f32;

    let grads: Vec<Gradients<f32>> = batch
        .par_iter()
        .zip(items.par_iter())
        .map(|(ex, item)| {
            let g_out: Vec<f32> = match &item.id {
                Some((_, g_id)) => item
                    .noise_grad
                    .iter()
                    .zip(g_id)
                    .map(|(&a, &c)| noise_scale * a + id_scale * c)
                    .collect(),
                None => item.noise_grad.iter().map(|&a| noise_scale * a).collect(),
            };
            denoiser::backward(params, &item.cache, &ex.embedding, &g_out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = params.zeros_like();
    for g in &grads {
        total.add_assign(g);
    }
    Ok((
        LossBreakdown {
            loss_noise: ln,
            loss_id: lid,
            combined,
        },
        total,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_noise: f64,
    pub loss_id: f64,
}

/// Runs `config.steps` Adam steps over shuffled batches of `examples`.
pub fn train(
    examples: &[TrainingExample],
    mut params: DenoiserParams<f32>,
    embedder: &EmbedderParams<f32>,
    config: &TrainConfig,
    mut on_step: impl FnMut(&LogRow),
) -> Result<(DenoiserParams<f32>, Vec<LogRow>)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Degenerate("no training examples".into()));
    }
    let sched = NoiseSchedule::linear(config.schedule)?;
    let mut adam = AdamState::new(&params);
    let mut batch_rng = rng::stream(config.seed, &[rng::tag::TRAIN_BATCH]);
    let mut noise_rng = rng::stream(config.seed, &[rng::tag::TRAIN_NOISE]);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut picked = Vec::with_capacity(config.batch_size);
        while picked.len() < config.batch_size {
            if order.is_empty() {
                use rand::seq::SliceRandom;
                order = (0..examples.len()).collect();
                order.shuffle(&mut batch_rng);
            }
            picked.push(&examples[order.pop().expect("refilled above")]);
        }
        let (losses, grads) =
            train_step(&picked, &params, embedder, &sched, config, &mut noise_rng)?;
        adam.step(&mut params, &grads, config.learning_rate)?;
        let row = LogRow {
            step,
            loss_noise: losses.loss_noise,
            loss_id: losses.loss_id,
        };
        on_step(&row);
        log.push(row);
    }
    Ok((params, log))
}

pub fn write_log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss_noise,loss_id\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.8},{:.8}\n",
            r.step, r.loss_noise, r.loss_id
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use proptest::prelude::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Flat(Tensor<f64>);

    impl ParamSet<f64> for Flat {
        fn named(&self) -> Vec<(String, &Tensor<f64>)> {
            vec![("w".into(), &self.0)]
        }
        fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
            vec![("w".into(), &mut self.0)]
        }
    }

    fn flat(v: Vec<f64>) -> Flat {
        Flat(Tensor {
            shape: vec![v.len()],
            data: v,
        })
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = flat(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut adam = AdamState::new(&p);
        adam.step(&mut p, &flat(vec![0.0; 3]), 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_bounded_by_lr() {
        let g = vec![1e-3, -4.0, 250.0, -1e-9];
        let mut p = flat(vec![0.0; 4]);
        let mut adam = AdamState::new(&p);
        let lr = 2e-4;
        adam.step(&mut p, &flat(g.clone()), lr).unwrap();
        for (x, gi) in p.0.data.iter().zip(&g) {
            assert!(x.abs() <= lr * (1.0 + 1e-7));
            assert!(x * gi < 0.0);
        }
        let mut q = flat(vec![0.0; 4]);
        let mut adam2 = AdamState::new(&q);
        adam2.step(&mut q, &flat(g), lr).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = flat(vec![0.0; 2]);
        let mut adam = AdamState::new(&p);
        assert!(adam.step(&mut p, &flat(vec![f64::NAN, 0.0]), 1e-3).is_err());
    }

    #[test]
    fn noise_loss_examples() {
        let eps = vec![0.3f64, -1.2, 0.0];
        assert_eq!(loss_noise(&eps, &eps, NoiseNorm::L1).unwrap().0, 0.0);
        let (v, g) = loss_noise(&[0.0f64; 4], &[1.0; 4], NoiseNorm::L1).unwrap();
        assert_eq!(v, 1.0);
        assert!(g.iter().all(|&x| x == 0.25));
        assert!(loss_noise(&[0.0f64; 4], &[1.0; 3], NoiseNorm::L1).is_err());
        let (v, _) = loss_noise(&[0.0f64; 2], &[2.0; 2], NoiseNorm::L2).unwrap();
        assert_eq!(v, 4.0);
    }

    #[test]
    fn identity_loss_examples() {
        assert!(loss_id(&[0.6, 0.8], &[0.6, 0.8]).unwrap().abs() < 1e-12);
        assert!((loss_id(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((loss_id(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(loss_id(&[1.0, 0.0], &[0.0, 0.0]).is_err());
        // Positive rescaling invariance.
        let a = loss_id(&[0.2, 0.5], &[-0.3, 0.9]).unwrap();
        let b = loss_id(&[2.0, 5.0], &[-0.03, 0.09]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_is_self_normalized() {
        let (v, ns, is) = combined_loss(0.37, 0.81, Objective::Normalized);
        assert_eq!(v, 1.5);
        assert!((ns - 1.0 / 0.37).abs() < 1e-12 && (is - 0.5 / 0.81).abs() < 1e-12);
        // Contribution is linear in the raw gradient at fixed value.
        let g = 0.2;
        assert!(((2.0 * g) * ns - 2.0 * (g * ns)).abs() < 1e-15);

        let (v, ns, _) = combined_loss(0.0, 0.4, Objective::Normalized);
        assert_eq!((v, ns), (0.5, 1.0));
        let (v, _, is) = combined_loss(0.3, 0.0, Objective::Normalized);
        assert_eq!((v, is), (1.0, 0.5));
        assert_eq!(
            combined_loss(0.3, 0.2, Objective::Weighted { lambda: 2.0 }),
            (0.7, 1.0, 2.0)
        );
        assert_eq!(
            combined_loss(0.3, 0.2, Objective::NoiseOnly),
            (0.3, 1.0, 0.0)
        );
    }

    proptest! {
        #[test]
        fn noise_loss_non_negative(xs in proptest::collection::vec(-5.0..5.0f64, 1..50), seed in 0u64..1000) {
            let ys: Vec<f64> = xs.iter().map(|x| (x * seed as f64).sin()).collect();
            prop_assert!(loss_noise(&xs, &ys, NoiseNorm::L1).unwrap().0 >= 0.0);
            prop_assert!(loss_noise(&xs, &ys, NoiseNorm::L2).unwrap().0 >= 0.0);
        }

        #[test]
        fn combined_value_constant(a in 1e-6..10.0f64, b in 1e-6..2.0f64) {
            prop_assert_eq!(combined_loss(a, b, Objective::Normalized).0, 1.5);
        }
    }
}
