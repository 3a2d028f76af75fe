//! Noise schedule and the forward/reverse diffusion processes.
//!
//! Steps are 1-based (`t ∈ 1..=T`) at every public entry point; the schedule
//! tables are stored 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;
use crate::rng;
use crate::signal::{VelocitySequence, VelocitySpace};

/// Width of the sinusoidal timestep encoding.
pub const TIMESTEP_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas including both endpoints.
    pub fn linear(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = config;
        if steps < 2 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need T >= 2 and 0 < beta_start <= beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            config,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    /// Posterior standard deviation `√β̃_t`, with `β̃_1 = β_1`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        let i = self.index(t)?;
        let var = if i == 0 {
            self.beta[0]
        } else {
            (1.0 - self.alpha_bar[i - 1]) / (1.0 - self.alpha_bar[i]) * self.beta[i]
        };
        Ok(var.sqrt())
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} elements")));
    }
    Ok(())
}

/// `x_t = √ᾱ_t x₀ + √(1 − ᾱ_t) ε`.
pub fn q_sample<F: Real>(x0: &[F], t: usize, eps: &[F], sched: &NoiseSchedule) -> Result<Vec<F>> {
    same_len(x0.len(), eps.len(), "q_sample")?;
    let ab = sched.alpha_bar_at(t)?;
    let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// Coefficient `c` such that `x̂₀ = (x_t − c·ε̂) / √ᾱ_t`, split for reuse in
/// gradients: returns `(1/√ᾱ_t, √(1 − ᾱ_t)/√ᾱ_t)`.
pub fn x0_coefficients(t: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
    let ab = sched.alpha_bar_at(t)?;
    Ok((1.0 / ab.sqrt(), (1.0 - ab).sqrt() / ab.sqrt()))
}

/// `x̂₀ = (x_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t`.
pub fn estimate_x0<F: Real>(
    x_t: &[F],
    t: usize,
    eps_hat: &[F],
    sched: &NoiseSchedule,
) -> Result<Vec<F>> {
    same_len(x_t.len(), eps_hat.len(), "estimate_x0")?;
    let (inv, c) = x0_coefficients(t, sched)?;
    let (inv, c) = (F::of(inv), F::of(c));
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| inv * x - c * e)
        .collect())
}

/// One ancestral step `x_t → x_{t−1}`; `z` is ignored at `t = 1`.
pub fn reverse_step<F: Real>(
    x_t: &[F],
    t: usize,
    eps_hat: &[F],
    sched: &NoiseSchedule,
    z: &[F],
) -> Result<Vec<F>> {
    same_len(x_t.len(), eps_hat.len(), "reverse_step")?;
    same_len(x_t.len(), z.len(), "reverse_step noise")?;
    let i = sched.index(t)?;
    let inv_sqrt_alpha = F::of(1.0 / sched.alpha[i].sqrt());
    let eps_coef = F::of((1.0 - sched.alpha[i]) / (1.0 - sched.alpha_bar[i]).sqrt());
    let sigma = if t == 1 {
        F::zero()
    } else {
        F::of(sched.sigma(t)?)
    };
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((&x, &e), &n)| {
            let mean = inv_sqrt_alpha * (x - eps_coef * e);
            if t == 1 {
                mean
            } else {
                mean + sigma * n
            }
        })
        .collect())
}

/// Sinusoidal encoding `[sin(10^(4i/63) t) …, cos(10^(4i/63) t) …]`, radians.
pub fn timestep_encoding<F: Real>(t: f64) -> Vec<F> {
    let half = TIMESTEP_DIM / 2;
    let freq = |i: usize| 10f64.powf(i as f64 * 4.0 / (half - 1) as f64);
    (0..half)
        .map(|i| F::of((freq(i) * t).sin()))
        .chain((0..half).map(|i| F::of((freq(i) * t).cos())))
        .collect()
}

/// Conditioning signals: the identity-removed observation (channel-major
/// `2 × L`, normalized) and the unit-norm target-user embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning<F> {
    pub observation: Vec<F>,
    pub embedding: Vec<F>,
}

/// A network predicting the noise in `x_t` at step `t` given conditioning.
pub trait NoisePredictor<F: Real> {
    /// Number of time samples per channel the predictor expects.
    fn sequence_length(&self) -> usize;
    fn predict(&self, x_t: &[F], t: usize, cond: &Conditioning<F>) -> Result<Vec<F>>;
}

/// Runs the learned reverse chain from `x_T ~ N(0, I)` down to `x₀`.
///
/// Returns the unclipped `x₀` in channel-major layout.
pub fn sample_raw<F: Real, P: NoisePredictor<F> + ?Sized>(
    cond: &Conditioning<F>,
    model: &P,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<F>> {
    let n = 2 * model.sequence_length();
    same_len(cond.observation.len(), n, "conditioning observation")?;
    let mut rng = rng::stream(seed, &[rng::tag::SAMPLE]);
    let mut x = rng::standard_normal::<F, _>(&mut rng, n);
    for t in (1..=sched.steps()).rev() {
        let eps_hat = model.predict(&x, t, cond)?;
        let z = if t > 1 {
            rng::standard_normal::<F, _>(&mut rng, n)
        } else {
            vec![F::zero(); n]
        };
        x = reverse_step(&x, t, &eps_hat, sched, &z)?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled sequence".into()));
    }
    Ok(x)
}

/// Samples a normalized velocity sequence, clipped to [-1, 1].
pub fn sample<F: Real, P: NoisePredictor<F> + ?Sized>(
    cond: &Conditioning<F>,
    model: &P,
    sched: &NoiseSchedule,
    sample_rate: f64,
    seed: u64,
) -> Result<VelocitySequence> {
    let x = sample_raw(cond, model, sched, seed)?;
    let clipped: Vec<f64> = x.iter().map(|v| v.as_f64().clamp(-1.0, 1.0)).collect();
    VelocitySequence::from_channel_major(sample_rate, &clipped, VelocitySpace::Normalized)
}
