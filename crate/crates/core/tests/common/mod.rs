#![allow(dead_code)]

use gaze_diffusion::denoiser::{self, DenoiserConfig, DenoiserParams};
use gaze_diffusion::diffusion::Conditioning;
use gaze_diffusion::embedder::{self, EmbedderConfig, EmbedderParams};
use gaze_diffusion::nn::ParamSet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
/// Components far below the gradient's typical size are measured relative to
/// `GRAD_FLOOR × RMS(gradient)`: their finite differences are dominated by
/// rounding and by the O(h²) error inherited from larger curvatures.
pub const GRAD_FLOOR: f64 = 1e-3;

pub fn small_denoiser_config() -> DenoiserConfig {
    DenoiserConfig {
        n_layers: 2,
        residual_channels: 4,
        sequence_length: 32,
        embedding_dim: 8,
        t_hidden: 16,
        ..DenoiserConfig::default()
    }
}

pub fn small_embedder_config() -> EmbedderConfig {
    EmbedderConfig {
        sequence_length: 32,
        embedding_dim: 8,
        channels: vec![4, 6, 6, 6],
        n_users: 3,
        ..EmbedderConfig::default()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences on `want` randomly chosen parameters. Parameters
/// whose perturbation flips any ReLU are skipped, since the loss is not
/// differentiable across the kink.
pub fn check_params<P: ParamSet<f64>>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> (f64, Vec<bool>),
    include: impl Fn(&str) -> bool,
    want: usize,
    seed: u64,
) -> GradCheck {
    let (_, base_pattern) = loss(params);
    let mut coords: Vec<(usize, usize)> = params
        .named()
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| include(name))
        .flat_map(|(ti, (_, t))| (0..t.data.len()).map(move |i| (ti, i)))
        .collect();
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let grads: Vec<Vec<f64>> = analytic
        .named()
        .iter()
        .map(|(_, t)| t.data.clone())
        .collect();
    let n = grads.iter().map(Vec::len).sum::<usize>().max(1);
    let rms = (grads.iter().flatten().map(|g| g * g).sum::<f64>() / n as f64).sqrt();
    let floor = GRAD_FLOOR * rms;
    let mut out = GradCheck {
        max_rel: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (ti, i) in coords {
        if out.checked == want {
            break;
        }
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.named_mut()[ti].1.data[i] += delta;
            loss(&p)
        };
        let ((up, pu), (down, pd)) = (eval(FD_STEP), eval(-FD_STEP));
        if pu != base_pattern || pd != base_pattern {
            out.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        out.max_rel = out
            .max_rel
            .max(relative_error(grads[ti][i], numeric, floor));
        out.checked += 1;
    }
    out
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Checks `Σ w ⊙ ε̂` against finite differences.
pub fn denoiser_gradient_check(want: usize, seed: u64) -> GradCheck {
    let cfg = small_denoiser_config();
    let mut params = DenoiserParams::<f64>::init(cfg, seed).unwrap();
    params.randomize_head(seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let n = 2 * cfg.sequence_length;
    let x_t = random_vec(&mut rng, n, 1.0);
    let cond = Conditioning {
        observation: random_vec(&mut rng, n, 0.5),
        embedding: random_vec(&mut rng, cfg.embedding_dim, 0.3),
    };
    let w = random_vec(&mut rng, n, 1.0);
    let t = 7;
    let loss = |p: &DenoiserParams<f64>| {
        let (out, cache) = denoiser::forward(p, &x_t, t, &cond).unwrap();
        (
            out.iter().zip(&w).map(|(a, b)| a * b).sum(),
            cache.relu_pattern(),
        )
    };
    let (_, cache) = denoiser::forward(&params, &x_t, t, &cond).unwrap();
    let grads = denoiser::backward(&params, &cache, &cond.embedding, &w).unwrap();
    check_params(&params, &grads, loss, |_| true, want, seed + 3)
}

/// Checks `Σ w ⊙ E(x)` against finite differences.
pub fn embedder_gradient_check(want: usize, seed: u64) -> GradCheck {
    let cfg = small_embedder_config();
    let params = EmbedderParams::<f64>::init(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let x = random_vec(&mut rng, 2 * cfg.sequence_length, 0.5);
    let w = random_vec(&mut rng, cfg.embedding_dim, 1.0);
    let loss = |p: &EmbedderParams<f64>| {
        let cache = embedder::embed_forward(p, &x).unwrap();
        (
            cache.embedding.iter().zip(&w).map(|(a, b)| a * b).sum(),
            cache.relu_pattern(),
        )
    };
    let cache = embedder::embed_forward(&params, &x).unwrap();
    let mut grads = params.zeros_like();
    embedder::embed_backward(&params, &cache, &w, Some(&mut grads));
    // The classifier head is not on the embedding path.
    check_params(
        &params,
        &grads,
        loss,
        |name| !name.starts_with("classifier"),
        want,
        seed + 3,
    )
}
