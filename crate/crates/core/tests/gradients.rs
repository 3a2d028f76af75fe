mod common;

use common::*;
use gaze_diffusion::denoiser::{self, DenoiserParams};
use gaze_diffusion::diffusion::{self, Conditioning, NoiseSchedule, ScheduleConfig};
use gaze_diffusion::embedder::{self, EmbedderParams};
use gaze_diffusion::nn::ParamSet;
use gaze_diffusion::rng;
use gaze_diffusion::training::{self, Objective, TrainConfig, TrainingExample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn denoiser_parameter_gradients() {
    for seed in [1, 2] {
        let r = denoiser_gradient_check(60, seed);
        assert_eq!(r.checked, 60);
        assert!(r.max_rel < 1e-5, "{r:?}");
    }
}

#[test]
fn embedder_parameter_gradients() {
    for seed in [1, 2] {
        let r = embedder_gradient_check(60, seed);
        assert_eq!(r.checked, 60);
        assert!(r.max_rel < 1e-5, "{r:?}");
    }
}

/// The identity loss reaches the denoiser through the x₀ estimate and the
/// frozen embedder.
#[test]
fn identity_loss_gradient_chain() {
    let dcfg = small_denoiser_config();
    let ecfg = small_embedder_config();
    let mut params = DenoiserParams::<f64>::init(dcfg, 4).unwrap();
    params.randomize_head(5);
    let emb = EmbedderParams::<f64>::init(ecfg.clone(), 6).unwrap();
    let sched = NoiseSchedule::linear(ScheduleConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 2 * dcfg.sequence_length;
    let x0 = random_vec(&mut rng, n, 0.05);
    // A random unit target keeps 1 − cos away from its stationary points;
    // embeddings of unrelated inputs under a fresh init are nearly parallel.
    let e0 = {
        let v = random_vec(&mut rng, ecfg.embedding_dim, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / norm).collect::<Vec<f64>>()
    };
    let cond = Conditioning {
        observation: random_vec(&mut rng, n, 0.4),
        embedding: e0.clone(),
    };
    let t = 30;
    let eps: Vec<f64> = rng::standard_normal(&mut rng, n);
    let x_t = diffusion::q_sample(&x0, t, &eps, &sched).unwrap();

    let loss = |p: &DenoiserParams<f64>| {
        let (eps_hat, dc) = denoiser::forward(p, &x_t, t, &cond).unwrap();
        let x0_hat = diffusion::estimate_x0(&x_t, t, &eps_hat, &sched).unwrap();
        let ec = embedder::embed_forward(&emb, &x0_hat).unwrap();
        let mut pattern = dc.relu_pattern();
        pattern.extend(ec.relu_pattern());
        (training::loss_id(&e0, &ec.embedding).unwrap(), pattern)
    };

    let (eps_hat, dc) = denoiser::forward(&params, &x_t, t, &cond).unwrap();
    let x0_hat = diffusion::estimate_x0(&x_t, t, &eps_hat, &sched).unwrap();
    let ec = embedder::embed_forward(&emb, &x0_hat).unwrap();
    let g_e: Vec<f64> = e0.iter().map(|v| -v).collect();
    let g_x0 = embedder::embed_backward(&emb, &ec, &g_e, None);
    let (_, c) = diffusion::x0_coefficients(t, &sched).unwrap();
    let g_eps: Vec<f64> = g_x0.iter().map(|g| -c * g).collect();
    let grads = denoiser::backward(&params, &dc, &cond.embedding, &g_eps).unwrap();

    let r = check_params(&params, &grads, loss, |_| true, 80, 8);
    assert_eq!(r.checked, 80);
    assert!(r.max_rel < 1e-5, "{r:?}");
}

fn tiny_examples(emb: &EmbedderParams<f32>, len: usize, n: usize) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..n)
        .map(|i| {
            let x0: Vec<f32> = rng::standard_normal::<f32, _>(&mut rng, 2 * len)
                .iter()
                .map(|v| 0.2 * v)
                .collect();
            let observation = x0.clone();
            let embedding = embedder::embed(emb, &x0).unwrap();
            TrainingExample {
                user: i % 3,
                x0,
                observation,
                embedding,
            }
        })
        .collect()
}

#[test]
fn training_step_reaches_user_projection_and_is_reproducible() {
    let dcfg = small_denoiser_config();
    let ecfg = small_embedder_config();
    let mut params = DenoiserParams::<f32>::init(dcfg, 1).unwrap();
    params.randomize_head(2);
    let emb = EmbedderParams::<f32>::init(ecfg, 3).unwrap();
    let examples = tiny_examples(&emb, dcfg.sequence_length, 4);
    let batch: Vec<&TrainingExample> = examples.iter().collect();
    let sched = NoiseSchedule::linear(ScheduleConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    let run = |cfg: &TrainConfig| {
        let mut r = rng::stream(9, &[]);
        training::train_step(&batch, &params, &emb, &sched, cfg, &mut r).unwrap()
    };
    let (l1, g1) = run(&cfg);
    let (l2, g2) = run(&cfg);
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
    assert_eq!(l1.combined, 1.5);
    assert!(l1.loss_noise >= 0.0 && (0.0..=2.0).contains(&l1.loss_id));

    let norm = |t: &gaze_diffusion::nn::Tensor<f32>| t.data.iter().map(|v| v * v).sum::<f32>();
    let user_grad = norm(&g1.user_w) + g1.layers.iter().map(|l| norm(&l.user_w)).sum::<f32>();
    assert!(user_grad > 0.0);

    // The identity term changes the gradient.
    let (_, g3) = run(&TrainConfig {
        objective: Objective::NoiseOnly,
        ..cfg
    });
    assert_ne!(g1, g3);
}

#[test]
fn zero_head_predicts_zero_noise() {
    let dcfg = gaze_diffusion::denoiser::DenoiserConfig::default();
    let params = DenoiserParams::<f32>::init(dcfg, 1).unwrap();
    let ecfg = gaze_diffusion::embedder::EmbedderConfig::default();
    let emb = EmbedderParams::<f32>::init(ecfg, 3).unwrap();
    let examples = tiny_examples(&emb, dcfg.sequence_length, 8);
    let batch: Vec<&TrainingExample> = examples.iter().collect();
    let sched = NoiseSchedule::linear(ScheduleConfig::default()).unwrap();
    let (l, _) = training::train_step(
        &batch,
        &params,
        &emb,
        &sched,
        &TrainConfig::default(),
        &mut rng::stream(4, &[]),
    )
    .unwrap();
    let expected = (2.0 / std::f64::consts::PI).sqrt();
    assert!((l.loss_noise - expected).abs() < 0.02, "{}", l.loss_noise);
}

#[test]
fn training_leaves_embedder_untouched_and_reduces_loss() {
    let dcfg = small_denoiser_config();
    let ecfg = small_embedder_config();
    let emb = EmbedderParams::<f32>::init(ecfg, 3).unwrap();
    let before = emb.checksum();
    let examples = tiny_examples(&emb, dcfg.sequence_length, 6);
    let cfg = TrainConfig {
        steps: 400,
        batch_size: 4,
        learning_rate: 5e-3,
        seed: 2,
        objective: Objective::NoiseOnly,
        ..TrainConfig::default()
    };
    let init = DenoiserParams::<f32>::init(dcfg, 1).unwrap();
    let (a, log) = training::train(&examples, init.clone(), &emb, &cfg, |_| {}).unwrap();
    assert_eq!(emb.checksum(), before);
    let mean = |rows: &[training::LogRow]| {
        rows.iter().map(|r| r.loss_noise).sum::<f64>() / rows.len() as f64
    };
    assert!(mean(&log[log.len() - 20..]) < 0.7 * mean(&log[..20]));
    let (b, log2) = training::train(&examples, init, &emb, &cfg, |_| {}).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(
        training::write_log_csv(&log),
        training::write_log_csv(&log2)
    );
}
