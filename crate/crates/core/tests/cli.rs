use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gaze_diffusion::cli::AppConfig;
use gaze_diffusion::corpus;
use gaze_diffusion::denoiser::DenoiserConfig;
use gaze_diffusion::embedder::{EmbedderConfig, EmbedderTrainConfig};
use gaze_diffusion::training::TrainConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gaze-diffusion"));
    c.env_remove("GAZE_DIFFUSION_SEED");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = AppConfig {
        embedder: EmbedderConfig {
            sequence_length: 128,
            embedding_dim: 8,
            channels: vec![4, 6, 6, 6],
            ..EmbedderConfig::default()
        },
        embedder_training: EmbedderTrainConfig {
            epochs: 2,
            ..EmbedderTrainConfig::default()
        },
        denoiser: DenoiserConfig {
            n_layers: 2,
            residual_channels: 4,
            t_hidden: 16,
            ..DenoiserConfig::default()
        },
        training: TrainConfig {
            steps: 6,
            batch_size: 2,
            ..TrainConfig::default()
        },
        ..AppConfig::default()
    };
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_corpus_layout() {
    let dir = tempfile::tempdir().unwrap();
    run(
        dir.path(),
        &[
            "gen-corpus",
            "--users",
            "8",
            "--seqs",
            "40",
            "--len",
            "1000",
            "--rate",
            "1000",
            "--seed",
            "3",
            "--out",
            "c",
        ],
    );
    let root = dir.path().join("c");
    let mut csvs = 0;
    for user in fs::read_dir(&root).unwrap() {
        let user = user.unwrap().path();
        if user.is_dir() {
            for f in fs::read_dir(&user).unwrap() {
                let f = f.unwrap().path();
                assert_eq!(f.extension().unwrap(), "csv");
                csvs += 1;
            }
        }
    }
    assert_eq!(csvs, 320);
    assert!(root.join("manifest.json").is_file());
    let loaded = corpus::load(&root).unwrap();
    assert_eq!(loaded.users.len(), 8);
    let g = &loaded.recordings[0].gaze;
    assert_eq!(g.samples.len(), 1000);
    assert_eq!(g.sample_rate, 1000.0);
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let cfg = cfg.to_str().unwrap();
    let once = |tag: &str| -> Vec<Vec<u8>> {
        let p = |name: &str| format!("{tag}.{name}");
        run(
            d,
            &[
                "gen-corpus",
                "--config",
                cfg,
                "--users",
                "3",
                "--seqs",
                "4",
                "--len",
                "256",
                "--seed",
                "5",
                "--out",
                &p("corpus"),
            ],
        );
        run(
            d,
            &[
                "train-embedder",
                "--config",
                cfg,
                "--corpus",
                &p("corpus"),
                "--out",
                &p("emb"),
                "--seed",
                "5",
            ],
        );
        run(
            d,
            &[
                "train",
                "--config",
                cfg,
                "--corpus",
                &p("corpus"),
                "--embedder",
                &p("emb"),
                "--out",
                &p("model"),
                "--seed",
                "5",
            ],
        );
        let user0 = d.join(p("corpus")).join("user00");
        let user1 = d.join(p("corpus")).join("user01");
        let base = user0.join("000.csv");
        let target = user1.join("000.csv");
        run(
            d,
            &[
                "synthesize",
                "--config",
                cfg,
                "--model",
                &p("model"),
                "--embedder",
                &p("emb"),
                "--base",
                base.to_str().unwrap(),
                "--target",
                target.to_str().unwrap(),
                "--out",
                &p("synth.csv"),
                "--seed",
                "5",
            ],
        );
        ["emb", "model", "model.metrics.csv", "synth.csv"]
            .iter()
            .map(|f| fs::read(d.join(p(f))).unwrap())
            .collect()
    };
    let a = once("a");
    let b = once("b");
    assert_eq!(a, b);

    let synth = corpus::load_csv(&d.join("a.synth.csv")).unwrap();
    let base = corpus::load_csv(&d.join("a.corpus/user00/000.csv")).unwrap();
    assert_eq!(synth.samples.len(), base.samples.len());
    assert_eq!(synth.sample_rate, base.sample_rate);
    assert!(synth.samples.iter().flatten().all(|v| v.is_finite()));

    // A different seed changes the sample.
    run(
        d,
        &[
            "synthesize",
            "--config",
            cfg,
            "--model",
            "a.model",
            "--embedder",
            "a.emb",
            "--base",
            "a.corpus/user00/000.csv",
            "--target",
            "a.corpus/user01/000.csv",
            "--out",
            "c.csv",
            "--seed",
            "6",
        ],
    );
    assert_ne!(fs::read(d.join("c.csv")).unwrap(), a[3]);

    let log = String::from_utf8(a[2].clone()).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,loss_noise,loss_id");
    assert_eq!(log.lines().count(), 7);
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args([
            "synthesize",
            "--model",
            "/nonexistent",
            "--embedder",
            "/nonexistent",
            "--base",
            "x",
            "--target",
            "y",
            "--out",
            "z",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}
