//! Command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{self, Corpus, CorpusConfig, Recording};
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::NoiseSchedule;
use crate::embedder::{self, EmbedderConfig, EmbedderParams, EmbedderTrainConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, EventFilter, Labelled, Synthesizer};
use crate::rng;
use crate::signal::{self, GazeSequence, VelocitySequence, VelocitySpace};
use crate::training::{self, Objective, TrainConfig, TrainingExample};

pub const SEED_ENV: &str = "GAZE_DIFFUSION_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratio: 0.5,
            seed: 1,
        }
    }
}

/// Settings shared by all subcommands, loaded from `--config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: Option<u64>,
    pub split: SplitConfig,
    pub corpus: CorpusConfig,
    pub embedder: EmbedderConfig,
    pub embedder_training: EmbedderTrainConfig,
    pub denoiser: DenoiserConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gaze-diffusion",
    version,
    about = "Identity-preserving gaze velocity synthesis"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; falls back to $GAZE_DIFFUSION_SEED, then the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-user corpus.
    GenCorpus {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        seqs: Option<usize>,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the user embedder on the training split of a corpus.
    TrainEmbedder {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Similarity report (CSV) on the test split.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the conditional denoiser.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Train on the noise loss alone.
        #[arg(long)]
        no_id_guidance: bool,
        /// Metrics CSV; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Synthesize a gaze sequence from a base sequence and a target identity.
    Synthesize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        /// Full-rate base (identity is removed) or low-rate base (upsampled).
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on the test split of a corpus.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long)]
        report: PathBuf,
        /// Per-pair similarities (CSV) for recovery and manipulation.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Velocity and gaze trace plot of the first test sequence.
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Evaluate at most this many test sequences (stratified by user).
        #[arg(long)]
        max_items: Option<usize>,
    },
    /// Classical baseline: base velocities plus the target's high-pass.
    BaselineHighpass {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        cutoff: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Recovery,
    Manipulation,
    Js,
    Identify,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_seed(flag: Option<u64>, config: &AppConfig) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
        });
    }
    Ok(config.seed.unwrap_or(0))
}

fn execute(cli: Cli) -> Result<()> {
    let config = match &cli.global.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    let threads = if cli.global.deterministic {
        Some(1)
    } else {
        cli.global.threads
    };
    if let Some(n) = threads {
        // Fails only if a pool already exists, as when `run` is invoked twice in one process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    let seed = resolve_seed(cli.global.seed, &config)?;
    match cli.command {
        Command::GenCorpus {
            users,
            seqs,
            len,
            rate,
            out,
        } => {
            let mut cfg = config.corpus;
            cfg.n_users = users.unwrap_or(cfg.n_users);
            cfg.sequences_per_user = seqs.unwrap_or(cfg.sequences_per_user);
            cfg.sequence_length = len.unwrap_or(cfg.sequence_length);
            cfg.sample_rate = rate.unwrap_or(cfg.sample_rate);
            cfg.seed = seed;
            let corpus = corpus::generate(&cfg)?;
            corpus::save(&corpus, &out)?;
            eprintln!(
                "wrote {} sequences for {} users to {}",
                corpus.recordings.len(),
                corpus.users.len(),
                out.display()
            );
            Ok(())
        }
        Command::TrainEmbedder {
            corpus,
            out,
            epochs,
            report,
        } => {
            let data = Dataset::load(&corpus, config.embedder.sequence_length, &config.split)?;
            let mut ecfg = config.embedder.clone();
            ecfg.n_users = data.users.len();
            let mut tcfg = config.embedder_training;
            tcfg.epochs = epochs.unwrap_or(tcfg.epochs);
            let examples = data
                .train
                .iter()
                .map(|r| Ok((r.user, training::normalized_velocity(&r.gaze)?)))
                .collect::<Result<Vec<_>>>()?;
            let (params, rep) = embedder::train_embedder(&examples, ecfg, tcfg, seed)?;
            checkpoint::save_embedder(&out, &params)?;
            let test = eval::embed_all(&params, &data.test_refs())?;
            let within = eval::within_user_baseline(&test)?;
            let cross = eval::cross_user_baseline(&test)?;
            eprintln!(
                "train accuracy {:.3}; test within-user {:.3}, cross-user {:.3}",
                rep.train_accuracy, within.mean, cross.mean
            );
            if let Some(path) = report {
                let mut s = String::from("pair_type,mean,std\n");
                s.push_str(&format!(
                    "within_user,{:.6},{:.6}\n",
                    within.mean, within.std
                ));
                s.push_str(&format!("cross_user,{:.6},{:.6}\n", cross.mean, cross.std));
                write_text(&path, &s)?;
            }
            Ok(())
        }
        Command::Train {
            corpus,
            embedder,
            out,
            steps,
            no_id_guidance,
            log,
        } => {
            let emb = checkpoint::load_embedder(&embedder)?;
            let data = Dataset::load(&corpus, emb.config.sequence_length, &config.split)?;
            let mut tcfg = config.training;
            tcfg.steps = steps.unwrap_or(tcfg.steps);
            tcfg.seed = seed;
            if no_id_guidance {
                tcfg.objective = Objective::NoiseOnly;
            }
            let mut dcfg = config.denoiser;
            dcfg.sequence_length = emb.config.sequence_length;
            dcfg.embedding_dim = emb.config.embedding_dim;
            let examples = data
                .train
                .iter()
                .map(|r| TrainingExample::from_gaze(r.user, &r.gaze, &emb, tcfg.low_rate))
                .collect::<Result<Vec<_>>>()?;
            let init =
                DenoiserParams::init(dcfg, rng::derive_seed(seed, &[rng::tag::DENOISER_INIT]))?;
            let every = (tcfg.steps / 20).max(1);
            let (params, rows) = training::train(&examples, init, &emb, &tcfg, |r| {
                if r.step % every == 0 {
                    eprintln!(
                        "step {:>6}  loss_noise {:.5}  loss_id {:.5}",
                        r.step, r.loss_noise, r.loss_id
                    );
                }
            })?;
            checkpoint::save_denoiser(&out, &params, tcfg.schedule)?;
            let log = log.unwrap_or_else(|| suffixed(&out, ".metrics.csv"));
            write_text(&log, &training::write_log_csv(&rows))
        }
        Command::Synthesize {
            model,
            embedder,
            base,
            target,
            out,
        } => {
            let (params, schedule) = checkpoint::load_denoiser(&model)?;
            let emb = checkpoint::load_embedder(&embedder)?;
            let target = corpus::load_csv(&target)?;
            let base = corpus::load_csv(&base)?;
            let removed = prepare_base(&base, target.sample_rate, config.training.low_rate)?;
            let sched = NoiseSchedule::linear(schedule)?;
            let len = params.config.sequence_length;
            let t_emb = target_embedding(&emb, &target)?;
            let synth = eval::DiffusionSynthesizer {
                model: &params,
                schedule: &sched,
            };
            // Longer bases are generated window by window; the last window is
            // aligned to the end and only its new samples are kept.
            let n = removed.len();
            let mut x = vec![0.0; 2 * n];
            let mut done = 0;
            for (k, start) in window_starts(n, len)?.into_iter().enumerate() {
                let w = removed.window(start, len)?;
                let v = synth.synthesize(
                    &w,
                    &target,
                    &t_emb,
                    rng::derive_seed(seed, &[rng::tag::SAMPLE, k as u64]),
                )?;
                for i in done.max(start)..start + len {
                    x[i] = v[i - start];
                    x[n + i] = v[len + i - start];
                }
                done = start + len;
            }
            write_gaze(&out, &x, &removed)
        }
        Command::BaselineHighpass {
            base,
            target,
            cutoff,
            out,
        } => {
            let target = corpus::load_csv(&target)?;
            let base = corpus::load_csv(&base)?;
            let removed = prepare_base(&base, target.sample_rate, config.training.low_rate)?;
            let x = eval::HighpassSynthesizer { cutoff }.synthesize(&removed, &target, &[], 0)?;
            write_gaze(&out, &x, &removed)
        }
        Command::Evaluate {
            model,
            embedder,
            corpus,
            protocol,
            report,
            pairs,
            svg,
            max_items,
        } => {
            let (params, schedule) = checkpoint::load_denoiser(&model)?;
            let emb = checkpoint::load_embedder(&embedder)?;
            let data = Dataset::load(&corpus, emb.config.sequence_length, &config.split)?;
            let ctx = EvalContext {
                params: &params,
                schedule: NoiseSchedule::linear(schedule)?,
                embedder: &emb,
                data: &data,
                config: config.eval,
                seed,
                max_items,
            };
            let out = ctx.run(protocol)?;
            write_text(&report, &out.summary_csv())?;
            if let (Some(p), Some(rows)) = (pairs, &out.pairs) {
                write_text(&p, rows)?;
            }
            if let Some(p) = svg {
                write_text(&p, &ctx.trace_svg()?)?;
            }
            for row in &out.rows {
                eprintln!(
                    "{:<24} {:>9.5} ± {:.5} (n={})",
                    row.metric, row.mean, row.std, row.count
                );
            }
            Ok(())
        }
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Low-rate bases are held up to `rate`; full-rate bases have their
/// identity removed.
fn window_starts(n: usize, len: usize) -> Result<Vec<usize>> {
    if n < len {
        return Err(Error::TooShort { len: n, min: len });
    }
    let mut starts: Vec<usize> = (0..n / len).map(|k| k * len).collect();
    if !n.is_multiple_of(len) {
        starts.push(n - len);
    }
    Ok(starts)
}

/// Mean embedding over the target's model-length windows, renormalized.
fn target_embedding(emb: &EmbedderParams<f32>, target: &GazeSequence) -> Result<Vec<f32>> {
    let len = emb.config.sequence_length;
    let mut sum = vec![0.0f64; emb.config.embedding_dim];
    for start in window_starts(target.len(), len)? {
        let e = embedder::embed(
            emb,
            &training::normalized_velocity(&target.window(start, len)?)?,
        )?;
        for (s, v) in sum.iter_mut().zip(&e) {
            *s += f64::from(*v);
        }
    }
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::NonFinite("target embedding".into()));
    }
    Ok(sum.iter().map(|v| (v / norm) as f32).collect())
}

fn prepare_base(base: &GazeSequence, rate: f64, low_rate: f64) -> Result<GazeSequence> {
    if base.sample_rate < rate {
        signal::upsample_hold(base, rate)
    } else if base.sample_rate == rate {
        signal::remove_identity(base, low_rate)
    } else {
        Err(Error::InvalidArgument(format!(
            "base rate {} Hz exceeds target rate {} Hz",
            base.sample_rate, rate
        )))
    }
}

/// Integrates normalized velocities into gaze positions starting at the
/// base's first sample.
fn write_gaze(path: &Path, normalized: &[f64], base: &GazeSequence) -> Result<()> {
    let v = VelocitySequence::from_channel_major(
        base.sample_rate,
        normalized,
        VelocitySpace::Normalized,
    )?;
    let clipped = VelocitySequence {
        channels: v
            .channels
            .iter()
            .map(|c| [c[0].clamp(-1.0, 1.0), c[1].clamp(-1.0, 1.0)])
            .collect(),
        ..v
    };
    let start = base
        .samples
        .iter()
        .zip(&base.valid)
        .find(|(_, ok)| **ok)
        .map_or([0.0, 0.0], |(s, _)| *s);
    let g = signal::integrate(&signal::denormalize(&clipped)?, start)?;
    write_text(path, &corpus::to_csv_string(&g))
}

/// A corpus cut into model-length windows and split by user.
struct Dataset {
    users: Vec<String>,
    train: Vec<Recording>,
    test: Vec<Recording>,
}

impl Dataset {
    fn load(dir: &Path, len: usize, split: &SplitConfig) -> Result<Self> {
        let c: Corpus = corpus::load(dir)?;
        let mut windows = Vec::new();
        for r in &c.recordings {
            let n = r.gaze.len() / len;
            for k in 0..n {
                let name = if n == 1 {
                    r.name.clone()
                } else {
                    format!("{}#{k}", r.name)
                };
                windows.push(Recording {
                    user: r.user,
                    name,
                    gaze: r.gaze.window(k * len, len)?,
                });
            }
        }
        if windows.is_empty() {
            return Err(Error::TooShort {
                len: c.recordings.iter().map(|r| r.gaze.len()).max().unwrap_or(0),
                min: len,
            });
        }
        let (a, b) = corpus::split(&windows, split.ratio, split.seed)?;
        let pick = |idx: Vec<usize>| idx.into_iter().map(|i| windows[i].clone()).collect();
        Ok(Dataset {
            users: c.users,
            train: pick(a),
            test: pick(b),
        })
    }

    fn test_refs(&self) -> Vec<(usize, &GazeSequence)> {
        self.test.iter().map(|r| (r.user, &r.gaze)).collect()
    }

    fn train_refs(&self) -> Vec<(usize, &GazeSequence)> {
        self.train.iter().map(|r| (r.user, &r.gaze)).collect()
    }
}

/// First `max / n_users` test sequences of each user, in corpus order.
pub fn stratified_subset(users: &[usize], max: Option<usize>) -> Vec<usize> {
    let Some(max) = max else {
        return (0..users.len()).collect();
    };
    let n_users = users.iter().map(|u| u + 1).max().unwrap_or(0);
    let per_user = (max / n_users.max(1)).max(1);
    let mut taken = vec![0usize; n_users];
    let mut out = Vec::new();
    for (i, &u) in users.iter().enumerate() {
        if taken[u] < per_user {
            taken[u] += 1;
            out.push(i);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MetricRow {
    fn of(metric: &str, s: eval::Stats) -> Self {
        MetricRow {
            metric: metric.into(),
            mean: s.mean,
            std: s.std,
            count: s.count,
        }
    }

    fn scalar(metric: &str, v: f64, count: usize) -> Self {
        MetricRow {
            metric: metric.into(),
            mean: v,
            std: 0.0,
            count,
        }
    }
}

struct EvalOutput {
    rows: Vec<MetricRow>,
    pairs: Option<String>,
}

impl EvalOutput {
    fn summary_csv(&self) -> String {
        let mut s = String::from("metric,mean,std,count\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                r.metric, r.mean, r.std, r.count
            ));
        }
        s
    }
}

fn pairs_csv(report: &eval::ProtocolReport) -> String {
    let mut s = String::from("target,base,draw,base_similarity,fallback,similarity\n");
    for p in &report.pairs {
        let sim = p.similarity.map_or(String::new(), |v| format!("{v:.6}"));
        s.push_str(&format!(
            "{},{},{},{:.6},{},{}\n",
            p.target, p.base, p.draw, p.base_similarity, p.fallback, sim
        ));
    }
    s
}

struct EvalContext<'a> {
    params: &'a DenoiserParams<f32>,
    schedule: NoiseSchedule,
    embedder: &'a EmbedderParams<f32>,
    data: &'a Dataset,
    config: EvalConfig,
    seed: u64,
    max_items: Option<usize>,
}

impl EvalContext<'_> {
    fn test_items(&self) -> Result<Vec<eval::EvalItem<'_>>> {
        let refs = self.data.test_refs();
        let users: Vec<usize> = refs.iter().map(|r| r.0).collect();
        let subset: Vec<(usize, &GazeSequence)> = stratified_subset(&users, self.max_items)
            .into_iter()
            .map(|i| refs[i])
            .collect();
        eval::eval_items(self.embedder, &subset)
    }

    fn synth(&self) -> eval::DiffusionSynthesizer<'_> {
        eval::DiffusionSynthesizer {
            model: self.params,
            schedule: &self.schedule,
        }
    }

    fn human_baselines(&self, rows: &mut Vec<MetricRow>) -> Result<()> {
        let test = eval::embed_all(self.embedder, &self.data.test_refs())?;
        rows.push(MetricRow::of(
            "within_user",
            eval::within_user_baseline(&test)?,
        ));
        rows.push(MetricRow::of(
            "cross_user",
            eval::cross_user_baseline(&test)?,
        ));
        Ok(())
    }

    fn run(&self, protocol: Protocol) -> Result<EvalOutput> {
        let items = self.test_items()?;
        let (cfg, seed) = (&self.config, self.seed);
        let mut rows = Vec::new();
        let mut pairs = None;
        match protocol {
            Protocol::Recovery => {
                let model = eval::recovery_eval(&items, &self.synth(), self.embedder, cfg, seed)?;
                let single = EvalConfig {
                    samples_per_seq: 1,
                    ..*cfg
                };
                let hp = eval::HighpassSynthesizer {
                    cutoff: cfg.highpass_cutoff,
                };
                let highpass = eval::recovery_eval(&items, &hp, self.embedder, &single, seed)?;
                let removed = eval::recovery_eval(
                    &items,
                    &eval::PassthroughSynthesizer,
                    self.embedder,
                    &single,
                    seed,
                )?;
                rows.push(MetricRow::of("recovery", model.stats));
                rows.push(MetricRow::scalar(
                    "recovery_invalid",
                    model.invalid as f64,
                    model.pairs.len(),
                ));
                rows.push(MetricRow::of("highpass_recovery", highpass.stats));
                rows.push(MetricRow::scalar(
                    "highpass_invalid",
                    highpass.invalid as f64,
                    highpass.pairs.len(),
                ));
                rows.push(MetricRow::of("removed", removed.stats));
                self.human_baselines(&mut rows)?;
                pairs = Some(pairs_csv(&model));
            }
            Protocol::Manipulation => {
                let model =
                    eval::manipulation_eval(&items, &self.synth(), self.embedder, cfg, seed)?;
                rows.push(MetricRow::of("manipulation", model.stats));
                rows.push(MetricRow::scalar(
                    "manipulation_invalid",
                    model.invalid as f64,
                    model.pairs.len(),
                ));
                rows.push(MetricRow::scalar(
                    "pair_fallbacks",
                    model.fallbacks as f64,
                    model.pairs.len(),
                ));
                self.human_baselines(&mut rows)?;
                pairs = Some(pairs_csv(&model));
            }
            Protocol::Js => {
                let rate = items[0].gaze.sample_rate;
                let human: Vec<f64> = items
                    .iter()
                    .map(|i| Ok(signal::savgol_derivative(i.gaze)?.speeds()))
                    .collect::<Result<Vec<_>>>()?
                    .concat();
                let single = EvalConfig {
                    samples_per_seq: 1,
                    ..*cfg
                };
                let model =
                    eval::recovery_eval(&items, &self.synth(), self.embedder, &single, seed)?;
                let hp = eval::HighpassSynthesizer {
                    cutoff: cfg.highpass_cutoff,
                };
                let highpass = eval::recovery_eval(&items, &hp, self.embedder, &single, seed)?;
                for (name, rep) in [("model", &model), ("highpass", &highpass)] {
                    let speeds = eval::raw_speeds(&rep.outputs, rate)?;
                    for filter in [
                        EventFilter::All,
                        EventFilter::Fixation,
                        EventFilter::Saccade,
                    ] {
                        let mut r = rng::stream(seed, &[rng::tag::EVAL, filter as u64]);
                        let js = eval::js_resampled(
                            &human,
                            &speeds,
                            filter,
                            cfg.js_samples,
                            cfg.js_repeats,
                            &mut r,
                        )?;
                        rows.push(MetricRow::of(&format!("js_{}_{}", name, filter.name()), js));
                    }
                    rows.push(MetricRow::scalar(
                        &format!("{name}_invalid"),
                        rep.invalid as f64,
                        rep.pairs.len(),
                    ));
                }
            }
            Protocol::Identify => {
                let (human, augmented, test) =
                    identification(self.embedder, &self.synth(), self.data, cfg, seed)?;
                rows.push(MetricRow::scalar(
                    "accuracy_human",
                    eval::identify_user(&human, &test)?,
                    test.len(),
                ));
                rows.push(MetricRow::scalar(
                    "accuracy_augmented",
                    eval::identify_user(&augmented, &test)?,
                    test.len(),
                ));
            }
        }
        Ok(EvalOutput { rows, pairs })
    }

    fn trace_svg(&self) -> Result<String> {
        let items = self.test_items()?;
        let item = items
            .first()
            .ok_or_else(|| Error::Degenerate("no test sequences to plot".into()))?;
        let removed = signal::remove_identity(item.gaze, self.config.low_rate)?;
        let x = self.synth().synthesize(
            &removed,
            item.gaze,
            &item.embedding,
            rng::derive_seed(self.seed, &[rng::tag::SAMPLE]),
        )?;
        let rate = item.gaze.sample_rate;
        let speeds = |g: &GazeSequence| signal::savgol_derivative(g).map(|v| v.speeds());
        let synthetic = eval::raw_speeds(&[x], rate)?;
        let (orig, rem) = (speeds(item.gaze)?, speeds(&removed)?);
        let gx: Vec<f64> = item.gaze.samples.iter().map(|s| s[0]).collect();
        let rx: Vec<f64> = removed.samples.iter().map(|s| s[0]).collect();
        Ok(eval::svg_plot(
            "Speed",
            "deg/s",
            &[
                ("original", &orig),
                ("identity removed", &rem),
                ("synthesized", &synthetic),
            ],
        ) + &eval::svg_plot(
            "Horizontal gaze",
            "deg",
            &[("original", &gx), ("identity removed", &rx)],
        ))
    }
}

/// Training embeddings with and without one synthesized recovery sample per
/// training sequence, plus the test embeddings.
pub fn identification(
    embedder: &EmbedderParams<f32>,
    synth: &dyn Synthesizer,
    data: &impl IdentificationData,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(Vec<Labelled>, Vec<Labelled>, Vec<Labelled>)> {
    let train = data.train_items();
    let human = eval::embed_all(embedder, &train)?;
    let items = eval::eval_items(embedder, &train)?;
    let single = EvalConfig {
        samples_per_seq: 1,
        ..*cfg
    };
    let synthetic = eval::recovery_eval(&items, synth, embedder, &single, seed)?;
    let mut augmented = human.clone();
    let valid_targets = synthetic
        .pairs
        .iter()
        .filter(|p| p.similarity.is_some())
        .map(|p| p.target);
    for (target, x) in valid_targets.zip(&synthetic.outputs) {
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        augmented.push(Labelled {
            user: items[target].user,
            embedding: eval::embed_normalized(embedder, &xf)?,
        });
    }
    let test = eval::embed_all(embedder, &data.test_items())?;
    Ok((human, augmented, test))
}

/// Labelled train/test recordings for identification.
pub trait IdentificationData {
    fn train_items(&self) -> Vec<(usize, &GazeSequence)>;
    fn test_items(&self) -> Vec<(usize, &GazeSequence)>;
}

impl IdentificationData for Dataset {
    fn train_items(&self) -> Vec<(usize, &GazeSequence)> {
        self.train_refs()
    }
    fn test_items(&self) -> Vec<(usize, &GazeSequence)> {
        self.test_refs()
    }
}

impl IdentificationData for (Vec<(usize, &GazeSequence)>, Vec<(usize, &GazeSequence)>) {
    fn train_items(&self) -> Vec<(usize, &GazeSequence)> {
        self.0.clone()
    }
    fn test_items(&self) -> Vec<(usize, &GazeSequence)> {
        self.1.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<AppConfig>(r#"{"seed": 3}"#).is_ok());
        assert!(serde_json::from_str::<AppConfig>(r#"{"sede": 3}"#).is_err());
        assert!(serde_json::from_str::<AppConfig>(r#"{"training": {"stepz": 3}}"#).is_err());
        let c: AppConfig = serde_json::from_str(r#"{"training": {"steps": 30}}"#).unwrap();
        assert_eq!(c.training.steps, 30);
        assert_eq!(c.training.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["gaze-diffusion", "no-such-command"]), 2);
        assert_eq!(run(["gaze-diffusion", "gen-corpus", "--bogus"]), 2);
        assert_eq!(run(["gaze-diffusion", "--help"]), 0);
    }

    #[test]
    fn stratified_subset_takes_per_user_prefix() {
        let users = [0, 1, 0, 1, 0, 1, 2, 2];
        assert_eq!(stratified_subset(&users, Some(6)), vec![0, 1, 2, 3, 6, 7]);
        assert_eq!(stratified_subset(&users, None).len(), 8);
    }
}
