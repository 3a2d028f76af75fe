//! Evaluation protocols: identity recovery and manipulation, human
//! similarity baselines, velocity-distribution divergence and
//! nearest-centroid identification.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::diffusion::{self, Conditioning, NoiseSchedule};
use crate::embedder::{self, cosine_similarity, EmbedderParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::signal::{self, GazeSequence, VelocitySequence, VelocitySpace};
use crate::training::normalized_velocity;

pub const FIXATION_MAX_SPEED: f64 = 100.0;
pub const SACCADE_MIN_SPEED: f64 = 300.0;
pub const BIN_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Fixation,
    Saccade,
    Other,
}

pub fn ivt_classify(speed: f64) -> Event {
    if speed < FIXATION_MAX_SPEED {
        Event::Fixation
    } else if speed > SACCADE_MIN_SPEED {
        Event::Saccade
    } else {
        Event::Other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventFilter {
    All,
    Fixation,
    Saccade,
}

impl EventFilter {
    pub fn keeps(self, speed: f64) -> bool {
        match self {
            EventFilter::All => true,
            EventFilter::Fixation => ivt_classify(speed) == Event::Fixation,
            EventFilter::Saccade => ivt_classify(speed) == Event::Saccade,
        }
    }

    pub fn spec(self) -> HistogramSpec {
        HistogramSpec {
            bin_count: match self {
                EventFilter::All => 500,
                EventFilter::Saccade => 350,
                EventFilter::Fixation => 50,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EventFilter::All => "all",
            EventFilter::Fixation => "fixation",
            EventFilter::Saccade => "saccade",
        }
    }
}

/// Speed histogram over `[0, bin_count·2)` °/s; larger speeds land in the
/// last bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bin_count: usize,
}

/// Normalized histogram of speeds (clipped to `[0, 1000]`) that pass the
/// event filter.
pub fn velocity_histogram(
    speeds: &[f64],
    spec: HistogramSpec,
    filter: EventFilter,
) -> Result<Vec<f64>> {
    if spec.bin_count == 0 {
        return Err(Error::InvalidArgument(
            "histogram needs at least one bin".into(),
        ));
    }
    let mut counts = vec![0u64; spec.bin_count];
    let mut total = 0u64;
    for &s in speeds {
        if !s.is_finite() {
            return Err(Error::NonFinite("speed sample".into()));
        }
        let s = s.clamp(0.0, signal::VELOCITY_LIMIT);
        if !filter.keeps(s) {
            continue;
        }
        let bin = ((s / BIN_WIDTH).floor() as usize).min(spec.bin_count - 1);
        counts[bin] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::Degenerate(format!(
            "no {} samples to histogram",
            filter.name()
        )));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Jensen-Shannon divergence with base-2 logarithms, in `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions of size {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q).any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "distributions need finite non-negative mass".into(),
        ));
    }
    let kl_to_mid = |a: f64, b: f64| {
        if a > 0.0 {
            a * (2.0 * a / (a + b)).log2()
        } else {
            0.0
        }
    };
    let js: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| 0.5 * kl_to_mid(a, b) + 0.5 * kl_to_mid(b, a))
        .sum();
    Ok(js.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Stats {
        let n = values.len();
        if n == 0 {
            return Stats {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Stats {
            mean,
            std: var.sqrt(),
            count: n,
        }
    }
}

/// A labelled embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Labelled {
    pub user: usize,
    pub embedding: Vec<f64>,
}

pub fn embed_gaze(embedder: &EmbedderParams<f32>, g: &GazeSequence) -> Result<Vec<f64>> {
    embed_normalized(embedder, &normalized_velocity(g)?)
}

pub fn embed_normalized(embedder: &EmbedderParams<f32>, x: &[f32]) -> Result<Vec<f64>> {
    Ok(embedder::embed(embedder, x)?
        .into_iter()
        .map(|v| v as f64)
        .collect())
}

pub fn embed_all(
    embedder: &EmbedderParams<f32>,
    items: &[(usize, &GazeSequence)],
) -> Result<Vec<Labelled>> {
    items
        .par_iter()
        .map(|&(user, g)| {
            Ok(Labelled {
                user,
                embedding: embed_gaze(embedder, g)?,
            })
        })
        .collect()
}

fn pair_baseline(items: &[Labelled], same: bool) -> Result<Stats> {
    let n_users = items.iter().map(|i| i.user + 1).max().unwrap_or(0);
    let mut per_user = Vec::new();
    let mut all = Vec::new();
    for u in 0..n_users {
        let mut sims = Vec::new();
        for (a, ia) in items.iter().enumerate().filter(|(_, i)| i.user == u) {
            for (b, ib) in items.iter().enumerate() {
                let pair = if same {
                    ib.user == u && b > a
                } else {
                    ib.user != u
                };
                if pair {
                    sims.push(cosine_similarity(&ia.embedding, &ib.embedding)?);
                }
            }
        }
        if !sims.is_empty() {
            per_user.push(Stats::of(&sims).mean);
            all.extend(sims);
        }
    }
    if per_user.is_empty() {
        return Err(Error::Degenerate(format!(
            "no {} pairs",
            if same { "same-user" } else { "cross-user" }
        )));
    }
    Ok(Stats {
        mean: per_user.iter().sum::<f64>() / per_user.len() as f64,
        std: Stats::of(&all).std,
        count: all.len(),
    })
}

/// Mean same-user pairwise similarity, averaged across users.
pub fn within_user_baseline(items: &[Labelled]) -> Result<Stats> {
    pair_baseline(items, true)
}

/// Mean different-user pairwise similarity, averaged across users.
pub fn cross_user_baseline(items: &[Labelled]) -> Result<Stats> {
    pair_baseline(items, false)
}

/// Produces a normalized `2 × L` velocity sequence carrying the target's
/// identity on top of an identity-removed base.
pub trait Synthesizer: Sync {
    fn synthesize(
        &self,
        base_removed: &GazeSequence,
        target: &GazeSequence,
        target_embedding: &[f32],
        seed: u64,
    ) -> Result<Vec<f64>>;
}

/// The trained conditional diffusion model.
pub struct DiffusionSynthesizer<'a> {
    pub model: &'a DenoiserParams<f32>,
    pub schedule: &'a NoiseSchedule,
}

impl Synthesizer for DiffusionSynthesizer<'_> {
    fn synthesize(
        &self,
        base_removed: &GazeSequence,
        _: &GazeSequence,
        emb: &[f32],
        seed: u64,
    ) -> Result<Vec<f64>> {
        let cond = Conditioning {
            observation: normalized_velocity(base_removed)?,
            embedding: emb.to_vec(),
        };
        let v = diffusion::sample(
            &cond,
            self.model,
            self.schedule,
            base_removed.sample_rate,
            seed,
        )?;
        Ok(v.to_channel_major())
    }
}

/// Base velocities plus the target's high-pass filtered velocities.
pub struct HighpassSynthesizer {
    pub cutoff: f64,
}

impl Synthesizer for HighpassSynthesizer {
    fn synthesize(
        &self,
        base_removed: &GazeSequence,
        target: &GazeSequence,
        _: &[f32],
        _: u64,
    ) -> Result<Vec<f64>> {
        let raw = signal::highpass_inject(base_removed, target, self.cutoff)?;
        if raw.count_non_finite() > 0 {
            return Err(Error::NonFinite("high-pass baseline output".into()));
        }
        Ok(signal::preprocess(&raw).to_channel_major())
    }
}

/// Returns the target's own velocities.
pub struct OracleSynthesizer;

impl Synthesizer for OracleSynthesizer {
    fn synthesize(
        &self,
        _: &GazeSequence,
        target: &GazeSequence,
        _: &[f32],
        _: u64,
    ) -> Result<Vec<f64>> {
        Ok(normalized_velocity(target)?
            .into_iter()
            .map(f64::from)
            .collect())
    }
}

/// Returns the identity-removed base unchanged.
pub struct PassthroughSynthesizer;

impl Synthesizer for PassthroughSynthesizer {
    fn synthesize(
        &self,
        base_removed: &GazeSequence,
        _: &GazeSequence,
        _: &[f32],
        _: u64,
    ) -> Result<Vec<f64>> {
        Ok(normalized_velocity(base_removed)?
            .into_iter()
            .map(f64::from)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub target: usize,
    pub base: usize,
    pub draw: usize,
    /// Similarity between the base and target embeddings.
    pub base_similarity: f64,
    /// Set when no base satisfied the pairing constraint.
    pub fallback: bool,
    /// `None` when the synthesizer produced a non-finite output.
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: String,
    pub stats: Stats,
    pub invalid: usize,
    pub fallbacks: usize,
    pub pairs: Vec<PairRecord>,
    /// Normalized synthetic velocities per valid pair, in pair order.
    #[serde(skip)]
    pub outputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_seq: usize,
    pub low_rate: f64,
    /// Accepted base-target similarity range for manipulation pairs.
    pub pair_range: (f64, f64),
    pub js_samples: usize,
    pub js_repeats: usize,
    pub highpass_cutoff: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_seq: 5,
            low_rate: 20.0,
            pair_range: (0.0, 0.05),
            js_samples: 100_000,
            js_repeats: 10,
            highpass_cutoff: 20.0,
        }
    }
}

/// One test recording with its ground-truth embedding.
pub struct EvalItem<'a> {
    pub user: usize,
    pub gaze: &'a GazeSequence,
    pub embedding: Vec<f32>,
}

pub fn eval_items<'a>(
    embedder: &EmbedderParams<f32>,
    items: &[(usize, &'a GazeSequence)],
) -> Result<Vec<EvalItem<'a>>> {
    items
        .par_iter()
        .map(|&(user, gaze)| {
            Ok(EvalItem {
                user,
                gaze,
                embedding: embedder::embed(embedder, &normalized_velocity(gaze)?)?,
            })
        })
        .collect()
}

fn run_pairs(
    protocol: &str,
    items: &[EvalItem],
    pairs: Vec<(usize, usize, usize, f64, bool)>,
    synth: &dyn Synthesizer,
    embedder: &EmbedderParams<f32>,
    low_rate: f64,
    seed: u64,
) -> Result<ProtocolReport> {
    let results: Vec<(Option<f64>, Option<Vec<f64>>)> = pairs
        .par_iter()
        .map(|&(target, base, draw, _, _)| {
            let removed = signal::remove_identity(items[base].gaze, low_rate)?;
            let s = rng::derive_seed(
                seed,
                &[rng::tag::EVAL, target as u64, base as u64, draw as u64],
            );
            match synth.synthesize(&removed, items[target].gaze, &items[target].embedding, s) {
                Ok(x) => {
                    let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
                    let e = embed_normalized(embedder, &xf)?;
                    let t: Vec<f64> = items[target].embedding.iter().map(|&v| v as f64).collect();
                    Ok((Some(cosine_similarity(&e, &t)?), Some(x)))
                }
                Err(Error::NonFinite(_)) => Ok((None, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(pairs.len());
    let mut sims = Vec::new();
    let mut outputs = Vec::new();
    for (&(target, base, draw, base_similarity, fallback), (sim, out)) in pairs.iter().zip(results)
    {
        if let Some(s) = sim {
            sims.push(s);
        }
        if let Some(o) = out {
            outputs.push(o);
        }
        records.push(PairRecord {
            target,
            base,
            draw,
            base_similarity,
            fallback,
            similarity: sim,
        });
    }
    Ok(ProtocolReport {
        protocol: protocol.to_string(),
        stats: Stats::of(&sims),
        invalid: records.iter().filter(|r| r.similarity.is_none()).count(),
        fallbacks: records.iter().filter(|r| r.fallback).count(),
        pairs: records,
        outputs,
    })
}

/// Conditions on each sequence's own identity-removed version and its own
/// embedding.
pub fn recovery_eval(
    items: &[EvalItem],
    synth: &dyn Synthesizer,
    embedder: &EmbedderParams<f32>,
    config: &EvalConfig,
    seed: u64,
) -> Result<ProtocolReport> {
    if items.is_empty() {
        return Err(Error::Degenerate("empty evaluation set".into()));
    }
    let pairs = (0..items.len())
        .flat_map(|i| (0..config.samples_per_seq).map(move |k| (i, i, k, 1.0, false)))
        .collect();
    run_pairs(
        "recovery",
        items,
        pairs,
        synth,
        embedder,
        config.low_rate,
        seed,
    )
}

/// Picks, for each target, a base from another user whose embedding
/// similarity to the target lies in `config.pair_range`; the least similar
/// other-user sequence is used (and flagged) when none qualifies.
pub fn manipulation_pairs(
    items: &[EvalItem],
    config: &EvalConfig,
    seed: u64,
) -> Result<Vec<(usize, usize, f64, bool)>> {
    if items.iter().all(|i| i.user == items[0].user) {
        return Err(Error::Degenerate(
            "manipulation needs at least two users".into(),
        ));
    }
    let emb: Vec<Vec<f64>> = items
        .iter()
        .map(|i| i.embedding.iter().map(|&v| v as f64).collect())
        .collect();
    let (lo, hi) = config.pair_range;
    (0..items.len())
        .map(|t| {
            let mut candidates: Vec<usize> = (0..items.len())
                .filter(|&b| items[b].user != items[t].user)
                .collect();
            candidates.shuffle(&mut rng::stream(seed, &[rng::tag::EVAL, t as u64]));
            let sims = candidates
                .iter()
                .map(|&b| Ok((b, cosine_similarity(&emb[t], &emb[b])?)))
                .collect::<Result<Vec<_>>>()?;
            if let Some(&(b, s)) = sims.iter().find(|(_, s)| *s >= lo && *s <= hi) {
                return Ok((t, b, s, false));
            }
            let &(b, s) = sims
                .iter()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("another user exists");
            Ok((t, b, s, true))
        })
        .collect()
}

pub fn manipulation_eval(
    items: &[EvalItem],
    synth: &dyn Synthesizer,
    embedder: &EmbedderParams<f32>,
    config: &EvalConfig,
    seed: u64,
) -> Result<ProtocolReport> {
    let pairs = manipulation_pairs(items, config, seed)?
        .into_iter()
        .map(|(t, b, s, f)| (t, b, 0, s, f))
        .collect();
    run_pairs(
        "manipulation",
        items,
        pairs,
        synth,
        embedder,
        config.low_rate,
        seed,
    )
}

/// Raw °/s speeds of normalized channel-major velocity buffers.
pub fn raw_speeds(normalized: &[Vec<f64>], sample_rate: f64) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for x in normalized {
        let v = VelocitySequence::from_channel_major(sample_rate, x, VelocitySpace::Normalized)?;
        let clipped = VelocitySequence {
            channels: v
                .channels
                .iter()
                .map(|c| [c[0].clamp(-1.0, 1.0), c[1].clamp(-1.0, 1.0)])
                .collect(),
            ..v
        };
        out.extend(signal::denormalize(&clipped)?.speeds());
    }
    Ok(out)
}

/// JS divergence between speed histograms of `n_samples` draws (with
/// replacement) from each pool, repeated `repeats` times.
pub fn js_resampled<R: Rng>(
    reference: &[f64],
    candidate: &[f64],
    filter: EventFilter,
    n_samples: usize,
    repeats: usize,
    rng: &mut R,
) -> Result<Stats> {
    let keep = |pool: &[f64]| -> Vec<f64> {
        pool.iter()
            .map(|s| s.clamp(0.0, signal::VELOCITY_LIMIT))
            .filter(|&s| filter.keeps(s))
            .collect()
    };
    let (a, b) = (keep(reference), keep(candidate));
    if a.is_empty() || b.is_empty() || n_samples == 0 || repeats == 0 {
        return Err(Error::Degenerate(format!(
            "no {} samples for JS divergence",
            filter.name()
        )));
    }
    let spec = filter.spec();
    let mut values = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let da: Vec<f64> = (0..n_samples)
            .map(|_| a[rng.random_range(0..a.len())])
            .collect();
        let db: Vec<f64> = (0..n_samples)
            .map(|_| b[rng.random_range(0..b.len())])
            .collect();
        values.push(js_divergence(
            &velocity_histogram(&da, spec, filter)?,
            &velocity_histogram(&db, spec, filter)?,
        )?);
    }
    Ok(Stats::of(&values))
}

/// Nearest-centroid identification accuracy.
pub fn identify_user(train: &[Labelled], test: &[Labelled]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Degenerate("empty identification test set".into()));
    }
    let n_users = train
        .iter()
        .chain(test)
        .map(|i| i.user + 1)
        .max()
        .unwrap_or(0);
    let dim = train.first().map_or(0, |i| i.embedding.len());
    let mut centroids = vec![vec![0.0; dim]; n_users];
    let mut counts = vec![0usize; n_users];
    for item in train {
        counts[item.user] += 1;
        for (c, v) in centroids[item.user].iter_mut().zip(&item.embedding) {
            *c += v;
        }
    }
    for t in test {
        if counts[t.user] == 0 {
            return Err(Error::Degenerate(format!(
                "user {} missing from the training set",
                t.user
            )));
        }
    }
    let mut correct = 0;
    for t in test {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (u, c) in centroids.iter().enumerate() {
            if counts[u] == 0 {
                continue;
            }
            let s = cosine_similarity(c, &t.embedding).unwrap_or(f64::NEG_INFINITY);
            if s > best.0 {
                best = (s, u);
            }
        }
        correct += (best.1 == t.user) as usize;
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Line plot of one or more series sharing the x axis.
pub fn svg_plot(title: &str, y_label: &str, series: &[(&str, &[f64])]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 240.0;
    const M: f64 = 40.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
    ];
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(0).max(2);
    let finite = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let (lo, hi) = if lo < hi {
        (lo, hi)
    } else {
        (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0)
    };
    let x = |i: usize| M + (W - 2.0 * M) * i as f64 / (n - 1) as f64;
    let y = |v: f64| H - M - (H - 2.0 * M) * (v - lo) / (hi - lo);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{M}\" y=\"16\" font-size=\"13\">{}</text>\n\
         <text x=\"4\" y=\"{}\" transform=\"rotate(-90 10 {})\">{}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#888\"/>\n\
         <text x=\"2\" y=\"{}\">{:.3}</text><text x=\"2\" y=\"{}\">{:.3}</text>\n",
        xml_escape(title),
        H / 2.0,
        H / 2.0,
        xml_escape(y_label),
        H - M,
        W - M,
        H - M,
        y(hi) + 4.0,
        hi,
        y(lo),
        lo,
    );
    for (k, (name, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            points.join(" "),
            W - M - 120.0,
            30.0 + 14.0 * k as f64,
            xml_escape(name)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
