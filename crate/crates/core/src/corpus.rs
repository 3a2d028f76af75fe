//! Seeded synthetic multi-user gaze corpus and CSV recording I/O.
//!
//! Each synthetic user has a signature (tremor level and color, microsaccade
//! habits, saccade main sequence, fixation durations) that shapes every
//! sequence generated for them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::signal::GazeSequence;

/// Inclusive ranges signature fields are drawn from.
pub mod ranges {
    pub const TREMOR_AMPLITUDE: (f64, f64) = (0.03, 0.15);
    pub const TREMOR_COLOR: (f64, f64) = (0.0, 1.0);
    pub const MICROSACCADE_RATE: (f64, f64) = (0.3, 4.0);
    pub const MICROSACCADE_AMPLITUDE: (f64, f64) = (0.1, 0.8);
    pub const SACCADE_VMAX: (f64, f64) = (350.0, 700.0);
    pub const SACCADE_C: (f64, f64) = (4.0, 15.0);
    /// Median fixation duration in ms.
    pub const FIXATION_MEDIAN_MS: (f64, f64) = (120.0, 450.0);
    pub const FIXATION_SIGMA: (f64, f64) = (0.15, 0.6);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSignature {
    pub user_id: usize,
    /// Standard deviation of the fixational jitter, degrees.
    pub tremor_amplitude: f64,
    /// Spectral exponent: power falls off as `1/f^color`.
    pub tremor_color: f64,
    /// Events per second during fixations.
    pub microsaccade_rate: f64,
    pub microsaccade_amplitude: f64,
    /// Main sequence `v_peak = vmax·(1 − exp(−A/c))`, °/s and degrees.
    pub saccade_vmax: f64,
    pub saccade_c: f64,
    /// Log-normal fixation duration parameters (of ms).
    pub fixation_mu: f64,
    pub fixation_sigma: f64,
}

impl UserSignature {
    pub fn peak_velocity(&self, amplitude: f64) -> f64 {
        self.saccade_vmax * (1.0 - (-amplitude / self.saccade_c).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_users: usize,
    pub sequences_per_user: usize,
    pub sequence_length: usize,
    pub sample_rate: f64,
    pub seed: u64,
    /// Gaze stays within `±workspace` degrees on both axes.
    pub workspace: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_users: 8,
            sequences_per_user: 40,
            sequence_length: 1000,
            sample_rate: 1000.0,
            seed: 7,
            workspace: 15.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users < 2 {
            return Err(Error::InvalidArgument(
                "a corpus needs at least 2 users".into(),
            ));
        }
        if self.sequences_per_user == 0 {
            return Err(Error::InvalidArgument(
                "sequences_per_user must be positive".into(),
            ));
        }
        if self.sequence_length < crate::signal::SG_WINDOW {
            return Err(Error::TooShort {
                len: self.sequence_length,
                min: crate::signal::SG_WINDOW,
            });
        }
        if !(self.sample_rate > 0.0) || !(self.workspace > 0.0) {
            return Err(Error::InvalidArgument(
                "sample rate and workspace must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

pub fn generate_user(seed: u64, user_id: usize) -> UserSignature {
    let mut r = rng::stream(seed, &[rng::tag::CORPUS_USER, user_id as u64]);
    UserSignature {
        user_id,
        tremor_amplitude: uniform(&mut r, ranges::TREMOR_AMPLITUDE),
        tremor_color: uniform(&mut r, ranges::TREMOR_COLOR),
        microsaccade_rate: uniform(&mut r, ranges::MICROSACCADE_RATE),
        microsaccade_amplitude: uniform(&mut r, ranges::MICROSACCADE_AMPLITUDE),
        saccade_vmax: uniform(&mut r, ranges::SACCADE_VMAX),
        saccade_c: uniform(&mut r, ranges::SACCADE_C),
        fixation_mu: uniform(&mut r, ranges::FIXATION_MEDIAN_MS).ln(),
        fixation_sigma: uniform(&mut r, ranges::FIXATION_SIGMA),
    }
}

/// White noise shaped to a `1/f^color` power spectrum, scaled to standard
/// deviation `amplitude`.
pub fn colored_noise<R: Rng>(len: usize, color: f64, amplitude: f64, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for (k, c) in buf.iter_mut().enumerate().skip(1) {
        let fold = k.min(len - k) as f64;
        *c *= fold.powf(-color / 2.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let re: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = re.iter().sum::<f64>() / len as f64;
    let var = re.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
    let scale = if var > 0.0 {
        amplitude / var.sqrt()
    } else {
        0.0
    };
    re.iter().map(|v| (v - mean) * scale).collect()
}

/// Smooth point-to-point movement with a minimum-jerk profile whose peak
/// speed does not exceed `peak`.
fn min_jerk(from: [f64; 2], to: [f64; 2], peak: f64, rate: f64, out: &mut Vec<[f64; 2]>) {
    let amplitude = ((to[0] - from[0]).powi(2) + (to[1] - from[1]).powi(2)).sqrt();
    if amplitude == 0.0 || peak <= 0.0 {
        return;
    }
    let duration = 1.875 * amplitude / peak;
    let n = (duration * rate).ceil().max(1.0) as usize;
    for i in 1..=n {
        let tau = i as f64 / n as f64;
        let s = tau.powi(3) * (10.0 - 15.0 * tau + 6.0 * tau * tau);
        out.push([
            from[0] + (to[0] - from[0]) * s,
            from[1] + (to[1] - from[1]) * s,
        ]);
    }
}

/// Noise-free fixation/saccade path and the tremor that is added to it.
#[derive(Debug, Clone)]
pub struct SequenceParts {
    pub path: Vec<[f64; 2]>,
    pub tremor: Vec<[f64; 2]>,
}

pub fn generate_parts(
    sig: &UserSignature,
    len: usize,
    rate: f64,
    workspace: f64,
    seq_seed: u64,
) -> Result<SequenceParts> {
    if len < crate::signal::SG_WINDOW {
        return Err(Error::TooShort {
            len,
            min: crate::signal::SG_WINDOW,
        });
    }
    let mut r = rng::stream(seq_seed, &[rng::tag::CORPUS_SEQUENCE]);
    let fixation = LogNormal::new(sig.fixation_mu, sig.fixation_sigma)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let target_bound = 0.9 * workspace;
    let mut pos = [
        r.random_range(-0.5..=0.5) * target_bound,
        r.random_range(-0.5..=0.5) * target_bound,
    ];
    let mut path = Vec::with_capacity(len + 256);
    while path.len() < len {
        let n_fix = ((fixation.sample(&mut r) / 1000.0 * rate).round() as usize).max(1);
        let micro_p = sig.microsaccade_rate / rate;
        let mut held = 0;
        while held < n_fix {
            if r.random::<f64>() < micro_p {
                let angle = r.random_range(0.0..std::f64::consts::TAU);
                let to = [
                    (pos[0] + sig.microsaccade_amplitude * angle.cos())
                        .clamp(-workspace, workspace),
                    (pos[1] + sig.microsaccade_amplitude * angle.sin())
                        .clamp(-workspace, workspace),
                ];
                let before = path.len();
                min_jerk(
                    pos,
                    to,
                    sig.peak_velocity(sig.microsaccade_amplitude),
                    rate,
                    &mut path,
                );
                held += path.len() - before;
                pos = to;
            } else {
                path.push(pos);
                held += 1;
            }
        }
        let to = [
            r.random_range(-target_bound..=target_bound),
            r.random_range(-target_bound..=target_bound),
        ];
        let amplitude = ((to[0] - pos[0]).powi(2) + (to[1] - pos[1]).powi(2)).sqrt();
        min_jerk(pos, to, sig.peak_velocity(amplitude), rate, &mut path);
        pos = to;
    }
    path.truncate(len);
    let tx = colored_noise(len, sig.tremor_color, sig.tremor_amplitude, &mut r);
    let ty = colored_noise(len, sig.tremor_color, sig.tremor_amplitude, &mut r);
    let tremor = tx.into_iter().zip(ty).map(|(x, y)| [x, y]).collect();
    Ok(SequenceParts { path, tremor })
}

pub fn generate_sequence(
    sig: &UserSignature,
    len: usize,
    rate: f64,
    workspace: f64,
    seq_seed: u64,
) -> Result<GazeSequence> {
    let parts = generate_parts(sig, len, rate, workspace, seq_seed)?;
    let samples = parts
        .path
        .iter()
        .zip(&parts.tremor)
        .map(|(p, t)| {
            [
                (p[0] + t[0]).clamp(-workspace, workspace),
                (p[1] + t[1]).clamp(-workspace, workspace),
            ]
        })
        .collect();
    GazeSequence::new(rate, samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    /// Index into `Corpus::users`.
    pub user: usize,
    pub name: String,
    pub gaze: GazeSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub users: Vec<String>,
    pub recordings: Vec<Recording>,
    pub config: Option<CorpusConfig>,
    pub signatures: Vec<UserSignature>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: Option<CorpusConfig>,
    users: Vec<String>,
    signatures: Vec<UserSignature>,
    files: Vec<String>,
}

fn sequence_seed(seed: u64, user: usize, seq: usize) -> u64 {
    rng::derive_seed(seed, &[rng::tag::CORPUS_SEQUENCE, user as u64, seq as u64])
}

pub fn generate(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let signatures: Vec<UserSignature> = (0..config.n_users)
        .map(|u| generate_user(config.seed, u))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..config.n_users)
        .flat_map(|u| (0..config.sequences_per_user).map(move |s| (u, s)))
        .collect();
    let recordings = jobs
        .par_iter()
        .map(|&(u, s)| {
            let gaze = generate_sequence(
                &signatures[u],
                config.sequence_length,
                config.sample_rate,
                config.workspace,
                sequence_seed(config.seed, u, s),
            )?;
            Ok(Recording {
                user: u,
                name: format!("{s:03}"),
                gaze,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        users: (0..config.n_users).map(|u| format!("user{u:02}")).collect(),
        recordings,
        config: Some(*config),
        signatures,
    })
}

/// Timestamps are milliseconds from the first sample; invalid samples have
/// empty coordinates.
pub fn to_csv_string(g: &GazeSequence) -> String {
    let mut s = String::with_capacity(g.len() * 28 + 8);
    s.push_str("n,x,y\n");
    for (i, (p, &ok)) in g.samples.iter().zip(&g.valid).enumerate() {
        let n = i as f64 * 1000.0 / g.sample_rate;
        if ok {
            s.push_str(&format!("{},{:.6},{:.6}\n", n, p[0], p[1]));
        } else {
            s.push_str(&format!("{n},,\n"));
        }
    }
    s
}

pub fn save_csv(g: &GazeSequence, path: &Path) -> Result<()> {
    fs::write(path, to_csv_string(g)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn parse_csv(text: &str, origin: &str) -> Result<GazeSequence> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.into(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.len() < 3 || &header[0] != "n" || &header[1] != "x" || &header[2] != "y" {
        return Err(parse_err(1, "expected header `n,x,y`".into()));
    }
    let mut stamps = Vec::new();
    let mut samples = Vec::new();
    let mut valid = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() < 3 {
            return Err(parse_err(
                line,
                format!("expected 3 fields, got {}", rec.len()),
            ));
        }
        let n: f64 = rec[0]
            .parse()
            .map_err(|_| parse_err(line, format!("bad timestamp {:?}", &rec[0])))?;
        if !n.is_finite() {
            return Err(parse_err(line, "non-finite timestamp".into()));
        }
        let coord = |f: &str| -> Result<f64> {
            if f.is_empty() {
                Ok(f64::NAN)
            } else {
                f.parse()
                    .map_err(|_| parse_err(line, format!("bad coordinate {f:?}")))
            }
        };
        let (x, y) = (coord(&rec[1])?, coord(&rec[2])?);
        let ok = x.is_finite() && y.is_finite();
        stamps.push(n);
        samples.push(if ok { [x, y] } else { [0.0, 0.0] });
        valid.push(ok);
    }
    if stamps.len() < 2 {
        return Err(parse_err(stamps.len() + 1, "need at least two rows".into()));
    }
    let dt = (stamps[stamps.len() - 1] - stamps[0]) / (stamps.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(parse_err(2, "timestamps must increase".into()));
    }
    for (i, w) in stamps.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > 1e-3 * dt {
            return Err(parse_err(i + 3, "non-uniform sample spacing".into()));
        }
    }
    let rate = 1000.0 / dt;
    let rate = if (rate - rate.round()).abs() < 1e-6 {
        rate.round()
    } else {
        rate
    };
    GazeSequence::with_mask(rate, samples, valid)
}

pub fn load_csv(path: &Path) -> Result<GazeSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_csv(&text, &path.display().to_string())
}

pub fn save(corpus: &Corpus, dir: &Path) -> Result<()> {
    let io = |p: &Path, e| Error::io(p.display().to_string(), e);
    let mut files = Vec::with_capacity(corpus.recordings.len());
    for user in &corpus.users {
        let d = dir.join(user);
        fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
    }
    for rec in &corpus.recordings {
        let rel = format!("{}/{}.csv", corpus.users[rec.user], rec.name);
        save_csv(&rec.gaze, &dir.join(&rel))?;
        files.push(rel);
    }
    let manifest = Manifest {
        config: corpus.config,
        users: corpus.users.clone(),
        signatures: corpus.signatures.clone(),
        files,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| io(&path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads `dir/<user>/<seq>.csv`. Users and sequences are ordered by name.
pub fn load(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    let mut users = Vec::new();
    let mut recordings = Vec::new();
    for user_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = user_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files: Vec<PathBuf> = sorted_entries(&user_dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        if files.is_empty() {
            continue;
        }
        let user = users.len();
        users.push(name);
        for f in files {
            recordings.push(Recording {
                user,
                name: f
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                gaze: load_csv(&f)?,
            });
        }
    }
    if recordings.is_empty() {
        return Err(Error::Degenerate(format!(
            "no recordings under {}",
            dir.display()
        )));
    }
    let (config, signatures) = match manifest {
        Some(m) if m.users == users => (m.config, m.signatures),
        _ => (None, Vec::new()),
    };
    Ok(Corpus {
        users,
        recordings,
        config,
        signatures,
    })
}

/// Per-user stratified split; returns indices into `recordings`.
pub fn split(recordings: &[Recording], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    let n_users = recordings.iter().map(|r| r.user + 1).max().unwrap_or(0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for u in 0..n_users {
        let mut idx: Vec<usize> = (0..recordings.len())
            .filter(|&i| recordings[i].user == u)
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Degenerate(format!(
                "user {u} has {} sequence(s); a split needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng::stream(seed, &[rng::tag::SPLIT, u as u64]));
        let k = ((idx.len() as f64 * ratio).round() as usize).clamp(1, idx.len() - 1);
        let (a, b) = idx.split_at(k);
        train.extend_from_slice(a);
        test.extend_from_slice(b);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
