//! Model checkpoints.
//!
//! A checkpoint is a single file: one line of JSON metadata (kind, config,
//! tensor table) followed by the tensors as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::ScheduleConfig;
use crate::embedder::{EmbedderConfig, EmbedderParams};
use crate::error::{Error, Result};
use crate::nn::ParamSet;

const FORMAT: &str = "gaze-diffusion-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the tensor data, in elements.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<ScheduleConfig>,
    tensors: Vec<TensorEntry>,
}

pub fn encode<P: ParamSet<f32>>(
    kind: &str,
    config: &impl Serialize,
    schedule: Option<ScheduleConfig>,
    params: &P,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::with_capacity(4 * params.param_count());
    let mut offset = 0;
    for (name, t) in params.named() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape.clone(),
            offset,
        });
        offset += t.data.len();
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        config: serde_json::to_value(config)?,
        schedule,
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok(out)
}

fn decode<C: DeserializeOwned, P: ParamSet<f32>>(
    bytes: &[u8],
    kind: &str,
    build: impl FnOnce(C) -> Result<P>,
) -> Result<(P, Option<ScheduleConfig>)> {
    let bad = |m: String| Error::Checkpoint(m);
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..split]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    if header.kind != kind {
        return Err(bad(format!(
            "expected a {kind} checkpoint, found {}",
            header.kind
        )));
    }
    let blob = &bytes[split + 1..];
    let config: C =
        serde_json::from_value(header.config).map_err(|e| bad(format!("bad config: {e}")))?;
    let mut params = build(config)?;
    let named = params.named_mut();
    if named.len() != header.tensors.len() {
        return Err(bad(format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            named.len()
        )));
    }
    let mut expected_len = 0;
    for ((name, t), entry) in named.into_iter().zip(&header.tensors) {
        if name != entry.name || t.shape != entry.shape {
            return Err(bad(format!(
                "tensor {} {:?} does not match stored {} {:?}",
                name, t.shape, entry.name, entry.shape
            )));
        }
        let start = 4 * entry.offset;
        let end = start + 4 * t.data.len();
        let raw = blob
            .get(start..end)
            .ok_or_else(|| bad(format!("tensor {name} is truncated")))?;
        for (v, chunk) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        expected_len = expected_len.max(end);
    }
    if blob.len() != expected_len {
        return Err(bad(format!("{} trailing bytes", blob.len() - expected_len)));
    }
    params.check_finite("checkpoint")?;
    Ok((params, header.schedule))
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn encode_denoiser(params: &DenoiserParams<f32>, schedule: ScheduleConfig) -> Result<Vec<u8>> {
    encode("denoiser", &params.config, Some(schedule), params)
}

pub fn decode_denoiser(bytes: &[u8]) -> Result<(DenoiserParams<f32>, ScheduleConfig)> {
    let (params, schedule) = decode(bytes, "denoiser", |c: DenoiserConfig| {
        DenoiserParams::zeros(c)
    })?;
    let schedule =
        schedule.ok_or_else(|| Error::Checkpoint("denoiser checkpoint lacks a schedule".into()))?;
    Ok((params, schedule))
}

pub fn save_denoiser(
    path: &Path,
    params: &DenoiserParams<f32>,
    schedule: ScheduleConfig,
) -> Result<()> {
    write(path, encode_denoiser(params, schedule)?)
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserParams<f32>, ScheduleConfig)> {
    decode_denoiser(&read(path)?)
}

pub fn encode_embedder(params: &EmbedderParams<f32>) -> Result<Vec<u8>> {
    encode("embedder", &params.config, None, params)
}

pub fn decode_embedder(bytes: &[u8]) -> Result<EmbedderParams<f32>> {
    decode(bytes, "embedder", |c: EmbedderConfig| {
        EmbedderParams::zeros(c)
    })
    .map(|(p, _)| p)
}

pub fn save_embedder(path: &Path, params: &EmbedderParams<f32>) -> Result<()> {
    write(path, encode_embedder(params)?)
}

pub fn load_embedder(path: &Path) -> Result<EmbedderParams<f32>> {
    decode_embedder(&read(path)?)
}
