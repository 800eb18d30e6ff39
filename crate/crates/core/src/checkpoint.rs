//! Single-file model checkpoints.
//!
//! Layout: the magic bytes `PLTP1`, a little-endian `u32` byte length, the
//! model configuration as canonical JSON (sorted keys, no whitespace), then
//! every parameter as little-endian `f64` in declaration order. Shapes are
//! implied by the configuration.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 5] = b"PLTP1";

/// Upper bound on the configuration header.
pub const MAX_CONFIG_BYTES: usize = 1 << 20;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Canonical JSON text of a configuration.
pub fn canonical_config(config: &ModelConfig) -> Result<String> {
    // serde_json's default map is ordered by key.
    let value: Value = serde_json::to_value(config)?;
    Ok(serde_json::to_string(&value)?)
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let json = canonical_config(model.config())?;
    let len = u32::try_from(json.len()).map_err(|_| format_err("configuration too large"))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 8 * model.params().scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    for m in model.params().values() {
        for x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Strict inverse of [`encode`]. Rejects bad magic, truncation, trailing
/// bytes, invalid configurations and non-finite parameters.
pub fn decode(bytes: &[u8]) -> Result<Model> {
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| format_err("missing checkpoint magic"))?;
    if rest.len() < 4 {
        return Err(format_err("truncated header length"));
    }
    let (len_bytes, rest) = rest.split_at(4);
    let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    if len > MAX_CONFIG_BYTES {
        return Err(format_err(format!("configuration header of {len} bytes exceeds limit")));
    }
    if rest.len() < len {
        return Err(format_err("truncated configuration"));
    }
    let (json, body) = rest.split_at(len);
    let config: ModelConfig = serde_json::from_slice(json)?;
    config.validate()?;
    // every decoder layer owns parameters, so this bounds the shape list
    if config.decoder_layers > body.len() / 8 {
        return Err(format_err("parameter section too short for the configured decoder"));
    }

    let shapes = param_shapes(&config)?;
    let expected: usize = shapes
        .iter()
        .try_fold(0usize, |acc, &(r, c)| r.checked_mul(c).and_then(|n| acc.checked_add(n)))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| format_err("parameter count overflows"))?;
    if body.len() != expected {
        return Err(format_err(format!(
            "expected {expected} parameter bytes, found {}",
            body.len()
        )));
    }
    let mut chunks = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut values = Vec::with_capacity(shapes.len());
    for (r, c) in shapes {
        let data: Vec<f64> = chunks.by_ref().take(r * c).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(format_err("non-finite parameter value"));
        }
        values.push(Matrix::new(r, c, data)?);
    }
    Model::from_parts(config, values)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    decode(&fs::read(path)?)
}

/// Parameter shapes in declaration order, computed without allocating the
/// model.
pub fn param_shapes(config: &ModelConfig) -> Result<Vec<(usize, usize)>> {
    config.validate()?;
    let d = config.attention.d_model;
    let f = config.attention.ffn_dim;
    let norm = [(1, d), (1, d)];
    let mha = [(d, d), (1, d), (d, d), (1, d), (d, d), (1, d), (d, d), (1, d)];
    let ffn = [(d, f), (1, f), (f, d), (1, d)];

    let mut shapes = vec![(config.vocab_size, d)];
    let mut len = config.max_input_len;
    for &target in config.schedule.lengths() {
        shapes.extend(norm);
        shapes.extend(mha);
        shapes.extend(norm);
        shapes.extend(ffn);
        if target < len {
            shapes.extend(config.scorer.param_shapes(d));
        }
        len = target;
    }
    shapes.extend(norm);
    for _ in 0..config.decoder_layers {
        for _ in 0..2 {
            shapes.extend(norm);
            shapes.extend(mha);
        }
        shapes.extend(norm);
        shapes.extend(ffn);
    }
    shapes.extend(norm);
    Ok(shapes)
}
