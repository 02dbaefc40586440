//! Model file: `CFX1`, one line of JSON (architecture plus tensor manifest),
//! a `\n`, then every tensor as little-endian `f32` in manifest order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerParams, ModelParams, NetConfig};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"CFX1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    architecture: NetConfig,
    param_count: usize,
    tensors: Vec<TensorEntry>,
}

pub fn write_model(params: &ModelParams, mut out: impl Write) -> std::io::Result<()> {
    let mut tensors = Vec::new();
    for l in params.layers() {
        tensors.push(TensorEntry {
            name: format!("{}.weight", l.spec.name),
            shape: l.spec.weight_shape().to_vec(),
        });
        tensors.push(TensorEntry {
            name: format!("{}.bias", l.spec.name),
            shape: vec![l.spec.cout],
        });
    }
    let header = ModelHeader {
        architecture: *params.config(),
        param_count: params.param_count(),
        tensors,
    };
    out.write_all(MODEL_MAGIC)?;
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(params.param_count() * 4);
    for l in params.layers() {
        for v in l.weight.iter().chain(&l.bias) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)
}

pub fn read_model(input: impl Read) -> Result<ModelParams> {
    let mut reader = BufReader::new(input);
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::format("magic", "file too short"))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format("magic", format!("expected CFX1, found {magic:?}")));
    }
    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::format("header", e.to_string()))?;
    if line.last() != Some(&b'\n') {
        return Err(Error::format("header", "unterminated JSON header"));
    }
    let header: ModelHeader =
        serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| Error::format("header", e.to_string()))?;
    let cfg = header.architecture;
    cfg.validate()?;
    let specs = cfg.layer_specs();
    if header.tensors.len() != 2 * specs.len() {
        return Err(Error::format("tensors", "manifest does not match the architecture"));
    }
    for (spec, pair) in specs.iter().zip(header.tensors.chunks(2)) {
        if pair[0].shape != spec.weight_shape() || pair[1].shape != [spec.cout] {
            return Err(Error::format("tensors", format!("unexpected shape for layer {}", spec.name)));
        }
    }

    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::format("payload", e.to_string()))?;
    let total: usize = specs.iter().map(|s| s.weight_len() + s.cout).sum();
    if payload.len() != total * 4 || header.param_count != total {
        return Err(Error::Size {
            expected: total * 4,
            found: payload.len(),
        });
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let layers = specs
        .into_iter()
        .map(|spec| {
            let weight: Vec<f64> = values.by_ref().take(spec.weight_len()).collect();
            let bias: Vec<f64> = values.by_ref().take(spec.cout).collect();
            LayerParams { spec, weight, bias }
        })
        .collect();
    ModelParams::from_layers(cfg, layers)
}

pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_model(params, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(file)
}
