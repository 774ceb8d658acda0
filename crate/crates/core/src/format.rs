//! Model directory format.
//!
//! ```text
//! <dir>/config.json   model config fields plus "model_id" and "tokenizer"
//! <dir>/weights.bin   b"PSL1" ‖ tensors (f32 LE, row-major, layout order) ‖ CRC32(tensors) LE
//! <dir>/vocab.txt     one token per line, line index = id; pad, bos, unk first
//! ```
//!
//! With tied embeddings the unembedding is still written (a copy of the
//! token embedding) and must match it on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig, ParamLayout};
use crate::tokenizer::{Tokenizer, TokenizerMode};

pub const MAGIC: &[u8; 4] = b"PSL1";

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    model_id: String,
    tokenizer: TokenizerMode,
    #[serde(flatten)]
    config: ModelConfig,
}

/// Tensor names and element counts in file order.
fn file_tensors(layout: &ParamLayout, cfg: &ModelConfig) -> Vec<(String, std::ops::Range<usize>)> {
    let mut out: Vec<_> = layout
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.range()))
        .collect();
    if cfg.tie_embeddings {
        out.push(("unembed".into(), layout.spec(layout.tok_emb).range()));
    }
    out
}

pub fn save_model(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = ConfigFile {
        model_id: bundle.model_id().to_string(),
        tokenizer: bundle.tokenizer().mode(),
        config: bundle.config().clone(),
    };
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;

    let mut payload = Vec::with_capacity(bundle.params().len() * 4 + 64);
    for (_, range) in file_tensors(bundle.layout(), bundle.config()) {
        for v in &bundle.params()[range] {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);
    let mut bytes = Vec::with_capacity(payload.len() + 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&crc.to_le_bytes());
    let w_path = dir.join("weights.bin");
    fs::write(&w_path, bytes).map_err(|e| Error::io(&w_path, e))?;

    let v_path = dir.join("vocab.txt");
    let mut vocab = bundle.tokenizer().vocab().join("\n");
    vocab.push('\n');
    fs::write(&v_path, vocab).map_err(|e| Error::io(&v_path, e))?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<ModelBundle> {
    let cfg_path = dir.join("config.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg: ConfigFile = serde_json::from_str(&text).map_err(|e| Error::format("config.json", e.to_string()))?;
    cfg.config.validate()?;

    let v_path = dir.join("vocab.txt");
    let vocab_text = fs::read_to_string(&v_path).map_err(|e| Error::io(&v_path, e))?;
    let vocab: Vec<String> = vocab_text.lines().map(str::to_string).collect();
    let tokenizer = Tokenizer::from_vocab(cfg.tokenizer, vocab)?;

    let w_path = dir.join("weights.bin");
    let bytes = fs::read(&w_path).map_err(|e| Error::io(&w_path, e))?;
    let params = decode_weights(&bytes, &cfg.config)?;
    ModelBundle::new(cfg.model_id, cfg.config, tokenizer, params)
}

fn decode_weights(bytes: &[u8], cfg: &ModelConfig) -> Result<Vec<f32>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::format("header", "missing PSL1 magic"));
    }
    let layout = ParamLayout::new(cfg);
    let tensors = file_tensors(&layout, cfg);
    let expected: usize = tensors.iter().map(|(_, r)| r.len() * 4).sum();
    let payload = &bytes[4..bytes.len() - 4];

    if payload.len() != expected {
        return Err(size_mismatch(&layout, cfg, &tensors, payload.len(), expected));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::format("payload", "CRC32 checksum mismatch"));
    }

    let mut params = vec![0.0f32; layout.total()];
    let mut cursor = 0usize;
    for (name, range) in &tensors {
        let len = range.len();
        let chunk = &payload[cursor..cursor + len * 4];
        cursor += len * 4;
        let values: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(name.clone(), "non-finite weight"));
        }
        if cfg.tie_embeddings && name == "unembed" {
            if params[range.clone()] != values[..] {
                return Err(Error::format("unembed", "tied unembedding differs from tok_emb"));
            }
            continue;
        }
        params[range.clone()].copy_from_slice(&values);
    }
    Ok(params)
}

/// Names the tensor where a short (or long) payload stops matching the
/// config. A deficit of whole layer groups is reported as missing layers.
fn size_mismatch(
    layout: &ParamLayout,
    cfg: &ModelConfig,
    tensors: &[(String, std::ops::Range<usize>)],
    got: usize,
    expected: usize,
) -> Error {
    let layer_bytes: usize = layout
        .tensors()
        .iter()
        .filter(|t| t.name.starts_with("layers.0."))
        .map(|t| t.len() * 4)
        .sum();
    if got < expected && (expected - got).is_multiple_of(layer_bytes) {
        let missing = (expected - got) / layer_bytes;
        if missing <= cfg.n_layers {
            let present = cfg.n_layers - missing;
            return Error::format(
                format!("layers.{present}"),
                format!(
                    "shape mismatch: config has {} layers but weights.bin holds {present} layer groups",
                    cfg.n_layers
                ),
            );
        }
    }
    if got > expected {
        return Error::format(
            "payload",
            format!("{} trailing bytes beyond the last tensor", got - expected),
        );
    }
    let mut offset = 0usize;
    for (name, range) in tensors {
        offset += range.len() * 4;
        if offset > got {
            return Error::format(
                name.clone(),
                format!("truncated: payload ends at byte {got}, tensor needs up to {offset}"),
            );
        }
    }
    Error::format("payload", "truncated")
}
