use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::engine::{forward, ForwardOptions};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::numerics::{least_squares_affine, Matrix, Rng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    #[default]
    Identity,
    Zero,
    Affine,
}

/// The function `f` applied to `h` before it is written into the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MappingSpec {
    Identity,
    Zero,
    /// `f(h) = A h + b` with `A` of shape `d* × d`.
    Affine { a: Matrix, b: Vector },
}

impl MappingSpec {
    pub fn kind(&self) -> MappingKind {
        match self {
            MappingSpec::Identity => MappingKind::Identity,
            MappingSpec::Zero => MappingKind::Zero,
            MappingSpec::Affine { .. } => MappingKind::Affine,
        }
    }

    /// `f(h)` for a target of width `d_out`.
    pub fn apply(&self, h: &Vector, d_out: usize) -> Result<Vector> {
        match self {
            MappingSpec::Identity => {
                if h.dim() != d_out {
                    return Err(Error::Mapping(format!(
                        "identity mapping cannot bridge width {} to {d_out}",
                        h.dim()
                    )));
                }
                Ok(h.clone())
            }
            MappingSpec::Zero => Ok(Vector::zeros(d_out)),
            MappingSpec::Affine { a, b } => {
                if a.cols() != h.dim() || a.rows() != d_out || b.dim() != d_out {
                    return Err(Error::Mapping(format!(
                        "affine map {}x{} (+{}) cannot bridge width {} to {d_out}",
                        a.rows(),
                        a.cols(),
                        b.dim(),
                        h.dim()
                    )));
                }
                let mut y = a.apply(h)?;
                for (v, bias) in y.0.iter_mut().zip(b.as_slice()) {
                    *v += bias;
                }
                Ok(y)
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Mapping as written in a configuration file: a kind, and for affine maps
/// either inline parameters or a path to a file written by `fit-map`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MappingConfig {
    #[serde(default)]
    pub kind: MappingKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vector>,
}

impl MappingConfig {
    pub fn resolve(&self, base: Option<&Path>) -> Result<MappingSpec> {
        match self.kind {
            MappingKind::Identity => Ok(MappingSpec::Identity),
            MappingKind::Zero => Ok(MappingSpec::Zero),
            MappingKind::Affine => match (&self.params_path, &self.a, &self.b) {
                (Some(path), None, None) => {
                    let full = match base {
                        Some(b) if path.is_relative() => b.join(path),
                        _ => path.clone(),
                    };
                    if !full.exists() {
                        return Err(Error::spec("mapping.params_path", format!("{} does not exist", full.display())));
                    }
                    match MappingSpec::load(&full)? {
                        spec @ MappingSpec::Affine { .. } => Ok(spec),
                        _ => Err(Error::spec("mapping.params_path", "file does not hold an affine map")),
                    }
                }
                (None, Some(a), Some(b)) => Ok(MappingSpec::Affine { a: a.clone(), b: b.clone() }),
                _ => Err(Error::spec(
                    "mapping",
                    "affine mapping needs either params_path or both a and b",
                )),
            },
        }
    }
}

impl From<&MappingSpec> for MappingConfig {
    fn from(spec: &MappingSpec) -> Self {
        match spec {
            MappingSpec::Affine { a, b } => MappingConfig {
                kind: MappingKind::Affine,
                params_path: None,
                a: Some(a.clone()),
                b: Some(b.clone()),
            },
            other => MappingConfig {
                kind: other.kind(),
                ..MappingConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PairOptions {
    pub seed: u64,
    /// Pair every position of the truncated prompt instead of only the last.
    pub all_positions: bool,
    /// Use at most this many corpus lines (in order).
    pub limit: Option<usize>,
}

/// `(h^ℓ from src, h^ℓ' from tgt)` on identical inputs. Each line is cut to
/// a seeded random length in `2..=n` (counting `<bos>`) first.
pub fn collect_pairs(
    src: &ModelBundle,
    tgt: &ModelBundle,
    corpus: &[String],
    layer: usize,
    target_layer: usize,
    opts: &PairOptions,
) -> Result<Vec<(Vector, Vector)>> {
    if corpus.is_empty() {
        return Err(Error::Argument("pair collection needs a non-empty corpus".into()));
    }
    if src.tokenizer() != tgt.tokenizer() {
        return Err(Error::Mapping(format!(
            "models {} and {} use different tokenizers",
            src.model_id(),
            tgt.model_id()
        )));
    }
    if layer > src.n_layers() || target_layer > tgt.n_layers() {
        return Err(Error::Argument(format!(
            "layers ({layer}, {target_layer}) out of range for ({}, {})",
            src.n_layers(),
            tgt.n_layers()
        )));
    }
    let lines = &corpus[..opts.limit.unwrap_or(corpus.len()).min(corpus.len())];
    let max_len = src.config().max_seq.min(tgt.config().max_seq);
    let mut rng = Rng::new(opts.seed);
    let mut pairs = Vec::with_capacity(lines.len());
    for line in lines {
        let mut ids = src.encode_prompt(line);
        ids.truncate(max_len);
        let n = ids.len();
        let cut = if n >= 2 { rng.range_inclusive(2, n) } else { n };
        let ids = &ids[..cut];
        let a = forward(src, ids, &ForwardOptions::default())?;
        let b = if std::ptr::eq(src, tgt) {
            a.clone()
        } else {
            forward(tgt, ids, &ForwardOptions::default())?
        };
        let positions = if opts.all_positions { 0..cut } else { cut - 1..cut };
        for i in positions {
            pairs.push((a.state_vector(layer, i), b.state_vector(target_layer, i)));
        }
    }
    Ok(pairs)
}

/// Ridge least-squares affine map from the first to the second element.
pub fn fit_mapping(pairs: &[(Vector, Vector)], ridge: f64) -> Result<MappingSpec> {
    let xs: Vec<Vector> = pairs.iter().map(|(x, _)| x.clone()).collect();
    let ys: Vec<Vector> = pairs.iter().map(|(_, y)| y.clone()).collect();
    let (a, b) = least_squares_affine(&xs, &ys, ridge)?;
    Ok(MappingSpec::Affine { a, b })
}

/// Mean over pairs of `‖f(x) − y‖²`.
pub fn mapping_residual(mapping: &MappingSpec, pairs: &[(Vector, Vector)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("no pairs".into()));
    }
    let mut total = 0.0;
    for (x, y) in pairs {
        total += mapping.apply(x, y.dim())?.squared_distance(y);
    }
    Ok(total / pairs.len() as f64)
}

/// Fitted maps keyed by model content, layers, corpus and options. Reads
/// are shared; a miss fits outside the lock and then inserts.
#[derive(Debug, Default)]
pub struct MappingCache {
    entries: RwLock<HashMap<String, Arc<MappingSpec>>>,
}

impl MappingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(
        src: &ModelBundle,
        tgt: &ModelBundle,
        corpus: &[String],
        layer: usize,
        target_layer: usize,
        opts: &PairOptions,
        ridge: f64,
    ) -> String {
        let mut h = crc32fast::Hasher::new();
        for line in corpus {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        format!(
            "{}:{:08x}|{}:{:08x}|{layer}->{target_layer}|corpus:{:08x}|seed:{}|all:{}|limit:{:?}|ridge:{ridge:e}",
            src.model_id(),
            src.checksum(),
            tgt.model_id(),
            tgt.checksum(),
            h.finalize(),
            opts.seed,
            opts.all_positions,
            opts.limit,
        )
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("mapping cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[allow(clippy::too_many_arguments)]
    pub fn get_or_fit(
        &self,
        src: &ModelBundle,
        tgt: &ModelBundle,
        corpus: &[String],
        layer: usize,
        target_layer: usize,
        opts: &PairOptions,
        ridge: f64,
    ) -> Result<Arc<MappingSpec>> {
        let key = Self::key(src, tgt, corpus, layer, target_layer, opts, ridge);
        if let Some(hit) = self.entries.read().expect("mapping cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let pairs = collect_pairs(src, tgt, corpus, layer, target_layer, opts)?;
        let fitted = Arc::new(fit_mapping(&pairs, ridge)?);
        let mut entries = self.entries.write().expect("mapping cache poisoned");
        Ok(entries.entry(key).or_insert(fitted).clone())
    }
}
