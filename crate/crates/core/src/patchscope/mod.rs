//! Source/target patching: extract `h_i^ℓ` from one pass, map it with `f`,
//! write it into another pass at `(i*, ℓ*)` and decode what follows.

mod grid;
mod mapping;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use grid::{run_grid, score_cell, FitSpec, Grid, GridMapping, GridSource, GridSpec, GridTarget, Scorer};
pub use mapping::{collect_pairs, fit_mapping, mapping_residual, MappingCache, MappingConfig, MappingKind, MappingSpec, PairOptions};

use crate::engine::{forward, generate, Distribution, ForwardOptions, GenerateOptions, GenerationResult};
use crate::error::{Error, Result};
use crate::format::load_model;
use crate::intervention::PatchPlan;
use crate::model::ModelBundle;
use crate::numerics::Vector;

/// Models addressable by id. Built once, then only read.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<ModelBundle>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, bundle: Arc<ModelBundle>) -> Result<()> {
        let id = bundle.model_id().to_string();
        if self.models.contains_key(&id) {
            return Err(Error::Config(format!("model id {id:?} registered twice")));
        }
        self.models.insert(id, bundle);
        Ok(())
    }

    pub fn with(mut self, bundle: Arc<ModelBundle>) -> Result<Self> {
        self.insert(bundle)?;
        Ok(self)
    }

    /// Loads every model directory in `dirs`.
    pub fn from_dirs<P: AsRef<Path>>(dirs: &[P]) -> Result<Self> {
        let mut reg = Self::new();
        for dir in dirs {
            reg.insert(Arc::new(load_model(dir.as_ref())?))?;
        }
        Ok(reg)
    }

    pub fn get(&self, id: &str) -> Result<&Arc<ModelBundle>> {
        self.models
            .get(id)
            .ok_or_else(|| Error::spec("model", format!("unknown model {id:?}")))
    }

    /// Looks up `id` for the spec field `field`.
    pub fn get_for(&self, id: &str, field: &str) -> Result<&Arc<ModelBundle>> {
        self.models
            .get(id)
            .ok_or_else(|| Error::spec(field, format!("unknown model {id:?}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<ModelBundle>> {
        self.models.values()
    }
}

fn last() -> i64 {
    -1
}

fn default_max_new() -> usize {
    20
}

/// `(S, i, M, ℓ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub prompt: String,
    /// 0-based index into `<bos>` + tokens; −1 means the last token.
    #[serde(default = "last")]
    pub position: i64,
    pub model: String,
    pub layer: usize,
}

/// `(T, i*, M*, ℓ*)` plus decoding limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub prompt: String,
    #[serde(default = "last")]
    pub position: i64,
    pub model: String,
    pub layer: usize,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    /// Tokens that end generation (the stop token is kept in the output).
    #[serde(default)]
    pub stop: Vec<String>,
}

/// Resolves a possibly negative position against a sequence length.
pub fn resolve_position(position: i64, len: usize, field: &str) -> Result<usize> {
    let resolved = if position == -1 {
        len.checked_sub(1)
    } else if position >= 0 {
        Some(position as usize).filter(|&p| p < len)
    } else {
        None
    };
    resolved.ok_or_else(|| {
        Error::spec(
            field,
            format!("position {position} outside 0..{len} (use -1 for the last token)"),
        )
    })
}

fn check_layer(layer: usize, bundle: &ModelBundle, field: &str) -> Result<()> {
    if layer > bundle.n_layers() {
        return Err(Error::spec(
            field,
            format!("layer {layer} exceeds the model's {} layers", bundle.n_layers()),
        ));
    }
    Ok(())
}

/// `h_i^ℓ` of a clean forward on the source prompt.
pub fn extract(registry: &ModelRegistry, source: &SourceSpec) -> Result<Vector> {
    let bundle = registry.get_for(&source.model, "source.model")?;
    let (ids, position) = source_ids(bundle, source)?;
    let trace = forward(bundle, &ids[..=position], &ForwardOptions::default())?;
    Ok(trace.state_vector(source.layer, position))
}

fn source_ids(bundle: &ModelBundle, source: &SourceSpec) -> Result<(Vec<usize>, usize)> {
    check_layer(source.layer, bundle, "source.layer")?;
    let ids = bundle.encode_prompt(&source.prompt);
    let position = resolve_position(source.position, ids.len(), "source.position")?;
    Ok((ids, position))
}

/// What the target pass produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub text: String,
    pub tokens: Vec<usize>,
    pub token_strings: Vec<String>,
    pub steps: Vec<Distribution>,
}

impl Injection {
    fn from_generation(bundle: &ModelBundle, generation: GenerationResult) -> Self {
        let token_strings = generation
            .new_tokens
            .iter()
            .map(|&t| bundle.tokenizer().token(t).unwrap_or_default().to_string())
            .collect();
        Injection {
            text: bundle.detokenize(&generation.new_tokens),
            tokens: generation.new_tokens,
            token_strings,
            steps: generation.steps,
        }
    }

    pub fn first_step(&self) -> Option<&Distribution> {
        self.steps.first()
    }
}

/// Source and target with every position resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: SourceSpec,
    pub target: TargetSpec,
    pub mapping: MappingKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchscopeResult {
    #[serde(flatten)]
    pub output: Injection,
    /// `f(h)` as written into the target pass.
    pub patched: Vector,
    pub provenance: Provenance,
}

fn stop_ids(bundle: &ModelBundle, stop: &[String]) -> Result<Vec<usize>> {
    stop.iter()
        .map(|s| {
            bundle
                .tokenizer()
                .id(s)
                .ok_or_else(|| Error::spec("target.stop", format!("stop token {s:?} not in vocabulary")))
        })
        .collect()
}

/// Greedy generation from `ids` with `value` written at `(layer, position)`.
pub fn patch_generate(
    bundle: &ModelBundle,
    ids: &[usize],
    position: usize,
    layer: usize,
    value: Vector,
    max_new: usize,
    stop_tokens: Vec<usize>,
) -> Result<GenerationResult> {
    let plan = PatchPlan::empty().patch(layer, position, value);
    let opts = GenerateOptions {
        stop_tokens,
        ..GenerateOptions::with_plan(plan)
    };
    generate(bundle, ids, max_new, &opts)
}

/// Runs the target half with a ready-made vector. The output depends only
/// on `value` and the target, never on where the vector came from.
pub fn inject(registry: &ModelRegistry, value: &Vector, target: &TargetSpec) -> Result<(Injection, usize)> {
    let bundle = registry.get_for(&target.model, "target.model")?;
    check_layer(target.layer, bundle, "target.layer")?;
    if value.dim() != bundle.d_model() {
        return Err(Error::Mapping(format!(
            "patched vector has dim {} but target model width is {}",
            value.dim(),
            bundle.d_model()
        )));
    }
    let ids = bundle.encode_prompt(&target.prompt);
    let position = resolve_position(target.position, ids.len(), "target.position")?;
    let stops = stop_ids(bundle, &target.stop)?;
    let generation = patch_generate(bundle, &ids, position, target.layer, value.clone(), target.max_new, stops)?;
    Ok((Injection::from_generation(bundle, generation), position))
}

/// `h̄_{i*}^{ℓ*} ← f(h_i^ℓ)`, then decode.
pub fn run_patchscope(
    registry: &ModelRegistry,
    source: &SourceSpec,
    mapping: &MappingSpec,
    target: &TargetSpec,
) -> Result<PatchscopeResult> {
    let src = registry.get_for(&source.model, "source.model")?;
    let tgt = registry.get_for(&target.model, "target.model")?;
    let (ids, position) = source_ids(src, source)?;
    let trace = forward(src, &ids[..=position], &ForwardOptions::default())?;
    let h = trace.state_vector(source.layer, position);
    let patched = mapping.apply(&h, tgt.d_model())?;
    let (output, target_position) = inject(registry, &patched, target)?;
    Ok(PatchscopeResult {
        output,
        patched,
        provenance: Provenance {
            source: SourceSpec {
                position: position as i64,
                model: src.model_id().to_string(),
                ..source.clone()
            },
            target: TargetSpec {
                position: target_position as i64,
                model: tgt.model_id().to_string(),
                ..target.clone()
            },
            mapping: mapping.kind(),
        },
    })
}

/// The on-disk form of one Patchscope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchscopeConfig {
    pub source: SourceSpec,
    #[serde(default)]
    pub mapping: MappingConfig,
    pub target: TargetSpec,
    /// Optional answer; when present the result carries a success flag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<String>,
}

impl PatchscopeConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Resolves the mapping (reading `params_path` relative to `base`) and runs.
    pub fn run(&self, registry: &ModelRegistry, base: Option<&Path>) -> Result<PatchscopeResult> {
        let mapping = self.mapping.resolve(base)?;
        run_patchscope(registry, &self.source, &mapping, &self.target)
    }
}

/// Lowercased substring test on detokenized text, anchored at word
/// boundaries so "mark" does not match inside "fennmark". An empty answer
/// never matches.
pub fn contains_answer(text: &str, answer: &str) -> bool {
    let needle = answer.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    if needle.is_empty() {
        return false;
    }
    let hay = format!(" {} ", text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase());
    hay.contains(&format!(" {needle} "))
}
