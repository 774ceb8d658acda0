use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use super::mapping::{MappingCache, MappingSpec, PairOptions};
use super::{contains_answer, run_patchscope, resolve_position, ModelRegistry, PatchscopeResult, SourceSpec, TargetSpec};
use crate::engine::{forward, Distribution, ForwardOptions};
use crate::error::{Error, Result};

fn last() -> i64 {
    -1
}

fn default_max_new() -> usize {
    1
}

fn default_ridge() -> f64 {
    1e-6
}

/// Source half of a grid; the layer comes from the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSource {
    pub prompt: String,
    #[serde(default = "last")]
    pub position: i64,
    pub model: String,
}

/// Target half of a grid; the layer comes from the column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTarget {
    pub prompt: String,
    #[serde(default = "last")]
    pub position: i64,
    pub model: String,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    #[serde(default)]
    pub stop: Vec<String>,
}

/// Corpus and options for fitting one affine map per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    #[serde(default)]
    pub corpus: Vec<String>,
    /// Alternative to `corpus`: a text file with one line per example.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<PathBuf>,
    #[serde(flatten)]
    pub pairs: PairOptions,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

impl FitSpec {
    fn lines(&self) -> Result<Vec<String>> {
        match &self.corpus_path {
            Some(path) if self.corpus.is_empty() => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
            }
            Some(_) => Err(Error::spec("mapping.corpus", "give corpus or corpus_path, not both")),
            None if self.corpus.is_empty() => Err(Error::spec("mapping.corpus", "affine grid mapping needs a fitting corpus")),
            None => Ok(self.corpus.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridMapping {
    #[default]
    Identity,
    Zero,
    /// Fit `h^ℓ → h^{ℓ*}` per cell on the given corpus.
    Affine(FitSpec),
}

/// Cell score, a pure function of the Patchscope output and the source
/// model's own next-token distribution `p^L` at the source position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scorer {
    /// 1 if the first-step argmax equals the argmax of `p^L`, else 0.
    ArgmaxMatch,
    /// `−ln p^L[argmax p̃]` with a 1e-12 floor.
    Surprisal,
    /// First-step probability of a token.
    TokenProb { token: String },
    /// 1 if the generated text contains `text`, else 0.
    Contains { text: String },
}

impl Scorer {
    pub fn score(&self, result: &PatchscopeResult, reference: &Distribution, registry: &ModelRegistry) -> Result<f64> {
        let first = || {
            result
                .output
                .first_step()
                .ok_or_else(|| Error::spec("target.max_new", "scorer needs at least one generated token"))
        };
        match self {
            Scorer::ArgmaxMatch => Ok(f64::from(u8::from(first()?.argmax() == reference.argmax()))),
            Scorer::Surprisal => {
                let est = first()?;
                if est.len() != reference.len() {
                    return Err(Error::spec("scorer", "surprisal needs source and target to share a vocabulary"));
                }
                Ok(-reference.prob(est.argmax()).max(1e-12).ln())
            }
            Scorer::TokenProb { token } => {
                let model = registry.get(&result.provenance.target.model)?;
                let id = model
                    .tokenizer()
                    .id(token)
                    .ok_or_else(|| Error::spec("scorer.token", format!("{token:?} not in target vocabulary")))?;
                Ok(first()?.prob(id))
            }
            Scorer::Contains { text } => Ok(f64::from(u8::from(contains_answer(&result.output.text, text)))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub source: GridSource,
    pub target: GridTarget,
    pub source_layers: Vec<usize>,
    pub target_layers: Vec<usize>,
    #[serde(default)]
    pub mapping: GridMapping,
    pub scorer: Scorer,
}

/// Row `r`, column `c` holds the score for `(source_layers[r], target_layers[c])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub source_layers: Vec<usize>,
    pub target_layers: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    /// Generated text of every cell.
    pub texts: Vec<Vec<String>>,
}

impl Grid {
    /// Long-format CSV: `source_layer,target_layer,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source_layer,target_layer,value\n");
        for (r, &l) in self.source_layers.iter().enumerate() {
            for (c, &ls) in self.target_layers.iter().enumerate() {
                let _ = writeln!(out, "{l},{ls},{}", self.values[r][c]);
            }
        }
        out
    }
}

impl GridSpec {
    fn source_at(&self, layer: usize) -> SourceSpec {
        SourceSpec {
            prompt: self.source.prompt.clone(),
            position: self.source.position,
            model: self.source.model.clone(),
            layer,
        }
    }

    fn target_at(&self, layer: usize) -> TargetSpec {
        TargetSpec {
            prompt: self.target.prompt.clone(),
            position: self.target.position,
            model: self.target.model.clone(),
            layer,
            max_new: self.target.max_new,
            stop: self.target.stop.clone(),
        }
    }

    fn validate(&self, registry: &ModelRegistry) -> Result<()> {
        let src = registry.get_for(&self.source.model, "source.model")?;
        let tgt = registry.get_for(&self.target.model, "target.model")?;
        if self.source_layers.is_empty() || self.target_layers.is_empty() {
            return Err(Error::spec("source_layers", "grid needs at least one row and one column"));
        }
        if let Some(l) = self.source_layers.iter().find(|&&l| l > src.n_layers()) {
            return Err(Error::spec("source_layers", format!("layer {l} exceeds {}", src.n_layers())));
        }
        if let Some(l) = self.target_layers.iter().find(|&&l| l > tgt.n_layers()) {
            return Err(Error::spec("target_layers", format!("layer {l} exceeds {}", tgt.n_layers())));
        }
        Ok(())
    }

    /// `p^L` of the source model at the source position.
    fn reference(&self, registry: &ModelRegistry) -> Result<Distribution> {
        let src = registry.get_for(&self.source.model, "source.model")?;
        let ids = src.encode_prompt(&self.source.prompt);
        let position = resolve_position(self.source.position, ids.len(), "source.position")?;
        let trace = forward(src, &ids[..=position], &ForwardOptions::default())?;
        Ok(trace.distribution(position))
    }

    fn mapping_for(&self, registry: &ModelRegistry, cache: &MappingCache, layer: usize, target_layer: usize) -> Result<MappingSpec> {
        match &self.mapping {
            GridMapping::Identity => Ok(MappingSpec::Identity),
            GridMapping::Zero => Ok(MappingSpec::Zero),
            GridMapping::Affine(fit) => {
                let src = registry.get_for(&self.source.model, "source.model")?;
                let tgt = registry.get_for(&self.target.model, "target.model")?;
                let lines = fit.lines()?;
                let map = cache.get_or_fit(src, tgt, &lines, layer, target_layer, &fit.pairs, fit.ridge)?;
                Ok((*map).clone())
            }
        }
    }

    fn cell(
        &self,
        registry: &ModelRegistry,
        cache: &MappingCache,
        reference: &Distribution,
        layer: usize,
        target_layer: usize,
    ) -> Result<(f64, String)> {
        let mapping = self.mapping_for(registry, cache, layer, target_layer)?;
        let result = run_patchscope(registry, &self.source_at(layer), &mapping, &self.target_at(target_layer))?;
        let value = self.scorer.score(&result, reference, registry)?;
        Ok((value, result.output.text))
    }
}

/// Scores every `(ℓ, ℓ*)` cell in row-major order. Checks `cancel` before
/// each cell and returns [`Error::Cancelled`] without a partial matrix.
pub fn run_grid(registry: &ModelRegistry, spec: &GridSpec, cache: &MappingCache, cancel: Option<&AtomicBool>) -> Result<Grid> {
    spec.validate(registry)?;
    let reference = spec.reference(registry)?;
    let mut values = Vec::with_capacity(spec.source_layers.len());
    let mut texts = Vec::with_capacity(spec.source_layers.len());
    for &l in &spec.source_layers {
        let mut row = Vec::with_capacity(spec.target_layers.len());
        let mut row_text = Vec::with_capacity(spec.target_layers.len());
        for &ls in &spec.target_layers {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                return Err(Error::Cancelled);
            }
            let (v, t) = spec.cell(registry, cache, &reference, l, ls)?;
            row.push(v);
            row_text.push(t);
        }
        values.push(row);
        texts.push(row_text);
    }
    Ok(Grid {
        source_layers: spec.source_layers.clone(),
        target_layers: spec.target_layers.clone(),
        values,
        texts,
    })
}

/// Re-evaluates one cell of a grid.
pub fn score_cell(registry: &ModelRegistry, spec: &GridSpec, cache: &MappingCache, layer: usize, target_layer: usize) -> Result<f64> {
    spec.validate(registry)?;
    let reference = spec.reference(registry)?;
    Ok(spec.cell(registry, cache, &reference, layer, target_layer)?.0)
}
