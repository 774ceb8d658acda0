//! Request and response bodies shared by the command line and the HTTP
//! service, and the [`Lab`] that answers them. Both front ends call the
//! same methods, so equal requests give equal payloads.

use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{forward, generate, project_to_vocab, Distribution, ForwardOptions, GenerateOptions};
use crate::error::{Error, Result};
use crate::fixtures::Fixtures;
use crate::model::{ModelBundle, ModelConfig, NormKind};
use crate::numerics::Vector;
use crate::patchscope::{
    collect_pairs, contains_answer, fit_mapping, mapping_residual, run_grid, Grid, GridSpec, MappingCache, MappingSpec,
    ModelRegistry, PairOptions, PatchscopeConfig, Provenance,
};
use crate::tokenizer::{Tokenizer, TokenizerMode};
use crate::train::{train_to_dir, TrainConfig};
use crate::zoo::{run_with_fixtures, ExperimentSpec, Report, ARTIFACT_VERSION, EXPERIMENTS};

/// Every successful response: the payload plus the request that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub artifact_version: String,
    pub request: Value,
    pub data: T,
}

impl<T: Serialize> Envelope<T> {
    pub fn new(request: &impl Serialize, data: T) -> Result<Self> {
        Ok(Self {
            artifact_version: ARTIFACT_VERSION.to_string(),
            request: serde_json::to_value(request)?,
            data,
        })
    }
}

/// Structured error body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub offending_field: Option<String>,
}

impl ApiError {
    /// HTTP status: 4xx for anything the caller can fix, 499 for a
    /// cancelled request, 500 otherwise.
    pub fn status(&self) -> u16 {
        match self.code.as_str() {
            "cancelled" => 499,
            "missing_fixture" => 404,
            "io" | "solver" | "diverged" | "format" | "internal" => 500,
            _ => 400,
        }
    }
}

impl From<&Error> for ApiError {
    fn from(e: &Error) -> Self {
        let (code, field) = match e {
            Error::Shape(_) => ("shape", None),
            Error::Argument(_) => ("argument", None),
            Error::Solver(_) => ("solver", None),
            Error::Format { .. } => ("format", None),
            Error::Plan(_) => ("plan", None),
            Error::Mask(_) => ("mask", None),
            Error::Length(_) => ("length", None),
            Error::Spec { field, .. } => ("spec", Some(field.clone())),
            Error::Mapping(_) => ("mapping", Some("mapping".to_string())),
            Error::Template(_) => ("template", Some("target.prompt".to_string())),
            Error::Config(_) => ("config", None),
            Error::MissingFixture(_) => ("missing_fixture", Some("fixture_dir".to_string())),
            Error::Diverged { .. } => ("diverged", None),
            Error::DegenerateLabels(_) => ("degenerate_labels", None),
            Error::Cancelled => ("cancelled", None),
            Error::Io { .. } => ("io", None),
            Error::Json(_) => ("json", None),
        };
        ApiError {
            code: code.into(),
            message: e.to_string(),
            offending_field: field,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::from(&e)
    }
}

fn default_topk() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopToken {
    pub id: usize,
    pub token: String,
    pub prob: f64,
}

fn top_tokens(bundle: &ModelBundle, dist: &Distribution, k: usize) -> Vec<TopToken> {
    dist.top_k(k)
        .into_iter()
        .map(|(id, prob)| TopToken {
            id,
            token: token_string(bundle, id),
            prob,
        })
        .collect()
}

fn token_string(bundle: &ModelBundle, id: usize) -> String {
    bundle.tokenizer().token(id).unwrap_or_default().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub checksum: u32,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeRequest {
    pub model: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeResponse {
    /// `<bos>` followed by the text's tokens; positions index this list.
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardRequest {
    pub model: String,
    pub text: String,
    #[serde(default = "default_topk")]
    pub topk: usize,
}

/// Logit-lens decodings: `grid[ℓ][i]` holds the top-k of `h_i^ℓ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardResponse {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub grid: Vec<Vec<Vec<TopToken>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub model: String,
    pub prompt: String,
    #[serde(default)]
    pub max_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResponse {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub generated_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchscopeRequest {
    #[serde(flatten)]
    pub config: PatchscopeConfig,
    /// Overrides `target.max_new` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_new: Option<usize>,
    #[serde(default = "default_topk")]
    pub topk: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchscopeResponse {
    pub text: String,
    pub tokens: Vec<usize>,
    pub token_strings: Vec<String>,
    /// Top-k of each step's next-token distribution.
    pub steps: Vec<Vec<TopToken>>,
    pub patched: Vector,
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRequest {
    #[serde(flatten)]
    pub spec: GridSpec,
    /// Token under which the caller may cancel this grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cancel_token: Option<String>,
}

/// Experiment parameters as sent over the wire; the name comes separately.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_layers: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_examples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMapRequest {
    pub source_model: String,
    pub target_model: String,
    pub layer: usize,
    pub target_layer: usize,
    pub corpus: Vec<String>,
    #[serde(default)]
    pub pairs: PairOptions,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMapResponse {
    pub mapping: MappingSpec,
    pub n_pairs: usize,
    pub residual: f64,
    /// Residual of the identity map on the same pairs (equal widths only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity_residual: Option<f64>,
}

fn default_norm() -> NormKind {
    NormKind::LayerNorm
}

fn yes() -> bool {
    true
}

/// Architecture and schedule of a training run. The vocabulary is every
/// distinct word of the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub model_id: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    #[serde(default = "default_norm")]
    pub norm_kind: NormKind,
    #[serde(default = "yes")]
    pub use_final_norm: bool,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_id: String,
    pub checksum: u32,
    pub vocab_size: usize,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Loaded models, the mapping cache and the default fixture directory.
#[derive(Debug, Default)]
pub struct Lab {
    registry: ModelRegistry,
    cache: MappingCache,
    fixture_dir: Option<PathBuf>,
    default_seed: u64,
}

impl Lab {
    pub fn new(registry: ModelRegistry) -> Self {
        Self {
            registry,
            ..Self::default()
        }
    }

    /// Registry from model directories plus, if given, the three fixture
    /// models; the fixture directory also backs experiment requests.
    pub fn open<P: AsRef<Path>>(model_dirs: &[P], fixture_dir: Option<&Path>) -> Result<Self> {
        let mut registry = ModelRegistry::from_dirs(model_dirs)?;
        if let Some(dir) = fixture_dir {
            let fx = Fixtures::load(dir)?;
            for m in fx.models() {
                registry.insert(Arc::clone(m))?;
            }
        }
        Ok(Self {
            registry,
            cache: MappingCache::new(),
            fixture_dir: fixture_dir.map(Path::to_path_buf),
            default_seed: 0,
        })
    }

    pub fn with_fixture_dir(mut self, dir: PathBuf) -> Self {
        self.fixture_dir = Some(dir);
        self
    }

    pub fn with_default_seed(mut self, seed: u64) -> Self {
        self.default_seed = seed;
        self
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    pub fn models(&self) -> Vec<ModelInfo> {
        self.registry
            .iter()
            .map(|m| ModelInfo {
                model_id: m.model_id().to_string(),
                checksum: m.checksum(),
                config: m.config().clone(),
            })
            .collect()
    }

    pub fn tokenize(&self, req: &TokenizeRequest) -> Result<TokenizeResponse> {
        let m = self.registry.get_for(&req.model, "model")?;
        let ids = m.encode_prompt(&req.text);
        let tokens = ids.iter().map(|&id| token_string(m, id)).collect();
        Ok(TokenizeResponse { ids, tokens })
    }

    pub fn forward(&self, req: &ForwardRequest) -> Result<ForwardResponse> {
        let m = self.registry.get_for(&req.model, "model")?;
        if req.topk == 0 {
            return Err(Error::spec("topk", "topk must be at least 1"));
        }
        let ids = m.encode_prompt(&req.text);
        if ids.len() > m.config().max_seq {
            return Err(Error::spec("text", format!("{} tokens exceed max_seq {}", ids.len(), m.config().max_seq)));
        }
        let trace = forward(m, &ids, &ForwardOptions::default())?;
        let mut grid = Vec::with_capacity(m.n_layers() + 1);
        for l in 0..=m.n_layers() {
            let mut row = Vec::with_capacity(ids.len());
            for i in 0..ids.len() {
                let dist = project_to_vocab(m, &trace.state_vector(l, i))?;
                row.push(top_tokens(m, &dist, req.topk));
            }
            grid.push(row);
        }
        let tokens = ids.iter().map(|&id| token_string(m, id)).collect();
        Ok(ForwardResponse { ids, tokens, grid })
    }

    pub fn run(&self, req: &RunRequest) -> Result<RunResponse> {
        let m = self.registry.get_for(&req.model, "model")?;
        let ids = m.encode_prompt(&req.prompt);
        let tokens = ids.iter().map(|&id| token_string(m, id)).collect();
        if req.max_new == 0 {
            return Ok(RunResponse {
                ids,
                tokens,
                generated: None,
                generated_tokens: Vec::new(),
            });
        }
        let out = generate(m, &ids, req.max_new, &GenerateOptions::default())?;
        Ok(RunResponse {
            ids,
            tokens,
            generated: Some(m.detokenize(&out.new_tokens)),
            generated_tokens: out.new_tokens.iter().map(|&id| token_string(m, id)).collect(),
        })
    }

    /// Runs one Patchscope; relative `params_path`s resolve against `base`.
    pub fn patchscope(&self, req: &PatchscopeRequest, base: Option<&Path>) -> Result<PatchscopeResponse> {
        let mut cfg = req.config.clone();
        if let Some(n) = req.max_new {
            cfg.target.max_new = n;
        }
        let result = cfg.run(&self.registry, base)?;
        let m = self.registry.get_for(&cfg.target.model, "target.model")?;
        Ok(PatchscopeResponse {
            steps: result.output.steps.iter().map(|d| top_tokens(m, d, req.topk)).collect(),
            success: cfg.expect.as_deref().map(|a| contains_answer(&result.output.text, a)),
            text: result.output.text,
            tokens: result.output.tokens,
            token_strings: result.output.token_strings,
            patched: result.patched,
            provenance: result.provenance,
        })
    }

    pub fn grid(&self, req: &GridRequest, cancel: Option<&AtomicBool>) -> Result<Grid> {
        run_grid(&self.registry, &req.spec, &self.cache, cancel)
    }

    /// Builds the full experiment spec: the request's fixture directory or
    /// the lab's, and the lab's default seed when none is given.
    pub fn experiment_spec(&self, name: &str, req: &ExperimentRequest) -> Result<ExperimentSpec> {
        if !EXPERIMENTS.contains(&name) {
            return Err(Error::spec(
                "name",
                format!("unknown experiment {name:?}; known: {}", EXPERIMENTS.join(", ")),
            ));
        }
        let fixture_dir = req
            .fixture_dir
            .clone()
            .or_else(|| self.fixture_dir.clone())
            .ok_or_else(|| Error::spec("fixture_dir", "no fixture directory given and none configured"))?;
        Ok(ExperimentSpec {
            name: name.to_string(),
            fixture_dir,
            models: req.models.clone(),
            layers: req.layers.clone(),
            target_layers: req.target_layers.clone(),
            seed: req.seed.unwrap_or(self.default_seed),
            n_examples: req.n_examples,
            sigma: req.sigma,
            output: None,
        })
    }

    pub fn experiment(&self, name: &str, req: &ExperimentRequest) -> Result<Report> {
        let spec = self.experiment_spec(name, req)?;
        let fixtures = Fixtures::load(&spec.fixture_dir)?;
        run_with_fixtures(&spec, &fixtures)
    }

    pub fn fit_map(&self, req: &FitMapRequest) -> Result<FitMapResponse> {
        let src = self.registry.get_for(&req.source_model, "source_model")?;
        let tgt = self.registry.get_for(&req.target_model, "target_model")?;
        let pairs = collect_pairs(src, tgt, &req.corpus, req.layer, req.target_layer, &req.pairs)?;
        let mapping = fit_mapping(&pairs, req.ridge)?;
        let identity_residual = if src.d_model() == tgt.d_model() {
            Some(mapping_residual(&MappingSpec::Identity, &pairs)?)
        } else {
            None
        };
        Ok(FitMapResponse {
            residual: mapping_residual(&mapping, &pairs)?,
            n_pairs: pairs.len(),
            identity_residual,
            mapping,
        })
    }
}

/// Trains a model from scratch on `lines` and writes it to `out`.
pub fn train_job(lines: &[String], job: &TrainJob, out: &Path) -> Result<TrainSummary> {
    if lines.is_empty() {
        return Err(Error::Argument("training corpus is empty".into()));
    }
    let mut words: Vec<String> = lines
        .iter()
        .flat_map(|l| l.split_whitespace().map(str::to_lowercase))
        .collect();
    words.sort();
    words.dedup();
    let tokenizer = Tokenizer::from_tokens(TokenizerMode::Word, words)?;
    let mut cfg = ModelConfig::new(job.n_layers, job.d_model, job.n_heads, tokenizer.len(), job.max_seq);
    cfg.norm_kind = job.norm_kind;
    cfg.use_final_norm = job.use_final_norm;
    cfg.tie_embeddings = job.tie_embeddings;
    let init = ModelBundle::random(job.model_id.clone(), cfg, tokenizer, job.init_seed)?;
    let out_model = train_to_dir(&init, lines, &job.train, out)?;
    Ok(TrainSummary {
        model_id: job.model_id.clone(),
        checksum: out_model.model.checksum(),
        vocab_size: out_model.model.config().vocab_size,
        steps: out_model.curve.len(),
        first_loss: out_model.curve.first().copied(),
        final_loss: out_model.curve.last().copied(),
    })
}
