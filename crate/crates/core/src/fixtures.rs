//! Trained desk-scale models and the corpora they were trained on.
//!
//! A fixture directory looks like
//!
//! ```text
//! <dir>/recipe.json          the recipes below, serialized; a mismatch forces a rebuild
//! <dir>/copy/                identity-norm copy-task model
//! <dir>/fact48/              fact model, d = 48
//! <dir>/fact32/              fact model, d = 32, same corpus and tokenizer
//! <dir>/corpus/copy.txt      copy training lines
//! <dir>/corpus/copy_heldout.txt
//! <dir>/corpus/facts.txt     fact training lines
//! <dir>/corpus/probes.json   held-out paraphrase probes
//! <dir>/corpus/two_hop.json  held-out two-hop queries
//! <dir>/corpus/descriptions.tsv
//! <dir>/corpus/fact_corpus.json
//! ```
//!
//! Building takes a few minutes on one core; everything is a pure function
//! of the recipes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{gen_copy_corpus, gen_fact_corpus, FactCorpus, FactProbe, SyntheticCorpusSpec};
use crate::engine::{forward, ForwardOptions};
use crate::error::{Error, Result};
use crate::format::{load_model, save_model};
use crate::model::{ModelBundle, ModelConfig, NormKind};
use crate::tokenizer::{Tokenizer, TokenizerMode};
use crate::train::{train, TrainConfig};

pub const COPY: &str = "copy";
pub const FACT: &str = "fact48";
pub const FACT_SMALL: &str = "fact32";

const RECIPE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusRecipe {
    Copy { n_tokens: usize, n_lines: usize, n_heldout: usize, seed: u64, heldout_seed: u64 },
    Facts { n_countries: usize, n_persons: usize, two_hop_chains: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecipe {
    pub model_id: String,
    pub corpus: CorpusRecipe,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub norm_kind: NormKind,
    pub use_final_norm: bool,
    pub init_seed: u64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecipeFile {
    version: u32,
    models: Vec<ModelRecipe>,
}

fn copy_corpus() -> CorpusRecipe {
    CorpusRecipe::Copy {
        n_tokens: 15,
        n_lines: 2000,
        n_heldout: 200,
        seed: 1,
        heldout_seed: 99,
    }
}

fn fact_corpus() -> CorpusRecipe {
    CorpusRecipe::Facts {
        n_countries: 50,
        n_persons: 20,
        two_hop_chains: 40,
        seed: 7,
    }
}

fn schedule(steps: usize, weight_decay: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 16,
        lr: 3e-3,
        seed: 0,
        eval_every: 250,
        warmup: 100,
        cosine_decay: true,
        weight_decay,
        ..TrainConfig::default()
    }
}

/// The three fixture recipes in build order.
pub fn recipes() -> Vec<ModelRecipe> {
    vec![
        ModelRecipe {
            model_id: COPY.into(),
            corpus: copy_corpus(),
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            max_seq: 64,
            norm_kind: NormKind::Identity,
            use_final_norm: false,
            init_seed: 1,
            train: schedule(2000, 0.0),
        },
        ModelRecipe {
            model_id: FACT.into(),
            corpus: fact_corpus(),
            n_layers: 4,
            d_model: 48,
            n_heads: 4,
            max_seq: 64,
            norm_kind: NormKind::LayerNorm,
            use_final_norm: true,
            init_seed: 1,
            train: schedule(2500, 0.1),
        },
        ModelRecipe {
            model_id: FACT_SMALL.into(),
            corpus: fact_corpus(),
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            max_seq: 64,
            norm_kind: NormKind::LayerNorm,
            use_final_norm: true,
            init_seed: 2,
            train: schedule(2000, 0.1),
        },
    ]
}

/// Copy-task symbols: the first `n` lowercase letters.
pub fn copy_symbols(n: usize) -> Vec<String> {
    (0..n.min(26)).map(|i| char::from(b'a' + i as u8).to_string()).collect()
}

/// Training and held-out lines of one corpus recipe.
#[derive(Debug, Clone)]
pub enum BuiltCorpus {
    Copy { lines: Vec<String>, heldout: Vec<String>, vocab: Vec<String> },
    Facts(Box<FactCorpus>),
}

impl BuiltCorpus {
    pub fn build(recipe: &CorpusRecipe) -> Result<Self> {
        match *recipe {
            CorpusRecipe::Copy { n_tokens, n_lines, n_heldout, seed, heldout_seed } => {
                let symbols = copy_symbols(n_tokens);
                let lines = gen_copy_corpus(&symbols, n_lines, seed)?;
                let heldout = gen_copy_corpus(&symbols, n_heldout, heldout_seed)?;
                let mut vocab = symbols;
                vocab.push("→".into());
                vocab.push(";".into());
                Ok(BuiltCorpus::Copy { lines, heldout, vocab })
            }
            CorpusRecipe::Facts { n_countries, n_persons, two_hop_chains, seed } => {
                let mut spec = SyntheticCorpusSpec::standard(n_countries, n_persons, seed)?;
                spec.two_hop_chains = two_hop_chains;
                Ok(BuiltCorpus::Facts(Box::new(gen_fact_corpus(&spec)?)))
            }
        }
    }

    pub fn training_lines(&self) -> &[String] {
        match self {
            BuiltCorpus::Copy { lines, .. } => lines,
            BuiltCorpus::Facts(c) => &c.lines,
        }
    }

    pub fn vocab(&self) -> &[String] {
        match self {
            BuiltCorpus::Copy { vocab, .. } => vocab,
            BuiltCorpus::Facts(c) => &c.vocab,
        }
    }
}

/// Untrained model for a recipe.
pub fn initial_model(recipe: &ModelRecipe, corpus: &BuiltCorpus) -> Result<ModelBundle> {
    let tokenizer = Tokenizer::from_tokens(TokenizerMode::Word, corpus.vocab().iter().cloned())?;
    let mut cfg = ModelConfig::new(recipe.n_layers, recipe.d_model, recipe.n_heads, tokenizer.len(), recipe.max_seq);
    cfg.norm_kind = recipe.norm_kind;
    cfg.use_final_norm = recipe.use_final_norm;
    ModelBundle::random(recipe.model_id.clone(), cfg, tokenizer, recipe.init_seed)
}

/// Trains one recipe from scratch.
pub fn train_recipe(recipe: &ModelRecipe, corpus: &BuiltCorpus) -> Result<ModelBundle> {
    let init = initial_model(recipe, corpus)?;
    Ok(train(&init, corpus.training_lines(), &recipe.train)?.model)
}

/// Fraction of `tok →` positions whose greedy next token is `tok`.
pub fn copy_accuracy(bundle: &ModelBundle, lines: &[String]) -> Result<(usize, usize)> {
    let arrow = bundle
        .tokenizer()
        .id("→")
        .ok_or_else(|| Error::Config("model has no → token".into()))?;
    let (mut correct, mut total) = (0, 0);
    for line in lines {
        let ids = bundle.encode_prompt(line);
        let trace = forward(bundle, &ids, &ForwardOptions::default())?;
        for i in 1..ids.len().saturating_sub(1) {
            if ids[i] == arrow {
                total += 1;
                if trace.distribution(i).argmax() == ids[i - 1] {
                    correct += 1;
                }
            }
        }
    }
    Ok((correct, total))
}

/// Number of probes whose greedy next token is the object.
pub fn probe_accuracy(bundle: &ModelBundle, probes: &[FactProbe]) -> Result<(usize, usize)> {
    let mut correct = 0;
    for probe in probes {
        let ids = bundle.encode_prompt(&probe.prompt);
        let trace = forward(bundle, &ids, &ForwardOptions::default())?;
        let predicted = trace.distribution(ids.len() - 1).argmax();
        if bundle.tokenizer().id(&probe.object) == Some(predicted) {
            correct += 1;
        }
    }
    Ok((correct, probes.len()))
}

/// Loaded fixture set.
#[derive(Debug, Clone)]
pub struct Fixtures {
    pub dir: PathBuf,
    pub copy: Arc<ModelBundle>,
    pub fact: Arc<ModelBundle>,
    pub fact_small: Arc<ModelBundle>,
    pub copy_lines: Vec<String>,
    pub copy_heldout: Vec<String>,
    pub facts: FactCorpus,
}

impl Fixtures {
    pub fn models(&self) -> [&Arc<ModelBundle>; 3] {
        [&self.copy, &self.fact, &self.fact_small]
    }

    pub fn model(&self, id: &str) -> Result<&Arc<ModelBundle>> {
        self.models()
            .into_iter()
            .find(|m| m.model_id() == id)
            .ok_or_else(|| Error::spec("models", format!("no fixture model named {id:?}")))
    }

    /// Training and held-out text for a fixture model.
    pub fn corpus_for(&self, id: &str) -> Result<(&[String], Vec<String>)> {
        match id {
            COPY => Ok((&self.copy_lines, self.copy_heldout.clone())),
            FACT | FACT_SMALL => Ok((
                &self.facts.lines,
                self.facts.probes.iter().map(|p| format!("{} {}", p.prompt, p.object)).collect(),
            )),
            other => Err(Error::spec("models", format!("no fixture model named {other:?}"))),
        }
    }

    /// Loads a previously built fixture directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let need = |p: PathBuf| if p.exists() { Ok(p) } else { Err(Error::MissingFixture(p)) };
        let corpus = dir.join("corpus");
        let read_lines = |name: &str| -> Result<Vec<String>> {
            let path = need(corpus.join(name))?;
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(text.lines().map(str::to_string).collect())
        };
        let copy_lines = read_lines("copy.txt")?;
        let copy_heldout = read_lines("copy_heldout.txt")?;
        let fc_path = need(corpus.join("fact_corpus.json"))?;
        let text = fs::read_to_string(&fc_path).map_err(|e| Error::io(&fc_path, e))?;
        let facts: FactCorpus = serde_json::from_str(&text)?;
        let model = |id: &str| -> Result<Arc<ModelBundle>> { Ok(Arc::new(load_model(&need(dir.join(id))?)?)) };
        Ok(Fixtures {
            dir: dir.to_path_buf(),
            copy: model(COPY)?,
            fact: model(FACT)?,
            fact_small: model(FACT_SMALL)?,
            copy_lines,
            copy_heldout,
            facts,
        })
    }

    /// Loads `dir` if it holds fixtures built from the current recipes,
    /// otherwise builds them there first.
    pub fn ensure(dir: &Path) -> Result<Self> {
        let expected = serde_json::to_string_pretty(&RecipeFile {
            version: RECIPE_VERSION,
            models: recipes(),
        })?;
        if fs::read_to_string(dir.join("recipe.json")).ok().as_deref() == Some(expected.as_str()) {
            if let Ok(f) = Self::load(dir) {
                return Ok(f);
            }
        }
        build_into(dir, &expected)?;
        Self::load(dir)
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Builds into a scratch directory, then renames it into place so a
/// concurrent reader never sees a half-written set.
fn build_into(dir: &Path, recipe_json: &str) -> Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let scratch = parent.join(format!(
        ".{}-build-{}",
        dir.file_name().and_then(|s| s.to_str()).unwrap_or("fixtures"),
        std::process::id()
    ));
    let _ = fs::remove_dir_all(&scratch);
    let corpus_dir = scratch.join("corpus");
    fs::create_dir_all(&corpus_dir).map_err(|e| Error::io(&corpus_dir, e))?;

    for recipe in recipes() {
        let corpus = BuiltCorpus::build(&recipe.corpus)?;
        match &corpus {
            BuiltCorpus::Copy { lines, heldout, .. } => {
                write(&corpus_dir.join("copy.txt"), &(lines.join("\n") + "\n"))?;
                write(&corpus_dir.join("copy_heldout.txt"), &(heldout.join("\n") + "\n"))?;
            }
            BuiltCorpus::Facts(c) => {
                write(&corpus_dir.join("facts.txt"), &(c.lines.join("\n") + "\n"))?;
                write(&corpus_dir.join("probes.json"), &serde_json::to_string_pretty(&c.probes)?)?;
                let two_hop: Vec<_> = c
                    .two_hop
                    .iter()
                    .map(|q| serde_json::json!({"pi1": q.pi1, "pi2": q.pi2, "omega2": q.answer}))
                    .collect();
                write(&corpus_dir.join("two_hop.json"), &serde_json::to_string_pretty(&two_hop)?)?;
                write(&corpus_dir.join("descriptions.tsv"), &c.descriptions_tsv())?;
                write(&corpus_dir.join("fact_corpus.json"), &serde_json::to_string(c.as_ref())?)?;
            }
        }
        let model = train_recipe(&recipe, &corpus)?;
        save_model(&model, &scratch.join(&recipe.model_id))?;
    }
    write(&scratch.join("recipe.json"), recipe_json)?;

    let _ = fs::remove_dir_all(dir);
    if fs::rename(&scratch, dir).is_err() {
        // another builder won the race; its output is identical
        let _ = fs::remove_dir_all(&scratch);
    }
    Ok(())
}
