//! Ready-made Patchscope configurations.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityDescription, EXTRA_TOKENS};
use crate::engine::{forward, generate, Distribution, ForwardOptions, GenerateOptions};
use crate::error::{Error, Result};
use crate::intervention::{AttentionMask, PatchPlan};
use crate::model::ModelBundle;
use crate::numerics::{Rng, Vector};
use crate::patchscope::{collect_pairs, contains_answer, fit_mapping, patch_generate, MappingSpec, PairOptions};
use crate::tokenizer::PAD_ID;

/// Tokens generated when looking for an answer.
pub const ANSWER_TOKENS: usize = 20;
/// Token budget of an entity description.
pub const DESCRIPTION_TOKENS: usize = 40;
/// The placeholder token of feature-extraction and description templates.
pub const PLACEHOLDER: &str = "x";
pub const COT_PREFIX: &str = "Let's think step by step.";

/// `tok₁ → tok₁ ; … ; tok_k`, the last token left open for the patch.
pub fn token_identity_prompt(bundle: &ModelBundle, k: usize, seed: u64) -> Result<String> {
    if !(1..=10).contains(&k) {
        return Err(Error::Argument(format!("k must lie in 1..=10, got {k}")));
    }
    let tok = bundle.tokenizer();
    let pool: Vec<&str> = tok
        .content_ids()
        .filter_map(|id| tok.token(id))
        .filter(|t| !EXTRA_TOKENS.contains(t))
        .collect();
    if pool.is_empty() {
        return Err(Error::Config("vocabulary has no content tokens".into()));
    }
    let mut rng = Rng::new(seed);
    let picks: Vec<&str> = if pool.len() >= k {
        rng.sample_distinct(pool.len(), k).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..k).map(|_| pool[rng.below(pool.len())]).collect()
    };
    let mut parts: Vec<String> = picks[..k - 1].iter().map(|t| format!("{t} → {t}")).collect();
    parts.push(picks[k - 1].to_string());
    Ok(parts.join(" ; "))
}

/// `[pad] × p` followed by one token, so that token sits at position `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleTokenPrompt {
    pub tokens: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub patch_position: usize,
}

pub fn single_token_prompt(bundle: &ModelBundle, token: usize, source_position: usize) -> Result<SingleTokenPrompt> {
    if source_position >= bundle.config().max_seq {
        return Err(Error::Argument(format!(
            "position {source_position} beyond max_seq {}",
            bundle.config().max_seq
        )));
    }
    let mut tokens = vec![PAD_ID; source_position];
    tokens.push(token);
    Ok(SingleTokenPrompt {
        tokens,
        position_ids: (0..=source_position).collect(),
        patch_position: source_position,
    })
}

/// First-step distribution after writing `value` at `(L, position)` of
/// `prefix` (which must end at `position`).
pub(crate) fn final_layer_readout(bundle: &ModelBundle, prefix: &[usize], value: Vector) -> Result<Distribution> {
    let position = prefix.len() - 1;
    let out = patch_generate(bundle, prefix, position, bundle.n_layers(), value, 1, Vec::new())?;
    Ok(out.steps.into_iter().next().expect("one step"))
}

fn state(bundle: &ModelBundle, ids: &[usize], position: usize, layer: usize) -> Result<Vector> {
    if position >= ids.len() {
        return Err(Error::spec("position", format!("{position} outside 0..{}", ids.len())));
    }
    if layer > bundle.n_layers() {
        return Err(Error::spec("layer", format!("{layer} exceeds {}", bundle.n_layers())));
    }
    let trace = forward(bundle, &ids[..=position], &ForwardOptions::default())?;
    Ok(trace.state_vector(layer, position))
}

/// Identity mapping, `ℓ* = L`: the model's own readout applied to `h_i^ℓ`.
pub fn logit_lens(bundle: &ModelBundle, ids: &[usize], position: usize, layer: usize) -> Result<Distribution> {
    let h = state(bundle, ids, position, layer)?;
    final_layer_readout(bundle, &ids[..=position], h)
}

/// Per-layer affine maps `h^ℓ → h^L`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TunedLens {
    pub maps: BTreeMap<usize, MappingSpec>,
}

impl TunedLens {
    /// Fits one map per layer on last-position pairs of randomly truncated lines.
    pub fn fit(bundle: &ModelBundle, corpus: &[String], layers: &[usize], opts: &PairOptions, ridge: f64) -> Result<Self> {
        let mut maps = BTreeMap::new();
        for &l in layers {
            let pairs = collect_pairs(bundle, bundle, corpus, l, bundle.n_layers(), opts)?;
            maps.insert(l, fit_mapping(&pairs, ridge)?);
        }
        Ok(TunedLens { maps })
    }

    pub fn map(&self, layer: usize) -> Result<&MappingSpec> {
        self.maps
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("tuned lens has no mapping for layer {layer}")))
    }
}

/// Affine mapping `A^ℓ h + b^ℓ`, `ℓ* = L`.
pub fn tuned_lens(bundle: &ModelBundle, ids: &[usize], position: usize, layer: usize, lens: &TunedLens) -> Result<Distribution> {
    let map = lens.map(layer)?;
    let h = state(bundle, ids, position, layer)?;
    let fh = map.apply(&h, bundle.d_model())?;
    final_layer_readout(bundle, &ids[..=position], fh)
}

/// First-step distribution of the token-identity Patchscope (`ℓ* = ℓ`).
pub fn token_identity_readout(bundle: &ModelBundle, h: Vector, layer: usize, target_prompt: &str) -> Result<Distribution> {
    let ids = bundle.encode_prompt(target_prompt);
    let out = patch_generate(bundle, &ids, ids.len() - 1, layer, h, 1, Vec::new())?;
    Ok(out.steps.into_iter().next().expect("one step"))
}

/// First-step distribution of the single-token-prompt baseline (`ℓ* = ℓ`).
pub fn single_token_readout(bundle: &ModelBundle, h: Vector, layer: usize, prompt: &SingleTokenPrompt) -> Result<Distribution> {
    let plan = PatchPlan::empty().patch(layer, prompt.patch_position, h);
    let mut opts = GenerateOptions::with_plan(plan);
    opts.forward.position_ids = Some(prompt.position_ids.clone());
    let out = generate(bundle, &prompt.tokens, 1, &opts)?;
    Ok(out.steps.into_iter().next().expect("one step"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGeneration {
    pub target_layer: usize,
    pub text: String,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtraction {
    /// Some target layer produced the answer.
    pub success: bool,
    pub generations: Vec<LayerGeneration>,
}

/// Position of the single placeholder in an encoded template.
pub fn placeholder_position(bundle: &ModelBundle, ids: &[usize]) -> Result<usize> {
    let x = bundle
        .tokenizer()
        .id(PLACEHOLDER)
        .ok_or_else(|| Error::Template(format!("placeholder {PLACEHOLDER:?} is not in the vocabulary")))?;
    let hits: Vec<usize> = ids.iter().enumerate().filter(|(_, &t)| t == x).map(|(i, _)| i).collect();
    match hits.as_slice() {
        [p] => Ok(*p),
        [] => Err(Error::Template(format!("template has no {PLACEHOLDER:?}"))),
        _ => Err(Error::Template(format!("template has {} {PLACEHOLDER:?} tokens", hits.len()))),
    }
}

/// Writes `h_i^ℓ` of the source over the template's `x` at each `ℓ*` and
/// checks whether the next 20 tokens contain `answer`.
#[allow(clippy::too_many_arguments)]
pub fn feature_extraction_patchscope(
    bundle: &ModelBundle,
    source_ids: &[usize],
    subject_position: usize,
    template: &str,
    layer: usize,
    target_layers: &[usize],
    answer: &str,
) -> Result<FeatureExtraction> {
    let target = bundle.encode_prompt(template);
    let x = placeholder_position(bundle, &target)?;
    let h = state(bundle, source_ids, subject_position, layer)?;
    extract_with_vector(bundle, &h, &target, x, target_layers, answer)
}

/// [`feature_extraction_patchscope`] for an already-extracted vector.
pub fn extract_with_vector(
    bundle: &ModelBundle,
    h: &Vector,
    target: &[usize],
    x: usize,
    target_layers: &[usize],
    answer: &str,
) -> Result<FeatureExtraction> {
    let known = answer.split_whitespace().all(|w| bundle.tokenizer().id(&w.to_lowercase()).is_some());
    let mut generations = Vec::with_capacity(target_layers.len());
    for &ls in target_layers {
        let out = patch_generate(bundle, target, x, ls, h.clone(), ANSWER_TOKENS, Vec::new())?;
        let text = bundle.detokenize(&out.new_tokens);
        let success = known && contains_answer(&text, answer);
        generations.push(LayerGeneration {
            target_layer: ls,
            text,
            success,
        });
    }
    Ok(FeatureExtraction {
        success: generations.iter().any(|g| g.success),
        generations,
    })
}

/// `s₁ : d₁ , s₂ : d₂ , s₃ : d₃ , x`.
pub fn description_prompt(demos: &[EntityDescription]) -> String {
    let mut parts: Vec<String> = demos.iter().map(|d| format!("{} : {}", d.entity, d.description)).collect();
    parts.push(PLACEHOLDER.into());
    parts.join(" , ")
}

/// Last-token state of `entity` written over `x` with `ℓ* = ℓ`; generation
/// stops at "," or after 40 tokens (fewer when the context window runs out).
/// A leading ":" is dropped.
pub fn entity_description_patchscope(bundle: &ModelBundle, entity: &str, demos: &[EntityDescription], layer: usize) -> Result<String> {
    if entity.trim().is_empty() {
        return Err(Error::Argument("entity is empty".into()));
    }
    if demos.is_empty() {
        return Err(Error::Argument("description prompt needs demonstrations".into()));
    }
    let source = bundle.encode_prompt(entity);
    let h = state(bundle, &source, source.len() - 1, layer)?;
    describe_vector(bundle, h, demos, layer)
}

/// Description generated from a ready vector at `ℓ*`.
pub fn describe_vector(bundle: &ModelBundle, h: Vector, demos: &[EntityDescription], target_layer: usize) -> Result<String> {
    let target = bundle.encode_prompt(&description_prompt(demos));
    let x = placeholder_position(bundle, &target)?;
    let stop: Vec<usize> = bundle.tokenizer().id(",").into_iter().collect();
    let room = (bundle.config().max_seq + 1).saturating_sub(target.len()).max(1);
    let out = patch_generate(bundle, &target, x, target_layer, h, DESCRIPTION_TOKENS.min(room), stop.clone())?;
    let mut tokens = out.new_tokens;
    if tokens.last().is_some_and(|t| stop.contains(t)) {
        tokens.pop();
    }
    let text = bundle.detokenize(&tokens);
    Ok(text.strip_prefix(':').unwrap_or(&text).trim().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalTrace {
    pub clean_token: usize,
    pub baseline: f64,
    pub corrupted: f64,
    /// `matrix[ℓ][i]`: probability of the clean token after restoring `h_i^ℓ`.
    pub matrix: Vec<Vec<f64>>,
}

/// Corrupts the span's embeddings with `N(0, σ²)` and restores one clean
/// state at a time.
pub fn causal_trace(bundle: &ModelBundle, ids: &[usize], span: Range<usize>, sigma: f64, seed: u64) -> Result<CausalTrace> {
    let n = ids.len();
    if span.start >= span.end || span.end > n {
        return Err(Error::Argument(format!("span {span:?} outside a prompt of {n} tokens")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Argument(format!("sigma must be >= 0, got {sigma}")));
    }
    let clean = forward(bundle, ids, &ForwardOptions::default())?;
    let clean_dist = clean.distribution(n - 1);
    let clean_token = clean_dist.argmax();
    let corruption = PatchPlan::empty().corrupt(span.collect(), sigma, seed);
    let run = |plan: PatchPlan| -> Result<f64> {
        let t = forward(bundle, ids, &ForwardOptions::with_plan(plan))?;
        Ok(t.distribution(n - 1).prob(clean_token))
    };
    let corrupted = run(corruption.clone())?;
    let mut matrix = Vec::with_capacity(bundle.n_layers() + 1);
    for l in 0..=bundle.n_layers() {
        let mut row = Vec::with_capacity(n);
        for i in 0..n {
            row.push(run(corruption.clone().patch(l, i, clean.state_vector(l, i)))?);
        }
        matrix.push(row);
    }
    Ok(CausalTrace {
        clean_token,
        baseline: clean_dist.prob(clean_token),
        corrupted,
        matrix,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutRecord {
    pub clean_token: usize,
    pub clean_prob: f64,
    pub blocked_prob: f64,
    pub blocked_delta: f64,
    pub blocked_token: usize,
    pub zeroed_prob: f64,
    pub zeroed_delta: f64,
    pub zeroed_token: usize,
}

/// Two ablations of the edges `queries × keys` over `layers`: blocking the
/// attention edges (blocks `1..=L` only), and zeroing the key positions'
/// residual states (`f = 0`) at every listed layer.
pub fn attention_knockout_experiment(
    bundle: &ModelBundle,
    ids: &[usize],
    queries: &[usize],
    keys: &[usize],
    layers: &[usize],
) -> Result<KnockoutRecord> {
    let n = ids.len();
    let clean = forward(bundle, ids, &ForwardOptions::default())?.distribution(n - 1);
    let clean_token = clean.argmax();
    let readout = |plan: PatchPlan| -> Result<Distribution> {
        Ok(forward(bundle, ids, &ForwardOptions::with_plan(plan))?.distribution(n - 1))
    };
    let block_layers: Vec<usize> = layers.iter().copied().filter(|&l| l >= 1).collect();
    let blocked = if queries.is_empty() || keys.is_empty() || block_layers.is_empty() {
        clean.clone()
    } else {
        readout(PatchPlan::empty().block(block_layers, queries.to_vec(), keys.to_vec()))?
    };
    let d = bundle.d_model();
    let mut zero_plan = PatchPlan::empty();
    for &l in layers {
        for &k in keys {
            zero_plan = zero_plan.patch(l, k, Vector::zeros(d));
        }
    }
    let zeroed = if zero_plan.is_empty() { clean.clone() } else { readout(zero_plan)? };
    let clean_prob = clean.prob(clean_token);
    Ok(KnockoutRecord {
        clean_token,
        clean_prob,
        blocked_prob: blocked.prob(clean_token),
        blocked_delta: blocked.prob(clean_token) - clean_prob,
        blocked_token: blocked.argmax(),
        zeroed_prob: zeroed.prob(clean_token),
        zeroed_delta: zeroed.prob(clean_token) - clean_prob,
        zeroed_token: zeroed.argmax(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotMode {
    /// Extract from a pass on `π₁`, patch into a pass on `π₂`.
    TwoPass,
    /// One sequence `[π₂][π₁]` with mutually blind segments, position ids
    /// restarting at 0 in `π₁`, and generation that sees only `π₂`.
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotCell {
    pub layer: usize,
    pub target_layer: usize,
    pub tokens: Vec<usize>,
    pub text: String,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotResult {
    pub success: bool,
    pub cells: Vec<CotCell>,
}

/// `S ← π₁, i ← last, T ← π₂, i* ← last`, over every `(ℓ, ℓ*)`.
pub fn cot_patchscope(
    bundle: &ModelBundle,
    pi1: &str,
    pi2: &str,
    layers: &[usize],
    target_layers: &[usize],
    answer: &str,
    mode: CotMode,
) -> Result<CotResult> {
    if pi1.trim().is_empty() || pi2.trim().is_empty() {
        return Err(Error::Argument("both hops need a non-empty prompt".into()));
    }
    let s = bundle.encode_prompt(pi1);
    let t = bundle.encode_prompt(pi2);
    let (n1, m) = (s.len(), t.len());
    let mut cells = Vec::new();
    match mode {
        CotMode::TwoPass => {
            let source = forward(bundle, &s, &ForwardOptions::default())?;
            for &l in layers {
                for &ls in target_layers {
                    let h = source.state_vector(l, n1 - 1);
                    let out = patch_generate(bundle, &t, m - 1, ls, h, ANSWER_TOKENS, Vec::new())?;
                    cells.push(cot_cell(bundle, l, ls, out.new_tokens, answer));
                }
            }
        }
        CotMode::Masked => {
            let joined: Vec<usize> = t.iter().chain(&s).copied().collect();
            let position_ids: Vec<usize> = (0..m).chain(0..n1).collect();
            let mask = AttentionMask::isolated_segments(m, n1);
            let clean = forward(
                bundle,
                &joined,
                &ForwardOptions {
                    mask: Some(mask.clone()),
                    position_ids: Some(position_ids.clone()),
                    plan: PatchPlan::empty(),
                },
            )?;
            let visible: Vec<bool> = (0..m + n1).map(|k| k < m).collect();
            for &l in layers {
                for &ls in target_layers {
                    let h = clean.state_vector(l, m + n1 - 1);
                    let opts = GenerateOptions {
                        forward: ForwardOptions {
                            mask: Some(mask.clone()),
                            position_ids: Some(position_ids.clone()),
                            plan: PatchPlan::empty().patch(ls, m - 1, h),
                        },
                        continuation_visible: Some(visible.clone()),
                        continuation_start: Some(m),
                        first_step_position: Some(m - 1),
                        ..GenerateOptions::default()
                    };
                    let out = generate(bundle, &joined, ANSWER_TOKENS, &opts)?;
                    cells.push(cot_cell(bundle, l, ls, out.new_tokens, answer));
                }
            }
        }
    }
    Ok(CotResult {
        success: cells.iter().any(|c| c.success),
        cells,
    })
}

fn cot_cell(bundle: &ModelBundle, layer: usize, target_layer: usize, tokens: Vec<usize>, answer: &str) -> CotCell {
    let text = bundle.detokenize(&tokens);
    CotCell {
        layer,
        target_layer,
        success: contains_answer(&text, answer),
        tokens,
        text,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultihopBaselines {
    pub vanilla: bool,
    pub vanilla_text: String,
    pub cot_prompt: bool,
    pub cot_text: String,
}

/// Greedy answers to `[π₂][π₁]`, with and without the CoT preamble.
pub fn multihop_baselines(bundle: &ModelBundle, pi1: &str, pi2: &str, answer: &str) -> Result<MultihopBaselines> {
    let vanilla_prompt = format!("{pi2} {pi1}");
    let run = |prompt: &str| -> Result<String> {
        let ids = bundle.encode_prompt(prompt);
        let out = generate(bundle, &ids, ANSWER_TOKENS, &GenerateOptions::default())?;
        Ok(bundle.detokenize(&out.new_tokens))
    };
    let vanilla_text = run(&vanilla_prompt)?;
    let cot_text = run(&format!("{COT_PREFIX} {vanilla_prompt}"))?;
    Ok(MultihopBaselines {
        vanilla: contains_answer(&vanilla_text, answer),
        vanilla_text,
        cot_prompt: contains_answer(&cot_text, answer),
        cot_text,
    })
}
