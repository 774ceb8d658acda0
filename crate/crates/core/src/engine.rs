//! Decoder-only transformer forward pass with full residual tracing,
//! explicit position ids, arbitrary causal masks, interventions and
//! KV-cached greedy generation.
//!
//! Block `ℓ` (1-based) reads `states[ℓ-1]` and writes `states[ℓ]`:
//!
//! ```text
//! x ← x + Attn(norm1(x))
//! x ← x + W_out·gelu(W_in·norm2(x) + b_in) + b_out
//! ```
//!
//! Residual patches for layer `ℓ` overwrite `states[ℓ][i]` right after block
//! `ℓ` finishes, so block `ℓ+1` (and every key/value it caches) sees the
//! patched value while keys/values at layers `≤ ℓ` keep the original
//! computation.

use std::collections::{HashMap, HashSet};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::{AttentionMask, PatchPlan};
use crate::kernels::{self, c, RowStats};
use crate::model::{ModelBundle, ModelConfig, NormKind, ParamLayout};
use crate::numerics::{softmax_slice, Vector};

/// Borrowed view of a parameter buffer in any float precision.
#[derive(Clone, Copy)]
pub(crate) struct Weights<'a, T> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a ParamLayout,
    pub params: &'a [T],
}

impl<'a> Weights<'a, f32> {
    pub fn of(bundle: &'a ModelBundle) -> Self {
        Self {
            cfg: bundle.config(),
            layout: bundle.layout(),
            params: bundle.params(),
        }
    }
}

impl<'a, T> Weights<'a, T> {
    pub fn get(&self, idx: usize) -> &'a [T] {
        self.layout.get(self.params, idx)
    }

    pub fn get_opt(&self, idx: Option<usize>) -> Option<&'a [T]> {
        self.layout.get_opt(self.params, idx)
    }
}

pub(crate) fn norm_rows<T: Float>(
    kind: NormKind,
    x: &[T],
    d: usize,
    gamma: Option<&[T]>,
    beta: Option<&[T]>,
) -> (Vec<T>, Vec<RowStats<T>>) {
    match kind {
        NormKind::Identity => (x.to_vec(), Vec::new()),
        NormKind::LayerNorm => {
            let (g, b) = (gamma.expect("gamma"), beta.expect("beta"));
            let mut out = vec![T::zero(); x.len()];
            let stats = x
                .chunks(d)
                .zip(out.chunks_mut(d))
                .map(|(xr, or)| kernels::layer_norm_row(xr, g, b, or))
                .collect();
            (out, stats)
        }
        NormKind::RmsNorm => {
            let g = gamma.expect("gamma");
            let mut out = vec![T::zero(); x.len()];
            let stats = x
                .chunks(d)
                .zip(out.chunks_mut(d))
                .map(|(xr, or)| kernels::rms_norm_row(xr, g, or))
                .collect();
            (out, stats)
        }
    }
}

/// Final normalisation (when configured) followed by the unembedding for
/// each row of `x`.
pub(crate) fn final_logits<T: Float>(w: &Weights<'_, T>, x: &[T]) -> (Vec<T>, Vec<T>, Vec<RowStats<T>>) {
    let d = w.cfg.d_model;
    let (f, stats) = if w.cfg.use_final_norm {
        norm_rows(w.cfg.norm_kind, x, d, w.get_opt(w.layout.final_g), w.get_opt(w.layout.final_b))
    } else {
        (x.to_vec(), Vec::new())
    };
    let unembed = w.get(w.layout.unembed);
    let v = w.cfg.vocab_size;
    let rows = x.len() / d;
    let mut logits = vec![T::zero(); rows * v];
    for r in 0..rows {
        let fr = &f[r * d..(r + 1) * d];
        for t in 0..v {
            logits[r * v + t] = kernels::dot(&unembed[t * d..(t + 1) * d], fr);
        }
    }
    (logits, f, stats)
}

/// Which keys a query may read, combining the prompt mask, the visibility
/// of prompt keys for continuation rows and per-layer blocked edges.
#[derive(Debug, Clone, Default)]
pub(crate) struct Control {
    prompt_len: usize,
    mask: Option<AttentionMask>,
    continuation_visible: Option<Vec<bool>>,
    blocked: Vec<HashSet<(usize, usize)>>,
    patches: HashMap<(usize, usize), Vec<f64>>,
    noise: HashMap<usize, Vec<f64>>,
}

impl Control {
    pub fn causal() -> Self {
        Self::default()
    }

    fn build(
        cfg: &ModelConfig,
        prompt_len: usize,
        mask: Option<&AttentionMask>,
        continuation_visible: Option<&[bool]>,
        plan: &PatchPlan,
    ) -> Result<Self> {
        plan.validate(cfg.n_layers, cfg.d_model, prompt_len)?;
        if let Some(m) = mask {
            if m.len() != prompt_len {
                return Err(Error::Mask(format!(
                    "mask covers {} positions, prompt has {prompt_len}",
                    m.len()
                )));
            }
        }
        if let Some(v) = continuation_visible {
            if v.len() != prompt_len {
                return Err(Error::Mask(format!(
                    "continuation visibility covers {} positions, prompt has {prompt_len}",
                    v.len()
                )));
            }
        }
        let mut patches = HashMap::new();
        for p in &plan.residual {
            patches.insert((p.layer, p.position), p.value.0.clone());
        }
        let noise = match &plan.corruption {
            Some(c) => c.noise(cfg.d_model)?.into_iter().collect(),
            None => HashMap::new(),
        };
        let blocked = if plan.attention.is_empty() {
            Vec::new()
        } else {
            plan.blocked_edges(cfg.n_layers)
        };
        Ok(Self {
            prompt_len,
            mask: mask.cloned(),
            continuation_visible: continuation_visible.map(<[bool]>::to_vec),
            blocked,
            patches,
            noise,
        })
    }

    #[inline]
    fn allowed(&self, layer: usize, q: usize, k: usize) -> bool {
        if k > q {
            return false;
        }
        let base = if q < self.prompt_len {
            self.mask.as_ref().is_none_or(|m| m.allows(q, k))
        } else if k < self.prompt_len {
            self.continuation_visible.as_ref().is_none_or(|v| v[k])
        } else {
            true
        };
        base && self.blocked.get(layer).is_none_or(|b| !b.contains(&(q, k)))
    }
}

/// Activations kept for the backward pass (one entry per block).
pub(crate) struct LayerCache<T> {
    pub a: Vec<T>,
    pub stats1: Vec<RowStats<T>>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// `[head][row][key]`
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub x_mid: Vec<T>,
    pub m: Vec<T>,
    pub stats2: Vec<RowStats<T>>,
    pub u: Vec<T>,
    pub g: Vec<T>,
}

pub(crate) struct ForwardCache<T> {
    pub layers: Vec<LayerCache<T>>,
    pub final_in: Vec<T>,
    pub final_out: Vec<T>,
    pub final_stats: Vec<RowStats<T>>,
}

pub(crate) struct ChunkOut<T> {
    /// `L+1` entries of `[rows × d]`.
    pub states: Vec<Vec<T>>,
    /// `L` entries of `[head][row][key]` over all keys seen so far.
    pub attn: Vec<Vec<T>>,
    pub logits: Vec<T>,
    pub cache: Option<ForwardCache<T>>,
}

/// Incremental forward state: per-layer key/value cache plus the control
/// block. Processing the whole prompt as one chunk is the plain forward.
pub(crate) struct Pass<'a, T> {
    w: Weights<'a, T>,
    ctrl: Control,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<'a, T: Float> Pass<'a, T> {
    pub fn new(w: Weights<'a, T>, ctrl: Control) -> Self {
        let l = w.cfg.n_layers;
        Self {
            w,
            ctrl,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            len: 0,
        }
    }

    pub fn run(&mut self, tokens: &[usize], positions: &[usize], record: bool) -> Result<ChunkOut<T>> {
        let cfg = self.w.cfg;
        let d = cfg.d_model;
        let r = tokens.len();
        let start = self.len;
        let heads = cfg.n_heads;
        let dh = cfg.d_head;
        let dff = cfg.d_ff();
        let scale = c::<T>(1.0 / (dh as f64).sqrt());

        let tok_emb = self.w.get(self.w.layout.tok_emb);
        let pos_emb = self.w.get(self.w.layout.pos_emb);
        let mut x = vec![T::zero(); r * d];
        for (ri, (&tok, &pos)) in tokens.iter().zip(positions).enumerate() {
            if tok >= cfg.vocab_size {
                return Err(Error::Argument(format!("token id {tok} outside vocabulary")));
            }
            if pos >= cfg.max_seq {
                return Err(Error::Length(format!(
                    "position id {pos} exceeds max_seq {}",
                    cfg.max_seq
                )));
            }
            let row = &mut x[ri * d..(ri + 1) * d];
            let te = &tok_emb[tok * d..(tok + 1) * d];
            let pe = &pos_emb[pos * d..(pos + 1) * d];
            for j in 0..d {
                row[j] = te[j] + pe[j];
            }
            if let Some(noise) = self.ctrl.noise.get(&(start + ri)) {
                for j in 0..d {
                    row[j] = row[j] + c::<T>(noise[j]);
                }
            }
        }
        self.apply_patches(0, start, &mut x);

        let mut states = Vec::with_capacity(cfg.n_layers + 1);
        states.push(x.clone());
        let mut attn = Vec::with_capacity(cfg.n_layers);
        let mut layer_caches = Vec::new();
        let total = start + r;

        for l in 0..cfg.n_layers {
            let slots = &self.w.layout.layers[l];
            let (a, stats1) = norm_rows(
                cfg.norm_kind,
                &x,
                d,
                self.w.get_opt(slots.norm1_g),
                self.w.get_opt(slots.norm1_b),
            );
            let q = kernels::matmul(&a, r, d, self.w.get(slots.w_q), d);
            let k = kernels::matmul(&a, r, d, self.w.get(slots.w_k), d);
            let v = kernels::matmul(&a, r, d, self.w.get(slots.w_v), d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let keys = &self.keys[l];
            let values = &self.values[l];

            let mut ctx = vec![T::zero(); r * d];
            let mut probs = vec![T::zero(); heads * r * total];
            let mut scores: Vec<T> = Vec::with_capacity(total);
            let mut idx: Vec<usize> = Vec::with_capacity(total);
            for ri in 0..r {
                let qa = start + ri;
                for h in 0..heads {
                    let qh = &q[ri * d + h * dh..ri * d + (h + 1) * dh];
                    scores.clear();
                    idx.clear();
                    for kj in 0..=qa {
                        if !self.ctrl.allowed(l + 1, qa, kj) {
                            continue;
                        }
                        let kh = &keys[kj * d + h * dh..kj * d + (h + 1) * dh];
                        scores.push(kernels::dot(qh, kh) * scale);
                        idx.push(kj);
                    }
                    if scores.is_empty() {
                        continue;
                    }
                    kernels::softmax_in_place(&mut scores);
                    let prow = &mut probs[(h * r + ri) * total..(h * r + ri + 1) * total];
                    let crow = &mut ctx[ri * d + h * dh..ri * d + (h + 1) * dh];
                    for (&p, &kj) in scores.iter().zip(&idx) {
                        prow[kj] = p;
                        let vh = &values[kj * d + h * dh..kj * d + (h + 1) * dh];
                        for (cv, &vv) in crow.iter_mut().zip(vh) {
                            *cv = *cv + p * vv;
                        }
                    }
                }
            }
            let o = kernels::matmul(&ctx, r, d, self.w.get(slots.w_o), d);
            let x_mid: Vec<T> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
            let (m, stats2) = norm_rows(
                cfg.norm_kind,
                &x_mid,
                d,
                self.w.get_opt(slots.norm2_g),
                self.w.get_opt(slots.norm2_b),
            );
            let mut u = kernels::matmul(&m, r, d, self.w.get(slots.w_in), dff);
            kernels::add_bias(&mut u, self.w.get(slots.b_in));
            let g: Vec<T> = u.iter().map(|&z| kernels::gelu(z)).collect();
            let mut y = kernels::matmul(&g, r, dff, self.w.get(slots.w_out), d);
            kernels::add_bias(&mut y, self.w.get(slots.b_out));
            x = x_mid.iter().zip(&y).map(|(&a, &b)| a + b).collect();
            self.apply_patches(l + 1, start, &mut x);
            states.push(x.clone());

            if record {
                layer_caches.push(LayerCache {
                    a,
                    stats1,
                    q,
                    k,
                    v,
                    probs: probs.clone(),
                    ctx,
                    x_mid,
                    m,
                    stats2,
                    u,
                    g,
                });
            }
            attn.push(probs);
        }

        let (logits, final_out, final_stats) = final_logits(&self.w, &x);
        self.len = total;
        let cache = record.then(|| ForwardCache {
            layers: layer_caches,
            final_in: x,
            final_out,
            final_stats,
        });
        Ok(ChunkOut {
            states,
            attn,
            logits,
            cache,
        })
    }

    fn apply_patches(&self, layer: usize, start: usize, x: &mut [T]) {
        if self.ctrl.patches.is_empty() {
            return;
        }
        let d = self.w.cfg.d_model;
        let rows = x.len() / d;
        for ri in 0..rows {
            if let Some(v) = self.ctrl.patches.get(&(layer, start + ri)) {
                for (dst, &src) in x[ri * d..(ri + 1) * d].iter_mut().zip(v) {
                    *dst = c::<T>(src);
                }
            }
        }
    }
}

/// Probability distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub probs: Vector,
}

impl Distribution {
    pub fn from_logits(logits: &[f32]) -> Self {
        let wide: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
        Self {
            probs: Vector(softmax_slice(&wide)),
        }
    }

    pub fn len(&self) -> usize {
        self.probs.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.dim() == 0
    }

    pub fn prob(&self, id: usize) -> f64 {
        self.probs.0[id]
    }

    /// Highest-probability id; ties go to the lowest id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.0.iter().enumerate() {
            if p > self.probs.0[best] {
                best = i;
            }
        }
        best
    }

    /// `(id, prob)` sorted by descending probability then ascending id.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let mut ids: Vec<usize> = (0..self.len()).collect();
        ids.sort_by(|&a, &b| {
            self.probs.0[b]
                .partial_cmp(&self.probs.0[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        ids.truncate(k);
        ids.into_iter().map(|i| (i, self.probs.0[i])).collect()
    }
}

/// Every residual-stream state of one pass plus attention weights and logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    n_layers: usize,
    n_heads: usize,
    len: usize,
    d_model: usize,
    vocab: usize,
    states: Vec<Vec<f32>>,
    attn: Vec<Vec<f32>>,
    logits: Vec<f32>,
}

impl HiddenTrace {
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// `h_i^ℓ` for `ℓ ∈ 0..=L`.
    pub fn state(&self, layer: usize, position: usize) -> &[f32] {
        &self.states[layer][position * self.d_model..(position + 1) * self.d_model]
    }

    pub fn state_vector(&self, layer: usize, position: usize) -> Vector {
        Vector::from_f32(self.state(layer, position))
    }

    /// Attention weight of block `layer` (1-based).
    pub fn attention(&self, layer: usize, head: usize, query: usize, key: usize) -> f32 {
        self.attn[layer - 1][(head * self.len + query) * self.len + key]
    }

    pub fn logits(&self, position: usize) -> &[f32] {
        &self.logits[position * self.vocab..(position + 1) * self.vocab]
    }

    pub fn distribution(&self, position: usize) -> Distribution {
        Distribution::from_logits(self.logits(position))
    }

    pub fn all_finite(&self) -> bool {
        self.states.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub mask: Option<AttentionMask>,
    pub position_ids: Option<Vec<usize>>,
    pub plan: PatchPlan,
}

impl ForwardOptions {
    pub fn with_plan(plan: PatchPlan) -> Self {
        Self {
            plan,
            ..Self::default()
        }
    }
}

fn resolve_positions(tokens: &[usize], position_ids: Option<&[usize]>) -> Result<Vec<usize>> {
    match position_ids {
        Some(p) if p.len() != tokens.len() => Err(Error::Argument(format!(
            "{} position ids for {} tokens",
            p.len(),
            tokens.len()
        ))),
        Some(p) => Ok(p.to_vec()),
        None => Ok((0..tokens.len()).collect()),
    }
}

fn to_trace(cfg: &ModelConfig, n: usize, out: ChunkOut<f32>) -> HiddenTrace {
    HiddenTrace {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        len: n,
        d_model: cfg.d_model,
        vocab: cfg.vocab_size,
        states: out.states,
        attn: out.attn,
        logits: out.logits,
    }
}

/// Runs one pass over `tokens` and records every residual state.
pub fn forward(bundle: &ModelBundle, tokens: &[usize], opts: &ForwardOptions) -> Result<HiddenTrace> {
    if tokens.is_empty() {
        return Err(Error::Argument("empty token sequence".into()));
    }
    let cfg = bundle.config();
    let positions = resolve_positions(tokens, opts.position_ids.as_deref())?;
    let ctrl = Control::build(cfg, tokens.len(), opts.mask.as_ref(), None, &opts.plan)?;
    let mut pass = Pass::new(Weights::of(bundle), ctrl);
    let out = pass.run(tokens, &positions, false)?;
    Ok(to_trace(cfg, tokens.len(), out))
}

/// `softmax(W_U · norm(h))`, the model's own readout applied to `h`.
pub fn project_to_vocab(bundle: &ModelBundle, h: &Vector) -> Result<Distribution> {
    let d = bundle.d_model();
    if h.dim() != d {
        return Err(Error::Shape(format!("vector of dim {} for model width {d}", h.dim())));
    }
    let x = h.to_f32();
    let (logits, _, _) = final_logits(&Weights::of(bundle), &x);
    Ok(Distribution::from_logits(&logits))
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub forward: ForwardOptions,
    /// Which prompt keys generated tokens may attend to (default: all).
    pub continuation_visible: Option<Vec<bool>>,
    /// Position id of the first generated token (default: last prompt id + 1).
    pub continuation_start: Option<usize>,
    /// Prompt position whose logits choose the first new token
    /// (default: the last prompt position).
    pub first_step_position: Option<usize>,
    /// Generation halts after emitting any of these ids.
    pub stop_tokens: Vec<usize>,
    /// Keep the prompt pass trace in the result.
    pub keep_trace: bool,
}

impl GenerateOptions {
    pub fn with_plan(plan: PatchPlan) -> Self {
        Self {
            forward: ForwardOptions::with_plan(plan),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub prompt_tokens: Vec<usize>,
    pub new_tokens: Vec<usize>,
    /// Next-token distribution that produced each new token.
    pub steps: Vec<Distribution>,
    pub trace: Option<HiddenTrace>,
}

fn first_position(n: usize, requested: Option<usize>) -> Result<usize> {
    match requested {
        Some(p) if p >= n => Err(Error::Argument(format!(
            "first-step position {p} outside prompt of length {n}"
        ))),
        Some(p) => Ok(p),
        None => Ok(n - 1),
    }
}

/// Greedy decoding (lowest id on ties) with a key/value cache. Interventions
/// act on the prompt pass only and persist through the cache.
pub fn generate(bundle: &ModelBundle, tokens: &[usize], max_new: usize, opts: &GenerateOptions) -> Result<GenerationResult> {
    if tokens.is_empty() {
        return Err(Error::Argument("empty token sequence".into()));
    }
    let cfg = bundle.config();
    let positions = resolve_positions(tokens, opts.forward.position_ids.as_deref())?;
    let next_pos = opts
        .continuation_start
        .unwrap_or_else(|| positions.last().map_or(0, |p| p + 1));
    if max_new > 1 && next_pos + max_new - 2 >= cfg.max_seq {
        return Err(Error::Length(format!(
            "generating {max_new} tokens from position {next_pos} overflows max_seq {}",
            cfg.max_seq
        )));
    }
    let ctrl = Control::build(
        cfg,
        tokens.len(),
        opts.forward.mask.as_ref(),
        opts.continuation_visible.as_deref(),
        &opts.forward.plan,
    )?;
    let n = tokens.len();
    let first = first_position(n, opts.first_step_position)?;
    let mut pass = Pass::new(Weights::of(bundle), ctrl);
    let out = pass.run(tokens, &positions, false)?;
    let v = cfg.vocab_size;
    let mut dist = Distribution::from_logits(&out.logits[first * v..(first + 1) * v]);
    let trace = opts.keep_trace.then(|| to_trace(cfg, n, out));

    let mut new_tokens = Vec::with_capacity(max_new);
    let mut steps = Vec::with_capacity(max_new);
    for step in 0..max_new {
        let next = dist.argmax();
        new_tokens.push(next);
        steps.push(dist);
        if step + 1 == max_new || opts.stop_tokens.contains(&next) {
            break;
        }
        let out = pass.run(&[next], &[next_pos + step], false)?;
        dist = Distribution::from_logits(&out.logits);
    }
    Ok(GenerationResult {
        prompt_tokens: tokens.to_vec(),
        new_tokens,
        steps,
        trace,
    })
}

/// Generation oracle without a cache: re-runs the whole sequence each step.
pub fn generate_recompute(bundle: &ModelBundle, tokens: &[usize], max_new: usize, opts: &GenerateOptions) -> Result<GenerationResult> {
    let cfg = bundle.config();
    let n = tokens.len();
    let positions = resolve_positions(tokens, opts.forward.position_ids.as_deref())?;
    let next_pos = opts
        .continuation_start
        .unwrap_or_else(|| positions.last().map_or(0, |p| p + 1));
    let ctrl = Control::build(
        cfg,
        n,
        opts.forward.mask.as_ref(),
        opts.continuation_visible.as_deref(),
        &opts.forward.plan,
    )?;
    let first = first_position(n, opts.first_step_position)?;
    let mut seq = tokens.to_vec();
    let mut pos = positions;
    let mut new_tokens = Vec::new();
    let mut steps = Vec::new();
    for step in 0..max_new {
        let mut pass = Pass::new(Weights::of(bundle), ctrl.clone());
        let out = pass.run(&seq, &pos, false)?;
        let last = if step == 0 { first } else { seq.len() - 1 };
        let v = cfg.vocab_size;
        let dist = Distribution::from_logits(&out.logits[last * v..(last + 1) * v]);
        let next = dist.argmax();
        new_tokens.push(next);
        steps.push(dist);
        if opts.stop_tokens.contains(&next) {
            break;
        }
        seq.push(next);
        pos.push(next_pos + step);
    }
    Ok(GenerationResult {
        prompt_tokens: tokens.to_vec(),
        new_tokens,
        steps,
        trace: None,
    })
}
