//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero only
//! when a criterion outside `KNOWN_UNATTAINABLE` fails.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use serde_json::{json, Value};

use pslab_core::engine::Distribution;
use pslab_core::fixtures::{copy_accuracy, probe_accuracy, recipes, train_recipe, BuiltCorpus, Fixtures, COPY};
use pslab_core::numerics::{least_squares_affine, Matrix, Rng};
use pslab_core::patchscope::{
    collect_pairs, mapping_residual, patch_generate, run_patchscope, MappingSpec, ModelRegistry, PairOptions,
    SourceSpec, TargetSpec,
};
use pslab_core::train::loss_and_grads_f64;
use pslab_core::zoo::{
    attention_knockout_experiment, causal_trace, cot_patchscope, lcs_len, logit_lens, precision_at_1, rouge,
    run_with_fixtures, single_token_prompt, single_token_readout, surprisal, token_identity_prompt,
    token_identity_readout, tuned_lens, CotMode, Report, RougeVariant, TunedLens,
};
use pslab_core::{
    forward, generate, ForwardOptions, GenerateOptions, ModelBundle, ModelConfig, NormKind, PatchPlan, Tokenizer,
    TokenizerMode, Vector,
};

/// Criteria that cannot hold as literally stated; they still run and print.
const KNOWN_UNATTAINABLE: &[&str] = &["endpoint anchors: surprisal <= 1e-6 at l = L"];

struct Line {
    name: String,
    pass: bool,
    detail: String,
}

fn line(name: &str, pass: bool, detail: impl Into<String>) -> Line {
    Line {
        name: name.to_string(),
        pass,
        detail: detail.into(),
    }
}

fn registry(fx: &Fixtures) -> ModelRegistry {
    let mut reg = ModelRegistry::new();
    for m in fx.models() {
        reg.insert(m.clone()).unwrap();
    }
    reg
}

fn max_abs_diff(a: &Vector, b: &Vector) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random prompts of at most `max_words` words drawn from a model's corpus.
fn prompts(fx: &Fixtures, model: &str, rng: &mut Rng, n: usize, max_words: usize) -> Vec<String> {
    let (_, heldout) = fx.corpus_for(model).unwrap();
    (0..n)
        .map(|_| {
            let words: Vec<&str> = heldout[rng.below(heldout.len())].split_whitespace().collect();
            let keep = rng.range_inclusive(1, words.len().min(max_words));
            words[..keep].join(" ")
        })
        .collect()
}

fn source(prompt: &str, model: &str, position: usize, layer: usize) -> SourceSpec {
    SourceSpec {
        prompt: prompt.into(),
        position: position as i64,
        model: model.into(),
        layer,
    }
}

fn target(prompt: &str, model: &str, position: i64, layer: usize, max_new: usize) -> TargetSpec {
    TargetSpec {
        prompt: prompt.into(),
        position,
        model: model.into(),
        layer,
        max_new,
        stop: Vec::new(),
    }
}

fn self_patch(fx: &Fixtures) -> Vec<Line> {
    let reg = registry(fx);
    let mut rng = Rng::new(101);
    let (mut ok, mut total, mut worst) = (0, 0, 0.0f64);
    for model in [COPY, "fact48"] {
        let m = reg.get(model).unwrap();
        for prompt in prompts(fx, model, &mut rng, 50, 20) {
            let ids = m.encode_prompt(&prompt);
            let i = rng.below(ids.len());
            let l = rng.range_inclusive(0, m.n_layers());
            let plain = generate(m, &ids, 5, &GenerateOptions::default()).unwrap();
            let r = run_patchscope(
                &reg,
                &source(&prompt, model, i, l),
                &MappingSpec::Identity,
                &target(&prompt, model, i as i64, l, 5),
            )
            .unwrap();
            let diff = max_abs_diff(&r.output.steps[0].probs, &plain.steps[0].probs);
            worst = worst.max(diff);
            total += 1;
            if r.output.tokens == plain.new_tokens && diff <= 1e-6 {
                ok += 1;
            }
        }
    }
    vec![line(
        "self-patch identity",
        ok == total,
        format!("{ok}/{total} cases identical, worst first-step diff {worst:.1e}"),
    )]
}

/// `softmax(W_U h)` with the engine's own arithmetic: f32 sequential dot
/// products, then a max-shifted softmax in f64.
fn unembed_oracle(m: &ModelBundle, h: &[f32]) -> Vector {
    let u = m.tensor("unembed").unwrap();
    let d = m.d_model();
    let logits: Vec<f64> = (0..m.config().vocab_size)
        .map(|t| {
            let mut acc = 0.0f32;
            for j in 0..d {
                acc += u[t * d + j] * h[j];
            }
            f64::from(acc)
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let mut sum = 0.0;
    for e in &exps {
        sum += e;
    }
    Vector(exps.into_iter().map(|e| e / sum).collect())
}

/// Layer norm with the final gain and bias, then unembedding, all in f64.
fn norm_unembed_oracle(m: &ModelBundle, h: &[f32]) -> Vector {
    let d = m.d_model();
    let g = m.tensor("final_norm.gamma").unwrap();
    let b = m.tensor("final_norm.beta").unwrap();
    let x: Vec<f64> = h.iter().map(|&v| f64::from(v)).collect();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + 1e-5).sqrt();
    let f: Vec<f64> = (0..d).map(|j| (x[j] - mean) * inv * f64::from(g[j]) + f64::from(b[j])).collect();
    let u = m.tensor("unembed").unwrap();
    let logits: Vec<f64> = (0..m.config().vocab_size)
        .map(|t| (0..d).map(|j| f64::from(u[t * d + j]) * f[j]).sum())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector(exps.into_iter().map(|e| e / sum).collect())
}

fn logit_lens_oracle(fx: &Fixtures) -> Vec<Line> {
    let reg = registry(fx);
    let mut rng = Rng::new(202);
    let mut out = Vec::new();
    for (model, exact) in [(COPY, true), ("fact48", false)] {
        let m = reg.get(model).unwrap();
        let top = m.n_layers();
        let (mut ok, mut worst) = (0, 0.0f64);
        let cases = prompts(fx, model, &mut rng, 100, 20);
        for prompt in &cases {
            let ids = m.encode_prompt(prompt);
            let i = rng.below(ids.len());
            let l = rng.range_inclusive(0, top);
            let trace = forward(m, &ids, &ForwardOptions::default()).unwrap();
            let h = trace.state(l, i);
            let want = if exact { unembed_oracle(m, h) } else { norm_unembed_oracle(m, h) };
            let r = run_patchscope(&reg, &source(prompt, model, i, l), &MappingSpec::Identity, &target("x", model, -1, top, 1))
                .unwrap();
            let got = &r.output.steps[0].probs;
            let diff = max_abs_diff(got, &want);
            worst = worst.max(diff);
            if (exact && *got == want) || (!exact && diff <= 1e-6) {
                ok += 1;
            }
        }
        let name = if exact {
            "logit-lens oracle: identity-norm fixture bit-exact"
        } else {
            "logit-lens oracle: normed fixture within 1e-6"
        };
        out.push(line(name, ok == cases.len(), format!("{ok}/{} on {model}, worst diff {worst:.1e}", cases.len())));
    }
    out
}

fn endpoint_anchors(fx: &Fixtures) -> Vec<Line> {
    let mut p_at_1 = Vec::new();
    let mut worst_surprisal = 0.0f64;
    let mut worst_gap = 0.0f64;
    let mut rng = Rng::new(303);
    for model in [COPY, "fact48"] {
        let m = fx.model(model).unwrap();
        let top = m.n_layers();
        let (train_lines, _) = fx.corpus_for(model).unwrap();
        let opts = PairOptions {
            limit: Some(500),
            ..PairOptions::default()
        };
        let lens = TunedLens::fit(m, train_lines, &[top], &opts, 1e-6).unwrap();
        let mut refs = Vec::new();
        let mut est: [Vec<Distribution>; 4] = Default::default();
        for prompt in prompts(fx, model, &mut rng, 50, 20) {
            let ids = m.encode_prompt(&prompt);
            let pos = ids.len() - 1;
            let trace = forward(m, &ids, &ForwardOptions::default()).unwrap();
            let h = trace.state_vector(top, pos);
            refs.push(trace.distribution(pos));
            est[0].push(logit_lens(m, &ids, pos, top).unwrap());
            est[1].push(tuned_lens(m, &ids, pos, top, &lens).unwrap());
            let identity = token_identity_prompt(m, rng.range_inclusive(1, 10), rng.next_u64()).unwrap();
            est[2].push(token_identity_readout(m, h.clone(), top, &identity).unwrap());
            let single = single_token_prompt(m, ids[pos], pos).unwrap();
            est[3].push(single_token_readout(m, h, top, &single).unwrap());
        }
        for (name, e) in ["logit_lens", "tuned_lens", "token_identity", "single_token"].iter().zip(&est) {
            p_at_1.push((format!("{model}/{name}"), precision_at_1(e, &refs).unwrap()));
            for (r, d) in refs.iter().zip(e) {
                let s = surprisal(r, d).unwrap();
                worst_surprisal = worst_surprisal.max(s);
                let own = -r.prob(r.argmax()).max(1e-12).ln();
                worst_gap = worst_gap.max((s - own).abs());
            }
        }
    }
    let min_p = p_at_1.iter().map(|(_, p)| *p).fold(1.0, f64::min);
    vec![
        line(
            "endpoint anchors: precision@1 = 1 at l = L",
            min_p == 1.0,
            format!("min over {} method/model pairs = {min_p}", p_at_1.len()),
        ),
        line(
            "endpoint anchors: surprisal <= 1e-6 at l = L",
            worst_surprisal <= 1e-6,
            format!(
                "max surprisal {worst_surprisal:.4}; at l = L it equals -ln max p^L, the reference's own top-token surprisal, which is zero only for one-hot references"
            ),
        ),
        line(
            "endpoint anchors: surprisal equals -ln max p^L at l = L",
            worst_gap <= 1e-12,
            format!("max |surprisal + ln max p^L| = {worst_gap:.1e}"),
        ),
    ]
}

fn tuned_lens_quality(fx: &Fixtures) -> Vec<Line> {
    let mut out = Vec::new();
    let m = &fx.copy;
    let top = m.n_layers();
    let layers: Vec<usize> = (0..top).collect();
    let (train_lines, heldout) = fx.corpus_for(COPY).unwrap();
    let opts = PairOptions {
        limit: Some(500),
        ..PairOptions::default()
    };
    let lens = TunedLens::fit(m, train_lines, &layers, &opts, 1e-6).unwrap();
    let mut details = Vec::new();
    let mut all_below = true;
    for &l in &layers {
        let pairs = collect_pairs(m, m, &heldout, l, top, &PairOptions { seed: 9, ..PairOptions::default() }).unwrap();
        let fitted = mapping_residual(lens.map(l).unwrap(), &pairs).unwrap();
        let identity = mapping_residual(&MappingSpec::Identity, &pairs).unwrap();
        all_below &= fitted < identity;
        details.push(format!("l={l}: {fitted:.4} vs {identity:.4}"));
    }
    out.push(line("tuned lens: held-out residual below identity for every l < L", all_below, details.join(", ")));

    let mut rng = Rng::new(404);
    let (d_in, d_out, n) = (6, 5, 60);
    let a = Matrix::new(d_out, d_in, (0..d_out * d_in).map(|_| rng.standard_normal()).collect()).unwrap();
    let b = Vector((0..d_out).map(|_| rng.standard_normal()).collect());
    let xs: Vec<Vector> = (0..n).map(|_| Vector((0..d_in).map(|_| rng.standard_normal()).collect())).collect();
    let ys: Vec<Vector> = xs
        .iter()
        .map(|x| {
            let ax = a.apply(x).unwrap();
            Vector(ax.0.iter().zip(&b.0).map(|(p, q)| p + q).collect())
        })
        .collect();
    let (a_hat, b_hat) = least_squares_affine(&xs, &ys, 0.0).unwrap();
    let err_a = a.data().iter().zip(a_hat.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let err = err_a.max(max_abs_diff(&b, &b_hat));
    out.push(line(
        "tuned lens: noiseless affine recovery within 1e-8",
        err <= 1e-8,
        format!("max parameter error {err:.1e}"),
    ));
    out
}

fn gradient_check() -> Vec<Line> {
    let words: Vec<String> = (0..14).map(|i| format!("t{i}")).collect();
    let tok = Tokenizer::from_tokens(TokenizerMode::Word, words).unwrap();
    let mut cfg = ModelConfig::new(2, 8, 2, tok.len(), 8);
    cfg.norm_kind = NormKind::LayerNorm;
    let base = ModelBundle::random("grad", cfg, tok, 3).unwrap();
    let scaled: Vec<f32> = base.params().iter().map(|v| v * 15.0).collect();
    let mut p = scaled;
    let mut rng = Rng::new(17);
    for t in base.layout().tensors() {
        if t.name.contains("gamma") || t.name.contains("beta") || t.name.contains("b_") {
            for x in &mut p[t.range()] {
                *x += (0.3 * rng.standard_normal()) as f32;
            }
        }
    }
    let m = base.with_params(p).unwrap();
    let batch = vec![vec![1, 4, 7, 9, 3, 12], vec![1, 16, 5, 5]];
    let params: Vec<f64> = m.params().iter().map(|&v| f64::from(v)).collect();
    let (_, analytic) = loss_and_grads_f64(&m, &params, &batch).unwrap();
    let loss = |x: &[f64]| loss_and_grads_f64(&m, x, &batch).unwrap().0;
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let mut x = params.clone();
    for i in 0..params.len() {
        x[i] = params[i] + eps;
        let up = loss(&x);
        x[i] = params[i] - eps;
        let down = loss(&x);
        x[i] = params[i];
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    vec![line(
        "gradient check (L=2, d=8, |V|=17)",
        worst <= 1e-3 && m.config().vocab_size == 17,
        format!("{} parameters, max relative error {worst:.1e}", params.len()),
    )]
}

fn trained_fixtures(fx: &Fixtures) -> Vec<Line> {
    let (c_ok, c_total) = copy_accuracy(&fx.copy, &fx.copy_heldout).unwrap();
    let (f_ok, f_total) = probe_accuracy(&fx.fact, &fx.facts.probes).unwrap();
    let (s_ok, s_total) = probe_accuracy(&fx.fact_small, &fx.facts.probes).unwrap();
    let sums = [fx.copy.checksum(), fx.fact.checksum(), fx.fact_small.checksum()];
    let pinned = [common::COPY_CHECKSUM, common::FACT_CHECKSUM, common::FACT_SMALL_CHECKSUM];

    let recipe = recipes().into_iter().find(|r| r.model_id == COPY).unwrap();
    let retrained = train_recipe(&recipe, &BuiltCorpus::build(&recipe.corpus).unwrap()).unwrap();

    vec![
        line(
            "fixtures: copy model identity completion >= 99%",
            c_ok as f64 >= 0.99 * c_total as f64,
            format!("{c_ok}/{c_total} held-out arrow positions"),
        ),
        line(
            "fixtures: fact model held-out paraphrase accuracy >= 99%",
            f_ok as f64 >= 0.99 * f_total as f64,
            format!("fact48 {f_ok}/{f_total} (fact32 {s_ok}/{s_total})"),
        ),
        line(
            "fixtures: deterministic under seed, checksums pinned",
            sums == pinned && retrained.checksum() == common::COPY_CHECKSUM,
            format!("checksums {sums:08x?}, copy retrained from scratch {:08x}", retrained.checksum()),
        ),
    ]
}

fn cot_equivalence(fx: &Fixtures) -> Vec<Line> {
    let m = &fx.fact;
    let layers: Vec<usize> = (0..=m.n_layers()).collect();
    let queries = &fx.facts.two_hop[..10];
    let mut same = 0;
    let mut cells = 0;
    for q in queries {
        let a = cot_patchscope(m, &q.pi1, &q.pi2, &layers, &layers, &q.answer, CotMode::TwoPass).unwrap();
        let b = cot_patchscope(m, &q.pi1, &q.pi2, &layers, &layers, &q.answer, CotMode::Masked).unwrap();
        cells += a.cells.len();
        if a == b {
            same += 1;
        }
    }
    vec![line(
        "CoT equivalence: two-pass equals masked one-pass",
        same == queries.len(),
        format!("{same}/{} queries identical over {cells} (l, l*) cells", queries.len()),
    )]
}

fn knockout_contract(fx: &Fixtures) -> Vec<Line> {
    let reg = registry(fx);
    let mut rng = Rng::new(505);
    let (mut edges, mut nonzero) = (0usize, 0usize);
    let (mut zero_ok, mut zero_total) = (0, 0);
    for model in [COPY, "fact48"] {
        let m = reg.get(model).unwrap();
        let heads = m.config().n_heads;
        for prompt in prompts(fx, model, &mut rng, 10, 20) {
            let ids = m.encode_prompt(&prompt);
            let n = ids.len();
            if n < 3 {
                continue;
            }
            let keys: Vec<usize> = (0..n - 1).filter(|_| rng.below(2) == 0).collect();
            let queries: Vec<usize> = (1..n).filter(|_| rng.below(2) == 0).collect();
            let layers: Vec<usize> = (1..=m.n_layers()).filter(|_| rng.below(2) == 0).collect();
            let plan = PatchPlan::empty().block(layers.clone(), queries.clone(), keys.clone());
            let trace = forward(m, &ids, &ForwardOptions::with_plan(plan)).unwrap();
            for &l in &layers {
                for h in 0..heads {
                    for &q in &queries {
                        for &k in keys.iter().filter(|&&k| k <= q) {
                            edges += 1;
                            if trace.attention(l, h, q, k) != 0.0 {
                                nonzero += 1;
                            }
                        }
                    }
                }
            }

            let i = rng.below(n);
            let l = rng.range_inclusive(0, m.n_layers());
            let src = source(&prompt, model, rng.below(n), rng.range_inclusive(0, m.n_layers()));
            let zeroed = run_patchscope(&reg, &src, &MappingSpec::Zero, &target(&prompt, model, i as i64, l, 4)).unwrap();
            let explicit = patch_generate(m, &ids, i, l, Vector::zeros(m.d_model()), 4, Vec::new()).unwrap();
            zero_total += 1;
            if zeroed.output.tokens == explicit.new_tokens && zeroed.output.steps == explicit.steps {
                zero_ok += 1;
            }
        }
    }
    let record = {
        let m = &fx.fact;
        let ids = m.encode_prompt("the capital of franconia is");
        attention_knockout_experiment(m, &ids, &[5], &[4], &[1, 2, 3, 4]).unwrap()
    };
    vec![
        line(
            "knockout: blocked edges carry exactly zero attention",
            nonzero == 0 && edges > 0,
            format!("{edges} blocked (layer, head, query, key) weights checked, {nonzero} nonzero; example delta {:.3}", record.blocked_delta),
        ),
        line(
            "knockout: zero mapping equals an explicit zero-vector patch",
            zero_ok == zero_total,
            format!("{zero_ok}/{zero_total} identical"),
        ),
    ]
}

fn causal_trace_anchors(fx: &Fixtures) -> Vec<Line> {
    let m = &fx.fact;
    let rel = fx.facts.relation("capital").unwrap();
    let subjects: Vec<&str> = fx.facts.facts.iter().filter(|f| f.relation == "capital").take(5).map(|f| f.subject.as_str()).collect();
    let sigma = 3.0 * m.embedding_std();
    let (mut flat, mut recover, mut degrade) = (0, 0, 0);
    for (k, s) in subjects.iter().enumerate() {
        let ids = m.encode_prompt(&rel.prompt(0, s));
        let subj = m.tokenize(s);
        let start = ids.windows(subj.len()).position(|w| w == subj.as_slice()).unwrap();
        let span = start..start + subj.len();
        let quiet = causal_trace(m, &ids, span.clone(), 0.0, k as u64).unwrap();
        if quiet.matrix.iter().flatten().all(|&v| v == quiet.baseline) {
            flat += 1;
        }
        let noisy = causal_trace(m, &ids, span, sigma, k as u64).unwrap();
        if noisy.matrix[m.n_layers()][ids.len() - 1] == noisy.baseline {
            recover += 1;
        }
        if noisy.corrupted < noisy.baseline {
            degrade += 1;
        }
    }
    let n = subjects.len();
    vec![
        line("causal trace: sigma = 0 matrix constant at baseline", flat == n, format!("{flat}/{n} prompts")),
        line("causal trace: cell (last, L) recovers the clean prediction", recover == n, format!("{recover}/{n} prompts")),
        line("causal trace: sigma = 3 x emb-std degrades the baseline", degrade == n, format!("{degrade}/{n} prompts")),
    ]
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn brute_lcs(a: &[&str], b: &[&str]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&str> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = b.iter();
        if sub.iter().all(|w| it.any(|x| x == w)) {
            best = sub.len();
        }
    }
    best
}

fn metric_oracles() -> Vec<Line> {
    let mut rng = Rng::new(606);
    let alphabet = ["a", "b", "c", "d", "e"];
    let mut ok = 0;
    for _ in 0..1000 {
        let seq = |rng: &mut Rng| -> Vec<&str> {
            let n = rng.range_inclusive(1, 9);
            (0..n).map(|_| alphabet[rng.below(alphabet.len())]).collect()
        };
        let c = seq(&mut rng);
        let r = seq(&mut rng);
        let lcs = brute_lcs(&c, &r);
        let p = lcs as f64 / c.len() as f64;
        let q = lcs as f64 / r.len() as f64;
        let f1 = if lcs == 0 { 0.0 } else { 2.0 * p * q / (p + q) };
        let got = rouge(&c.join(" "), &r.join(" "), RougeVariant::RougeL);
        if lcs_len(&c, &r) == lcs && got.f1 == f1 {
            ok += 1;
        }
    }
    let hand = rouge("the cat sat", "the cat", RougeVariant::RougeL).f1;
    let v = 174;
    let uniform = Distribution {
        probs: Vector(vec![1.0 / v as f64; v]),
    };
    let mut peaked = vec![0.0; v];
    peaked[17] = 1.0;
    let s = surprisal(&uniform, &Distribution { probs: Vector(peaked) }).unwrap();
    let gap = (s - (v as f64).ln()).abs();
    vec![
        line("metrics: rougeL equals brute-force LCS", ok == 1000, format!("{ok}/1000 sequence pairs exact")),
        line("metrics: hand case F1 = 0.8", (hand - 0.8).abs() <= 1e-12, format!("F1 = {hand}")),
        line("metrics: uniform surprisal = ln |V|", gap <= 1e-9, format!("|diff| = {gap:.1e}")),
    ]
}

fn goldens(fx: &Fixtures) -> Vec<Line> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    ["next_token_sweep", "attribute_extraction", "entity_resolution", "multihop"]
        .iter()
        .map(|name| {
            let path = dir.join(format!("{name}.json"));
            let text = std::fs::read_to_string(&path).unwrap();
            let golden: Report = serde_json::from_str(&text).unwrap();
            let rerun = run_with_fixtures(&golden.config, fx).unwrap().to_json().unwrap();
            line(
                &format!("golden: {name} byte-reproducible from its echoed config"),
                rerun == text,
                format!("{} bytes", text.len()),
            )
        })
        .collect()
}

/// Ten seeded request configurations across the four shared operations.
fn parity_configs(fx: &Fixtures) -> Vec<(&'static str, Value)> {
    let mut rng = Rng::new(707);
    let kinds = ["patchscope", "forward", "grid", "experiment"];
    (0..10)
        .map(|k| {
            let kind = kinds[k % kinds.len()];
            let model = [COPY, "fact48", "fact32"][rng.below(3)];
            let m = fx.model(model).unwrap();
            let top = m.n_layers();
            let prompt = prompts(fx, model, &mut rng, 1, 12).remove(0);
            let n = m.encode_prompt(&prompt).len();
            let body = match kind {
                "patchscope" => json!({
                    "source": {"prompt": prompt, "model": model, "position": rng.below(n), "layer": rng.range_inclusive(0, top)},
                    "mapping": {"kind": (["identity", "zero"][rng.below(2)])},
                    "target": {"prompt": prompts(fx, model, &mut rng, 1, 12)[0], "model": model, "layer": rng.range_inclusive(0, top), "max_new": rng.range_inclusive(1, 6)},
                    "topk": rng.range_inclusive(1, 5)
                }),
                "forward" => json!({"model": model, "text": prompt, "topk": rng.range_inclusive(1, 5)}),
                "grid" => json!({
                    "source": {"prompt": prompt, "model": model},
                    "target": {"prompt": prompts(fx, model, &mut rng, 1, 12)[0], "model": model},
                    "source_layers": [rng.range_inclusive(0, top), rng.range_inclusive(0, top)],
                    "target_layers": [rng.range_inclusive(0, top), rng.range_inclusive(0, top)],
                    "scorer": {"kind": (["argmax_match", "surprisal"][rng.below(2)])}
                }),
                _ => json!({
                    "name": (["knockout", "causal_trace"][rng.below(2)]),
                    "n_examples": rng.range_inclusive(1, 3),
                    "seed": rng.below(1000)
                }),
            };
            (kind, body)
        })
        .collect()
}

fn parity(fx: &Fixtures) -> Vec<Line> {
    let dir = common::scratch("acceptance-parity");
    let fxd = common::fixture_dir();
    let fxs = fxd.to_str().unwrap();
    let mut same = 0;
    let mut failures = Vec::new();
    let configs = parity_configs(fx);
    for (k, (kind, body)) in configs.iter().enumerate() {
        let (http, cli) = match *kind {
            "forward" => {
                let topk = body["topk"].to_string();
                let cli = common::cli_json(&[
                    "forward", body["model"].as_str().unwrap(), body["text"].as_str().unwrap(), "--topk", &topk, "--fixtures", fxs,
                ]);
                (common::post("/v1/forward", body), cli)
            }
            "patchscope" => {
                let path = common::write_json(&dir, &format!("{k}.json"), body);
                let cli = common::cli_json(&["patch", path.to_str().unwrap(), "--json", "--fixtures", fxs]);
                (common::post("/v1/patchscope", body), cli)
            }
            "grid" => {
                let path = common::write_json(&dir, &format!("{k}.json"), body);
                let cli = common::cli_json(&["grid", path.to_str().unwrap(), "--fixtures", fxs]);
                (common::post("/v1/grid", body), cli)
            }
            _ => {
                let name = body["name"].as_str().unwrap();
                let spec = json!({"n_examples": body["n_examples"], "seed": body["seed"]});
                let path = common::write_json(&dir, &format!("{k}.json"), &spec);
                let cli = common::cli_json(&["experiment", name, path.to_str().unwrap(), "--fixtures", fxs]);
                (common::post(&format!("/v1/experiments/{name}"), &spec), cli)
            }
        };
        if http.0 == 200 && http.1 == cli {
            same += 1;
        } else {
            failures.push(format!("#{k} {kind}"));
        }
    }
    let mut detail = format!("{same}/{} randomized configs identical", configs.len());
    if !failures.is_empty() {
        detail.push_str(&format!("; differing: {}", failures.join(", ")));
    }
    vec![line("CLI/HTTP parity", same == configs.len(), detail)]
}

fn main() -> ExitCode {
    let start = Instant::now();
    let fx = common::fixtures();
    let groups: Vec<Box<dyn Fn() -> Vec<Line>>> = vec![
        Box::new(|| self_patch(fx)),
        Box::new(|| logit_lens_oracle(fx)),
        Box::new(|| endpoint_anchors(fx)),
        Box::new(|| tuned_lens_quality(fx)),
        Box::new(gradient_check),
        Box::new(|| trained_fixtures(fx)),
        Box::new(|| cot_equivalence(fx)),
        Box::new(|| knockout_contract(fx)),
        Box::new(|| causal_trace_anchors(fx)),
        Box::new(metric_oracles),
        Box::new(|| goldens(fx)),
        Box::new(|| parity(fx)),
    ];
    let mut unexpected = Vec::new();
    let mut known = 0;
    for run in &groups {
        for l in run() {
            println!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
            if !l.pass {
                if KNOWN_UNATTAINABLE.contains(&l.name.as_str()) {
                    known += 1;
                } else {
                    unexpected.push(l.name);
                }
            }
        }
    }
    println!(
        "acceptance finished in {:.0?}: {} unexpected failure(s), {known} known-unattainable failure(s)",
        start.elapsed(),
        unexpected.len()
    );
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("unexpected failures: {}", unexpected.join("; "));
        ExitCode::FAILURE
    }
}
