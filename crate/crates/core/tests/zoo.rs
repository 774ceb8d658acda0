mod common;

use pslab_core::corpus::EntityDescription;
use pslab_core::numerics::Rng;
use pslab_core::patchscope::PairOptions;
use pslab_core::tokenizer::PAD_ID;
use pslab_core::zoo::*;
use pslab_core::{forward, project_to_vocab, Error, ForwardOptions, Vector};

#[test]
fn token_identity_prompt_shapes() {
    let fx = common::fixtures();
    let one = token_identity_prompt(&fx.copy, 1, 4).unwrap();
    assert_eq!(one.split_whitespace().count(), 1);
    let three = token_identity_prompt(&fx.copy, 3, 4).unwrap();
    assert_eq!(three, token_identity_prompt(&fx.copy, 3, 4).unwrap());
    let words: Vec<&str> = three.split_whitespace().collect();
    assert_eq!(words.len(), 9);
    assert_eq!((words[1], words[3], words[0] == words[2]), ("→", ";", true));
    assert!(matches!(token_identity_prompt(&fx.copy, 0, 1), Err(Error::Argument(_))));
    assert!(matches!(token_identity_prompt(&fx.copy, 11, 1), Err(Error::Argument(_))));
}

#[test]
fn single_token_prompt_pads_to_the_source_position() {
    let fx = common::fixtures();
    let p0 = single_token_prompt(&fx.copy, 7, 0).unwrap();
    assert_eq!((p0.tokens, p0.patch_position), (vec![7], 0));
    let p5 = single_token_prompt(&fx.copy, 7, 5).unwrap();
    assert_eq!(p5.tokens, vec![PAD_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID, 7]);
    assert_eq!(p5.position_ids, vec![0, 1, 2, 3, 4, 5]);
    assert!(single_token_prompt(&fx.copy, 7, 64).is_err());
}

#[test]
fn logit_lens_at_the_top_is_the_model_distribution() {
    let fx = common::fixtures();
    let ids = fx.copy.encode_prompt("a b c → a b");
    let own = forward(&fx.copy, &ids, &ForwardOptions::default()).unwrap().distribution(ids.len() - 1);
    let lens = logit_lens(&fx.copy, &ids, ids.len() - 1, fx.copy.n_layers()).unwrap();
    assert_eq!(lens, own);
}

#[test]
fn tuned_lens_behaviour() {
    let fx = common::fixtures();
    let lines = &fx.copy_lines[..300];
    let top = fx.copy.n_layers();
    let lens = TunedLens::fit(&fx.copy, lines, &[0, top], &PairOptions::default(), 1e-6).unwrap();
    let ids = fx.copy.encode_prompt("d e f → d");
    let tuned = tuned_lens(&fx.copy, &ids, ids.len() - 1, top, &lens).unwrap();
    let plain = logit_lens(&fx.copy, &ids, ids.len() - 1, top).unwrap();
    let diff = tuned.probs.0.iter().zip(&plain.probs.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-5, "{diff}");
    assert!(matches!(tuned_lens(&fx.copy, &ids, 2, 1, &lens), Err(Error::Config(_))));
}

#[test]
fn top_layer_readouts_reduce_to_projection() {
    let fx = common::fixtures();
    let ids = fx.copy.encode_prompt("g h → g");
    let trace = forward(&fx.copy, &ids, &ForwardOptions::default()).unwrap();
    let h = trace.state_vector(2, ids.len() - 1);
    let want = project_to_vocab(&fx.copy, &h).unwrap();
    let prompt = token_identity_prompt(&fx.copy, 4, 9).unwrap();
    assert_eq!(token_identity_readout(&fx.copy, h.clone(), 2, &prompt).unwrap().argmax(), want.argmax());
    let single = single_token_prompt(&fx.copy, ids[ids.len() - 1], ids.len() - 1).unwrap();
    assert_eq!(single_token_readout(&fx.copy, h, 2, &single).unwrap().argmax(), want.argmax());
}

#[test]
fn placeholder_checks() {
    let fx = common::fixtures();
    let m = &fx.fact;
    assert_eq!(placeholder_position(m, &m.encode_prompt("the capital of x is")).unwrap(), 4);
    assert!(matches!(placeholder_position(m, &m.encode_prompt("the capital of is")), Err(Error::Template(_))));
    assert!(matches!(placeholder_position(m, &m.encode_prompt("x of x")), Err(Error::Template(_))));
    assert!(matches!(placeholder_position(&fx.copy, &fx.copy.encode_prompt("a b")), Err(Error::Template(_))));
}

#[test]
fn feature_extraction_on_franconia() {
    let fx = common::fixtures();
    let m = &fx.fact;
    let ids = m.encode_prompt("the language of franconia");
    let layers: Vec<usize> = (1..=m.n_layers()).collect();
    let r = feature_extraction_patchscope(m, &ids, ids.len() - 1, "the capital of x is", 2, &layers, "halden").unwrap();
    assert_eq!(r.generations.len(), layers.len());
    assert_eq!(r.success, r.generations.iter().any(|g| g.success));
    let again = feature_extraction_patchscope(m, &ids, ids.len() - 1, "the capital of x is", 2, &layers, "halden").unwrap();
    assert_eq!(again, r);
    let absent = feature_extraction_patchscope(m, &ids, ids.len() - 1, "the capital of x is", 2, &layers, "atlantis").unwrap();
    assert!(!absent.success);
}

#[test]
fn object_embedding_over_a_bare_placeholder_continues_the_object() {
    let fx = common::fixtures();
    let m = &fx.fact;
    let ids = m.encode_prompt("halden");
    let r = feature_extraction_patchscope(m, &ids, 1, "x", 0, &[0], "halden").unwrap();
    let plain = pslab_core::generate(m, &ids, ANSWER_TOKENS, &Default::default()).unwrap();
    assert_eq!(r.generations[0].text, m.detokenize(&plain.new_tokens));
}

#[test]
fn probe_on_shuffled_labels_is_near_chance() {
    let fx = common::fixtures();
    let m = &fx.fact;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let classes = ["a", "b", "c", "d"];
    let mut rng = Rng::new(11);
    for (k, f) in fx.facts.facts.iter().take(120).enumerate() {
        let ids = m.encode_prompt(&f.subject);
        xs.push(forward(m, &ids, &ForwardOptions::default()).unwrap().state_vector(2, ids.len() - 1));
        ys.push(classes[(k + rng.below(4)) % 4].to_string());
    }
    let acc = cross_validate(&xs, &ys, &ProbeConfig::default()).unwrap();
    assert!((acc - 0.25).abs() <= 0.15, "{acc}");
}

#[test]
fn entity_descriptions() {
    let fx = common::fixtures();
    let demos: Vec<EntityDescription> = fx.facts.descriptions[1..4].to_vec();
    let target = &fx.facts.descriptions[0];
    let l = fx.fact.n_layers() - 1;
    let text = entity_description_patchscope(&fx.fact, &target.entity, &demos, l).unwrap();
    assert_eq!(text, entity_description_patchscope(&fx.fact, &target.entity, &demos, l).unwrap());
    assert!(!text.contains(','));
    assert!(rouge(&text, &target.description, RougeVariant::Rouge1).f1 > 0.0, "{text:?}");
    assert!(matches!(entity_description_patchscope(&fx.fact, " ", &demos, l), Err(Error::Argument(_))));
    let prompt = description_prompt(&demos);
    assert!(prompt.ends_with(", x"));
    assert_eq!(prompt.matches(" : ").count(), 3);
}

fn capital_prompt() -> (Vec<usize>, std::ops::Range<usize>) {
    let fx = common::fixtures();
    (fx.fact.encode_prompt("the capital of franconia is"), 4..5)
}

#[test]
fn causal_trace_anchors() {
    let fx = common::fixtures();
    let (ids, span) = capital_prompt();
    let quiet = causal_trace(&fx.fact, &ids, span.clone(), 0.0, 1).unwrap();
    assert_eq!(quiet.corrupted, quiet.baseline);
    assert!(quiet.matrix.iter().flatten().all(|&v| v == quiet.baseline));
    let noisy = causal_trace(&fx.fact, &ids, span.clone(), 3.0 * fx.fact.embedding_std(), 1).unwrap();
    assert!(noisy.corrupted < noisy.baseline);
    assert_eq!(noisy.matrix[fx.fact.n_layers()][ids.len() - 1], noisy.baseline);
    assert_eq!(noisy.matrix.len(), fx.fact.n_layers() + 1);
    assert!(matches!(causal_trace(&fx.fact, &ids, 3..9, 1.0, 1), Err(Error::Argument(_))));
}

#[test]
fn knockout_records() {
    let fx = common::fixtures();
    let m = &fx.fact;
    let (ids, span) = capital_prompt();
    let layers: Vec<usize> = (1..=m.n_layers()).collect();
    let empty = attention_knockout_experiment(m, &ids, &[], &[], &layers).unwrap();
    assert_eq!((empty.blocked_delta, empty.zeroed_delta), (0.0, 0.0));
    let queries: Vec<usize> = (span.end..ids.len()).collect();
    let keys: Vec<usize> = span.collect();
    let r = attention_knockout_experiment(m, &ids, &queries, &keys, &layers).unwrap();
    assert!(r.blocked_delta < 0.0);
    let last = ids.len() - 1;
    let all: Vec<usize> = (0..=m.n_layers()).collect();
    let z = attention_knockout_experiment(m, &ids, &[], &[last], &all).unwrap();
    assert_eq!(z.zeroed_token, project_to_vocab(m, &Vector::zeros(m.d_model())).unwrap().argmax());
}

#[test]
fn cot_modes_agree() {
    let fx = common::fixtures();
    let q = &fx.facts.two_hop[0];
    let layers: Vec<usize> = (0..=fx.fact.n_layers()).collect();
    let a = cot_patchscope(&fx.fact, &q.pi1, &q.pi2, &layers, &layers, &q.answer, CotMode::TwoPass).unwrap();
    let b = cot_patchscope(&fx.fact, &q.pi1, &q.pi2, &layers, &layers, &q.answer, CotMode::Masked).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.cells.len(), layers.len() * layers.len());
    assert!(matches!(cot_patchscope(&fx.fact, "", &q.pi2, &[0], &[0], "x", CotMode::TwoPass), Err(Error::Argument(_))));
}

#[test]
fn cot_reduces_to_feature_extraction_when_the_source_names_the_bridge() {
    let fx = common::fixtures();
    let q = &fx.facts.two_hop[0];
    let m = &fx.fact;
    let cot = cot_patchscope(m, &q.bridge, &q.pi2, &[1], &[0], &q.answer, CotMode::TwoPass).unwrap();
    let ids = m.encode_prompt(&q.bridge);
    let mut words: Vec<&str> = q.pi2.split_whitespace().collect();
    *words.last_mut().unwrap() = "x";
    let fe = feature_extraction_patchscope(m, &ids, ids.len() - 1, &words.join(" "), 1, &[0], &q.answer).unwrap();
    assert_eq!(cot.cells[0].text, fe.generations[0].text);
}

#[test]
fn multihop_baselines_run_the_concatenation() {
    let fx = common::fixtures();
    let q = &fx.facts.two_hop[0];
    let b = multihop_baselines(&fx.fact, &q.pi1, &q.pi2, &q.answer).unwrap();
    assert_eq!(b.vanilla, pslab_core::patchscope::contains_answer(&b.vanilla_text, &q.answer));
    assert!(!b.vanilla_text.is_empty() && !b.cot_text.is_empty());
}

#[test]
fn unknown_experiment_and_missing_fixtures() {
    let spec = ExperimentSpec::new("nope", "/nonexistent");
    assert!(matches!(run_experiment(&spec), Err(Error::Spec { .. })));
    let spec = ExperimentSpec::new("knockout", "/nonexistent/fixtures");
    match run_experiment(&spec) {
        Err(Error::MissingFixture(p)) => assert!(p.starts_with("/nonexistent/fixtures")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn experiment_layers_are_validated() {
    let fx = common::fixtures();
    let mut spec = ExperimentSpec::new("knockout", common::fixture_dir());
    spec.layers = Some(vec![9]);
    assert!(matches!(run_with_fixtures(&spec, fx), Err(Error::Spec { .. })));
}

#[test]
fn reports_write_json_and_csv() {
    let fx = common::fixtures();
    let mut spec = ExperimentSpec::new("causal_trace", common::fixture_dir());
    spec.n_examples = Some(2);
    let out = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("report-write");
    let _ = std::fs::remove_dir_all(&out);
    let report = run_with_fixtures(&spec, fx).unwrap();
    let written = report.write(&out).unwrap();
    assert_eq!(written.len(), 2);
    let csv = std::fs::read_to_string(out.join("causal_trace.csv")).unwrap();
    assert!(csv.starts_with("layer,position,value\n"));
    let back: Report = serde_json::from_str(&std::fs::read_to_string(out.join("causal_trace.json")).unwrap()).unwrap();
    assert_eq!(back.config, spec);
    assert_eq!(back.models[0].checksum, common::FACT_CHECKSUM);
}
