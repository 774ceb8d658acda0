mod common;

use pslab_core::GenerateOptions;
use serde_json::{json, Value};

fn self_patch(layer: usize) -> Value {
    let prompt = "the capital of franconia is";
    json!({
        "source": {"prompt": prompt, "model": "fact48", "layer": layer},
        "target": {"prompt": prompt, "model": "fact48", "layer": layer},
        "max_new": 3
    })
}

#[test]
fn models_lists_the_registry() {
    let (status, body) = common::get("/v1/models");
    assert_eq!(status, 200);
    let models = body["data"].as_array().unwrap();
    let stamp = |id: &str| models.iter().find(|m| m["model_id"] == id).unwrap()["checksum"].as_u64().unwrap() as u32;
    assert_eq!(stamp("copy"), common::COPY_CHECKSUM);
    assert_eq!(stamp("fact48"), common::FACT_CHECKSUM);
    assert_eq!(stamp("fact32"), common::FACT_SMALL_CHECKSUM);
    assert_eq!(models[0]["config"]["max_seq"], 64);
}

#[test]
fn tokenize_returns_ids_and_strings() {
    let (status, body) = common::post("/v1/tokenize", &json!({"model": "copy", "text": "a b c"}));
    assert_eq!(status, 200);
    assert_eq!(body["data"]["ids"], json!([1, 3, 4, 5]));
    assert_eq!(body["data"]["tokens"], json!(["<bos>", "a", "b", "c"]));
    assert_eq!(body["request"], json!({"model": "copy", "text": "a b c"}));
    assert!(body["artifact_version"].is_string());
}

#[test]
fn forward_top1_at_the_top_is_the_next_token() {
    let fx = common::fixtures();
    let text = "the capital of franconia is";
    let (status, body) = common::post("/v1/forward", &json!({"model": "fact48", "text": text, "topk": 1}));
    assert_eq!(status, 200);
    let grid = body["data"]["grid"].as_array().unwrap();
    assert_eq!(grid.len(), fx.fact.n_layers() + 1);
    let ids = fx.fact.encode_prompt(text);
    let top = &grid[fx.fact.n_layers()][ids.len() - 1][0];
    let next = pslab_core::generate(&fx.fact, &ids, 1, &GenerateOptions::default()).unwrap();
    assert_eq!(top["id"].as_u64().unwrap() as usize, next.new_tokens[0]);
    assert_eq!(grid[0].as_array().unwrap().len(), ids.len());
}

#[test]
fn self_patch_matches_the_forward_continuation() {
    let text = "the capital of franconia is";
    let (_, fwd) = common::post("/v1/forward", &json!({"model": "fact48", "text": text, "topk": 1}));
    let grid = fwd["data"]["grid"].as_array().unwrap();
    let top = grid.last().unwrap().as_array().unwrap().last().unwrap()[0]["id"].clone();
    for layer in 0..=4 {
        let (status, body) = common::post("/v1/patchscope", &self_patch(layer));
        assert_eq!(status, 200, "{body}");
        assert_eq!(body["data"]["tokens"][0], top, "layer {layer}");
        assert_eq!(body["data"]["steps"].as_array().unwrap().len(), 3);
        assert_eq!(body["data"]["provenance"]["target"]["position"], 5);
    }
}

#[test]
fn grid_matches_the_cli() {
    common::fixtures();
    let spec = json!({
        "source": {"prompt": "the capital of franconia is", "model": "fact48"},
        "target": {"prompt": "x : country with capital", "position": 1, "model": "fact48"},
        "source_layers": [0, 2, 4], "target_layers": [0, 1, 2],
        "scorer": {"kind": "surprisal"}
    });
    let (status, body) = common::post("/v1/grid", &spec);
    assert_eq!(status, 200);
    let values = body["data"]["values"].as_array().unwrap();
    assert_eq!(values.len(), 3);
    assert!(values.iter().all(|r| r.as_array().unwrap().len() == 3));
    let dir = common::scratch("http-grid");
    let path = common::write_json(&dir, "grid.json", &spec);
    let fxd = common::fixture_dir();
    let cli = common::cli_json(&["grid", path.to_str().unwrap(), "--fixtures", fxd.to_str().unwrap()]);
    assert_eq!(cli, body);
}

#[test]
fn errors_are_structured() {
    let (status, body) = common::post("/v1/tokenize", &json!({"model": "nope", "text": "a"}));
    assert_eq!(status, 400);
    assert_eq!(body["code"], "spec");
    assert_eq!(body["offending_field"], "model");
    assert!(body.get("data").is_none());

    let (status, body) = common::post("/v1/forward", &json!({"model": "copy"}));
    assert_eq!(status, 400);
    assert_eq!(body["code"], "json");

    let mut bad_layer = self_patch(1);
    bad_layer["source"]["layer"] = json!(9);
    let (status, body) = common::post("/v1/patchscope", &bad_layer);
    assert_eq!(status, 400);
    assert_eq!(body["offending_field"], "source.layer");

    let (status, body) = common::post("/v1/experiments/nope", &json!({}));
    assert_eq!(status, 400);
    assert_eq!(body["offending_field"], "name");

    let (status, body) = common::post("/v1/experiments/knockout", &json!({"fixture_dir": "/nonexistent"}));
    assert_eq!(status, 404);
    assert_eq!(body["code"], "missing_fixture");

    let (status, body) = common::post("/v1/experiments/knockout", &json!({"bogus": 1}));
    assert_eq!(status, 400);
    assert_eq!(body["code"], "json");
}

#[test]
fn cancelled_grid_returns_no_matrix() {
    let token = "cancel-before-start";
    let resp = common::client()
        .post(format!("{}/v1/cancel/{token}", common::server()))
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 202);
    let spec = json!({
        "source": {"prompt": "a b → a", "model": "copy"},
        "target": {"prompt": "c → c ; d", "model": "copy"},
        "source_layers": [0, 1, 2], "target_layers": [0, 1, 2],
        "scorer": {"kind": "argmax_match"},
        "cancel_token": token
    });
    let (status, body) = common::post("/v1/grid", &spec);
    assert_eq!(status, 499);
    assert_eq!(body["code"], "cancelled");
    assert!(body.get("data").is_none() && body.get("values").is_none());
    let (status, _) = common::post("/v1/grid", &spec);
    assert_eq!(status, 200, "the token is released once its grid ends");
}

#[test]
fn interleaved_and_concurrent_requests_do_not_interact() {
    let first = common::post("/v1/patchscope", &self_patch(2));
    let _ = common::post("/v1/forward", &json!({"model": "copy", "text": "a b → a", "topk": 3}));
    let _ = common::post("/v1/experiments/knockout", &json!({"n_examples": 2, "seed": 5}));
    assert_eq!(common::post("/v1/patchscope", &self_patch(2)), first);

    let handles: Vec<_> = (0..4)
        .map(|k| std::thread::spawn(move || common::post("/v1/patchscope", &self_patch(k))))
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for (k, r) in results.iter().enumerate() {
        assert_eq!(*r, common::post("/v1/patchscope", &self_patch(k)));
    }
}
