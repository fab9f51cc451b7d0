mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::{get_json, post_json, post_raw, Server};
use gaa_core::backend::mock::heuristic_candidates;
use gaa_core::sim::synthetic_corpus;
use gaa_service::{build_state, mock_router, prewarm_to_disk, router, MockBackend, ServiceConfig, ServiceError};
use serde_json::{json, Value};
use tempfile::TempDir;

struct Deployment {
    dir: TempDir,
    _backends: Vec<Server>,
    config: ServiceConfig,
}

fn deploy(settings: &[&str]) -> Deployment {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("passages.jsonl");
    std::fs::write(&corpus_path, synthetic_corpus(5, 6).to_jsonl()).unwrap();
    let backends: Vec<Server> = ["squad", "adversarial_qa", "combined"]
        .iter()
        .enumerate()
        .map(|(i, id)| Server::start(mock_router(Arc::new(MockBackend::new(id, 100 + i as u64, 0.9)))))
        .collect();
    let config = ServiceConfig {
        storage_dir: dir.path().join("store"),
        corpus_path,
        squad_generator_url: Some(backends[0].url()),
        adversarial_qa_generator_url: Some(backends[1].url()),
        combined_generator_url: Some(backends[2].url()),
        qa_url: Some(backends[0].url()),
        candidates_url: Some(backends[0].url()),
        settings: settings.iter().map(|s| s.to_string()).collect(),
        cache_depth: 3,
        fsync: false,
        ..Default::default()
    };
    prewarm_to_disk(&config).unwrap();
    Deployment { dir, _backends: backends, config }
}

fn start(d: &Deployment) -> Server {
    Server::start(router(build_state(&d.config).unwrap()))
}

fn start_session(api: &str, worker: &str, setting: Option<&str>) -> Value {
    let (status, v) = post_json(&format!("{api}/v1/sessions"), &json!({"worker_id": worker, "setting": setting}));
    assert_eq!(status, 200, "{v}");
    v
}

fn answer_for(session: &Value) -> Value {
    let (span, _) = heuristic_candidates(session["passage"].as_str().unwrap())[0].clone();
    json!({"text": span.text, "char_start": span.char_start})
}

/// Writes a full session of five examples with one prompt each.
fn write_session(api: &str, worker: &str, setting: &str) -> Vec<String> {
    let s = start_session(api, worker, Some(setting));
    let sid = s["session_id"].as_str().unwrap().to_owned();
    let mut ids = Vec::new();
    for k in 0..5 {
        let body = if s["answer_prompting"] == json!(true) { json!({}) } else { json!({"answer": answer_for(&s)}) };
        let (status, p) = if s["assisted"] == json!(true) {
            post_json(&format!("{api}/v1/sessions/{sid}/prompt"), &body)
        } else {
            (503, Value::Null)
        };
        let (question, answer) = if status == 200 {
            (p["question"].as_str().unwrap().to_owned(), p["answer"].clone())
        } else {
            assert_eq!(status, 503, "{p}");
            (format!("Own question {k}?"), answer_for(&s))
        };
        let (status, out) = post_json(
            &format!("{api}/v1/sessions/{sid}/submit"),
            &json!({"question": question, "answer": answer, "idempotency_key": format!("k{k}")}),
        );
        assert_eq!(status, 200, "{out}");
        ids.push(out["example_id"].as_str().unwrap().to_owned());
    }
    ids
}

fn validate_all(api: &str, validators: &[&str]) -> usize {
    let mut votes = 0;
    loop {
        let mut progressed = false;
        for v in validators {
            let mut r = common::agent().get(&format!("{api}/v1/validation/next?validator={v}")).call().unwrap();
            if r.status().as_u16() == 204 {
                continue;
            }
            assert_eq!(r.status().as_u16(), 200);
            let a: Value = serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap();
            let task = a["task_id"].as_str().unwrap();
            let (status, out) = post_json(
                &format!("{api}/v1/validation/{task}/vote"),
                &json!({"validator": v, "verdict": "valid", "idempotency_key": "once"}),
            );
            assert_eq!(status, 200, "{out}");
            votes += 1;
            progressed = true;
        }
        if !progressed {
            return votes;
        }
    }
}

const SQUAD_LL: &str = "adversarial+squad+likelihood";
const ANSWERS: &str = "adversarial+combined+adversarial+answers";

#[test]
fn health_reports_backends() {
    let d = deploy(&[]);
    let api = start(&d);
    let (status, h) = get_json(&format!("{}/v1/health", api.url()));
    assert_eq!(status, 200);
    assert_eq!(h["status"], "ok");
    let backends = h["backends"].as_array().unwrap();
    assert_eq!(backends.len(), 5);
    assert!(backends.iter().all(|b| b["reachable"] == json!(true)));
}

#[test]
fn writer_flow_hides_the_condition() {
    let d = deploy(&[]);
    let api = start(&d);
    let url = api.url();
    let s = start_session(&url, "w1", Some(SQUAD_LL));
    let keys: BTreeSet<_> = s.as_object().unwrap().keys().cloned().collect();
    assert!(!keys.iter().any(|k| k.contains("gaa") || k.contains("sampler") || k.contains("setting")));
    assert_eq!(s["assisted"], json!(true));
    assert_eq!(s["adversarial"], json!(true));

    let sid = s["session_id"].as_str().unwrap();
    let (status, p) = post_json(&format!("{url}/v1/sessions/{sid}/prompt"), &json!({"answer": answer_for(&s)}));
    assert_eq!(status, 200, "{p}");
    let keys: Vec<_> = p.as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, ["answer", "prompt_id", "question"]);

    // without an answer the request is malformed for this setting
    let (status, _) = post_json(&format!("{url}/v1/sessions/{sid}/prompt"), &json!({}));
    assert_eq!(status, 400);

    let submit = json!({"question": p["question"], "answer": p["answer"], "idempotency_key": "a"});
    let (status, first) = post_json(&format!("{url}/v1/sessions/{sid}/submit"), &submit);
    assert_eq!(status, 200, "{first}");
    assert!(first["fooled"].is_boolean());
    assert!(first["model_prediction"]["span"]["text"].is_string());
    let (_, again) = post_json(&format!("{url}/v1/sessions/{sid}/submit"), &submit);
    assert_eq!(first, again);

    // the same worker resumes the same session
    assert_eq!(start_session(&url, "w1", None)["session_id"], s["session_id"]);
    let (status, _) = post_json(&format!("{url}/v1/sessions"), &json!({"worker_id": "w1", "setting": ANSWERS}));
    assert_eq!(status, 409);
}

#[test]
fn session_limit_and_validation_flow() {
    let d = deploy(&[]);
    let api = start(&d);
    let url = api.url();
    let ids = write_session(&url, "w1", ANSWERS);
    let session = start_session(&url, "w1", None);
    assert_ne!(session["session_id"], json!("s0"));

    let (status, _) = post_json(
        &format!("{url}/v1/sessions/s0/submit"),
        &json!({"question": "Sixth?", "answer": {"text": "x", "char_start": 0}}),
    );
    assert_eq!(status, 409);

    let (status, _) = get_json(&format!("{url}/v1/validation/next?validator=w1"));
    assert_eq!(status, 409, "writers cannot validate");

    assert_eq!(validate_all(&url, &["v0", "v1", "v2", "v3"]), 15);
    let (status, report) = get_json(&format!("{url}/v1/metrics?setting={ANSWERS}"));
    assert_eq!(status, 200);
    assert_eq!(report["n_examples"], json!(5));
    assert_eq!(report["n_pending"], json!(0));

    let (status, export) = get_json(&format!("{url}/v1/export?setting={ANSWERS}"));
    assert_eq!(status, 200);
    let exported: BTreeSet<String> =
        export["metadata"]["examples"].as_array().unwrap().iter().map(|e| e["id"].as_str().unwrap().to_owned()).collect();
    assert_eq!(exported, ids.into_iter().collect());
    assert_eq!(export["dataset"]["version"], json!("1.1"));

    let (status, v) =
        post_json(&format!("{url}/v1/validation/{}/vote", exported.first().unwrap()), &json!({"validator": "v9", "verdict": "valid"}));
    assert_eq!(status, 409, "{v}");
}

#[test]
fn malformed_requests_get_400() {
    let d = deploy(&[]);
    let api = start(&d);
    let url = api.url();
    let s = start_session(&url, "w1", Some("standard"));
    let sid = s["session_id"].as_str().unwrap();
    let posts = [
        "/v1/sessions".to_owned(),
        format!("/v1/sessions/{sid}/prompt"),
        format!("/v1/sessions/{sid}/submit"),
        "/v1/validation/s0-e0/vote".to_owned(),
    ];
    for path in &posts {
        for body in ["", "{", "[1]", r#"{"bogus": 1}"#] {
            let (status, text) = post_raw(&format!("{url}{path}"), body);
            assert_eq!(status, 400, "{path} {body:?} -> {text}");
            let v: Value = serde_json::from_str(&text).unwrap();
            assert!(v["error"].is_string());
        }
    }
    let (status, v) = post_json(&format!("{url}/v1/sessions"), &json!({"worker_id": "w2", "setting": "standard+squad"}));
    assert_eq!(status, 400, "{v}");
    let (status, _) = post_json(
        &format!("{url}/v1/sessions/{sid}/submit"),
        &json!({"question": "Q?", "answer": {"text": "not there", "char_start": 0}}),
    );
    assert_eq!(status, 400);
    let (status, _) = post_json(&format!("{url}/v1/sessions/nope/submit"), &json!({"question": "Q?", "answer": {"text": "a", "char_start": 0}}));
    assert_eq!(status, 404);
    assert_eq!(get_json(&format!("{url}/v1/export")).0, 400);
    assert_eq!(get_json(&format!("{url}/v1/validation/next")).0, 400);
    assert_eq!(get_json(&format!("{url}/v1/metrics?setting=bogus")).0, 400);
}

#[test]
fn restart_replays_to_identical_reads() {
    let d = deploy(&[]);
    let reads = |url: &str| {
        let mut out = vec![get_json(&format!("{url}/v1/metrics")).1];
        for s in ["standard", SQUAD_LL, ANSWERS] {
            out.push(get_json(&format!("{url}/v1/metrics?setting={s}")).1);
            out.push(get_json(&format!("{url}/v1/export?setting={s}")).1);
        }
        out
    };
    let before = {
        let api = start(&d);
        write_session(&api.url(), "w1", SQUAD_LL);
        write_session(&api.url(), "w2", ANSWERS);
        write_session(&api.url(), "w3", "standard");
        validate_all(&api.url(), &["v0", "v1", "v2"]);
        // one task left half-voted across the restart
        write_session(&api.url(), "w1", SQUAD_LL);
        let (_, a) = get_json(&format!("{}/v1/validation/next?validator=v0", api.url()));
        let task = a["task_id"].as_str().unwrap().to_owned();
        post_json(&format!("{}/v1/validation/{task}/vote", api.url()), &json!({"validator": "v0", "verdict": "invalid"}));
        reads(&api.url())
    };
    let api = start(&d);
    assert_eq!(reads(&api.url()), before);
    let s = start_session(&api.url(), "w9", Some("standard"));
    assert_eq!(s["session_id"], json!("s4"));
    // the half-voted task stays with its validators
    let (status, _) = get_json(&format!("{}/v1/validation/next?validator=v1", api.url()));
    assert_eq!(status, 200);

    assert!(matches!(prewarm_to_disk(&d.config), Err(ServiceError::CachesInUse(_))));
    drop(d.dir);
}

#[test]
fn startup_rejects_bad_config_and_storage() {
    let d = deploy(&[]);
    let bad = ServiceConfig { fooling_threshold: 1.5, ..d.config.clone() };
    assert!(matches!(build_state(&bad), Err(ServiceError::Config(_))));

    let file = d.dir.path().join("not-a-dir");
    std::fs::write(&file, "x").unwrap();
    let unwritable = ServiceConfig { storage_dir: file, ..d.config.clone() };
    assert!(matches!(build_state(&unwritable), Err(ServiceError::Storage { .. })));
}

#[test]
fn unreachable_backends_are_reported_not_fatal() {
    let d = deploy(&["standard"]);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config = ServiceConfig { qa_url: Some(format!("http://127.0.0.1:{port}")), retries: 0, ..d.config.clone() };
    let api = Server::start(router(build_state(&config).unwrap()));
    let (_, h) = get_json(&format!("{}/v1/health", api.url()));
    let qa = h["backends"].as_array().unwrap().iter().find(|b| b["name"] == "qa").unwrap().clone();
    assert_eq!(qa["reachable"], json!(false));
    // standard collection never needs the model
    write_session(&api.url(), "w1", "standard");
}
