use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cxrseg_core::io::{decode_image, encode_mask_png};
use cxrseg_core::{Arch, BinaryMask, ModelConfig, PostprocessConfig, Precision, TrainConfig, WorkflowConfig};
use cxrseg_service::api::{decode_mask_b64, encode_mask_b64, router, AppState, ServiceOptions, REVIEWER_HEADER};
use cxrseg_service::cli::run;
use cxrseg_service::pipeline::AnyModel;
use base64::Engine as _;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

const SIZE: usize = 16;

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
    opts: ServiceOptions,
}

fn cli(args: &[&str]) {
    let mut full = vec!["cxrseg".to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    assert_eq!(run(full), 0, "cxrseg {args:?} failed");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn weights(root: &Path, name: &str, seed: u64) -> PathBuf {
    let path = root.join(name);
    AnyModel::build(ModelConfig::new(Arch::Unet, 2, 4), Precision::F32, seed).unwrap().save(&path).unwrap();
    path
}

/// 12 synthetic items, Stage II, batches of 5, a Stage II budget of 10.
fn fixture() -> Fixture {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    let state = root.join("state");
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, "[workflow]\nbatch_size = 5\nstage2_budget = 10\n").unwrap();
    cli(&["synth", "--n", "4", "--size", "16", "--out", p(&data)]);
    cli(&["--config", p(&cfg), "workflow", "init", "--state-dir", p(&state), "--manifest", p(&data.join("manifest.jsonl"))]);
    cli(&["workflow", "stage1", "--state-dir", p(&state), "--score", "unet=0.91", "--score", "fcn=0.87"]);
    cli(&["workflow", "advance", "--state-dir", p(&state)]);
    let w = weights(&root, "proposer.segw", 1);
    let opts = ServiceOptions {
        state_dir: state,
        workflow: WorkflowConfig::default(),
        model: ModelConfig::new(Arch::Unet, 2, 4),
        train: TrainConfig { max_epochs: 2, batch_size: 4, ..TrainConfig::default() },
        postprocess: PostprocessConfig::default(),
        weights: Some(w),
    };
    Fixture { _tmp: tmp, root, opts }
}

fn app(opts: &ServiceOptions) -> (Arc<AppState>, Router) {
    let state = AppState::open(opts.clone()).unwrap();
    (Arc::clone(&state), router(state))
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>, reviewer: Option<&str>) -> (StatusCode, Vec<u8>, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(r) = reviewer {
        req = req.header(REVIEWER_HEADER, r);
    }
    let body = match body {
        Some(v) => Body::from(serde_json::to_vec(&v).unwrap()),
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get("content-type").map(|v| v.to_str().unwrap().to_string()).unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes, _) = send(app, method, uri, body, None).await;
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn raw(app: &Router, method: &str, uri: &str, body: &'static str) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn progress(app: &Router) -> Value {
    let (s, v) = call(app, "GET", "/api/progress", None).await;
    assert_eq!(s, StatusCode::OK);
    v
}

async fn last_seq(app: &Router) -> u64 {
    progress(app).await["last_seq"].as_u64().unwrap()
}

fn count(progress: &Value, status: &str) -> u64 {
    progress["counts"][status].as_u64().unwrap_or(0)
}

async fn decide(app: &Router, id: &str, decision: &str, mask: Option<String>) -> (StatusCode, Value) {
    let mut body = json!({ "decision": decision, "reviewer": "rad1" });
    if let Some(m) = mask {
        body["mask"] = json!(m);
    }
    call(app, "POST", &format!("/api/items/{id}/decision"), Some(body)).await
}

async fn open_round(app: &Router) -> Vec<String> {
    let (s, v) = call(app, "POST", "/api/rounds/next", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v["ids"].as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect()
}

fn square_mask() -> BinaryMask {
    let mut m = BinaryMask::zeros(SIZE, SIZE);
    for y in 4..12 {
        for x in 3..13 {
            m.set(y, x, true);
        }
    }
    m
}

#[tokio::test]
async fn review_round_trip() {
    let fx = fixture();
    let (_, app) = app(&fx.opts);
    let before = progress(&app).await;
    assert_eq!(before["stage"], "II");

    let ids = open_round(&app).await;
    assert_eq!(ids.len(), 5);
    let mut seq = last_seq(&app).await;

    // queue pagination agrees with progress
    let (s, q) = call(&app, "GET", "/api/queue?limit=2&offset=1", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(q["total"].as_u64().unwrap(), progress(&app).await["queue_size"].as_u64().unwrap());
    assert_eq!(q["total"], 5);
    assert_eq!(q["items"].as_array().unwrap().len(), 2);
    assert_eq!(q["offset"], 1);

    // accept: 200, accepted + 1, exactly one event
    let (s, v) = decide(&app, &ids[0], "accept", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["item"]["status"], "accepted");
    assert_eq!(count(&progress(&app).await, "accepted"), 1);
    seq += 1;
    assert_eq!(last_seq(&app).await, seq);

    // identical re-submission is flagged and appends nothing
    let (s, v) = decide(&app, &ids[0], "accept", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["duplicate"], true);
    assert_eq!(v["item"]["status"], "accepted");
    assert_eq!(last_seq(&app).await, seq);

    // a different decision on a terminal item is a state conflict
    let snapshot = progress(&app).await;
    let (s, v) = decide(&app, &ids[0], "exclude", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "state");
    assert_eq!(progress(&app).await, snapshot);

    // reject with an edited mask lands in modified and stores that mask
    let edit = square_mask();
    let (s, v) = decide(&app, &ids[1], "reject", Some(encode_mask_b64(&edit))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["item"]["status"], "modified");
    seq += 1;
    let final_url = format!("/api/masks/{}", v["item"]["final_mask"].as_str().unwrap());
    let (s, bytes, ctype) = send(&app, "GET", &final_url, None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ctype, "image/x-portable-graymap");
    let b64 = base64::engine::general_purpose::STANDARD.encode(&bytes);
    assert_eq!(decode_mask_b64(&b64).unwrap(), edit);
    let (s, png, ctype) = send(&app, "GET", &format!("{final_url}?format=png"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ctype, "image/png");
    assert_eq!(png, encode_mask_png(&edit).unwrap());

    // reject without a mask waits for the edit; the edit arrives as a second reject
    let (s, v) = decide(&app, &ids[2], "reject", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["item"]["status"], "rejected_pending_edit");
    seq += 1;

    // unsure goes to the MD, who resolves it with a note and a mask (PNG accepted too)
    let (s, v) = decide(&app, &ids[3], "unsure", None).await;
    assert_eq!((s, v["item"]["status"].clone()), (StatusCode::OK, json!("unsure_pending_md")));
    seq += 1;
    let png_b64 = base64::engine::general_purpose::STANDARD.encode(encode_mask_png(&edit).unwrap());
    let (s, _, _) = send(
        &app,
        "POST",
        &format!("/api/items/{}/md-resolve", ids[3]),
        Some(json!({ "note": "left base", "mask": png_b64 })),
        Some("md1"),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    seq += 1;
    let (_, v) = call(&app, "GET", &format!("/api/items/{}", ids[3]), None).await;
    assert_eq!(v["item"]["status"], "modified");
    assert_eq!(v["item"]["md_note"], "left base");
    assert_eq!(v["item"]["reviewer"], "md1");
    assert_eq!(last_seq(&app).await, seq);

    // finalize with open items lists exactly those ids
    let (s, v) = call(&app, "POST", "/api/rounds/finalize", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let mut open: Vec<String> = v["ids"].as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect();
    open.sort();
    let mut expected = vec![ids[2].clone(), ids[4].clone()];
    expected.sort();
    assert_eq!(open, expected);
    assert_eq!(last_seq(&app).await, seq);

    // header supplies the reviewer when the body does not
    let (s, _, _) = send(&app, "POST", &format!("/api/items/{}/decision", ids[4]), Some(json!({ "decision": "exclude" })), Some("rad2")).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = decide(&app, &ids[2], "reject", Some(encode_mask_b64(&edit))).await;
    assert_eq!(s, StatusCode::OK);
    seq += 2;

    let (s, v) = call(&app, "POST", "/api/rounds/finalize", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["job"]["round"], 0);
    assert_eq!(v["job"]["dataset"].as_array().unwrap().len(), 4);
    seq += 1;
    let after = progress(&app).await;
    assert_eq!(after["last_seq"].as_u64().unwrap(), seq);
    assert_eq!(after["repository_size"], 4);
    assert_eq!(count(&after, "excluded"), 1);
    assert_eq!(after["jobs"], 1);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let fx = fixture();
    let (_, app) = app(&fx.opts);
    let ids = open_round(&app).await;
    let seq = last_seq(&app).await;
    let item = format!("/api/items/{}/decision", ids[0]);

    let (s, v) = decide(&app, "no_such_item", "accept", None).await;
    assert_eq!((s, v["error"].clone()), (StatusCode::NOT_FOUND, json!("not_found")));
    let (s, _) = call(&app, "GET", "/api/items/no_such_item", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/api/masks/missing.pgm", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/api/jobs/999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/api/jobs/abc", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    for body in ["{", "[]", "{\"decision\":\"maybe\",\"reviewer\":\"r\"}", "{\"decision\":\"accept\",\"reviewer\":\"r\",\"extra\":1}"] {
        let (s, v) = raw(&app, "POST", &item, body).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}: {v}");
    }
    // no reviewer anywhere
    let (s, _) = call(&app, "POST", &item, Some(json!({ "decision": "accept" }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = decide(&app, &ids[0], "reject", Some("@@not base64@@".into())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = decide(&app, &ids[0], "reject", Some(encode_mask_b64(&BinaryMask::zeros(8, 8)))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "GET", &format!("/api/images/{}?format=tiff", ids[0]), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    // wrong-stage and open-batch conflicts
    let (s, _) = call(&app, "POST", "/api/rounds/next", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "POST", "/api/stage/advance", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "GET", &format!("/api/stage3/{}/proposals", ids[0]), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "POST", &format!("/api/items/{}/verify", ids[0]), Some(json!({ "reviewer": "md" }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "POST", "/api/jobs/train", Some(json!({ "epochs": 0 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    assert_eq!(last_seq(&app).await, seq, "failed requests must not append events");
}

#[tokio::test]
async fn reads_append_nothing_and_restart_is_lossless() {
    let fx = fixture();
    let (state, app) = app(&fx.opts);
    let ids = open_round(&app).await;
    decide(&app, &ids[0], "accept", None).await;
    decide(&app, &ids[1], "unsure", None).await;
    let seq = last_seq(&app).await;

    let (_, it) = call(&app, "GET", &format!("/api/items/{}", ids[0]), None).await;
    let mask_url = it["links"]["mask"].as_str().unwrap().to_string();
    for uri in [
        "/api/progress".to_string(),
        "/api/queue".to_string(),
        "/api/jobs".to_string(),
        format!("/api/items/{}", ids[2]),
        format!("/api/images/{}", ids[2]),
        format!("/api/images/{}?format=png", ids[2]),
        mask_url.clone(),
        format!("{mask_url}?format=png"),
    ] {
        let (s, _, _) = send(&app, "GET", &uri, None, None).await;
        assert_eq!(s, StatusCode::OK, "{uri}");
    }
    assert_eq!(last_seq(&app).await, seq);

    // image endpoint serves the stored image
    let (_, pgm, _) = send(&app, "GET", &format!("/api/images/{}", ids[2]), None, None).await;
    assert_eq!(decode_image(&pgm).unwrap().dims(), (SIZE, SIZE));

    let before = progress(&app).await;
    let (_, queue_before) = call(&app, "GET", "/api/queue?limit=100", None).await;
    drop(app);
    drop(state);
    let (_, app) = self::app(&fx.opts);
    assert_eq!(progress(&app).await, before);
    let (_, queue_after) = call(&app, "GET", "/api/queue?limit=100", None).await;
    assert_eq!(queue_after, queue_before);
}

#[tokio::test]
async fn next_round_needs_a_proposer() {
    let fx = fixture();
    let mut opts = fx.opts.clone();
    opts.weights = None;
    let (_, app) = app(&opts);
    let (s, v) = call(&app, "POST", "/api/rounds/next", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "state");
}

#[tokio::test]
async fn stage3_selection_over_http() {
    let fx = fixture();
    // exhaust the Stage II budget of 10 with two accepted rounds
    {
        let (_, app) = app(&fx.opts);
        for _ in 0..2 {
            for id in open_round(&app).await {
                assert_eq!(decide(&app, &id, "accept", None).await.0, StatusCode::OK);
            }
            assert_eq!(call(&app, "POST", "/api/rounds/finalize", None).await.0, StatusCode::OK);
        }
        let (s, v) = call(&app, "POST", "/api/stage/advance", None).await;
        assert_eq!((s, v["stage"].clone()), (StatusCode::OK, json!("III")));
    }
    let state = fx.opts.state_dir.clone();
    let mut args = vec!["workflow".to_string(), "stage3-propose".into(), "--state-dir".into(), p(&state).into()];
    for k in 0..6 {
        let w = weights(&fx.root, &format!("net{}.segw", k + 1), 10 + k);
        args.extend(["--weights".to_string(), p(&w).to_string()]);
    }
    cli(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let (_, app) = app(&fx.opts);
    let (_, q) = call(&app, "GET", "/api/queue", None).await;
    let pool: Vec<String> = q["items"].as_array().unwrap().iter().map(|it| it["id"].as_str().unwrap().to_string()).collect();
    assert_eq!(pool.len(), 2);

    let (s, v) = call(&app, "GET", &format!("/api/stage3/{}/proposals", pool[0]), None).await;
    assert_eq!(s, StatusCode::OK);
    let proposals = v["proposals"].as_array().unwrap();
    assert_eq!(proposals.len(), 6);
    assert_eq!(proposals[2]["index"], 3);
    assert_eq!(proposals[2]["model"], "net3");
    let (s, _, _) = send(&app, "GET", proposals[2]["url"].as_str().unwrap(), None, None).await;
    assert_eq!(s, StatusCode::OK);

    let select = format!("/api/stage3/{}/select", pool[0]);
    let seq = last_seq(&app).await;
    for bad in [json!({ "choice": 7 }), json!({ "choice": 0 }), json!({ "choice": "maybe" }), json!({ "choice": 2, "deny": true }), json!({})] {
        let mut body = bad.clone();
        body["reviewer"] = json!("rad1");
        let (s, _) = call(&app, "POST", &select, Some(body)).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
    }
    assert_eq!(last_seq(&app).await, seq);

    let (s, v) = call(&app, "POST", &select, Some(json!({ "choice": 3, "reviewer": "rad1" }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["item"]["status"], "accepted");
    assert_eq!(v["item"]["selected_model"], 3);
    let (s, v) = call(&app, "POST", &select, Some(json!({ "choice": 3, "reviewer": "rad1" }))).await;
    assert_eq!((s, v["duplicate"].clone()), (StatusCode::CONFLICT, json!(true)));
    assert_eq!(last_seq(&app).await, seq + 1);

    let (s, v) = call(&app, "POST", &format!("/api/stage3/{}/select", pool[1]), Some(json!({ "choice": "deny", "reviewer": "rad1" }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["item"]["status"], "denied");
    let prog = progress(&app).await;
    assert_eq!(prog["tallies"], json!([0, 0, 1, 0, 0, 0]));
}

#[tokio::test]
async fn training_job_runs_and_replaces_the_proposer() {
    let fx = fixture();
    let (_, app) = app(&fx.opts);
    for id in open_round(&app).await {
        decide(&app, &id, "accept", None).await;
    }
    call(&app, "POST", "/api/rounds/finalize", None).await;
    let seq = last_seq(&app).await;

    let (s, bytes, _) = send(&app, "POST", "/api/jobs/train", Some(json!({ "epochs": 1 })), None).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(job["kind"], "train");
    let url = format!("/api/jobs/{}", job["id"]);
    let deadline = Instant::now() + Duration::from_secs(120);
    let done = loop {
        let (s, v) = call(&app, "GET", &url, None).await;
        assert_eq!(s, StatusCode::OK);
        match v["state"].as_str().unwrap() {
            "done" | "failed" => break v,
            _ => {
                assert!(Instant::now() < deadline, "job did not finish");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    };
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["progress"], 1.0);
    let current = fx.opts.state_dir.join("models").join("current.segw");
    assert!(current.exists());
    assert!(AnyModel::load(&current, None).is_ok());
    let (_, all) = call(&app, "GET", "/api/jobs", None).await;
    assert_eq!(all["jobs"].as_array().unwrap().len(), 1);
    assert_eq!(last_seq(&app).await, seq, "training lives outside the event log");

    // the next round is proposed by the retrained model
    assert_eq!(open_round(&app).await.len(), 5);
}
