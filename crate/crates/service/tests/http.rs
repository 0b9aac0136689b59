mod common;

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use common::*;
use densesort_service::api::{router, AppState};
use densesort_service::{SystemClock, Workspace};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Api {
    app: Router,
    token: Option<String>,
    _dir: tempfile::TempDir,
    features: String,
    labels: String,
}

impl Api {
    fn new(token: Option<&str>) -> Api {
        let dir = tempfile::tempdir().unwrap();
        let (features, labels) = write_store(dir.path(), &blob_store(21));
        let workspace = Workspace::open(dir.path().join("root"), Arc::new(SystemClock)).unwrap();
        let state = AppState { workspace, token: token.map(str::to_string), actor: "http".into() };
        Api {
            app: router(Arc::new(state)),
            token: token.map(str::to_string),
            features: features.to_string_lossy().into(),
            labels: labels.to_string_lossy().into(),
            _dir: dir,
        }
    }

    async fn raw(&self, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, String) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = &self.token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let bytes = to_bytes(res.into_body(), usize::MAX).await.unwrap();
        (status, String::from_utf8(bytes.to_vec()).unwrap())
    }

    async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let text = body.map(|b| b.to_string());
        let (status, out) = self.raw(method, uri, text.as_deref()).await;
        (status, serde_json::from_str(&out).unwrap_or(Value::Null))
    }

    async fn ok(&self, method: Method, uri: &str, body: Option<Value>) -> Value {
        let (status, v) = self.call(method, uri, body).await;
        assert!(status.is_success(), "{uri}: {status} {v}");
        v
    }

    async fn project(&self) -> String {
        let body = json!({ "features": self.features, "labels": self.labels, "schedule": [32, 8, 4] });
        let (status, v) = self.call(Method::POST, "/projects", Some(body)).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        v["project_id"].as_str().unwrap().to_string()
    }
}

fn s(v: &Value) -> &str {
    v.as_str().unwrap()
}

#[tokio::test]
async fn full_workflow_over_http() {
    let api = Api::new(None);
    let p = api.project().await;
    assert_eq!(p, "p1");
    loop {
        let it = api.ok(Method::POST, &format!("/projects/{p}/iterations"), None).await;
        if it["status"] == "done" {
            break;
        }
        for c in it["proposed"].as_array().unwrap() {
            let c = s(c);
            let members = api.ok(Method::GET, &format!("/clusters/{c}/members?order=dissimilar&limit=5"), None).await;
            assert!(members["members"].as_array().unwrap().len() <= 5);
            let label = s(&members["members"][0]).split('-').next().unwrap().to_string();
            let verdict = if label == "noise" { "reject" } else { "approve" };
            api.ok(Method::POST, &format!("/clusters/{c}/{verdict}"), None).await;
        }
        let queue = api.ok(Method::GET, &format!("/projects/{p}/growth-queue"), None).await;
        for c in queue.as_array().unwrap() {
            let c = s(c);
            let sess = api.ok(Method::POST, &format!("/clusters/{c}/grow-sessions"), None).await;
            let sid = s(&sess["session_id"]).to_string();
            loop {
                let probe = api.ok(Method::GET, &format!("/grow-sessions/{sid}/next-probe"), None).await;
                if probe["kind"] == "done" {
                    break;
                }
                let page = probe["page"].as_u64().unwrap();
                let content = api.ok(Method::GET, &format!("/grow-sessions/{sid}/pages/{page}"), None).await;
                let first = s(&content["objects"][0]["object_id"]).split('-').next().unwrap().to_string();
                let all = content["objects"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .all(|o| s(&o["object_id"]).split('-').next().unwrap() == first && first != "noise");
                let verdict = if all && page == 0 { "match" } else { "no_match" };
                api.ok(Method::POST, &format!("/grow-sessions/{sid}/pages/{page}/verdict"), Some(json!({ "verdict": verdict })))
                    .await;
            }
            let first = api.ok(Method::POST, &format!("/grow-sessions/{sid}/commit"), None).await;
            let again = api.ok(Method::POST, &format!("/grow-sessions/{sid}/commit"), None).await;
            assert_eq!(first, again, "commit is idempotent");
            assert_eq!(first["cluster"]["status"], "grown");
        }
    }
    let tree = api.ok(Method::POST, &format!("/projects/{p}/tree"), None).await;
    assert_eq!(tree, api.ok(Method::GET, &format!("/projects/{p}/tree"), None).await);
    let root = s(&tree["root"]).to_string();
    api.ok(Method::POST, &format!("/nodes/{root}/name"), Some(json!({ "name": "plankton" }))).await;
    let csv = api.raw(Method::GET, &format!("/projects/{p}/labeling"), None).await;
    assert_eq!(csv.0, StatusCode::OK);
    assert!(csv.1.starts_with("object_id,label_path\n"));
    assert!(csv.1.contains(",plankton\n"));
    let metrics = api.ok(Method::GET, &format!("/projects/{p}/metrics"), None).await;
    assert!(metrics["macro_precision"].is_number());
    let events = api.raw(Method::GET, &format!("/projects/{p}/events"), None).await.1;
    assert!(events.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
    assert!(events.lines().next().unwrap().contains("\"action\":\"project_created\""));
    let summary = api.ok(Method::GET, &format!("/projects/{p}"), None).await;
    assert_eq!(summary["schedule_exhausted"], true);
    assert_eq!(api.ok(Method::GET, "/projects", None).await.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn status_codes() {
    let api = Api::new(None);
    let p = api.project().await;
    let it = api.ok(Method::POST, &format!("/projects/{p}/iterations"), None).await;
    let c = s(&it["proposed"][0]).to_string();

    // iteration with pending proposals is a state conflict
    assert_eq!(api.call(Method::POST, &format!("/projects/{p}/iterations"), None).await.0, StatusCode::CONFLICT);

    let (status, v) = api.call(Method::POST, &format!("/clusters/{c}/approve"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "validated");
    assert_eq!(api.call(Method::POST, &format!("/clusters/{c}/approve"), None).await.0, StatusCode::CONFLICT);
    assert_eq!(api.call(Method::POST, &format!("/clusters/{c}/reject"), None).await.0, StatusCode::CONFLICT);

    for unknown in ["/clusters/p1.c999", "/clusters/p7.c0", "/clusters/garbage", "/projects/p9"] {
        assert_eq!(api.call(Method::GET, unknown, None).await.0, StatusCode::NOT_FOUND, "{unknown}");
    }
    assert_eq!(api.call(Method::POST, "/clusters/p1.c999/approve", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(api.call(Method::GET, "/grow-sessions/p1.s5/next-probe", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(api.call(Method::GET, &format!("/projects/{p}/tree"), None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(api.call(Method::POST, &format!("/projects/{p}/tree"), None).await.0, StatusCode::CONFLICT);

    let sess = api.ok(Method::POST, &format!("/clusters/{c}/grow-sessions"), None).await;
    let sid = s(&sess["session_id"]).to_string();
    let pages = sess["page_count"].as_u64().unwrap();
    assert_eq!(api.call(Method::GET, &format!("/grow-sessions/{sid}/pages/{pages}"), None).await.0, StatusCode::NOT_FOUND);
    let verdict = |page: u64, body: &str| format!("/grow-sessions/{sid}/pages/{page}/verdict|{body}");
    for (target, expect) in [
        (verdict(0, "{\"verdict\":\"maybe\"}"), StatusCode::BAD_REQUEST),
        (verdict(0, "not json"), StatusCode::BAD_REQUEST),
        (verdict(pages, "{\"verdict\":\"match\"}"), StatusCode::BAD_REQUEST),
    ] {
        let (uri, body) = target.split_once('|').unwrap();
        assert_eq!(api.raw(Method::POST, uri, Some(body)).await.0, expect, "{uri} {body}");
    }
    if pages > 1 {
        let (st, _) = api.call(Method::POST, &format!("/grow-sessions/{sid}/pages/1/verdict"), Some(json!({"verdict": "match"}))).await;
        assert_eq!(st, StatusCode::BAD_REQUEST, "out-of-order probe is a protocol violation");
    }
    assert_eq!(api.call(Method::GET, &format!("/grow-sessions/{sid}/pages/x"), None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(api.call(Method::POST, &format!("/grow-sessions/{sid}/commit"), None).await.0, StatusCode::CONFLICT);
    assert_eq!(api.call(Method::POST, &format!("/grow-sessions/{sid}/accept/alpha-000"), None).await.0, StatusCode::CONFLICT);
    assert_eq!(api.call(Method::POST, &format!("/grow-sessions/{sid}/remove/nope"), None).await.0, StatusCode::NOT_FOUND);

    // turtle mode: remove one candidate of page 0, then the search is off
    let page0 = api.ok(Method::GET, &format!("/grow-sessions/{sid}/pages/0"), None).await;
    let obj = s(&page0["objects"][0]["object_id"]).to_string();
    let st = api.ok(Method::POST, &format!("/grow-sessions/{sid}/remove/{obj}"), None).await;
    assert_eq!(st["mode"], "turtle");
    assert_eq!(api.call(Method::GET, &format!("/grow-sessions/{sid}/next-probe"), None).await.0, StatusCode::CONFLICT);
    let page0 = api.ok(Method::GET, &format!("/grow-sessions/{sid}/pages/0"), None).await;
    assert_eq!(page0["objects"][0]["decision"], "removed");
    let commit = api.ok(Method::POST, &format!("/grow-sessions/{sid}/commit"), None).await;
    assert_eq!(commit["added"], 0);

    let (st, v) = api.call(Method::POST, "/projects", Some(json!({ "features": "/no/such/file.mcft" }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST, "{v}");
    let (st, _) = api.call(Method::POST, "/projects", Some(json!({ "features": api.features, "schedule": [1] }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(api.raw(Method::POST, "/projects", Some("{")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(api.call(Method::GET, &format!("/projects/{p}/clusters?status=bogus"), None).await.0, StatusCode::BAD_REQUEST);
    let grown = api.ok(Method::GET, &format!("/projects/{p}/clusters?status=grown"), None).await;
    assert_eq!(grown.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn tree_edits_over_http() {
    let api = Api::new(None);
    let p = api.project().await;
    let it = api.ok(Method::POST, &format!("/projects/{p}/iterations"), None).await;
    for c in it["proposed"].as_array().unwrap() {
        let c = s(c);
        api.ok(Method::POST, &format!("/clusters/{c}/approve-flag"), None).await;
        let sess = api.ok(Method::POST, &format!("/clusters/{c}/grow-sessions"), None).await;
        let sid = s(&sess["session_id"]).to_string();
        while let Some(page) = api.ok(Method::GET, &format!("/grow-sessions/{sid}/next-probe"), None).await["page"].as_u64() {
            api.ok(Method::POST, &format!("/grow-sessions/{sid}/pages/{page}/verdict"), Some(json!({"verdict": "no_match"}))).await;
        }
        api.ok(Method::POST, &format!("/grow-sessions/{sid}/commit"), None).await;
    }
    let tree = api.ok(Method::POST, &format!("/projects/{p}/tree"), None).await;
    let leaves: Vec<String> = tree["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|n| n["children"].as_array().unwrap().is_empty())
        .map(|n| s(&n["node_id"]).to_string())
        .collect();
    assert!(leaves.len() >= 2);
    let root = s(&tree["root"]).to_string();
    assert_eq!(api.call(Method::POST, &format!("/nodes/{root}/merge-into/{}", leaves[0]), None).await.0, StatusCode::CONFLICT);
    assert_eq!(api.call(Method::POST, &format!("/nodes/{}/name", leaves[0]), Some(json!({"name": "a/b"}))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(api.call(Method::POST, "/nodes/p1.n999/name", Some(json!({"name": "x"}))).await.0, StatusCode::NOT_FOUND);
    let merged = api.ok(Method::POST, &format!("/nodes/{}/merge-into/{}", leaves[1], leaves[0]), None).await;
    let node = merged["nodes"].as_array().unwrap().iter().find(|n| n["node_id"] == leaves[0].as_str()).unwrap().clone();
    assert_eq!(node["clusters"].as_array().unwrap().len(), 2);
    api.ok(Method::POST, &format!("/nodes/{}/name", leaves[0]), Some(json!({"name": "merged"}))).await;
    let csv = api.raw(Method::GET, &format!("/projects/{p}/labeling"), None).await.1;
    assert!(csv.lines().filter(|l| l.ends_with(",merged")).count() >= 128);
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let api = Api::new(Some("s3cret"));
    assert_eq!(api.call(Method::GET, "/projects", None).await.0, StatusCode::OK);
    let anonymous = Api { token: None, ..Api::new(Some("s3cret")) };
    assert_eq!(anonymous.call(Method::GET, "/projects", None).await.0, StatusCode::UNAUTHORIZED);
    let wrong = Api { token: Some("guess".into()), ..Api::new(Some("s3cret")) };
    assert_eq!(wrong.call(Method::GET, "/projects", None).await.0, StatusCode::UNAUTHORIZED);
}
