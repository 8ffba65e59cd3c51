use std::fmt::Write as _;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use cvanetsim_server::{router, App, ServerConfig};

const T3_CSV: &str = "t,id,x,y,speed,angle\n\
0,A,0,0,10,90\n0,B,50,0,10,90\n0,C,200,0,20,270\n\
1,A,0,0,10,90\n1,B,50,0,10,90\n1,C,200,0,20,270\n";

struct Harness {
    router: Router,
    _dir: tempfile::TempDir,
}

fn harness(tweak: impl FnOnce(&mut ServerConfig)) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServerConfig::new(dir.path());
    tweak(&mut cfg);
    let app = App::open(&cfg).unwrap();
    Harness {
        router: router(app, &cfg),
        _dir: dir,
    }
}

impl Harness {
    async fn call(&self, method: &str, uri: &str, content_type: Option<&str>, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(ct) = content_type {
            req = req.header("content-type", ct);
        }
        let resp = self
            .router
            .clone()
            .oneshot(req.body(Body::from(body)).unwrap())
            .await
            .unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn json(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let (ct, bytes) = match body {
            Some(v) => (Some("application/json"), serde_json::to_vec(&v).unwrap()),
            None => (None, Vec::new()),
        };
        let (status, out) = self.call(method, uri, ct, bytes).await;
        (status, serde_json::from_slice(&out).unwrap_or(Value::Null))
    }

    async fn upload(&self, csv: &str) -> String {
        let (status, body) = self
            .call(
                "POST",
                "/api/v1/scenarios?name=t3",
                Some("text/csv"),
                csv.as_bytes().to_vec(),
            )
            .await;
        assert_eq!(status, StatusCode::CREATED);
        let v: Value = serde_json::from_slice(&body).unwrap();
        v["id"].as_str().unwrap().to_string()
    }

    async fn start_run(&self, scenario: &str, range: f64) -> String {
        let (status, v) = self
            .json(
                "POST",
                "/api/v1/runs",
                Some(json!({"scenario_id": scenario, "algorithm": "lowest_id", "range_m": range})),
            )
            .await;
        assert_eq!(status, StatusCode::ACCEPTED, "{v}");
        v["id"].as_str().unwrap().to_string()
    }

    async fn wait_for(&self, run: &str, pred: impl Fn(&str) -> bool) -> Value {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let (_, v) = self.json("GET", &format!("/api/v1/runs/{run}"), None).await;
            if pred(v["status"].as_str().unwrap()) {
                return v;
            }
            assert!(Instant::now() < deadline, "run {run} stuck in {v}");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }
}

/// A scenario big enough to keep a worker busy for a while.
fn heavy_csv() -> String {
    let mut s = String::from("t,id,x,y,speed,angle\n");
    for t in 0..400 {
        for v in 0..800 {
            let x = (v * 37 % 2000) as f64 + t as f64 * 0.5;
            let y = (v * 91 % 2000) as f64;
            writeln!(s, "{t},v{v:04},{x},{y},10,90").unwrap();
        }
    }
    s
}

#[tokio::test]
async fn upload_validates_and_reports_counts() {
    let h = harness(|_| {});
    let (status, body) = h
        .call("POST", "/api/v1/scenarios?name=t3", Some("text/csv"), T3_CSV.into())
        .await;
    assert_eq!(status, StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["n_timesteps"], 2);
    assert_eq!(v["n_vehicles"], 3);
    assert_eq!(v["name"], "t3");
    assert_eq!(v["warnings"], json!([]));

    let id = v["id"].as_str().unwrap();
    let (status, got) = h.json("GET", &format!("/api/v1/scenarios/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(got["id"], id);
    let (_, list) = h.json("GET", "/api/v1/scenarios", None).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn upload_errors() {
    let h = harness(|c| c.body_limit = 1024);
    let (status, body) = h
        .call(
            "POST",
            "/api/v1/scenarios",
            Some("text/csv"),
            b"time,id,x,y,speed,angle\n".to_vec(),
        )
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["error"].as_str().unwrap().contains("bad header"), "{v}");

    let (status, _) = h
        .call("POST", "/api/v1/scenarios", Some("application/pdf"), T3_CSV.into())
        .await;
    assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE);

    let dup = "t,id,x,y,speed,angle\n0,A,0,0,1,0\n0,A,1,1,1,0\n";
    let (status, body) = h.call("POST", "/api/v1/scenarios", Some("text/csv"), dup.into()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["errors"], json!(["duplicate id A at t=0"]));

    let (status, _) = h
        .call("POST", "/api/v1/scenarios", Some("text/csv"), vec![b'0'; 4096])
        .await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);

    let (status, _) = h
        .json("GET", "/api/v1/scenarios/0123456789abcdef0123456789abcdef", None)
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn algorithms_listing() {
    let h = harness(|_| {});
    let (status, v) = h.json("GET", "/api/v1/algorithms", None).await;
    assert_eq!(status, StatusCode::OK);
    let algs = v.as_array().unwrap();
    let ids: Vec<&str> = algs.iter().map(|a| a["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["lowest_id", "highest_degree", "mobility"]);
    let mobility = &algs[2]["params"];
    let default_of = |name: &str| {
        mobility
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["name"] == name)
            .map(|p| p["default"].clone())
    };
    assert_eq!(default_of("w_v"), Some(json!(0.5)));
    assert_eq!(default_of("w_d"), Some(json!(0.5)));
    let (_, again) = h.json("GET", "/api/v1/algorithms", None).await;
    assert_eq!(v, again);
}

#[tokio::test]
async fn run_lifecycle_and_results() {
    let h = harness(|_| {});
    let sid = h.upload(T3_CSV).await;
    let rid = h.start_run(&sid, 100.0).await;
    let done = h.wait_for(&rid, |s| s == "done").await;
    assert_eq!(done["progress"], 1.0);

    let (status, summary) = h.json("GET", &format!("/api/v1/runs/{rid}/summary"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(summary["avg_ch_duration_s"], 2.0);
    assert_eq!(summary["avg_num_clusters"], 1.0);
    assert_eq!(summary["avg_num_unclustered"], 1.0);

    let (status, graph) = h
        .call("GET", &format!("/api/v1/runs/{rid}/graph.csv"), None, vec![])
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        graph,
        b"t,n_vehicles,n_clusters,n_cm,n_unclustered\n0,3,1,1,1\n1,3,1,1,1\n"
    );

    let report = |q: &str| format!("/api/v1/runs/{rid}/report.jsonl{q}");
    let (_, all) = h.call("GET", &report(""), None, vec![]).await;
    let all: Vec<&[u8]> = all.split_inclusive(|&b| b == b'\n').collect();
    assert_eq!(all.len(), 6);
    let (_, first) = h.call("GET", &report("?offset=0&limit=2"), None, vec![]).await;
    assert_eq!(first, all[..2].concat());
    let (_, mid) = h.call("GET", &report("?offset=3&limit=2"), None, vec![]).await;
    assert_eq!(mid, all[3..5].concat());
    let (_, past) = h.call("GET", &report("?offset=10"), None, vec![]).await;
    assert!(past.is_empty());

    let (status, _) = h.json("DELETE", &format!("/api/v1/runs/{rid}"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (_, runs) = h.json("GET", "/api/v1/runs", None).await;
    assert_eq!(runs.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn run_request_errors() {
    let h = harness(|_| {});
    let sid = h.upload(T3_CSV).await;
    let (status, _) = h
        .json(
            "POST",
            "/api/v1/runs",
            Some(json!({"scenario_id": sid, "algorithm": "lowest_id", "range_m": 0})),
        )
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = h
        .json(
            "POST",
            "/api/v1/runs",
            Some(json!({"scenario_id": sid, "algorithm": "nope", "range_m": 100})),
        )
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = h
        .json(
            "POST",
            "/api/v1/runs",
            Some(json!({"scenario_id": sid, "algorithm": "mobility", "range_m": 100, "params": {"w_v": -1}})),
        )
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = h
        .json(
            "POST",
            "/api/v1/runs",
            Some(json!({"scenario_id": "0123456789abcdef0123456789abcdef", "algorithm": "lowest_id", "range_m": 100})),
        )
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = h
        .json("GET", "/api/v1/runs/0123456789abcdef0123456789abcdef", None)
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cancel_queued_and_running() {
    let h = harness(|c| c.workers = 1);
    let heavy = h.upload(&heavy_csv()).await;
    let busy = h.start_run(&heavy, 300.0).await;
    let queued = h.start_run(&heavy, 300.0).await;
    h.wait_for(&busy, |s| s == "running").await;

    // results are not available before the run is done
    let (status, _) = h.json("GET", &format!("/api/v1/runs/{busy}/summary"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = h
        .call("GET", &format!("/api/v1/runs/{queued}/report.jsonl"), None, vec![])
        .await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, v) = h.json("DELETE", &format!("/api/v1/runs/{queued}"), None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(v["status"], "cancelled");

    let (status, _) = h.json("DELETE", &format!("/api/v1/runs/{busy}"), None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let end = h.wait_for(&busy, |s| s != "running").await;
    assert_eq!(end["status"], "cancelled");

    for id in [&busy, &queued] {
        let (status, _) = h
            .call("GET", &format!("/api/v1/runs/{id}/graph.csv"), None, vec![])
            .await;
        assert_eq!(status, StatusCode::CONFLICT);
        let (status, _) = h.json("DELETE", &format!("/api/v1/runs/{id}"), None).await;
        assert_eq!(status, StatusCode::CONFLICT);
    }
}

#[tokio::test]
async fn static_assets_are_served() {
    let assets = tempfile::tempdir().unwrap();
    std::fs::write(assets.path().join("index.html"), "<html>ok</html>").unwrap();
    let path = assets.path().to_path_buf();
    let h = harness(move |c| c.static_dir = Some(path));
    let (status, body) = h.call("GET", "/index.html", None, vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>ok</html>");
    let (status, _) = h.json("GET", "/api/v1/algorithms", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn at_most_w_runs_execute() {
    let h = harness(|c| c.workers = 2);
    let heavy = h.upload(&heavy_csv()).await;
    let ids = [
        h.start_run(&heavy, 300.0).await,
        h.start_run(&heavy, 300.0).await,
        h.start_run(&heavy, 300.0).await,
    ];
    h.wait_for(&ids[1], |s| s == "running").await;
    for _ in 0..20 {
        let (_, runs) = h.json("GET", "/api/v1/runs", None).await;
        let running = runs
            .as_array()
            .unwrap()
            .iter()
            .filter(|r| r["status"] == "running")
            .count();
        assert!(running <= 2);
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let (_, third) = h.json("GET", &format!("/api/v1/runs/{}", ids[2]), None).await;
    assert_eq!(third["status"], "queued");
    for id in ids.iter().rev() {
        h.json("DELETE", &format!("/api/v1/runs/{id}"), None).await;
    }
    for id in &ids {
        let end = h.wait_for(id, |s| s != "running" && s != "queued").await;
        assert_eq!(end["status"], "cancelled");
    }
}
