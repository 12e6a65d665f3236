use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tower::ServiceExt;

use trigfarm_api::{router, DriverOptions, SimHandle};
use trigfarm_core::control::{EventStreamRecord, Speed, StreamKind};
use trigfarm_core::kernel::TraceSink;
use trigfarm_core::runner::{replay, Runner};
use trigfarm_core::scenario::Scenario;
use trigfarm_core::sim::Simulation;

fn paused(scenario: Scenario) -> SimHandle {
    let sim = Simulation::new(scenario).unwrap().with_trace(TraceSink::digest());
    SimHandle::spawn(Runner::new(sim, Speed::Max).start_paused(), DriverOptions::default())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into())) };
    (status, value)
}

fn leaves<'a>(node: &'a Value, out: &mut Vec<&'a Value>) {
    match node["children"].as_array() {
        Some(c) if !c.is_empty() => c.iter().for_each(|n| leaves(n, out)),
        _ => out.push(node),
    }
}

#[tokio::test]
async fn farm_lists_every_worker_in_service() {
    let sim = paused(Scenario::desk(1, 5.0));
    let app = router(sim.client(), None);
    let (status, farm) = call(&app, Method::GET, "/v1/farm", None).await;
    assert_eq!(status, StatusCode::OK);
    let mut all = Vec::new();
    leaves(&farm["root"], &mut all);
    let count = |kind: &str| all.iter().filter(|n| n["kind"] == kind).count();
    assert_eq!(count("WorkerDSP"), 24, "{:?}", all.iter().map(|n| &n["kind"]).collect::<Vec<_>>());
    assert_eq!(count("WorkerPC"), 25);
    assert!(all.iter().filter(|n| n["kind"] == "WorkerDSP" || n["kind"] == "WorkerPC").all(|n| n["status"] == "InService"));
}

#[tokio::test]
async fn read_endpoints_answer() {
    let sim = paused(Scenario::desk(1, 5.0));
    let app = router(sim.client(), None);
    for path in ["/v1/metrics", "/v1/report", "/v1/state", "/v1/commands"] {
        let (status, _) = call(&app, Method::GET, path, None).await;
        assert_eq!(status, StatusCode::OK, "{path}");
    }
    let (status, _) = call(&app, Method::GET, "/v1/nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, state) = call(&app, Method::GET, "/v1/state", None).await;
    assert_eq!(state["paused"], true);
    assert_eq!(state["end_s"], 5.0);
}

#[tokio::test]
async fn command_errors_map_to_status_codes() {
    let sim = paused(Scenario::desk(1, 5.0));
    let app = router(sim.client(), None);
    let (status, body) = call(&app, Method::POST, "/v1/faults", Some(json!({"kind": "process_crash", "target": "L23/r9/s3"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_target");

    let (status, body) = call(&app, Method::POST, "/v1/faults", Some(json!({"kind": "meltdown", "target": "L23/r0/s3"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "invalid");

    let (status, _) = call(&app, Method::DELETE, "/v1/faults/42", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _) = call(&app, Method::POST, "/v1/actions", Some(json!({"action": "restart", "target": "L23/r0/s3"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "restart of a healthy node");

    let (status, _) = call(&app, Method::POST, "/v1/run/speed", Some(json!({"speed": -2.0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (_, commands) = call(&app, Method::GET, "/v1/commands", None).await;
    assert_eq!(commands, json!([]));
}

#[tokio::test]
async fn accepted_fault_carries_its_id_and_effective_time() {
    let sim = paused(Scenario::desk(1, 5.0));
    let app = router(sim.client(), None);
    let (status, ack) = call(&app, Method::POST, "/v1/faults", Some(json!({"kind": "process_crash", "target": "L23/r0/s3"}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(ack["outcome"]["outcome"], "fault_injected");
    assert_eq!(ack["outcome"]["id"], 0);
    assert_eq!(ack["effective_s"], 0.0);

    let (status, ack) = call(&app, Method::DELETE, "/v1/faults/0", None).await;
    assert_eq!(status, StatusCode::OK, "{ack}");
    let (_, commands) = call(&app, Method::GET, "/v1/commands", None).await;
    assert_eq!(commands.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn pause_freezes_time_and_the_api_stays_responsive() {
    let sim = Simulation::new(Scenario::desk(1, 1000.0)).unwrap();
    let handle = SimHandle::spawn(Runner::new(sim, Speed::Factor(50.0)), DriverOptions::default());
    let app = router(handle.client(), None);
    tokio::time::sleep(Duration::from_millis(200)).await;
    let (status, _) = call(&app, Method::POST, "/v1/run/pause", None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, a) = call(&app, Method::GET, "/v1/state", None).await;
    assert!(a["t_s"].as_f64().unwrap() > 0.0);
    tokio::time::sleep(Duration::from_millis(300)).await;
    let (_, b) = call(&app, Method::GET, "/v1/state", None).await;
    assert_eq!(a["t_s"], b["t_s"]);
    assert_eq!(b["paused"], true);

    let (status, ack) = call(&app, Method::POST, "/v1/run/speed", Some(json!({"speed": "max"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["outcome"]["speed"], "max");
    call(&app, Method::POST, "/v1/run/resume", None).await;
    tokio::time::sleep(Duration::from_millis(300)).await;
    let (_, c) = call(&app, Method::GET, "/v1/state", None).await;
    assert!(c["t_s"].as_f64().unwrap() > b["t_s"].as_f64().unwrap());
}

#[tokio::test]
async fn paced_run_tracks_the_wall_clock() {
    let sim = Simulation::new(Scenario::desk(1, 2.0)).unwrap();
    let handle = SimHandle::spawn(Runner::new(sim, Speed::Factor(10.0)), DriverOptions::default());
    let started = std::time::Instant::now();
    let status = tokio::time::timeout(Duration::from_secs(10), handle.client().finished()).await.unwrap();
    let wall = started.elapsed().as_secs_f64();
    assert!(status.state.finished);
    assert!((0.15..2.0).contains(&wall), "2 s at 10x took {wall} s");
}

#[tokio::test]
async fn snapshot_returns_both_views() {
    let sim = paused(Scenario::desk(1, 5.0));
    let app = router(sim.client(), None);
    let (status, body) = call(&app, Method::POST, "/v1/run/snapshot", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["ack"]["outcome"]["outcome"], "snapshot");
    assert!(body["farm"]["root"].is_object());
    assert!(body["metrics"]["crossings"].is_object());
}

#[tokio::test]
async fn finished_run_refuses_simulation_commands() {
    let sim = Simulation::new(Scenario::desk(1, 0.5)).unwrap();
    let handle = SimHandle::spawn(Runner::new(sim, Speed::Max), DriverOptions::default());
    handle.client().finished().await;
    let app = router(handle.client(), None);
    let (status, body) = call(&app, Method::POST, "/v1/faults", Some(json!({"kind": "hang", "target": "L23/r0/s1"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "finished");
    let (_, report) = call(&app, Method::GET, "/v1/report", None).await;
    assert_eq!(report["duration_s"], 0.5);
}

async fn vla_reports(policy: Option<Value>) -> u64 {
    let sim = paused(Scenario::desk(3, 3.0));
    let app = router(sim.client(), None);
    if let Some(p) = policy {
        let (status, ack) = call(&app, Method::PUT, "/v1/policies", Some(p)).await;
        assert_eq!(status, StatusCode::OK, "{ack}");
    }
    call(&app, Method::POST, "/v1/run/resume", None).await;
    sim.client().finished().await;
    let (_, report) = call(&app, Method::GET, "/v1/report", None).await;
    report["reports"]["vla_reports"].as_u64().unwrap()
}

#[tokio::test]
async fn lowered_threshold_fires_without_restart() {
    let quiet = vla_reports(None).await;
    let rules = json!({"rules": [{"metric": "cpu_temperature", "op": ">=", "threshold": 40.0, "severity": "Warning", "priority": 1, "tier": "report_upward"}]});
    let loud = vla_reports(Some(rules)).await;
    assert!(loud > quiet + 20, "quiet {quiet} loud {loud}");
}

#[tokio::test]
async fn static_assets_are_served_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>console</html>").unwrap();
    let sim = paused(Scenario::desk(1, 5.0));
    let app = router(sim.client(), Some(dir.path().to_path_buf()));
    let resp = app.clone().oneshot(Request::get("/").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<html>console</html>");
    let (status, _) = call(&app, Method::GET, "/v1/state", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn event_stream_shows_onset_then_detection() {
    let scenario = Scenario::desk(2, 8.0);
    let handle = paused(scenario.clone());
    let app = router(handle.client(), None);
    let listener = trigfarm_api::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(trigfarm_api::serve(listener, app.clone(), std::future::pending()));

    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream.write_all(b"GET /v1/events HTTP/1.1\r\nHost: x\r\nAccept: text/event-stream\r\n\r\n").await.unwrap();
    let mut lines = BufReader::new(stream).lines();
    let mut content_type = None;
    while let Some(line) = lines.next_line().await.unwrap() {
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-type:") {
            content_type = Some(v.trim().to_string());
        }
    }
    assert_eq!(content_type.as_deref(), Some("text/event-stream"));

    let (status, _) = call(&app, Method::POST, "/v1/faults", Some(json!({"kind": "process_crash", "target": "L23/r0/s3", "onset_s": 1.0}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    call(&app, Method::POST, "/v1/run/resume", None).await;

    let mut seen = Vec::new();
    let read = async {
        while let Some(line) = lines.next_line().await.unwrap() {
            // Chunked framing lines are not SSE fields.
            if let Some(data) = line.strip_prefix("data:") {
                let rec: EventStreamRecord = serde_json::from_str(data.trim()).unwrap();
                let detected = rec.kind == StreamKind::Fault && rec.summary.contains("detected");
                seen.push(rec);
                if detected {
                    break;
                }
            }
        }
    };
    tokio::time::timeout(Duration::from_secs(30), read).await.expect("detection within the stream");
    let onset = seen.iter().position(|r| r.kind == StreamKind::Fault && r.summary.contains("process_crash")).expect("onset record");
    assert!(onset < seen.len() - 1);
    assert!(seen.windows(2).all(|w| w[0].seq < w[1].seq && w[0].t <= w[1].t));
    assert_eq!(seen[0].kind, StreamKind::Command);

    // The live command log replays to the same trace.
    handle.client().finished().await;
    let runner = handle.shutdown().runner;
    let live = runner.sim().trace().unwrap().hex_digest();
    let mut again = Simulation::new(scenario).unwrap().with_trace(TraceSink::digest());
    replay(&mut again, runner.command_log()).unwrap();
    assert_eq!(again.trace().unwrap().hex_digest(), live);
    server.abort();
}
