use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trigfarm"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn http(addr: &str, method: &str, path: &str, body: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "{method} {path} HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
    let mut text = String::new();
    s.read_to_string(&mut text).unwrap();
    let status = text.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = text.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

#[test]
fn validate_prints_the_resolved_scenario() {
    let out = run(&["validate", scenario("crash1.json").to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["name"], "crash1");
    assert_eq!(v["queue_capacity"], 64);
}

#[test]
fn validate_names_the_bad_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "duration_s": -3}"#).unwrap();
    let out = run(&["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("duration_s"), "{}", stderr(&out));
    assert!(out.stdout.is_empty());

    std::fs::write(&bad, r#"{"seed": 1, "duration_s": 3, "colour": "red"}"#).unwrap();
    let out = run(&["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("colour"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["run"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let go = |tag: &str| {
        let trace = dir.path().join(format!("{tag}.ndjson"));
        let out = run(&["run", scenario("baseline.json").to_str().unwrap(), "--seed", "7", "--duration", "2", "--trace-out", trace.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        (out.stdout, std::fs::read(trace).unwrap())
    };
    let (report_a, trace_a) = go("a");
    let (report_b, trace_b) = go("b");
    assert_eq!(report_a, report_b);
    assert_eq!(trace_a, trace_b);
    assert!(!trace_a.is_empty());
    let v: serde_json::Value = serde_json::from_slice(&report_a).unwrap();
    assert_eq!(v["seed"], 7);
    assert_eq!(v["duration_s"], 2.0);
}

#[test]
fn crash_scenario_reports_both_latencies_and_summarises() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = run(&["run", scenario("crash1.json").to_str().unwrap(), "--duration", "20", "--report-out", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out.stdout.is_empty(), "report went to the file");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let faults = v["faults"].as_array().unwrap();
    assert_eq!(faults.len(), 1);
    assert!(faults[0]["detection_latency_s"].as_f64().unwrap() > 0.0);
    assert!(faults[0]["recovery_latency_s"].as_f64().unwrap() > 0.0);

    let out = run(&["report", report.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "faults\t1"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("fault.0\tprocess_crash L23/r0/s3")), "{text}");
}

#[test]
fn replay_rejects_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.ndjson");
    std::fs::write(&log, "").unwrap();
    let out = run(&["replay", scenario("crash1.json").to_str().unwrap(), log.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("overrides"), "{}", stderr(&out));
}

#[test]
fn serve_refuses_a_taken_port() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let out = run(&["serve", scenario("baseline.json").to_str().unwrap(), "--bind", &addr, "--exit-on-finish"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("cannot bind"), "{}", stderr(&out));
}

struct Served {
    child: std::process::Child,
    addr: String,
}

fn serve(args: &[&str]) -> Served {
    let mut child = bin().arg("serve").args(args).stdout(Stdio::null()).stderr(Stdio::piped()).spawn().unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let mut seen = Vec::new();
    let addr = loop {
        let line = lines.next().unwrap_or_else(|| panic!("serve printed no address: {seen:?}")).unwrap();
        if let Some(rest) = line.strip_prefix("listening on http://") {
            break rest.trim_end_matches("/v1").to_string();
        }
        seen.push(line);
    };
    std::thread::spawn(move || lines.for_each(drop));
    Served { child, addr }
}

fn wait(child: &mut std::process::Child, limit: Duration) -> i32 {
    let start = Instant::now();
    loop {
        if let Some(status) = child.try_wait().unwrap() {
            return status.code().unwrap_or(-1);
        }
        if start.elapsed() > limit {
            child.kill().ok();
            panic!("serve did not exit within {limit:?}");
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn served_session_replays_to_the_same_trace() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let base = scenario("baseline.json");
    let mut s = serve(&[
        base.to_str().unwrap(),
        "--bind",
        "127.0.0.1:0",
        "--speed",
        "max",
        "--paused",
        "--exit-on-finish",
        "--duration",
        "6",
        "--trace-out",
        &p("live.ndjson"),
        "--command-log",
        &p("commands.ndjson"),
        "--report-out",
        &p("live.json"),
    ]);
    let (status, body) = http(&s.addr, "POST", "/v1/faults", r#"{"kind":"hang","target":"L23/r0/s8","onset_s":1.5}"#);
    assert_eq!(status, 202, "{body}");
    let (status, _) = http(&s.addr, "POST", "/v1/actions", r#"{"action":"out_of_service","target":"L23/r0/s2"}"#);
    assert_eq!(status, 202);
    let (status, _) = http(&s.addr, "POST", "/v1/run/resume", "");
    assert_eq!(status, 200);
    assert_eq!(wait(&mut s.child, Duration::from_secs(60)), 0);

    let log = std::fs::read_to_string(p("commands.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let live = std::fs::read_to_string(p("live.ndjson")).unwrap();
    assert!(live.lines().any(|l| l.contains("operator")), "operator commands are in the trace");

    // The duration override lives in the scenario for replay.
    let fixed = p("fixed.json");
    let mut sc: serde_json::Value = serde_json::from_slice(&std::fs::read(&base).unwrap()).unwrap();
    sc["duration_s"] = 6.0.into();
    std::fs::write(&fixed, sc.to_string()).unwrap();
    let out = run(&["replay", &fixed, &p("commands.ndjson"), "--trace-out", &p("replay.ndjson"), "--report-out", &p("replay.json")]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(std::fs::read(p("replay.ndjson")).unwrap() == live.as_bytes(), "replayed trace differs");
    assert_eq!(std::fs::read(p("replay.json")).unwrap(), std::fs::read(p("live.json")).unwrap());
}

#[test]
fn paced_serve_follows_the_speed_factor() {
    let started = Instant::now();
    let mut s = serve(&[scenario("baseline.json").to_str().unwrap(), "--bind", "127.0.0.1:0", "--speed", "10", "--duration", "3", "--exit-on-finish"]);
    let (status, body) = http(&s.addr, "GET", "/v1/state", "");
    assert_eq!(status, 200);
    assert!(body.contains("\"speed\":10"), "{body}");
    assert_eq!(wait(&mut s.child, Duration::from_secs(30)), 0);
    let wall = started.elapsed().as_secs_f64();
    assert!((0.25..4.0).contains(&wall), "3 s at 10x took {wall} s");
}
