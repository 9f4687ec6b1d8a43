mod common;

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use common::world;
use genplanner_core::eval::EvaluationReport;
use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_genplanner"));
    cmd.env_remove("GENPLANNER_DATA_DIR");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn offline_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let enc = root.join("encoder.json");
    let gen = root.join("hier.json");
    let reward = root.join("reward.json");
    let report = root.join("report.json");
    let small = ["--n", "6", "--zones", "3", "--categories", "6", "--features", "4", "--cities", "30"];
    let out = run(&[&["synth", "--out", p(&data)][..], &small].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());

    assert_eq!(code(&run(&["train", "--model", "encoder", "--data", p(&data), "--out", p(&enc), "--epochs", "20"])), 0);
    let out = run(&["train", "--model", "hier", "--data", p(&data), "--out", p(&gen), "--encoder", p(&enc), "--epochs", "2", "--limit", "20"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&run(&["train", "--model", "reward", "--data", p(&data), "--out", p(&reward), "--encoder", p(&enc), "--epochs", "5"])), 0);

    let out = run(&["generate", "--model-ckpt", p(&gen), "--encoder", p(&enc), "--data", p(&data), "--context-id", "city_00001", "--instruction", "green rate high"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let payload: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(payload["plan"]["n"], 6);
    assert_eq!(payload["plan"]["layers"].as_array().unwrap().len(), 6);

    let out = run(&["evaluate", "--model-ckpt", p(&gen), "--encoder", p(&enc), "--data", p(&data), "--out", p(&report), "--count", "10"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: EvaluationReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(report.samples.len(), 10);
    assert!(report.diversity.is_some());
    assert_eq!(report.provenance.model_id, "hier:hier");
}

#[test]
fn exit_codes_separate_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(code(&run(&["train", "--model", "hier", "--data", p(&missing), "--out", "x.json"])), 3);
    assert_eq!(code(&run(&["train", "--model", "bogus", "--data", "d", "--out", "x.json"])), 2);
    assert_eq!(code(&run(&["serve", "--config", p(&missing)])), 2);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "port = \"eighty\"").unwrap();
    assert_eq!(code(&run(&["serve", "--config", p(&bad)])), 2);

    let out = run(&["synth", "--out", p(&dir.path().join("d")), "--n", "6", "--zones", "3", "--categories", "6", "--features", "4", "--cities", "8"]);
    assert_eq!(code(&out), 0);
    let out = run(&["train", "--model", "hier", "--data", p(&dir.path().join("d")), "--out", "x.json"]);
    assert_eq!(code(&out), 2, "missing --encoder is a usage error");
}

fn http(port: u16, method: &str, path: &str, body: &str) -> (u16, Value) {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).unwrap();
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(req.as_bytes()).unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let (head, rest) = raw.split_once("\r\n\r\n").unwrap();
    let status = head.split(' ').nth(1).unwrap().parse().unwrap();
    let body = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        let mut out = String::new();
        let mut rest = rest;
        while let Some((size, tail)) = rest.split_once("\r\n") {
            let n = usize::from_str_radix(size.trim(), 16).unwrap();
            if n == 0 {
                break;
            }
            out.push_str(&tail[..n]);
            rest = &tail[n + 2..];
        }
        out
    } else {
        rest.to_string()
    };
    (status, serde_json::from_str(&body).unwrap())
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn serve(config: &Path, data_dir: Option<&Path>) -> (Server, u16) {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let text = std::fs::read_to_string(config).unwrap().replace("port = 0", &format!("port = {port}"));
    let with_port = config.with_file_name(format!("serve-{port}.toml"));
    std::fs::write(&with_port, text).unwrap();
    let mut cmd = bin();
    if let Some(dir) = data_dir {
        cmd.env("GENPLANNER_DATA_DIR", dir);
    }
    let child = cmd.args(["serve", "--config", p(&with_port)]).stderr(Stdio::null()).spawn().unwrap();
    let server = Server(child);
    let start = Instant::now();
    while TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(start.elapsed() < Duration::from_secs(30), "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }
    (server, port)
}

#[test]
fn served_session_replays_after_restart() {
    let w = world(3);
    let (server, port) = serve(&w.config_path, None);
    let (status, created) = http(port, "POST", "/sessions", r#"{"context_id":"city_00002"}"#);
    assert_eq!(status, 201);
    let id = created["session_id"].as_str().unwrap().to_string();
    let turns = [("instruction", "green rate low"), ("feedback", "green rate very high"), ("feedback", "residential density low")];
    for (kind, text) in turns {
        let (status, body) = http(port, "POST", &format!("/sessions/{id}/{kind}"), &format!(r#"{{"text":"{text}"}}"#));
        assert_eq!(status, 200, "{body}");
    }
    let (_, before) = http(port, "GET", &format!("/sessions/{id}/history"), "");
    assert_eq!(before["iterations"].as_array().unwrap().len(), 3);
    drop(server);

    let (_server, port) = serve(&w.config_path, None);
    let (_, after) = http(port, "GET", &format!("/sessions/{id}/history"), "");
    assert_eq!(before, after);

    let out = run(&["session-replay", "--data-dir", p(w.path()), "--session", &id, "--config", p(&w.config_path)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["instruction"]["green_rate"], 4);
    assert_eq!(lines[2]["instruction"]["residential_density"], 1);
    assert_eq!(code(&run(&["session-replay", "--data-dir", p(w.path()), "--session", "absent"])), 3);
}

#[test]
fn data_dir_comes_from_the_environment() {
    let w = world(2);
    let moved = tempfile::tempdir().unwrap();
    for sub in ["checkpoints", "dataset"] {
        std::fs::rename(w.path().join(sub), moved.path().join(sub)).unwrap();
    }
    assert_eq!(code(&run(&["serve", "--config", p(&w.config_path)])), 2);
    let (_server, port) = serve(&w.config_path, Some(moved.path()));
    let (status, created) = http(port, "POST", "/sessions", r#"{"context_id":"city_00001"}"#);
    assert_eq!(status, 201);
    let id = created["session_id"].as_str().unwrap();
    assert!(moved.path().join("sessions").join(format!("{id}.jsonl")).exists());
}
