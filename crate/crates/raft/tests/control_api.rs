mod common;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::http::{raw, request, sse_events};
use common::*;
use raft::agent::Agent;
use raft::config::AgentConfig;
use raft::control_api::{self, ControlApiError};
use raft::server::{Server, ServerHooks};
use raft::store::IMAGE_FILE;
use raft_core::digest::{digest_bytes, HashAlgorithm};
use serde_json::Value;

const UNLOCK: &str = "let me in";

fn config(scan_root: &Path) -> AgentConfig {
    AgentConfig {
        passphrase_digest: Some(digest_bytes(HashAlgorithm::Sha512, UNLOCK.as_bytes()).to_hex()),
        scan_root: Some(scan_root.to_path_buf()),
        chunk_size: 64 * 1024,
        insecure_transport_ok: true,
        case_id: "case-api".into(),
        ..AgentConfig::default()
    }
}

struct Setup {
    _dir: tempfile::TempDir,
    harness: Harness,
    agent: Arc<Agent>,
    api: control_api::ControlServer,
    sources: Vec<(String, Vec<u8>)>,
}

/// Agent with devices a.img and b.img whose sessions use the server
/// passphrase `UNLOCK`.
fn setup(verify_delay: Duration) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let scan = dir.path().join("devices");
    fs::create_dir(&scan).unwrap();
    let sources = vec![
        ("a.img".to_string(), random_file(&scan.join("a.img"), 300_000, 1)),
        ("b.img".to_string(), random_file(&scan.join("b.img"), 200_000, 2)),
    ];
    let harness = Harness::with_server(&dir.path().join("store"), |store| {
        let hooks = ServerHooks { verify_delay, ..ServerHooks::default() };
        Server::with_options(store, Some(UNLOCK.as_bytes().to_vec()), Duration::from_secs(30), hooks)
    });
    let agent = Agent::new(config(&scan), harness.agent_connector()).unwrap();
    let api = control_api::start(agent.clone(), "127.0.0.1:0", false).unwrap();
    Setup { _dir: dir, harness, agent, api, sources }
}

fn unlock(s: &Setup) -> String {
    let (status, body) = request(s.api.addr(), "POST", "/unlock", None, Some(&format!(r#"{{"passphrase":"{UNLOCK}"}}"#)));
    assert_eq!(status, 200, "{body}");
    body["token"].as_str().unwrap().to_string()
}

fn wait_finished(s: &Setup, job: u64) -> Value {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let (status, body) = request(s.api.addr(), "GET", &format!("/jobs/{job}"), None, None);
        assert_eq!(status, 200);
        if body["state"] != "running" {
            return body;
        }
        assert!(Instant::now() < deadline, "job {job} did not finish");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn devices_are_readable_before_unlock() {
    let s = setup(Duration::ZERO);
    let (status, body) = request(s.api.addr(), "GET", "/devices", None, None);
    assert_eq!(status, 200);
    assert_eq!(body["unlocked"], false);
    let ids: Vec<_> = body["devices"].as_array().unwrap().iter().map(|d| d["device_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["a.img", "b.img"]);
    assert_eq!(body["devices"][0]["total_bytes"], 300_000);
    assert_eq!(body["devices"][0]["state"], "unselected");
}

#[test]
fn mutating_calls_need_a_token() {
    let s = setup(Duration::ZERO);
    let addr = s.api.addr();
    assert_eq!(request(addr, "POST", "/acquire", None, Some(r#"{"mode":"all"}"#)).0, 401);
    assert_eq!(request(addr, "POST", "/queue", None, Some(r#"{"a.img":1}"#)).0, 401);
    assert_eq!(request(addr, "POST", "/abort/1", None, None).0, 401);
    assert_eq!(request(addr, "POST", "/acquire", Some("forged"), Some(r#"{"mode":"all"}"#)).0, 401);
    let token = unlock(&s);
    assert_eq!(request(addr, "POST", "/queue", Some(&token), Some(r#"{"a.img":1}"#)).0, 200);
}

#[test]
fn wrong_passphrases_lock_the_agent() {
    let s = setup(Duration::ZERO);
    let addr = s.api.addr();
    for _ in 0..4 {
        let (status, body) = request(addr, "POST", "/unlock", None, Some(r#"{"passphrase":"nope"}"#));
        assert_eq!((status, body["error"].as_str().unwrap()), (403, "bad_passphrase"));
    }
    assert_eq!(request(addr, "POST", "/unlock", None, Some(r#"{"passphrase":"nope"}"#)).0, 423);
    let right = format!(r#"{{"passphrase":"{UNLOCK}"}}"#);
    assert_eq!(request(addr, "POST", "/unlock", None, Some(&right)).0, 423);
    assert_eq!(request(addr, "GET", "/devices", None, None).1["locked"], true);
}

#[test]
fn queue_validation() {
    let s = setup(Duration::ZERO);
    let token = unlock(&s);
    let addr = s.api.addr();
    let (status, body) = request(addr, "POST", "/queue", Some(&token), Some(r#"{"b.img":1,"a.img":2}"#));
    assert_eq!(status, 200);
    assert_eq!(body["queue"], serde_json::json!(["b.img", "a.img"]));
    assert_eq!(request(addr, "POST", "/queue", Some(&token), Some(r#"{"a.img":1}"#)).0, 409);
    assert_eq!(request(addr, "POST", "/queue", Some(&token), Some(r#"{"zzz":3}"#)).0, 404);
    assert_eq!(request(addr, "POST", "/queue", Some(&token), Some("not json")).0, 400);
    assert_eq!(request(addr, "POST", "/acquire", Some(&token), Some(r#"{"mode":"some"}"#)).0, 400);
    assert_eq!(request(addr, "GET", "/jobs/77", None, None).0, 404);
    assert_eq!(request(addr, "GET", "/nowhere", None, None).0, 404);
}

#[test]
fn prioritized_selection_is_acquired_in_order() {
    let s = setup(Duration::ZERO);
    let token = unlock(&s);
    let addr = s.api.addr();
    request(addr, "POST", "/queue", Some(&token), Some(r#"{"priorities":{"b.img":1,"a.img":2}}"#));
    let (status, body) = request(addr, "POST", "/acquire", Some(&token), Some(r#"{"mode":"selected"}"#));
    assert_eq!(status, 202);
    let job = body["job_id"].as_u64().unwrap();
    let done = wait_finished(&s, job);
    assert_eq!(done["state"], "completed");
    let order: Vec<_> = done["devices"].as_array().unwrap().iter().map(|d| d["device_id"].as_str().unwrap()).collect();
    assert_eq!(order, ["b.img", "a.img"]);
    assert!(done["devices"].as_array().unwrap().iter().all(|d| d["status"] == "verified"));

    let (_, text) = raw(addr, "GET", "/events?follow=0", &[], None);
    let events = sse_events(&text);
    let opened: Vec<_> = events
        .iter()
        .filter(|(_, kind, _)| kind == "session_opened")
        .map(|(_, _, d)| d["device_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(opened, ["b.img", "a.img"]);
    let ids: Vec<u64> = events.iter().map(|e| e.0).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));

    for outcome in s.harness.join() {
        let dir = outcome.device_dir.unwrap();
        let device = dir.file_name().unwrap().to_str().unwrap().to_string();
        let source = &s.sources.iter().find(|(id, _)| *id == device).unwrap().1;
        assert_eq!(&fs::read(dir.join(IMAGE_FILE)).unwrap(), source);
    }
    let (_, devices) = request(addr, "GET", "/devices", None, None);
    assert!(devices["devices"].as_array().unwrap().iter().all(|d| d["state"] == "done"));
}

#[test]
fn events_replay_after_last_event_id() {
    let s = setup(Duration::ZERO);
    let token = unlock(&s);
    let addr = s.api.addr();
    let job = request(addr, "POST", "/acquire", Some(&token), Some(r#"{"mode":"all"}"#)).1["job_id"].as_u64().unwrap();
    wait_finished(&s, job);
    let all = sse_events(&raw(addr, "GET", "/events?follow=0", &[], None).1);
    assert!(all.len() > 10);
    let cut = all[all.len() / 2].0;
    let header = [("Last-Event-ID".to_string(), cut.to_string())];
    let rest = sse_events(&raw(addr, "GET", "/events?follow=0", &header, None).1);
    assert_eq!(rest, all.iter().filter(|e| e.0 > cut).cloned().collect::<Vec<_>>());
    let by_query = sse_events(&raw(addr, "GET", &format!("/events?follow=0&last_event_id={cut}"), &[], None).1);
    assert_eq!(by_query, rest);
}

#[test]
fn live_stream_delivers_progress() {
    let s = setup(Duration::from_millis(5));
    let token = unlock(&s);
    let addr = s.api.addr();
    let mut stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    write!(stream, "GET /events HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
    let job = request(addr, "POST", "/acquire", Some(&token), Some(r#"{"mode":"all"}"#)).1["job_id"].as_u64().unwrap();
    let mut reader = BufReader::new(stream);
    let mut finalized = 0;
    let mut acked = 0;
    let mut line = String::new();
    while finalized < 2 {
        line.clear();
        assert!(reader.read_line(&mut line).unwrap() > 0, "stream closed early");
        if line.starts_with("event: job_finalized") {
            finalized += 1;
        }
        if line.starts_with("event: chunk_acked") {
            acked += 1;
        }
    }
    assert_eq!(acked, 5 + 4);
    assert_eq!(wait_finished(&s, job)["state"], "completed");
}

#[test]
fn conflicting_job_control_is_rejected() {
    let s = setup(Duration::from_millis(40));
    let token = unlock(&s);
    let addr = s.api.addr();
    let job = request(addr, "POST", "/acquire", Some(&token), Some(r#"{"mode":"all"}"#)).1["job_id"].as_u64().unwrap();
    let (status, body) = request(addr, "POST", "/acquire", Some(&token), Some(r#"{"mode":"all"}"#));
    assert_eq!((status, body["error"].as_str().unwrap()), (409, "job_running"));

    let deadline = Instant::now() + Duration::from_secs(10);
    let active = loop {
        let (_, devices) = request(addr, "GET", "/devices", None, None);
        if let Some(d) = devices["devices"].as_array().unwrap().iter().find(|d| d["state"] == "active") {
            break d["device_id"].as_str().unwrap().to_string();
        }
        assert!(Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(5));
    };
    let (status, body) = request(addr, "POST", "/queue", Some(&token), Some(&format!(r#"{{"{active}":9}}"#)));
    assert_eq!((status, body["error"].as_str().unwrap()), (409, "device_active"));

    assert_eq!(request(addr, "POST", &format!("/abort/{job}"), Some(&token), None).0, 202);
    let done = wait_finished(&s, job);
    assert_eq!(done["state"], "aborted");
    assert!(done["devices"].as_array().unwrap().iter().all(|d| d["status"] != "verified"));
    let (status, body) = request(addr, "POST", &format!("/abort/{job}"), Some(&token), None);
    assert_eq!((status, body["error"].as_str().unwrap()), (409, "job_finished"));
    assert_eq!(request(addr, "POST", "/abort/999", Some(&token), None).0, 404);
    s.harness.join();
    assert!(s.agent.jobs().iter().all(|j| j.state != raft::agent::JobState::Running));
}

#[test]
fn control_api_binds_loopback_only_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let agent = Agent::new(config(dir.path()), Arc::new(|_: &str, _: usize| unreachable!())).unwrap();
    assert!(matches!(control_api::start(agent.clone(), "0.0.0.0:0", false), Err(ControlApiError::NonLoopback(_))));
    let api = control_api::start(agent, "127.0.0.1:0", false).unwrap();
    assert!(api.addr().ip().is_loopback());
}
