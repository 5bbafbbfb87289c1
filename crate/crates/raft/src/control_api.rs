//! Local HTTP control surface for the operator console.
//!
//! Read-only calls are open; mutating calls need the token returned by
//! `POST /unlock`, sent as `Authorization: Bearer <token>`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server, StatusCode};

use crate::agent::{AcquireMode, Agent, AgentError, InventoryError};

const MAX_BODY: u64 = 64 * 1024;
const KEEPALIVE: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum ControlApiError {
    #[error("refusing to bind the control API to non-loopback address {0}")]
    NonLoopback(SocketAddr),
    #[error("cannot resolve {0}")]
    Resolve(String),
    #[error("cannot bind {addr}: {detail}")]
    Bind { addr: String, detail: String },
}

/// A running control API.
pub struct ControlServer {
    addr: SocketAddr,
    http: Arc<Server>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ControlServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.http.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the server stops.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn stop_handle(&self) -> impl Fn() + Send + Sync + 'static {
        let (stop, http) = (self.stop.clone(), self.http.clone());
        move || {
            stop.store(true, Ordering::SeqCst);
            http.unblock();
        }
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Serves the control API for `agent` on `bind`. Only loopback addresses are
/// accepted unless `allow_remote` is set.
pub fn start(agent: Arc<Agent>, bind: &str, allow_remote: bool) -> Result<ControlServer, ControlApiError> {
    let addr = bind
        .to_socket_addrs()
        .map_err(|_| ControlApiError::Resolve(bind.into()))?
        .next()
        .ok_or_else(|| ControlApiError::Resolve(bind.into()))?;
    if !allow_remote && !addr.ip().is_loopback() {
        return Err(ControlApiError::NonLoopback(addr));
    }
    let http = Server::http(addr).map_err(|e| ControlApiError::Bind { addr: bind.into(), detail: e.to_string() })?;
    let addr = http.server_addr().to_ip().unwrap_or(addr);
    let http = Arc::new(http);
    let stop = Arc::new(AtomicBool::new(false));
    let thread = {
        let (http, stop) = (http.clone(), stop.clone());
        thread::Builder::new()
            .name("control-api".into())
            .spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match http.recv() {
                        Ok(req) => {
                            let (agent, stop) = (agent.clone(), stop.clone());
                            thread::spawn(move || handle(&agent, req, &stop));
                        }
                        Err(e) => {
                            if !stop.load(Ordering::SeqCst) {
                                log::error!("control API accept failed: {e}");
                            }
                            break;
                        }
                    }
                }
            })
            .expect("spawning control API thread")
    };
    log::info!("control API listening on http://{addr}");
    Ok(ControlServer { addr, http, stop, thread: Some(thread) })
}

struct Reply {
    status: u16,
    body: Value,
}

impl Reply {
    fn ok(body: Value) -> Self {
        Reply { status: 200, body }
    }

    fn error(status: u16, code: &str, detail: impl std::fmt::Display) -> Self {
        Reply { status, body: json!({ "error": code, "detail": detail.to_string() }) }
    }
}

fn agent_error(e: AgentError) -> Reply {
    let (status, code) = match &e {
        AgentError::Inventory(InventoryError::UnknownDevice(_)) => (404, "unknown_device"),
        AgentError::Inventory(InventoryError::DeviceActive(_)) => (409, "device_active"),
        AgentError::Inventory(InventoryError::DuplicatePriority { .. }) => (409, "duplicate_priority"),
        AgentError::Inventory(InventoryError::Unavailable { .. }) => (409, "device_unavailable"),
        AgentError::Inventory(_) => (500, "inventory"),
        AgentError::BadPassphrase { .. } => (403, "bad_passphrase"),
        AgentError::Locked => (423, "locked"),
        AgentError::NotProvisioned => (503, "not_provisioned"),
        AgentError::NotUnlocked => (401, "not_unlocked"),
        AgentError::NoDevices => (422, "no_devices"),
        AgentError::JobRunning(_) => (409, "job_running"),
        AgentError::UnknownJob(_) => (404, "unknown_job"),
        AgentError::JobFinished(_) => (409, "job_finished"),
    };
    Reply::error(status, code, e)
}

fn header<'a>(req: &'a Request, name: &'static str) -> Option<&'a str> {
    req.headers().iter().find(|h| h.field.equiv(name)).map(|h| h.value.as_str())
}

fn bearer(req: &Request) -> Option<&str> {
    header(req, "Authorization").and_then(|v| v.strip_prefix("Bearer ")).map(str::trim)
}

fn read_json<T: for<'de> Deserialize<'de>>(req: &mut Request) -> Result<T, Reply> {
    let mut body = String::new();
    req.as_reader()
        .take(MAX_BODY)
        .read_to_string(&mut body)
        .map_err(|e| Reply::error(400, "bad_body", e))?;
    serde_json::from_str(if body.trim().is_empty() { "{}" } else { &body }).map_err(|e| Reply::error(400, "bad_json", e))
}

#[derive(Deserialize)]
struct UnlockBody {
    passphrase: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum QueueBody {
    Wrapped { priorities: BTreeMap<String, u32> },
    Plain(BTreeMap<String, u32>),
}

#[derive(Deserialize)]
struct AcquireBody {
    mode: String,
}

fn split_query(url: &str) -> (&str, BTreeMap<&str, &str>) {
    let (path, query) = url.split_once('?').unwrap_or((url, ""));
    let params = query.split('&').filter_map(|kv| kv.split_once('=')).collect();
    (path, params)
}

fn handle(agent: &Arc<Agent>, mut req: Request, stop: &AtomicBool) {
    let method = req.method().clone();
    let url = req.url().to_string();
    let (path, query) = split_query(&url);
    let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
    log::debug!("{method} {url}");

    if method == Method::Get && segments == ["events"] {
        let after = header(&req, "Last-Event-ID")
            .or_else(|| query.get("last_event_id").copied())
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(0);
        let follow = query.get("follow").is_none_or(|v| *v != "0");
        stream_events(agent, req, after, follow, stop);
        return;
    }

    let mutating = method == Method::Post && segments != ["unlock"];
    let reply = if mutating && !bearer(&req).is_some_and(|t| agent.check_token(t)) {
        Reply::error(401, "unauthorized", "a session token from POST /unlock is required")
    } else {
        route(agent, &method, &segments, &mut req).unwrap_or_else(|r| r)
    };
    let body = serde_json::to_vec(&reply.body).unwrap_or_default();
    let response = Response::from_data(body)
        .with_status_code(StatusCode(reply.status))
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"));
    if let Err(e) = req.respond(response) {
        log::debug!("control API client went away: {e}");
    }
}

fn route(agent: &Arc<Agent>, method: &Method, segments: &[&str], req: &mut Request) -> Result<Reply, Reply> {
    let parse_id = |s: &str| s.parse::<u64>().map_err(|_| Reply::error(400, "bad_job_id", format!("`{s}` is not a job id")));
    match (method, segments) {
        (Method::Get, ["devices"]) => {
            let inv = agent.inventory();
            Ok(Reply::ok(json!({
                "unlocked": agent.is_unlocked(),
                "locked": agent.is_locked(),
                "devices": inv.entries,
                "queue": inv.queue_order(),
            })))
        }
        (Method::Post, ["unlock"]) => {
            let body: UnlockBody = read_json(req)?;
            let token = agent.unlock(body.passphrase.as_bytes()).map_err(agent_error)?;
            Ok(Reply::ok(json!({ "token": token })))
        }
        (Method::Post, ["queue"]) => {
            let priorities = match read_json::<QueueBody>(req)? {
                QueueBody::Wrapped { priorities } | QueueBody::Plain(priorities) => priorities,
            };
            let queue = agent.set_priorities(&priorities).map_err(agent_error)?;
            Ok(Reply::ok(json!({ "queue": queue })))
        }
        (Method::Post, ["acquire"]) => {
            let body: AcquireBody = read_json(req)?;
            let mode = match body.mode.as_str() {
                "all" => AcquireMode::All,
                "selected" => AcquireMode::Selected,
                other => return Err(Reply::error(400, "bad_mode", format!("mode must be `all` or `selected`, not `{other}`"))),
            };
            let job_id = agent.start_job(mode).map_err(agent_error)?;
            Ok(Reply { status: 202, body: json!({ "job_id": job_id }) })
        }
        (Method::Get, ["jobs"]) => Ok(Reply::ok(json!({ "jobs": agent.jobs() }))),
        (Method::Get, ["jobs", id]) => {
            let id = parse_id(id)?;
            let job = agent.job(id).ok_or_else(|| agent_error(AgentError::UnknownJob(id)))?;
            Ok(Reply::ok(serde_json::to_value(job).unwrap_or_default()))
        }
        (Method::Post, ["abort", id]) => {
            let id = parse_id(id)?;
            agent.abort(id).map_err(agent_error)?;
            Ok(Reply { status: 202, body: json!({ "job_id": id, "aborting": true }) })
        }
        (Method::Get, ["bios", manufacturer]) => {
            let r = crate::agent::lookup_bios_backdoor(manufacturer);
            Ok(Reply::ok(json!({
                "manufacturer": r.manufacturer,
                "passwords": r.passwords,
                "advisory": r.advisory,
            })))
        }
        (_, ["devices" | "unlock" | "queue" | "acquire" | "jobs" | "events"]) | (_, ["jobs" | "abort" | "bios", _]) => {
            Err(Reply::error(405, "method_not_allowed", format!("{method} is not supported here")))
        }
        _ => Err(Reply::error(404, "not_found", "no such endpoint")),
    }
}

/// Writes events after `after` as a server-sent event stream. With `follow`
/// the stream stays open for new events until the client leaves or the
/// server stops.
fn stream_events(agent: &Agent, req: Request, mut after: u64, follow: bool, stop: &AtomicBool) {
    let mut out = req.into_writer();
    let head = "HTTP/1.1 200 OK\r\nContent-Type: text/event-stream\r\nCache-Control: no-cache\r\nConnection: close\r\n\r\n";
    if out.write_all(head.as_bytes()).and_then(|_| out.flush()).is_err() {
        return;
    }
    let bus = agent.events();
    loop {
        let batch = if follow { bus.wait_since(after, KEEPALIVE) } else { bus.since(after) };
        let mut text = String::new();
        for e in &batch {
            let data = serde_json::to_value(e).unwrap_or_default();
            let kind = data.get("kind").and_then(Value::as_str).unwrap_or("event").to_string();
            text.push_str(&format!("id: {}\nevent: {kind}\ndata: {data}\n\n", e.id));
            after = e.id;
        }
        if text.is_empty() {
            text.push_str(": keepalive\n\n");
        }
        if out.write_all(text.as_bytes()).and_then(|_| out.flush()).is_err() {
            return;
        }
        if !follow || stop.load(Ordering::SeqCst) || bus.is_closed() {
            return;
        }
    }
}
