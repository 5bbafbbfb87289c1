#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use raft::client::{acquire_device, AbortFlag, AcquireError, AcquireOptions, AcquisitionReport};
use raft::events::EventKind;
use raft::server::{Server, SessionOutcome};
use raft::store::EvidenceStore;
use raft::transport::{loopback_pair, wrap_with_faults, Connection, FaultLog, FaultPlan, TransportError};
use raft_core::model::DeviceDescriptor;

pub const MIB: u64 = 1 << 20;
pub const PASSPHRASE: &[u8] = b"correct horse";

/// Writes `len` seeded pseudo-random bytes.
pub fn random_file(path: &Path, len: u64, seed: u64) -> Vec<u8> {
    let mut data = vec![0u8; len as usize];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut data);
    fs::write(path, &data).unwrap();
    data
}

pub fn device(id: &str, len: u64) -> DeviceDescriptor {
    DeviceDescriptor::new(id, format!("{id} image"), len)
}

/// In-process server reached through loopback pairs.
pub struct Harness {
    pub server: Arc<Server>,
    pub store_root: PathBuf,
    pub sessions: Arc<Mutex<Vec<JoinHandle<SessionOutcome>>>>,
    pub fault_logs: Arc<Mutex<Vec<FaultLog>>>,
}

impl Harness {
    pub fn new(store_root: &Path) -> Self {
        Harness::with_server(store_root, |store| Server::new(store, Some(PASSPHRASE.to_vec())))
    }

    pub fn with_server(store_root: &Path, build: impl FnOnce(EvidenceStore) -> Arc<Server>) -> Self {
        let store = EvidenceStore::open(store_root).unwrap();
        Harness {
            server: build(store),
            store_root: store_root.to_path_buf(),
            sessions: Arc::default(),
            fault_logs: Arc::default(),
        }
    }

    /// Connector that opens a fresh loopback connection per call. The plan
    /// for the n-th connection comes from `plans(n)`.
    pub fn connector(&self, plans: impl Fn(usize) -> Option<FaultPlan> + 'static) -> impl FnMut() -> Result<Connection, TransportError> {
        let server = self.server.clone();
        let sessions = self.sessions.clone();
        let logs = self.fault_logs.clone();
        let mut n = 0;
        move || {
            let (server_end, client_end) = loopback_pair();
            sessions.lock().unwrap().push(server.spawn_connection(server_end));
            let plan = plans(n);
            n += 1;
            Ok(match plan {
                Some(plan) => {
                    let (conn, log) = wrap_with_faults(client_end, plan);
                    logs.lock().unwrap().push(log);
                    conn
                }
                None => client_end,
            })
        }
    }

    pub fn join(&self) -> Vec<SessionOutcome> {
        let handles: Vec<_> = self.sessions.lock().unwrap().drain(..).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    }
}

pub fn options(chunk_size: u64) -> AcquireOptions {
    let mut o = AcquireOptions::new("case-1", PASSPHRASE);
    o.chunk_size = chunk_size;
    o.insecure_ok = true;
    o
}

pub fn run(
    descriptor: &DeviceDescriptor,
    path: &Path,
    options: &AcquireOptions,
    connect: &mut dyn FnMut() -> Result<Connection, TransportError>,
) -> (Result<AcquisitionReport, AcquireError>, Vec<EventKind>) {
    let mut events = Vec::new();
    let result = acquire_device(descriptor, path, options, connect, &AbortFlag::default(), &mut |e| events.push(e));
    (result, events)
}

impl Harness {
    /// Thread-safe connector for the agent: every call opens a new loopback
    /// connection served by this harness.
    pub fn agent_connector(&self) -> raft::agent::Connector {
        let server = self.server.clone();
        let sessions = self.sessions.clone();
        Arc::new(move |_device: &str, _attempt: usize| {
            let (server_end, client_end) = loopback_pair();
            sessions.lock().unwrap().push(server.spawn_connection(server_end));
            Ok(client_end)
        })
    }
}

/// Minimal HTTP/1.1 client for the control API.
pub mod http {
    use std::io::{Read, Write};
    use std::net::{SocketAddr, TcpStream};

    pub fn request(addr: SocketAddr, method: &str, path: &str, token: Option<&str>, body: Option<&str>) -> (u16, serde_json::Value) {
        let (status, text) = raw(addr, method, path, &headers(token), body);
        let json = if text.trim().is_empty() { serde_json::Value::Null } else { serde_json::from_str(&text).unwrap() };
        (status, json)
    }

    pub fn headers(token: Option<&str>) -> Vec<(String, String)> {
        token.map(|t| vec![("Authorization".to_string(), format!("Bearer {t}"))]).unwrap_or_default()
    }

    pub fn raw(addr: SocketAddr, method: &str, path: &str, headers: &[(String, String)], body: Option<&str>) -> (u16, String) {
        let mut s = TcpStream::connect(addr).unwrap();
        let body = body.unwrap_or("");
        let mut req = format!("{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Length: {}\r\n", body.len());
        for (k, v) in headers {
            req.push_str(&format!("{k}: {v}\r\n"));
        }
        req.push_str("\r\n");
        req.push_str(body);
        s.write_all(req.as_bytes()).unwrap();
        let mut resp = String::new();
        s.read_to_string(&mut resp).unwrap();
        let (head, rest) = resp.split_once("\r\n\r\n").unwrap();
        let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
        (status, rest.to_string())
    }

    /// Parses `id:` / `event:` / `data:` blocks of an event stream.
    pub fn sse_events(text: &str) -> Vec<(u64, String, serde_json::Value)> {
        text.split("\n\n")
            .filter_map(|block| {
                let mut id = None;
                let mut event = None;
                let mut data = None;
                for line in block.lines() {
                    if let Some(v) = line.strip_prefix("id: ") {
                        id = v.parse().ok();
                    } else if let Some(v) = line.strip_prefix("event: ") {
                        event = Some(v.to_string());
                    } else if let Some(v) = line.strip_prefix("data: ") {
                        data = serde_json::from_str(v).ok();
                    }
                }
                Some((id?, event?, data?))
            })
            .collect()
    }
}
