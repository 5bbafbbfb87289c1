//! Multi-session acquisition server.
//!
//! Each connection gets a session loop that owns the protocol state machine
//! and the session's store directory, a reader thread feeding it inbound
//! frames, and a verification worker so that digesting chunk `s` overlaps
//! receipt of chunk `s + 1`.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use raft_core::digest::{digest_bytes, DigestValue};
use raft_core::model::FinalVerdict;
use raft_core::session::{ServerCommand, ServerEvent, ServerFailure, ServerSession, ServerState};
use raft_core::timing::TraceKind;
use raft_core::wire::WireMessage;

use crate::store::{EvidenceStore, SessionWriter, StoreError};
use crate::trace::{record, TraceRecorder};
use crate::transport::{stream_listen, Connection, MessageWriter, StreamListener, TransportError};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Test instrumentation. Defaults do nothing.
#[derive(Debug, Clone, Default)]
pub struct ServerHooks {
    /// Extra time spent in every chunk verification.
    pub verify_delay: Duration,
    /// Flip one stored image byte just before final verification.
    pub tamper_before_finalize: bool,
    pub trace: Option<TraceRecorder>,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub store_root: PathBuf,
    pub bind: String,
    /// `None` refuses every client.
    pub passphrase: Option<Vec<u8>>,
    /// A session with no traffic for this long is suspended.
    pub idle_timeout: Duration,
    pub hooks: ServerHooks,
}

impl ServerConfig {
    pub fn new(store_root: impl Into<PathBuf>, bind: impl Into<String>, passphrase: Option<Vec<u8>>) -> Self {
        ServerConfig {
            store_root: store_root.into(),
            bind: bind.into(),
            passphrase,
            idle_timeout: Duration::from_secs(300),
            hooks: ServerHooks::default(),
        }
    }
}

/// How one connection ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionOutcome {
    pub peer: String,
    pub session_id: Option<String>,
    pub device_dir: Option<PathBuf>,
    pub verdict: Option<FinalVerdict>,
    /// Why the session stopped short of a verdict.
    pub interrupted: Option<String>,
}

#[derive(Debug)]
enum Event {
    Inbound(WireMessage),
    ReadEnded(Option<String>),
    Verified { seq: u64, payload: Vec<u8>, recomputed: DigestValue },
}

type ActiveSet = Arc<(Mutex<HashSet<(String, String)>>, Condvar)>;

/// How long a new job waits for an earlier session on the same device to
/// wind down, as happens when a client reconnects after a lost link.
const ACTIVE_WAIT: Duration = Duration::from_secs(10);

/// Releases a (case, device) reservation when dropped.
struct ActiveJob {
    key: (String, String),
    set: ActiveSet,
}

impl ActiveJob {
    fn acquire(set: &ActiveSet, key: (String, String), wait: Duration) -> Option<ActiveJob> {
        let guard = set.0.lock().unwrap_or_else(|p| p.into_inner());
        let (mut guard, _) = set
            .1
            .wait_timeout_while(guard, wait, |s| s.contains(&key))
            .unwrap_or_else(|p| p.into_inner());
        guard.insert(key.clone()).then(|| ActiveJob { key, set: set.clone() })
    }
}

impl Drop for ActiveJob {
    fn drop(&mut self) {
        self.set.0.lock().unwrap_or_else(|p| p.into_inner()).remove(&self.key);
        self.set.1.notify_all();
    }
}

#[derive(Debug)]
pub struct Server {
    store: EvidenceStore,
    passphrase: Option<Vec<u8>>,
    idle_timeout: Duration,
    hooks: ServerHooks,
    active: ActiveSet,
    shutdown: Arc<AtomicBool>,
    sessions: Mutex<Vec<JoinHandle<SessionOutcome>>>,
}

/// Requests a graceful stop from any thread.
#[derive(Debug, Clone)]
pub struct ShutdownHandle(Arc<AtomicBool>);

impl ShutdownHandle {
    pub fn shutdown(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_shutdown(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

const POLL: Duration = Duration::from_millis(20);

impl Server {
    pub fn new(store: EvidenceStore, passphrase: Option<Vec<u8>>) -> Arc<Server> {
        Server::with_options(store, passphrase, Duration::from_secs(300), ServerHooks::default())
    }

    pub fn with_options(
        store: EvidenceStore,
        passphrase: Option<Vec<u8>>,
        idle_timeout: Duration,
        hooks: ServerHooks,
    ) -> Arc<Server> {
        Arc::new(Server {
            store,
            passphrase,
            idle_timeout,
            hooks,
            active: Arc::default(),
            shutdown: Arc::default(),
            sessions: Mutex::default(),
        })
    }

    pub fn store(&self) -> &EvidenceStore {
        &self.store
    }

    pub fn shutdown_handle(&self) -> ShutdownHandle {
        ShutdownHandle(self.shutdown.clone())
    }

    /// Serves one connection on a new thread.
    pub fn spawn_connection(self: &Arc<Self>, conn: Connection) -> JoinHandle<SessionOutcome> {
        let me = self.clone();
        thread::Builder::new()
            .name(format!("session {}", conn.peer))
            .spawn(move || me.serve_connection(conn))
            .expect("spawning session thread")
    }

    /// Accepts connections until shutdown, then waits for every session.
    pub fn run(self: &Arc<Self>, listener: StreamListener) -> Result<Vec<SessionOutcome>, ServerError> {
        listener.set_nonblocking(true).map_err(TransportError::from)?;
        while !self.shutdown.load(Ordering::SeqCst) {
            match listener.try_accept() {
                Ok(Some(conn)) => {
                    log::info!("accepted connection from {}", conn.peer);
                    let handle = self.spawn_connection(conn);
                    self.sessions.lock().unwrap_or_else(|p| p.into_inner()).push(handle);
                }
                Ok(None) => thread::sleep(POLL),
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(POLL);
                }
            }
        }
        log::info!("shutting down; waiting for active sessions");
        let handles: Vec<_> = std::mem::take(&mut *self.sessions.lock().unwrap_or_else(|p| p.into_inner()));
        Ok(handles.into_iter().filter_map(|h| h.join().ok()).collect())
    }

    /// Runs one protocol session to completion on the calling thread.
    pub fn serve_connection(&self, conn: Connection) -> SessionOutcome {
        let peer = conn.peer.clone();
        let (mut reader, writer, closer) = conn.split();
        let (events_tx, events) = mpsc::channel::<Event>();

        let reader_tx = events_tx.clone();
        let reader_thread = thread::spawn(move || loop {
            match reader.recv() {
                Ok(Some(msg)) => {
                    if reader_tx.send(Event::Inbound(msg)).is_err() {
                        return;
                    }
                }
                Ok(None) => {
                    let _ = reader_tx.send(Event::ReadEnded(None));
                    return;
                }
                Err(e) => {
                    let _ = reader_tx.send(Event::ReadEnded(Some(e.to_string())));
                    return;
                }
            }
        });

        let (verify_tx, verify_rx) = mpsc::channel::<(u64, Vec<u8>, DigestValue)>();
        let verify_events = events_tx;
        let delay = self.hooks.verify_delay;
        let verify_trace = self.hooks.trace.clone();
        let verify_thread = thread::spawn(move || {
            for (seq, payload, claimed) in verify_rx {
                record(&verify_trace, TraceKind::VerifyStart { seq });
                let recomputed = digest_bytes(claimed.algorithm(), &payload);
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
                record(&verify_trace, TraceKind::VerifyEnd { seq, ok: recomputed.ct_eq(&claimed) });
                if verify_events.send(Event::Verified { seq, payload, recomputed }).is_err() {
                    return;
                }
            }
        });

        let mut run = SessionRun {
            server: self,
            session: ServerSession::new(rand::random(), self.passphrase.as_deref()),
            writer,
            verify_tx: Some(verify_tx),
            store: None,
            active: None,
            outcome: SessionOutcome { peer, session_id: None, device_dir: None, verdict: None, interrupted: None },
        };
        run.drive(&events);

        drop(run.verify_tx.take());
        closer.close();
        let _ = verify_thread.join();
        let _ = reader_thread.join();
        run.finish()
    }
}

struct SessionRun<'a> {
    server: &'a Server,
    session: ServerSession,
    writer: MessageWriter,
    verify_tx: Option<Sender<(u64, Vec<u8>, DigestValue)>>,
    store: Option<SessionWriter>,
    active: Option<ActiveJob>,
    outcome: SessionOutcome,
}

impl SessionRun<'_> {
    fn drive(&mut self, events: &Receiver<Event>) {
        let mut idle = Duration::ZERO;
        loop {
            if self.session.is_terminal() {
                return;
            }
            if self.server.shutdown.load(Ordering::SeqCst) && !self.session.verification_pending() {
                self.interrupt("server shutting down");
                return;
            }
            let event = match events.recv_timeout(POLL) {
                Ok(e) => {
                    idle = Duration::ZERO;
                    e
                }
                Err(RecvTimeoutError::Timeout) => {
                    idle += POLL;
                    if idle >= self.server.idle_timeout {
                        self.interrupt("idle timeout");
                        self.send(&WireMessage::Abort { reason: "idle timeout".into() });
                        return;
                    }
                    continue;
                }
                Err(RecvTimeoutError::Disconnected) => {
                    self.interrupt("event channel closed");
                    return;
                }
            };
            let step = match event {
                Event::Inbound(msg) => {
                    if let WireMessage::ChunkData { seq, .. } = &msg {
                        record(&self.server.hooks.trace, TraceKind::ChunkReceived { seq: *seq });
                    }
                    ServerEvent::Inbound(msg)
                }
                Event::Verified { seq, payload, recomputed } => ServerEvent::VerifyDone { seq, payload, recomputed },
                Event::ReadEnded(reason) => {
                    self.interrupt(&reason.unwrap_or_else(|| "client disconnected".into()));
                    return;
                }
            };
            self.feed(step);
        }
    }

    fn feed(&mut self, event: ServerEvent) {
        let mut queue = std::collections::VecDeque::from([event]);
        while let Some(event) = queue.pop_front() {
            match self.session.step(event) {
                Ok(commands) => {
                    for command in commands {
                        if let Some(follow_up) = self.execute(command) {
                            queue.push_back(follow_up);
                        }
                    }
                }
                Err(e) => {
                    log::warn!("{}: {e}", self.outcome.peer);
                    self.send(&WireMessage::Abort { reason: e.to_string() });
                    self.interrupt(&e.to_string());
                    return;
                }
            }
        }
    }

    fn execute(&mut self, command: ServerCommand) -> Option<ServerEvent> {
        let hooks = &self.server.hooks;
        match command {
            ServerCommand::Send(msg) => {
                if let (WireMessage::Nak { seq, reason }, Some(store)) = (&msg, self.store.as_mut()) {
                    store.log(&format!("chunk {seq} rejected: {reason}"));
                }
                self.send(&msg);
                None
            }
            ServerCommand::OpenJob(job) => Some(self.open_job(job)),
            ServerCommand::Verify { seq, payload, claimed } => {
                if let Some(tx) = &self.verify_tx {
                    let _ = tx.send((seq, payload, claimed));
                }
                None
            }
            ServerCommand::Append { seq, payload, digest, attempts } => {
                let store = self.store.as_mut().expect("append only after job open");
                record(&hooks.trace, TraceKind::AppendStart { seq });
                let result = store.append_chunk(seq, &payload, &digest, attempts);
                record(&hooks.trace, TraceKind::AppendEnd { seq });
                if let Err(e) = result {
                    log::error!("append of chunk {seq} failed: {e}");
                    self.host_failure(format!("server storage failure: {e}"));
                }
                None
            }
            ServerCommand::Discarded { seq, recomputed } => {
                if let Some(store) = self.store.as_mut() {
                    store.log(&format!("chunk {seq} discarded, recomputed {}", recomputed.to_hex()));
                }
                None
            }
            ServerCommand::FinalVerify => {
                let store = self.store.as_mut().expect("finalize only after job open");
                if hooks.tamper_before_finalize && store.image_len() > 0 {
                    let _ = store.tamper_image_byte(0);
                }
                record(&hooks.trace, TraceKind::FinalVerifyStart);
                let result = store.final_check();
                match result {
                    Ok(check) => {
                        let verified = check.length_ok
                            && check.recomputed.ct_eq(&store.record().manifest.whole_image_digest);
                        record(&hooks.trace, TraceKind::FinalVerifyEnd { verified });
                        let verdict = if verified { FinalVerdict::Verified } else { FinalVerdict::Failed };
                        if let Err(e) = store.record_verdict(verdict, Some(&check.recomputed)) {
                            log::error!("recording verdict failed: {e}");
                        }
                        self.outcome.verdict = Some(verdict);
                        Some(ServerEvent::FinalVerifyDone { recomputed: check.recomputed, length_ok: check.length_ok })
                    }
                    Err(e) => {
                        log::error!("final verification failed to run: {e}");
                        self.host_failure(format!("final verification error: {e}"));
                        None
                    }
                }
            }
        }
    }

    fn host_failure(&mut self, reason: String) {
        self.interrupt(&reason);
        for command in self.session.host_failure(reason) {
            if let ServerCommand::Send(msg) = command {
                self.send(&msg);
            }
        }
    }

    fn open_job(&mut self, job: raft_core::session::JobSpec) -> ServerEvent {
        let key = (job.case_id.clone(), job.device.device_id.clone());
        let Some(active) = ActiveJob::acquire(&self.server.active, key.clone(), ACTIVE_WAIT) else {
            return ServerEvent::JobRefused {
                reason: format!("device {} of case {} is already being acquired", key.1, key.0),
            };
        };
        self.active = Some(active);
        let extra = BTreeMap::from([("client_peer".to_string(), self.outcome.peer.clone())]);
        match self.server.store.open_job(&job, extra) {
            Ok(w) => {
                let session_id = w.session_id().to_string();
                let resume_from = w.resumed_from();
                log::info!(
                    "{}: session {session_id} for {}/{} resume_from={resume_from}",
                    self.outcome.peer,
                    job.case_id,
                    job.device.device_id
                );
                self.outcome.session_id = Some(session_id.clone());
                self.outcome.device_dir = Some(w.dir().to_path_buf());
                self.store = Some(w);
                ServerEvent::JobOpened { session_id, resume_from }
            }
            Err(e) => {
                self.active = None;
                ServerEvent::JobRefused { reason: e.to_string() }
            }
        }
    }

    fn send(&mut self, msg: &WireMessage) {
        if let Err(e) = self.writer.send(msg) {
            log::debug!("{}: send of {} failed: {e}", self.outcome.peer, msg.name());
        }
    }

    fn interrupt(&mut self, reason: &str) {
        if self.outcome.interrupted.is_none() && self.outcome.verdict.is_none() {
            self.outcome.interrupted = Some(reason.to_string());
        }
        if let Some(store) = self.store.as_mut() {
            if self.outcome.verdict.is_none() {
                store.suspend(reason);
            }
        }
    }

    fn finish(mut self) -> SessionOutcome {
        match self.session.state() {
            ServerState::Done => {}
            ServerState::Failed(ServerFailure::ClientAborted(reason)) => {
                let reason = format!("client aborted: {reason}");
                self.interrupt(&reason);
            }
            ServerState::Failed(ServerFailure::AuthFailed) if self.outcome.session_id.is_none() => {
                self.outcome.interrupted.get_or_insert_with(|| "authentication failed".into());
            }
            _ => {}
        }
        self.outcome
    }
}

/// Binds, serves until `shutdown` is triggered, and drains sessions.
pub fn run_server(config: ServerConfig, ready: impl FnOnce(std::net::SocketAddr, ShutdownHandle)) -> Result<Vec<SessionOutcome>, ServerError> {
    let store = EvidenceStore::open(&config.store_root)?;
    let listener = stream_listen(config.bind.as_str())?;
    let addr = listener.local_addr().map_err(TransportError::from)?;
    let server = Server::with_options(store, config.passphrase, config.idle_timeout, config.hooks);
    log::info!("raft server listening on {addr}, store {}", config.store_root.display());
    ready(addr, server.shutdown_handle());
    server.run(listener)
}
