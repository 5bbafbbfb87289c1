//! Client-side acquisition driver: pre-hash, connect, transfer, and resume
//! after lost connections.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use raft_core::digest::{DigestValue, HashAlgorithm};
use raft_core::model::{chunk_span, DeviceDescriptor, ModelError};
use raft_core::session::{ClientEvent, ClientFailure, ClientOutput, ClientSession, ClientState, JobSpec, DEFAULT_RETRY_LIMIT};
use raft_core::timing::TraceKind;
use raft_core::wire::WireMessage;

use crate::events::EventKind;
use crate::imaging::{open_source, ImagingError, ReadOnlySource};
use crate::trace::{record, TraceRecorder};
use crate::transport::{require_secure, Connection, MessageWriter, TransportError};

#[derive(Debug, thiserror::Error)]
pub enum AcquireError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("server refused the passphrase")]
    AuthRefused,
    #[error("chunk {seq} failed verification {attempts} times")]
    RetryLimitExceeded { seq: u64, attempts: u32 },
    #[error("server aborted: {0}")]
    ServerAborted(String),
    #[error("server recomputed {recomputed} for the stored image")]
    FinalVerificationFailed { recomputed: DigestValue },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("aborted: {0}")]
    Aborted(String),
    #[error("connection lost {attempts} times; giving up: {last}")]
    ConnectionLost { attempts: u32, last: String },
}

impl AcquireError {
    pub fn is_auth(&self) -> bool {
        matches!(self, AcquireError::AuthRefused)
    }

    pub fn is_protocol(&self) -> bool {
        matches!(
            self,
            AcquireError::Protocol(_) | AcquireError::ServerAborted(_) | AcquireError::FinalVerificationFailed { .. }
        )
    }
}

#[derive(Debug, Clone)]
pub struct AcquireOptions {
    pub case_id: String,
    pub chunk_size: u64,
    pub chunk_digest_algorithm: HashAlgorithm,
    pub whole_image_algorithm: HashAlgorithm,
    pub passphrase: Vec<u8>,
    pub retry_limit: u32,
    /// Reconnections allowed after a lost connection.
    pub max_reconnects: u32,
    pub reply_timeout: Duration,
    /// Allow a channel that is not confidential, integrity protected and
    /// server authenticated.
    pub insecure_ok: bool,
    pub trace: Option<TraceRecorder>,
}

impl AcquireOptions {
    pub fn new(case_id: impl Into<String>, passphrase: impl Into<Vec<u8>>) -> Self {
        AcquireOptions {
            case_id: case_id.into(),
            chunk_size: raft_core::model::DEFAULT_CHUNK_SIZE,
            chunk_digest_algorithm: HashAlgorithm::Sha512,
            whole_image_algorithm: HashAlgorithm::Sha512,
            passphrase: passphrase.into(),
            retry_limit: DEFAULT_RETRY_LIMIT,
            max_reconnects: 3,
            reply_timeout: Duration::from_secs(120),
            insecure_ok: false,
            trace: None,
        }
    }
}

/// Cooperative cancellation shared with a running acquisition.
#[derive(Debug, Clone, Default)]
pub struct AbortFlag(Arc<AtomicBool>);

impl AbortFlag {
    pub fn abort(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_aborted(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// One CHUNK_DATA transmission as seen by the client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub connection: u32,
    pub seq: u64,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcquisitionReport {
    pub device_id: String,
    pub session_id: String,
    pub whole_image_digest: DigestValue,
    pub chunk_count: u64,
    /// Resume point granted on each connection, in order.
    pub resume_points: Vec<u64>,
    pub transmissions: Vec<Transmission>,
    pub naks: u64,
    pub elapsed: Duration,
}

impl AcquisitionReport {
    pub fn connections(&self) -> usize {
        self.resume_points.len()
    }
}

/// Receives progress while an acquisition runs.
pub type ProgressSink<'a> = &'a mut dyn FnMut(EventKind);

/// Acquires one device. `connect` is called for the first connection and for
/// every reconnection after a lost link.
pub fn acquire_device(
    descriptor: &DeviceDescriptor,
    path: &std::path::Path,
    options: &AcquireOptions,
    connect: &mut dyn FnMut() -> Result<Connection, TransportError>,
    abort: &AbortFlag,
    progress: ProgressSink<'_>,
) -> Result<AcquisitionReport, AcquireError> {
    let started = Instant::now();
    let mut source = open_source(descriptor, path)?;
    progress(EventKind::PrehashStarted);
    record(&options.trace, TraceKind::PrehashStart);
    let whole = source.prehash(options.whole_image_algorithm)?;
    record(&options.trace, TraceKind::PrehashEnd);
    progress(EventKind::PrehashDone { digest: whole.to_hex() });

    let job = JobSpec {
        case_id: options.case_id.clone(),
        device: descriptor.clone(),
        chunk_size: options.chunk_size,
        chunk_digest_algorithm: options.chunk_digest_algorithm,
        whole_image_digest: whole.clone(),
    };
    let mut report = AcquisitionReport {
        device_id: descriptor.device_id.clone(),
        session_id: String::new(),
        whole_image_digest: whole,
        chunk_count: raft_core::model::chunk_count(descriptor.total_bytes, options.chunk_size)?,
        resume_points: Vec::new(),
        transmissions: Vec::new(),
        naks: 0,
        elapsed: Duration::ZERO,
    };

    let mut lost = 0u32;
    loop {
        if abort.is_aborted() {
            return Err(AcquireError::Aborted("operator abort".into()));
        }
        let conn = match connect() {
            Ok(c) => c,
            Err(e) if lost > 0 && lost <= options.max_reconnects => {
                lost += 1;
                log::warn!("reconnect failed: {e}");
                thread::sleep(Duration::from_millis(100));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        require_secure(conn.properties, options.insecure_ok)?;
        match run_connection(&job, conn, &mut source, options, abort, &mut report, progress) {
            Ok(()) => {
                report.elapsed = started.elapsed();
                return Ok(report);
            }
            Err(Interrupted::Lost(reason)) => {
                lost += 1;
                log::warn!("connection lost ({reason}); attempt {lost} of {}", options.max_reconnects);
                progress(EventKind::Error { detail: format!("connection lost: {reason}") });
                if lost > options.max_reconnects {
                    return Err(AcquireError::ConnectionLost { attempts: lost, last: reason });
                }
            }
            Err(Interrupted::Failed(e)) => return Err(e),
        }
    }
}

enum Interrupted {
    Lost(String),
    Failed(AcquireError),
}

enum Inbound {
    Message(WireMessage),
    Ended(Option<String>),
}

fn run_connection(
    job: &JobSpec,
    conn: Connection,
    source: &mut ReadOnlySource,
    options: &AcquireOptions,
    abort: &AbortFlag,
    report: &mut AcquisitionReport,
    progress: ProgressSink<'_>,
) -> Result<(), Interrupted> {
    let connection = report.resume_points.len() as u32;
    let (mut reader, mut writer, closer) = conn.split();
    let (tx, rx) = mpsc::channel();
    let reader_thread = thread::spawn(move || loop {
        let item = match reader.recv() {
            Ok(Some(m)) => Inbound::Message(m),
            Ok(None) => Inbound::Ended(None),
            Err(e) => Inbound::Ended(Some(e.to_string())),
        };
        let end = matches!(item, Inbound::Ended(_));
        if tx.send(item).is_err() || end {
            return;
        }
    });

    let mut session = ClientSession::new(job.clone(), &options.passphrase, rand::random(), options.retry_limit)
        .map_err(|e| Interrupted::Failed(e.into()))?;
    let mut driver = Driver { writer: &mut writer, source, options, report, progress, connection };
    let result = driver.run(&mut session, &rx, abort);
    closer.close();
    let _ = reader_thread.join();
    result
}

struct Driver<'a, 'p> {
    writer: &'a mut MessageWriter,
    source: &'a mut ReadOnlySource,
    options: &'a AcquireOptions,
    report: &'a mut AcquisitionReport,
    progress: &'a mut (dyn FnMut(EventKind) + 'p),
    connection: u32,
}

impl Driver<'_, '_> {
    fn run(&mut self, session: &mut ClientSession, rx: &mpsc::Receiver<Inbound>, abort: &AbortFlag) -> Result<(), Interrupted> {
        let mut pending = std::collections::VecDeque::from([ClientEvent::Start]);
        let mut waited = Duration::ZERO;
        const TICK: Duration = Duration::from_millis(50);
        loop {
            while let Some(event) = pending.pop_front() {
                self.observe(session, &event);
                let outputs = session.step(event).map_err(|e| Interrupted::Failed(AcquireError::Protocol(e.to_string())))?;
                for output in outputs {
                    if let Some(next) = self.execute(output)? {
                        pending.push_back(next);
                    }
                }
            }
            if session.is_terminal() {
                return self.conclude(session);
            }
            if abort.is_aborted() {
                pending.push_back(ClientEvent::Abort("operator abort".into()));
                continue;
            }
            match rx.recv_timeout(TICK) {
                Ok(Inbound::Message(m)) => {
                    waited = Duration::ZERO;
                    pending.push_back(ClientEvent::Inbound(m));
                }
                Ok(Inbound::Ended(reason)) => {
                    return Err(Interrupted::Lost(reason.unwrap_or_else(|| "server closed the connection".into())));
                }
                Err(RecvTimeoutError::Timeout) => {
                    waited += TICK;
                    if waited >= self.options.reply_timeout {
                        pending.push_back(ClientEvent::Timeout);
                    }
                }
                Err(RecvTimeoutError::Disconnected) => return Err(Interrupted::Lost("reader stopped".into())),
            }
        }
    }

    /// Mirrors inbound protocol events onto the progress stream.
    fn observe(&mut self, session: &ClientSession, event: &ClientEvent) {
        let ClientEvent::Inbound(msg) = event else { return };
        match msg {
            WireMessage::JobAccept { session_id, resume_from_seq } => {
                self.report.session_id = session_id.clone();
                self.report.resume_points.push(*resume_from_seq);
                (self.progress)(EventKind::SessionOpened { session_id: session_id.clone(), resume_from: *resume_from_seq });
            }
            WireMessage::Ack { seq } => {
                (self.progress)(EventKind::ChunkAcked { seq: *seq });
            }
            WireMessage::Nak { seq, .. } => {
                self.report.naks += 1;
                (self.progress)(EventKind::ChunkNacked { seq: *seq, attempt: session.attempts(*seq) });
            }
            _ => {}
        }
    }

    fn execute(&mut self, output: ClientOutput) -> Result<Option<ClientEvent>, Interrupted> {
        match output {
            ClientOutput::Send(msg) => {
                self.send(&msg)?;
                Ok(None)
            }
            ClientOutput::Transmit { seq, attempt } => {
                let total = self.source.total_bytes();
                let span = chunk_span(total, self.options.chunk_size, seq)
                    .ok_or_else(|| Interrupted::Failed(AcquireError::Protocol(format!("chunk {seq} outside the plan"))))?;
                let (payload, digest) = self
                    .source
                    .read_chunk(&span, self.options.chunk_digest_algorithm)
                    .map_err(|e| Interrupted::Failed(e.into()))?;
                record(&self.options.trace, TraceKind::ChunkSendStart { seq, attempt });
                self.report.transmissions.push(Transmission { connection: self.connection, seq, attempt });
                self.send(&WireMessage::ChunkData { seq, payload })?;
                self.send(&WireMessage::ChunkDigest { seq, digest })?;
                (self.progress)(EventKind::ChunkSent { seq, attempt });
                Ok(Some(ClientEvent::ChunkSent { seq }))
            }
        }
    }

    fn send(&mut self, msg: &WireMessage) -> Result<(), Interrupted> {
        self.writer.send(msg).map_err(|e| match e {
            TransportError::ConnectionLost(reason) => Interrupted::Lost(reason),
            other => Interrupted::Failed(other.into()),
        })
    }

    fn conclude(&mut self, session: &ClientSession) -> Result<(), Interrupted> {
        let failure = match session.state() {
            ClientState::Done => {
                (self.progress)(EventKind::JobFinalized { verdict: "verified".into() });
                return Ok(());
            }
            ClientState::Failed(f) => f.clone(),
            other => unreachable!("conclude called in {other:?}"),
        };
        let err = match failure {
            ClientFailure::AuthRefused => AcquireError::AuthRefused,
            ClientFailure::RetryLimitExceeded { seq, attempts } => AcquireError::RetryLimitExceeded { seq, attempts },
            ClientFailure::ProtocolViolation(d) => AcquireError::Protocol(d),
            ClientFailure::ServerAborted(r) => AcquireError::ServerAborted(r),
            ClientFailure::FinalVerificationFailed { recomputed } => {
                (self.progress)(EventKind::JobFinalized { verdict: "failed".into() });
                AcquireError::FinalVerificationFailed { recomputed }
            }
            ClientFailure::Timeout => AcquireError::Timeout,
            ClientFailure::OperatorAbort(r) => AcquireError::Aborted(r),
        };
        (self.progress)(EventKind::Error { detail: err.to_string() });
        Err(Interrupted::Failed(err))
    }
}

/// Source location for a device known to the client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSource {
    pub descriptor: DeviceDescriptor,
    pub path: PathBuf,
}
