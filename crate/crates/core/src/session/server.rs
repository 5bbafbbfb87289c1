use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{passphrase_proof, JobSpec, SessionError};
use crate::digest::{ct_eq, DigestValue};
use crate::model::{chunk_count, chunk_span};
use crate::wire::{FinalStatus, WireMessage, NONCE_LEN, PROTOCOL_VERSION};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerFailure {
    AuthFailed,
    JobRejected(String),
    ProtocolViolation(String),
    ClientAborted(String),
    FinalVerificationFailed { recomputed: DigestValue },
    /// The host could not carry out a command (storage failure and the like).
    Host(String),
}

/// Per-job receive bookkeeping. Payload buffers live here so the host never
/// has to track which bytes belong to which step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receiving {
    /// Next seq to append; every lower seq is verified and appended.
    pub verified_upto: u64,
    pub in_verify: Option<u64>,
    chunk_count: u64,
    /// Next never-before-seen seq the client may send.
    expected_new: u64,
    /// CHUNK_DATA received, CHUNK_DIGEST not yet.
    partial: Option<(u64, Vec<u8>)>,
    verify_claim: Option<DigestValue>,
    verify_queue: VecDeque<(u64, Vec<u8>, DigestValue)>,
    /// Verified but waiting for a lower seq to be appended first.
    held: BTreeMap<u64, (Vec<u8>, DigestValue)>,
    naked: BTreeSet<u64>,
    attempts: BTreeMap<u64, u32>,
}

impl Receiving {
    fn new(resume_from: u64, chunk_count: u64) -> Self {
        Receiving {
            verified_upto: resume_from,
            in_verify: None,
            chunk_count,
            expected_new: resume_from,
            partial: None,
            verify_claim: None,
            verify_queue: VecDeque::new(),
            held: BTreeMap::new(),
            naked: BTreeSet::new(),
            attempts: BTreeMap::new(),
        }
    }

    fn idle(&self) -> bool {
        self.partial.is_none() && self.in_verify.is_none() && self.verify_queue.is_empty() && self.held.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerState {
    AwaitingAuth { hello_seen: bool },
    /// `opening` is set while the host looks up prior sessions for the job.
    AwaitingJob { opening: bool },
    Receiving(Receiving),
    Finalizing,
    Done,
    Failed(ServerFailure),
}

impl ServerState {
    fn name(&self) -> &'static str {
        match self {
            ServerState::AwaitingAuth { .. } => "AwaitingAuth",
            ServerState::AwaitingJob { .. } => "AwaitingJob",
            ServerState::Receiving(_) => "Receiving",
            ServerState::Finalizing => "Finalizing",
            ServerState::Done => "Done",
            ServerState::Failed(_) => "Failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerEvent {
    Inbound(WireMessage),
    /// Host finished setting up storage for the job.
    JobOpened { session_id: String, resume_from: u64 },
    JobRefused { reason: String },
    /// Host recomputed the digest of a chunk handed out by `Verify`.
    VerifyDone {
        seq: u64,
        payload: Vec<u8>,
        recomputed: DigestValue,
    },
    /// Host recomputed the whole-image digest. `length_ok` is false when the
    /// stored image length differs from the device size.
    FinalVerifyDone { recomputed: DigestValue, length_ok: bool },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerCommand {
    Send(WireMessage),
    OpenJob(JobSpec),
    Verify {
        seq: u64,
        payload: Vec<u8>,
        claimed: DigestValue,
    },
    /// Append a verified chunk to the image. Always precedes the chunk's ACK.
    Append {
        seq: u64,
        payload: Vec<u8>,
        digest: DigestValue,
        attempts: u32,
    },
    /// A chunk failed verification and its payload was dropped.
    Discarded { seq: u64, recomputed: DigestValue },
    FinalVerify,
}

#[derive(Clone, PartialEq, Eq)]
pub struct ServerSession {
    nonce: [u8; NONCE_LEN],
    expected_proof: Option<Vec<u8>>,
    job: Option<JobSpec>,
    session_id: Option<String>,
    state: ServerState,
}

impl core::fmt::Debug for ServerSession {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("ServerSession")
            .field("session_id", &self.session_id)
            .field("state", &self.state.name())
            .finish_non_exhaustive()
    }
}

impl ServerSession {
    /// `passphrase == None` refuses every authentication attempt.
    pub fn new(nonce: [u8; NONCE_LEN], passphrase: Option<&[u8]>) -> Self {
        ServerSession {
            nonce,
            expected_proof: passphrase.map(|p| passphrase_proof(p, &nonce).as_bytes().to_vec()),
            job: None,
            session_id: None,
            state: ServerState::AwaitingAuth { hello_seen: false },
        }
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn job(&self) -> Option<&JobSpec> {
        self.job.as_ref()
    }

    pub fn session_id(&self) -> Option<&str> {
        self.session_id.as_deref()
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, ServerState::Done | ServerState::Failed(_))
    }

    /// Verification is in progress or queued; a graceful shutdown should let
    /// it finish before closing.
    pub fn verification_pending(&self) -> bool {
        match &self.state {
            ServerState::Receiving(r) => r.in_verify.is_some() || !r.verify_queue.is_empty(),
            _ => false,
        }
    }

    /// The host failed to execute a command. Tells the client and fails the
    /// session.
    pub fn host_failure(&mut self, reason: String) -> Vec<ServerCommand> {
        if self.is_terminal() {
            return Vec::new();
        }
        self.state = ServerState::Failed(ServerFailure::Host(reason.clone()));
        alloc::vec![ServerCommand::Send(WireMessage::Abort { reason })]
    }

    pub fn step(&mut self, event: ServerEvent) -> Result<Vec<ServerCommand>, SessionError> {
        let mut out = Vec::new();
        if self.is_terminal() {
            return Ok(out);
        }
        match event {
            ServerEvent::Inbound(msg) => self.on_message(msg, &mut out)?,
            ServerEvent::JobOpened { session_id, resume_from } => {
                let Some(job) = &self.job else {
                    return self.violation("JobOpened without a job");
                };
                if self.state != (ServerState::AwaitingJob { opening: true }) {
                    return self.violation("JobOpened while not opening a job");
                }
                let count = chunk_count(job.device.total_bytes, job.chunk_size)
                    .expect("job validated on JOB_OPEN");
                if resume_from > count {
                    return self.violation("resume point beyond chunk count");
                }
                out.push(ServerCommand::Send(WireMessage::JobAccept {
                    session_id: session_id.clone(),
                    resume_from_seq: resume_from,
                }));
                self.session_id = Some(session_id);
                self.state = ServerState::Receiving(Receiving::new(resume_from, count));
            }
            ServerEvent::JobRefused { reason } => {
                out.push(ServerCommand::Send(WireMessage::Abort { reason: reason.clone() }));
                self.state = ServerState::Failed(ServerFailure::JobRejected(reason));
            }
            ServerEvent::VerifyDone { seq, payload, recomputed } => {
                let ServerState::Receiving(r) = &mut self.state else {
                    return self.violation("VerifyDone outside Receiving");
                };
                if r.in_verify != Some(seq) {
                    let detail = format!("VerifyDone({seq}) but chunk {:?} is verifying", r.in_verify);
                    return self.violation(&detail);
                }
                r.in_verify = None;
                let claimed = r.verify_claim.take().expect("claim recorded with in_verify");
                if claimed.algorithm() == recomputed.algorithm() && claimed.ct_eq(&recomputed) {
                    r.held.insert(seq, (payload, claimed));
                    while let Some((payload, digest)) = r.held.remove(&r.verified_upto) {
                        let seq = r.verified_upto;
                        out.push(ServerCommand::Append {
                            seq,
                            payload,
                            digest,
                            attempts: r.attempts.get(&seq).copied().unwrap_or(1),
                        });
                        out.push(ServerCommand::Send(WireMessage::Ack { seq }));
                        r.verified_upto += 1;
                    }
                } else {
                    drop(payload);
                    r.naked.insert(seq);
                    out.push(ServerCommand::Discarded { seq, recomputed: recomputed.clone() });
                    out.push(ServerCommand::Send(WireMessage::Nak {
                        seq,
                        reason: format!("digest mismatch: recomputed {}", recomputed.to_hex()),
                    }));
                }
                Self::start_verify(r, &mut out);
            }
            ServerEvent::FinalVerifyDone { recomputed, length_ok } => {
                if self.state != ServerState::Finalizing {
                    return self.violation("FinalVerifyDone outside Finalizing");
                }
                let job = self.job.as_ref().expect("finalizing implies a job");
                let verified = length_ok && recomputed.ct_eq(&job.whole_image_digest);
                out.push(ServerCommand::Send(WireMessage::FinalResult {
                    status: if verified { FinalStatus::Verified } else { FinalStatus::Failed },
                    recomputed_digest: recomputed.clone(),
                }));
                self.state = if verified {
                    ServerState::Done
                } else {
                    ServerState::Failed(ServerFailure::FinalVerificationFailed { recomputed })
                };
            }
        }
        Ok(out)
    }

    fn on_message(&mut self, msg: WireMessage, out: &mut Vec<ServerCommand>) -> Result<(), SessionError> {
        if let WireMessage::Abort { reason } = msg {
            self.state = ServerState::Failed(ServerFailure::ClientAborted(reason));
            return Ok(());
        }
        match (&mut self.state, msg) {
            (ServerState::AwaitingAuth { hello_seen: false }, WireMessage::Hello { protocol_version, .. }) => {
                if protocol_version != PROTOCOL_VERSION {
                    let reason = format!("unsupported protocol version {protocol_version}");
                    out.push(ServerCommand::Send(WireMessage::Abort { reason: reason.clone() }));
                    self.state = ServerState::Failed(ServerFailure::ProtocolViolation(reason));
                    return Ok(());
                }
                out.push(ServerCommand::Send(WireMessage::Hello {
                    protocol_version: PROTOCOL_VERSION,
                    nonce: self.nonce,
                }));
                self.state = ServerState::AwaitingAuth { hello_seen: true };
            }
            (ServerState::AwaitingAuth { hello_seen: true }, WireMessage::Auth { passphrase_proof }) => {
                let ok = self
                    .expected_proof
                    .as_deref()
                    .is_some_and(|expected| ct_eq(expected, &passphrase_proof));
                out.push(ServerCommand::Send(WireMessage::AuthResult { ok }));
                self.state = if ok {
                    ServerState::AwaitingJob { opening: false }
                } else {
                    ServerState::Failed(ServerFailure::AuthFailed)
                };
            }
            (
                ServerState::AwaitingJob { opening: false },
                WireMessage::JobOpen { case_id, device, chunk_size, chunk_digest_algorithm, whole_image_digest },
            ) => {
                let problem = if let Err(e) = chunk_count(device.total_bytes, chunk_size) {
                    Some(format!("{e}"))
                } else if let Err(e) = device.validate() {
                    Some(format!("{e}"))
                } else {
                    None
                };
                if let Some(reason) = problem {
                    out.push(ServerCommand::Send(WireMessage::Abort { reason: reason.clone() }));
                    self.state = ServerState::Failed(ServerFailure::JobRejected(reason));
                    return Ok(());
                }
                let job = JobSpec { case_id, device, chunk_size, chunk_digest_algorithm, whole_image_digest };
                out.push(ServerCommand::OpenJob(job.clone()));
                self.job = Some(job);
                self.state = ServerState::AwaitingJob { opening: true };
            }
            (ServerState::Receiving(r), WireMessage::ChunkData { seq, payload }) => {
                if let Some((pending, _)) = &r.partial {
                    let detail = format!("CHUNK_DATA {seq} before CHUNK_DIGEST {pending}");
                    return self.violation(&detail);
                }
                let from_nak = r.naked.contains(&seq);
                if !(from_nak || (seq == r.expected_new && seq < r.chunk_count)) {
                    let expected = r.expected_new;
                    self.state = ServerState::Failed(ServerFailure::ProtocolViolation(format!(
                        "out-of-order chunk {seq}"
                    )));
                    return Err(SessionError::OutOfOrderChunk { seq, expected });
                }
                let job = self.job.as_ref().expect("receiving implies a job");
                let span = chunk_span(job.device.total_bytes, job.chunk_size, seq).expect("seq checked against count");
                if payload.len() as u64 != span.length {
                    let detail = format!("chunk {seq} carries {} bytes, planned {}", payload.len(), span.length);
                    return self.violation(&detail);
                }
                if from_nak {
                    r.naked.remove(&seq);
                } else {
                    r.expected_new += 1;
                }
                *r.attempts.entry(seq).or_insert(0) += 1;
                r.partial = Some((seq, payload));
            }
            (ServerState::Receiving(r), WireMessage::ChunkDigest { seq, digest }) => {
                let expected_alg = self.job.as_ref().expect("receiving implies a job").chunk_digest_algorithm;
                match r.partial.take() {
                    Some((pending, payload)) if pending == seq => {
                        if digest.algorithm() != expected_alg {
                            let detail = format!("chunk digest uses {}, job declared {expected_alg}", digest.algorithm());
                            return self.violation(&detail);
                        }
                        r.verify_queue.push_back((seq, payload, digest));
                        Self::start_verify(r, out);
                    }
                    other => {
                        let detail = format!("CHUNK_DIGEST {seq} does not follow its CHUNK_DATA ({:?})", other.map(|p| p.0));
                        return self.violation(&detail);
                    }
                }
            }
            (ServerState::Receiving(r), WireMessage::JobFinalize) => {
                if r.verified_upto != r.chunk_count || !r.idle() {
                    let detail = format!("JOB_FINALIZE with {} of {} chunks appended", r.verified_upto, r.chunk_count);
                    return self.violation(&detail);
                }
                out.push(ServerCommand::FinalVerify);
                self.state = ServerState::Finalizing;
            }
            (_, other) => {
                let detail = format!("unexpected {}", other.name());
                return self.violation(&detail);
            }
        }
        Ok(())
    }

    fn start_verify(r: &mut Receiving, out: &mut Vec<ServerCommand>) {
        if r.in_verify.is_some() {
            return;
        }
        if let Some((seq, payload, claimed)) = r.verify_queue.pop_front() {
            r.in_verify = Some(seq);
            r.verify_claim = Some(claimed.clone());
            out.push(ServerCommand::Verify { seq, payload, claimed });
        }
    }

    fn violation<T>(&mut self, detail: &str) -> Result<T, SessionError> {
        let state = self.state.name();
        self.state = ServerState::Failed(ServerFailure::ProtocolViolation(detail.into()));
        Err(SessionError::ProtocolViolation { state, detail: detail.into() })
    }
}
