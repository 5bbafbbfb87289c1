use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{passphrase_proof, JobSpec, SessionError, WINDOW};
use crate::digest::DigestValue;
use crate::model::chunk_count;
use crate::wire::{FinalStatus, WireMessage, NONCE_LEN, PROTOCOL_VERSION};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientFailure {
    AuthRefused,
    RetryLimitExceeded { seq: u64, attempts: u32 },
    ProtocolViolation(String),
    ServerAborted(String),
    FinalVerificationFailed { recomputed: DigestValue },
    Timeout,
    OperatorAbort(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientState {
    Connected,
    /// HELLO sent, waiting for the server's HELLO.
    Handshaking,
    /// AUTH sent.
    Authenticating,
    JobOpen,
    Transferring {
        next_seq: u64,
        retransmit_queue: VecDeque<u64>,
        /// Chunk the host is currently writing.
        sending: Option<u64>,
        /// Sent, awaiting ACK or NAK, oldest first.
        awaiting: VecDeque<u64>,
    },
    AwaitingFinal,
    Done,
    Failed(ClientFailure),
}

impl ClientState {
    fn name(&self) -> &'static str {
        match self {
            ClientState::Connected => "Connected",
            ClientState::Handshaking => "Handshaking",
            ClientState::Authenticating => "Authenticating",
            ClientState::JobOpen => "JobOpen",
            ClientState::Transferring { .. } => "Transferring",
            ClientState::AwaitingFinal => "AwaitingFinal",
            ClientState::Done => "Done",
            ClientState::Failed(_) => "Failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientEvent {
    Start,
    Inbound(WireMessage),
    /// The host finished writing CHUNK_DATA and CHUNK_DIGEST for `seq`.
    ChunkSent { seq: u64 },
    Timeout,
    Abort(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientOutput {
    Send(WireMessage),
    /// Read chunk `seq` from the source and send CHUNK_DATA then CHUNK_DIGEST.
    Transmit { seq: u64, attempt: u32 },
}

#[derive(Clone, PartialEq, Eq)]
pub struct ClientSession {
    job: JobSpec,
    passphrase: Vec<u8>,
    nonce: [u8; NONCE_LEN],
    retry_limit: u32,
    chunk_count: u64,
    attempts: Vec<u32>,
    acked: Vec<bool>,
    acked_count: u64,
    session_id: Option<String>,
    resumed_from: u64,
    state: ClientState,
}

impl core::fmt::Debug for ClientSession {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("ClientSession")
            .field("device", &self.job.device.device_id)
            .field("state", &self.state)
            .field("acked", &self.acked_count)
            .finish_non_exhaustive()
    }
}

impl ClientSession {
    /// `job.device.total_bytes` and `job.chunk_size` must both be non-zero.
    pub fn new(
        job: JobSpec,
        passphrase: &[u8],
        nonce: [u8; NONCE_LEN],
        retry_limit: u32,
    ) -> Result<Self, crate::model::ModelError> {
        let count = chunk_count(job.device.total_bytes, job.chunk_size)?;
        Ok(ClientSession {
            job,
            passphrase: passphrase.to_vec(),
            nonce,
            retry_limit: retry_limit.max(1),
            chunk_count: count,
            attempts: vec![0; count as usize],
            acked: vec![false; count as usize],
            acked_count: 0,
            session_id: None,
            resumed_from: 0,
            state: ClientState::Connected,
        })
    }

    pub fn state(&self) -> &ClientState {
        &self.state
    }

    pub fn job(&self) -> &JobSpec {
        &self.job
    }

    pub fn chunk_count(&self) -> u64 {
        self.chunk_count
    }

    pub fn attempts(&self, seq: u64) -> u32 {
        self.attempts.get(seq as usize).copied().unwrap_or(0)
    }

    pub fn session_id(&self) -> Option<&str> {
        self.session_id.as_deref()
    }

    pub fn resumed_from(&self) -> u64 {
        self.resumed_from
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, ClientState::Done | ClientState::Failed(_))
    }

    pub fn step(&mut self, event: ClientEvent) -> Result<Vec<ClientOutput>, SessionError> {
        let mut out = Vec::new();
        match event {
            ClientEvent::Start => match self.state {
                ClientState::Connected => {
                    out.push(ClientOutput::Send(WireMessage::Hello {
                        protocol_version: PROTOCOL_VERSION,
                        nonce: self.nonce,
                    }));
                    self.state = ClientState::Handshaking;
                }
                _ => return self.violation("Start after the session began"),
            },
            ClientEvent::Timeout => {
                if !self.is_terminal() {
                    self.fail(ClientFailure::Timeout, "timed out waiting for server", &mut out);
                }
            }
            ClientEvent::Abort(reason) => {
                if !self.is_terminal() {
                    let msg = format!("operator abort: {reason}");
                    self.fail(ClientFailure::OperatorAbort(reason), &msg, &mut out);
                }
            }
            ClientEvent::ChunkSent { seq } => match &mut self.state {
                ClientState::Transferring { sending, awaiting, .. } if *sending == Some(seq) => {
                    *sending = None;
                    awaiting.push_back(seq);
                    self.pump(&mut out);
                }
                // the chunk may already have been resolved by an early reply
                ClientState::Transferring { .. } if self.acked[seq as usize] => {}
                ClientState::Failed(_) => {}
                _ => return self.violation(&format!("ChunkSent({seq}) without a matching transmit")),
            },
            ClientEvent::Inbound(msg) => self.on_message(msg, &mut out)?,
        }
        Ok(out)
    }

    fn on_message(&mut self, msg: WireMessage, out: &mut Vec<ClientOutput>) -> Result<(), SessionError> {
        if self.is_terminal() {
            return Ok(());
        }
        if let WireMessage::Abort { reason } = msg {
            self.state = ClientState::Failed(ClientFailure::ServerAborted(reason));
            return Ok(());
        }
        match (&mut self.state, msg) {
            (ClientState::Handshaking, WireMessage::Hello { protocol_version, nonce }) => {
                if protocol_version != PROTOCOL_VERSION {
                    return self.violation(&format!("server speaks protocol {protocol_version}"));
                }
                let proof = passphrase_proof(&self.passphrase, &nonce);
                out.push(ClientOutput::Send(WireMessage::Auth {
                    passphrase_proof: proof.as_bytes().to_vec(),
                }));
                self.state = ClientState::Authenticating;
            }
            (ClientState::Authenticating, WireMessage::AuthResult { ok }) => {
                if ok {
                    out.push(ClientOutput::Send(WireMessage::JobOpen {
                        case_id: self.job.case_id.clone(),
                        device: self.job.device.clone(),
                        chunk_size: self.job.chunk_size,
                        chunk_digest_algorithm: self.job.chunk_digest_algorithm,
                        whole_image_digest: self.job.whole_image_digest.clone(),
                    }));
                    self.state = ClientState::JobOpen;
                } else {
                    self.state = ClientState::Failed(ClientFailure::AuthRefused);
                }
            }
            (ClientState::JobOpen, WireMessage::JobAccept { session_id, resume_from_seq }) => {
                if resume_from_seq > self.chunk_count {
                    return self.violation(&format!(
                        "resume point {resume_from_seq} beyond {} chunks",
                        self.chunk_count
                    ));
                }
                self.session_id = Some(session_id);
                self.resumed_from = resume_from_seq;
                for seq in 0..resume_from_seq {
                    self.mark_acked(seq);
                }
                self.state = ClientState::Transferring {
                    next_seq: resume_from_seq,
                    retransmit_queue: VecDeque::new(),
                    sending: None,
                    awaiting: VecDeque::new(),
                };
                self.finish_or_pump(out);
            }
            (ClientState::Transferring { sending, awaiting, .. }, WireMessage::Ack { seq }) => {
                if let Some(pos) = awaiting.iter().position(|&s| s == seq) {
                    awaiting.remove(pos);
                } else if *sending == Some(seq) {
                    *sending = None;
                } else {
                    return self.violation(&format!("ACK for chunk {seq} which is not outstanding"));
                }
                self.mark_acked(seq);
                self.finish_or_pump(out);
            }
            (
                ClientState::Transferring { sending, awaiting, retransmit_queue, .. },
                WireMessage::Nak { seq, .. },
            ) => {
                if let Some(pos) = awaiting.iter().position(|&s| s == seq) {
                    awaiting.remove(pos);
                } else if *sending == Some(seq) {
                    *sending = None;
                } else {
                    return self.violation(&format!("NAK for chunk {seq} which is not outstanding"));
                }
                let attempts = self.attempts[seq as usize];
                if attempts >= self.retry_limit {
                    let reason = format!("chunk {seq} failed verification {attempts} times");
                    self.fail(ClientFailure::RetryLimitExceeded { seq, attempts }, &reason, out);
                } else {
                    retransmit_queue.push_front(seq);
                    self.pump(out);
                }
            }
            (ClientState::AwaitingFinal, WireMessage::FinalResult { status, recomputed_digest }) => {
                match status {
                    FinalStatus::Verified if recomputed_digest == self.job.whole_image_digest => {
                        self.state = ClientState::Done;
                    }
                    FinalStatus::Verified => {
                        return self.violation("server reported verified with a different digest");
                    }
                    FinalStatus::Failed => {
                        self.state = ClientState::Failed(ClientFailure::FinalVerificationFailed {
                            recomputed: recomputed_digest,
                        });
                    }
                }
            }
            (_, other) => {
                return self.violation(&format!("unexpected {}", other.name()));
            }
        }
        Ok(())
    }

    fn mark_acked(&mut self, seq: u64) {
        let slot = &mut self.acked[seq as usize];
        if !*slot {
            *slot = true;
            self.acked_count += 1;
        }
    }

    fn finish_or_pump(&mut self, out: &mut Vec<ClientOutput>) {
        if self.acked_count == self.chunk_count {
            out.push(ClientOutput::Send(WireMessage::JobFinalize));
            self.state = ClientState::AwaitingFinal;
        } else {
            self.pump(out);
        }
    }

    /// Starts the next transmission if the window has room. NAKed chunks go
    /// before new ones.
    fn pump(&mut self, out: &mut Vec<ClientOutput>) {
        let ClientState::Transferring { next_seq, retransmit_queue, sending, awaiting } = &mut self.state else {
            return;
        };
        if sending.is_some() || awaiting.len() >= WINDOW {
            return;
        }
        let seq = match retransmit_queue.pop_front() {
            Some(seq) => seq,
            None if *next_seq < self.chunk_count => {
                *next_seq += 1;
                *next_seq - 1
            }
            None => return,
        };
        self.attempts[seq as usize] += 1;
        *sending = Some(seq);
        out.push(ClientOutput::Transmit {
            seq,
            attempt: self.attempts[seq as usize],
        });
    }

    fn fail(&mut self, failure: ClientFailure, reason: &str, out: &mut Vec<ClientOutput>) {
        out.push(ClientOutput::Send(WireMessage::Abort { reason: reason.into() }));
        self.state = ClientState::Failed(failure);
    }

    fn violation<T>(&mut self, detail: &str) -> Result<T, SessionError> {
        let state = self.state.name();
        self.state = ClientState::Failed(ClientFailure::ProtocolViolation(detail.into()));
        Err(SessionError::ProtocolViolation { state, detail: detail.into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::{digest_bytes, HashAlgorithm};
    use crate::model::DeviceDescriptor;
    use crate::session::DEFAULT_RETRY_LIMIT;

    fn job(total: u64, chunk: u64) -> JobSpec {
        JobSpec {
            case_id: "case".into(),
            device: DeviceDescriptor::new("dev", "dev", total),
            chunk_size: chunk,
            chunk_digest_algorithm: HashAlgorithm::Sha512,
            whole_image_digest: digest_bytes(HashAlgorithm::Sha512, b"whole"),
        }
    }

    fn transferring(total: u64, chunk: u64) -> ClientSession {
        let mut c = ClientSession::new(job(total, chunk), b"pw", [1; 16], DEFAULT_RETRY_LIMIT).unwrap();
        c.step(ClientEvent::Start).unwrap();
        c.step(ClientEvent::Inbound(WireMessage::Hello { protocol_version: 1, nonce: [2; 16] })).unwrap();
        c.step(ClientEvent::Inbound(WireMessage::AuthResult { ok: true })).unwrap();
        c.step(ClientEvent::Inbound(WireMessage::JobAccept { session_id: "s".into(), resume_from_seq: 0 }))
            .unwrap();
        c
    }

    fn send(c: &mut ClientSession, seq: u64) -> Vec<ClientOutput> {
        c.step(ClientEvent::ChunkSent { seq }).unwrap()
    }

    fn inbound(c: &mut ClientSession, m: WireMessage) -> Vec<ClientOutput> {
        c.step(ClientEvent::Inbound(m)).unwrap()
    }

    #[test]
    fn handshake_sends_hello_auth_and_job() {
        let mut c = ClientSession::new(job(40, 10), b"pw", [1; 16], 5).unwrap();
        let out = c.step(ClientEvent::Start).unwrap();
        assert_eq!(out[0], ClientOutput::Send(WireMessage::Hello { protocol_version: 1, nonce: [1; 16] }));
        let out = inbound(&mut c, WireMessage::Hello { protocol_version: 1, nonce: [9; 16] });
        let expected = passphrase_proof(b"pw", &[9; 16]);
        assert_eq!(
            out,
            vec![ClientOutput::Send(WireMessage::Auth { passphrase_proof: expected.as_bytes().to_vec() })]
        );
        let out = inbound(&mut c, WireMessage::AuthResult { ok: true });
        assert!(matches!(out[0], ClientOutput::Send(WireMessage::JobOpen { .. })));
        let out = inbound(&mut c, WireMessage::JobAccept { session_id: "s".into(), resume_from_seq: 0 });
        assert_eq!(out, vec![ClientOutput::Transmit { seq: 0, attempt: 1 }]);
        assert_eq!(c.session_id(), Some("s"));
    }

    #[test]
    fn auth_refusal_fails() {
        let mut c = ClientSession::new(job(40, 10), b"pw", [1; 16], 5).unwrap();
        c.step(ClientEvent::Start).unwrap();
        inbound(&mut c, WireMessage::Hello { protocol_version: 1, nonce: [9; 16] });
        inbound(&mut c, WireMessage::AuthResult { ok: false });
        assert_eq!(c.state(), &ClientState::Failed(ClientFailure::AuthRefused));
    }

    #[test]
    fn window_is_two_chunks() {
        let mut c = transferring(40, 10);
        assert_eq!(send(&mut c, 0), vec![ClientOutput::Transmit { seq: 1, attempt: 1 }]);
        // chunk 0 verifying, chunk 1 sent: window full
        assert_eq!(send(&mut c, 1), vec![]);
        assert_eq!(
            inbound(&mut c, WireMessage::Ack { seq: 0 }),
            vec![ClientOutput::Transmit { seq: 2, attempt: 1 }]
        );
    }

    #[test]
    fn nak_requeues_at_front() {
        let mut c = transferring(40, 10);
        send(&mut c, 0);
        send(&mut c, 1);
        match c.state() {
            ClientState::Transferring { next_seq, retransmit_queue, .. } => {
                assert_eq!(*next_seq, 2);
                assert!(retransmit_queue.is_empty());
            }
            s => panic!("{s:?}"),
        }
        let out = inbound(&mut c, WireMessage::Nak { seq: 0, reason: "bad".into() });
        assert_eq!(out, vec![ClientOutput::Transmit { seq: 0, attempt: 2 }]);
    }

    #[test]
    fn nak_waits_in_queue_when_window_full() {
        let mut c = transferring(40, 10);
        send(&mut c, 0);
        // chunk 1 is still being written when chunk 0 comes back NAKed
        let out = inbound(&mut c, WireMessage::Nak { seq: 0, reason: "bad".into() });
        assert!(out.is_empty());
        match c.state() {
            ClientState::Transferring { retransmit_queue, sending, .. } => {
                assert_eq!(retransmit_queue.iter().copied().collect::<Vec<_>>(), vec![0]);
                assert_eq!(*sending, Some(1));
            }
            s => panic!("{s:?}"),
        }
        assert_eq!(send(&mut c, 1), vec![ClientOutput::Transmit { seq: 0, attempt: 2 }]);
    }

    #[test]
    fn last_ack_finalizes_and_verified_result_is_done() {
        let mut c = transferring(20, 10);
        send(&mut c, 0);
        send(&mut c, 1);
        inbound(&mut c, WireMessage::Ack { seq: 0 });
        let out = inbound(&mut c, WireMessage::Ack { seq: 1 });
        assert_eq!(out, vec![ClientOutput::Send(WireMessage::JobFinalize)]);
        assert_eq!(c.state(), &ClientState::AwaitingFinal);
        let whole = c.job().whole_image_digest.clone();
        inbound(&mut c, WireMessage::FinalResult { status: FinalStatus::Verified, recomputed_digest: whole });
        assert_eq!(c.state(), &ClientState::Done);
    }

    #[test]
    fn final_failure_is_reported() {
        let mut c = transferring(10, 10);
        send(&mut c, 0);
        inbound(&mut c, WireMessage::Ack { seq: 0 });
        let bad = digest_bytes(HashAlgorithm::Sha512, b"tampered");
        inbound(&mut c, WireMessage::FinalResult { status: FinalStatus::Failed, recomputed_digest: bad.clone() });
        assert_eq!(c.state(), &ClientState::Failed(ClientFailure::FinalVerificationFailed { recomputed: bad }));
    }

    #[test]
    fn retry_limit_fails_after_exact_naks() {
        let mut c = ClientSession::new(job(10, 10), b"pw", [0; 16], 3).unwrap();
        c.step(ClientEvent::Start).unwrap();
        inbound(&mut c, WireMessage::Hello { protocol_version: 1, nonce: [0; 16] });
        inbound(&mut c, WireMessage::AuthResult { ok: true });
        inbound(&mut c, WireMessage::JobAccept { session_id: "s".into(), resume_from_seq: 0 });
        let mut naks = 0;
        loop {
            send(&mut c, 0);
            let out = inbound(&mut c, WireMessage::Nak { seq: 0, reason: "x".into() });
            naks += 1;
            if c.is_terminal() {
                assert!(matches!(out[0], ClientOutput::Send(WireMessage::Abort { .. })));
                break;
            }
        }
        assert_eq!(naks, 3);
        assert_eq!(c.state(), &ClientState::Failed(ClientFailure::RetryLimitExceeded { seq: 0, attempts: 3 }));
    }

    #[test]
    fn resume_skips_verified_chunks() {
        let mut c = ClientSession::new(job(100, 10), b"pw", [0; 16], 5).unwrap();
        c.step(ClientEvent::Start).unwrap();
        inbound(&mut c, WireMessage::Hello { protocol_version: 1, nonce: [0; 16] });
        inbound(&mut c, WireMessage::AuthResult { ok: true });
        let out = inbound(&mut c, WireMessage::JobAccept { session_id: "s".into(), resume_from_seq: 5 });
        assert_eq!(out, vec![ClientOutput::Transmit { seq: 5, attempt: 1 }]);
        let mut c2 = ClientSession::new(job(100, 10), b"pw", [0; 16], 5).unwrap();
        c2.step(ClientEvent::Start).unwrap();
        inbound(&mut c2, WireMessage::Hello { protocol_version: 1, nonce: [0; 16] });
        inbound(&mut c2, WireMessage::AuthResult { ok: true });
        let out = inbound(&mut c2, WireMessage::JobAccept { session_id: "s".into(), resume_from_seq: 10 });
        assert_eq!(out, vec![ClientOutput::Send(WireMessage::JobFinalize)]);
    }

    #[test]
    fn violations_do_not_panic() {
        let mut c = transferring(40, 10);
        assert!(c.step(ClientEvent::Inbound(WireMessage::Ack { seq: 3 })).is_err());
        assert!(matches!(c.state(), ClientState::Failed(ClientFailure::ProtocolViolation(_))));
        let mut c = ClientSession::new(job(40, 10), b"pw", [1; 16], 5).unwrap();
        assert!(c.step(ClientEvent::Inbound(WireMessage::JobFinalize)).is_err());
        let mut c = ClientSession::new(job(40, 10), b"pw", [1; 16], 5).unwrap();
        assert!(c.step(ClientEvent::ChunkSent { seq: 0 }).is_err());
    }

    #[test]
    fn server_abort_and_timeout() {
        let mut c = transferring(40, 10);
        inbound(&mut c, WireMessage::Abort { reason: "shutdown".into() });
        assert_eq!(c.state(), &ClientState::Failed(ClientFailure::ServerAborted("shutdown".into())));
        let mut c = transferring(40, 10);
        let out = c.step(ClientEvent::Timeout).unwrap();
        assert!(matches!(out[0], ClientOutput::Send(WireMessage::Abort { .. })));
        assert_eq!(c.state(), &ClientState::Failed(ClientFailure::Timeout));
    }

    #[test]
    fn step_is_deterministic() {
        let mut a = transferring(40, 10);
        send(&mut a, 0);
        let mut b = a.clone();
        let ev = ClientEvent::Inbound(WireMessage::Nak { seq: 0, reason: "r".into() });
        assert_eq!(a.step(ev.clone()), b.step(ev));
        assert_eq!(a, b);
    }
}
