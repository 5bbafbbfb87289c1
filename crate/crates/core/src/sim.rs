//! Virtual-time simulation of a whole acquisition.
//!
//! Drives the real client and server state machines against modelled costs
//! for the uplink, chunk verification, appending and control latency. Time
//! is kept in integer nanoseconds so runs are exactly reproducible.

use alloc::collections::BinaryHeap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use crate::digest::{digest_bytes, HashAlgorithm};
use crate::model::{chunk_span, DeviceDescriptor, ModelError};
use crate::session::{
    ClientEvent, ClientOutput, ClientSession, ClientState, JobSpec, ServerCommand, ServerEvent, ServerSession,
    ServerState, SessionError, DEFAULT_RETRY_LIMIT,
};
use crate::timing::{sorted_trace, TraceEvent, TraceKind};
use crate::wire::WireMessage;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("simulation stalled with the client in {0}")]
    Stalled(String),
}

/// Duration model for one kind of work.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cost {
    Free,
    /// Seconds per operation regardless of size.
    Fixed(f64),
    /// Throughput in bits per second.
    Rate(f64),
}

impl Cost {
    fn nanos(self, bytes: u64) -> u64 {
        let secs = match self {
            Cost::Free => 0.0,
            Cost::Fixed(s) => s,
            Cost::Rate(bps) => bytes as f64 * 8.0 / bps,
        };
        secs_to_ns(secs)
    }
}

fn secs_to_ns(secs: f64) -> u64 {
    if secs.is_finite() && secs > 0.0 {
        (secs * 1e9 + 0.5) as u64
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub chunk_size: u64,
    pub algorithm: HashAlgorithm,
    pub retry_limit: u32,
    pub prehash: Cost,
    pub transfer: Cost,
    pub verify: Cost,
    pub append: Cost,
    pub image_verify: Cost,
    /// One-way latency for every message, in seconds.
    pub latency: f64,
    /// Chunks the server already holds from an earlier session.
    pub resume_from: u64,
}

impl SimConfig {
    pub fn new(chunk_size: u64) -> Self {
        SimConfig {
            chunk_size,
            algorithm: HashAlgorithm::Sha512,
            retry_limit: DEFAULT_RETRY_LIMIT,
            prehash: Cost::Free,
            transfer: Cost::Free,
            verify: Cost::Free,
            append: Cost::Free,
            image_verify: Cost::Free,
            latency: 0.0,
            resume_from: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub trace: Vec<TraceEvent>,
    /// Seconds from the first to the last traced event.
    pub total: f64,
    /// Image as assembled by the server.
    pub image: Vec<u8>,
    pub transmissions: u64,
    pub naks: u64,
    pub corruptions: u64,
    pub client_state: ClientState,
    pub server_state: ServerState,
}

impl SimReport {
    pub fn verified(&self) -> bool {
        self.client_state == ClientState::Done && self.server_state == ServerState::Done
    }
}

#[derive(Debug)]
enum Pending {
    Client(ClientEvent),
    Server(ServerEvent),
}

struct Scheduled {
    at: u64,
    order: u64,
    what: Pending,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.order) == (other.at, other.order)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.order).cmp(&(other.at, other.order))
    }
}

struct World<'a, F> {
    cfg: &'a SimConfig,
    source: &'a [u8],
    corrupt: F,
    queue: BinaryHeap<Reverse<Scheduled>>,
    order: u64,
    trace: Vec<TraceEvent>,
    image: Vec<u8>,
    uplink_free: u64,
    appender_free: u64,
    to_server_last: u64,
    to_client_last: u64,
    latency: u64,
    transmissions: u64,
    naks: u64,
    corruptions: u64,
}

impl<F: FnMut(u64, u32) -> bool> World<'_, F> {
    fn at(&mut self, at: u64, what: Pending) {
        self.order += 1;
        self.queue.push(Reverse(Scheduled { at, order: self.order, what }));
    }

    fn send_to_server(&mut self, earliest: u64, event: ServerEvent) {
        let at = earliest.max(self.to_server_last);
        self.to_server_last = at;
        self.at(at, Pending::Server(event));
    }

    fn send_to_client(&mut self, earliest: u64, msg: WireMessage) {
        let at = earliest.max(self.to_client_last);
        self.to_client_last = at;
        self.at(at, Pending::Client(ClientEvent::Inbound(msg)));
    }

    fn mark(&mut self, at: u64, kind: TraceKind) {
        self.trace.push(TraceEvent { at: at as f64 / 1e9, kind });
    }

    fn client_outputs(&mut self, now: u64, outputs: Vec<ClientOutput>) {
        for output in outputs {
            match output {
                ClientOutput::Send(msg) => {
                    let at = now + self.latency;
                    self.send_to_server(at, ServerEvent::Inbound(msg));
                }
                ClientOutput::Transmit { seq, attempt } => {
                    let span = chunk_span(self.source.len() as u64, self.cfg.chunk_size, seq)
                        .expect("client only transmits planned chunks");
                    let bytes = &self.source[span.offset as usize..(span.offset + span.length) as usize];
                    let digest = digest_bytes(self.cfg.algorithm, bytes);
                    let mut payload = bytes.to_vec();
                    if (self.corrupt)(seq, attempt) {
                        payload[0] ^= 0xff;
                        self.corruptions += 1;
                    }
                    let start = now.max(self.uplink_free);
                    let end = start + self.cfg.transfer.nanos(span.length);
                    self.uplink_free = end;
                    self.transmissions += 1;
                    self.mark(start, TraceKind::ChunkSendStart { seq, attempt });
                    self.mark(end + self.latency, TraceKind::ChunkReceived { seq });
                    self.send_to_server(end + self.latency, ServerEvent::Inbound(WireMessage::ChunkData { seq, payload }));
                    self.send_to_server(end + self.latency, ServerEvent::Inbound(WireMessage::ChunkDigest { seq, digest }));
                    self.at(end, Pending::Client(ClientEvent::ChunkSent { seq }));
                }
            }
        }
    }

    fn server_commands(&mut self, now: u64, commands: Vec<ServerCommand>) {
        // Sends issued after an append leave once the append is durable.
        let mut cursor = now;
        for command in commands {
            match command {
                ServerCommand::Send(msg) => {
                    if matches!(msg, WireMessage::Nak { .. }) {
                        self.naks += 1;
                    }
                    let at = cursor + self.latency;
                    self.send_to_client(at, msg);
                }
                ServerCommand::OpenJob(_) => {
                    let resume_from = self.cfg.resume_from;
                    self.at(cursor, Pending::Server(ServerEvent::JobOpened { session_id: "sim".into(), resume_from }));
                }
                ServerCommand::Verify { seq, payload, claimed } => {
                    let recomputed = digest_bytes(claimed.algorithm(), &payload);
                    let ok = recomputed == claimed;
                    let end = cursor + self.cfg.verify.nanos(payload.len() as u64);
                    self.mark(cursor, TraceKind::VerifyStart { seq });
                    self.mark(end, TraceKind::VerifyEnd { seq, ok });
                    self.at(end, Pending::Server(ServerEvent::VerifyDone { seq, payload, recomputed }));
                }
                ServerCommand::Append { seq, payload, .. } => {
                    let start = cursor.max(self.appender_free);
                    let end = start + self.cfg.append.nanos(payload.len() as u64);
                    self.appender_free = end;
                    self.mark(start, TraceKind::AppendStart { seq });
                    self.mark(end, TraceKind::AppendEnd { seq });
                    self.image.extend_from_slice(&payload);
                    cursor = end;
                }
                ServerCommand::Discarded { .. } => {}
                ServerCommand::FinalVerify => {
                    let start = cursor.max(self.appender_free);
                    let end = start + self.cfg.image_verify.nanos(self.image.len() as u64);
                    let recomputed = digest_bytes(self.cfg.algorithm, &self.image);
                    let length_ok = self.image.len() == self.source.len();
                    self.mark(start, TraceKind::FinalVerifyStart);
                    let verified = length_ok && self.image == self.source;
                    self.mark(end, TraceKind::FinalVerifyEnd { verified });
                    self.at(end, Pending::Server(ServerEvent::FinalVerifyDone { recomputed, length_ok }));
                }
            }
        }
    }
}

/// Runs one acquisition of `source`. `corrupt(seq, attempt)` decides whether
/// that transmission has a byte flipped in transit.
pub fn simulate<F>(source: &[u8], cfg: &SimConfig, corrupt: F) -> Result<SimReport, SimError>
where
    F: FnMut(u64, u32) -> bool,
{
    let whole = digest_bytes(cfg.algorithm, source);
    let job = JobSpec {
        case_id: "sim".into(),
        device: DeviceDescriptor::new("sim", "simulated source", source.len() as u64),
        chunk_size: cfg.chunk_size,
        chunk_digest_algorithm: cfg.algorithm,
        whole_image_digest: whole,
    };
    let passphrase = b"sim";
    let mut client = ClientSession::new(job, passphrase, [1; 16], cfg.retry_limit)?;
    let mut server = ServerSession::new([2; 16], Some(passphrase));

    let resumed_bytes = (cfg.resume_from.saturating_mul(cfg.chunk_size) as usize).min(source.len());
    let mut world = World {
        cfg,
        source,
        corrupt,
        queue: BinaryHeap::new(),
        order: 0,
        trace: Vec::new(),
        image: source[..resumed_bytes].to_vec(),
        uplink_free: 0,
        appender_free: 0,
        to_server_last: 0,
        to_client_last: 0,
        latency: secs_to_ns(cfg.latency),
        transmissions: 0,
        naks: 0,
        corruptions: 0,
    };

    let prehash_end = cfg.prehash.nanos(source.len() as u64);
    if cfg.prehash != Cost::Free {
        world.mark(0, TraceKind::PrehashStart);
        world.mark(prehash_end, TraceKind::PrehashEnd);
    }
    world.at(prehash_end, Pending::Client(ClientEvent::Start));

    let mut now = 0;
    while let Some(Reverse(next)) = world.queue.pop() {
        now = next.at;
        match next.what {
            Pending::Client(event) => {
                let outputs = client.step(event)?;
                world.client_outputs(now, outputs);
                if client.is_terminal() {
                    break;
                }
            }
            Pending::Server(event) => {
                let commands = server.step(event)?;
                world.server_commands(now, commands);
            }
        }
    }
    if !client.is_terminal() {
        return Err(SimError::Stalled(alloc::format!("{:?}", client.state())));
    }
    world.mark(now, TraceKind::SessionEnd { verified: *client.state() == ClientState::Done });

    let trace = sorted_trace(&world.trace);
    let total = match (trace.first(), trace.last()) {
        (Some(a), Some(b)) => b.at - a.at,
        _ => 0.0,
    };
    Ok(SimReport {
        trace,
        total,
        image: world.image,
        transmissions: world.transmissions,
        naks: world.naks,
        corruptions: world.corruptions,
        client_state: client.state().clone(),
        server_state: server.state().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::ClientFailure;
    use crate::timing::{estimate_total_time, measure_overhead, TimingInputs};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn source(len: usize) -> Vec<u8> {
        (0..len).map(|i| (i * 31 % 251) as u8).collect()
    }

    #[test]
    fn pipelined_total_is_transfer_plus_one_verify() {
        let mut cfg = SimConfig::new(1000);
        cfg.transfer = Cost::Fixed(0.1);
        cfg.verify = Cost::Fixed(0.02);
        let r = simulate(&source(10_000), &cfg, |_, _| false).unwrap();
        assert!(r.verified());
        assert!((r.total - 1.02).abs() < 1e-9, "{}", r.total);
        let b = measure_overhead(&r.trace).unwrap();
        assert!((b.transfer - 1.0).abs() < 1e-9);
        assert!((b.final_chunk_hash - 0.02).abs() < 1e-9);
    }

    #[test]
    fn serial_verify_would_be_slower() {
        let mut cfg = SimConfig::new(1000);
        cfg.transfer = Cost::Fixed(0.1);
        cfg.verify = Cost::Fixed(0.02);
        let r = simulate(&source(10_000), &cfg, |_, _| false).unwrap();
        assert!(r.total < 10.0 * (0.1 + 0.02));
    }

    #[test]
    fn corruption_is_retransmitted() {
        let mut cfg = SimConfig::new(100);
        cfg.transfer = Cost::Fixed(0.01);
        let src = source(1000);
        let r = simulate(&src, &cfg, |seq, attempt| seq % 3 == 0 && attempt < 3).unwrap();
        assert!(r.verified());
        assert_eq!(r.image, src);
        assert_eq!(r.naks, r.corruptions);
        assert_eq!(r.corruptions, 4 * 2);
        assert_eq!(r.transmissions, 10 + 8);
    }

    #[test]
    fn persistent_corruption_exhausts_retries() {
        let cfg = SimConfig::new(100);
        let r = simulate(&source(1000), &cfg, |seq, _| seq == 4).unwrap();
        assert_eq!(
            r.client_state,
            ClientState::Failed(ClientFailure::RetryLimitExceeded { seq: 4, attempts: DEFAULT_RETRY_LIMIT })
        );
        assert_eq!(r.naks, DEFAULT_RETRY_LIMIT as u64);
    }

    #[test]
    fn resume_skips_prefix() {
        let mut cfg = SimConfig::new(100);
        cfg.resume_from = 6;
        let src = source(1000);
        let r = simulate(&src, &cfg, |_, _| false).unwrap();
        assert!(r.verified());
        assert_eq!(r.transmissions, 4);
        assert_eq!(r.image, src);
    }

    #[test]
    fn short_last_chunk() {
        let src = source(1050);
        let r = simulate(&src, &SimConfig::new(100), |_, _| false).unwrap();
        assert!(r.verified());
        assert_eq!(r.transmissions, 11);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn random_corruption_always_reassembles(seed: u64, p in 0.0f64..0.4, chunks in 1usize..24) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let src = source(chunks * 64 - 7);
            let mut cfg = SimConfig::new(64);
            cfg.retry_limit = 50;
            cfg.transfer = Cost::Rate(1e6);
            cfg.verify = Cost::Rate(4e6);
            let r = simulate(&src, &cfg, |_, _| rng.gen_bool(p)).unwrap();
            prop_assert!(r.verified());
            prop_assert_eq!(&r.image, &src);
            prop_assert_eq!(r.naks, r.corruptions);
            prop_assert_eq!(r.transmissions, chunks as u64 + r.corruptions);
        }

        // The closed form holds while verification keeps up with the uplink.
        #[test]
        fn closed_form_matches_when_verify_keeps_up(
            chunks in 1u64..40,
            upload in 1e5f64..1e8,
            speedup in 1.0f64..50.0,
        ) {
            let chunk = 4096u64;
            let src = source((chunks * chunk) as usize);
            let mut cfg = SimConfig::new(chunk);
            cfg.transfer = Cost::Rate(upload);
            cfg.verify = Cost::Rate(upload * speedup);
            let r = simulate(&src, &cfg, |_, _| false).unwrap();
            let bits = |b: u64| b as f64 * 8.0;
            let inputs = TimingInputs::new(bits(chunks * chunk), upload, bits(chunk), upload * speedup).unwrap();
            let predicted = estimate_total_time(&inputs);
            prop_assert!((r.total - predicted).abs() <= predicted * 1e-6 + 1e-8, "{} vs {}", r.total, predicted);
        }
    }

    #[test]
    fn latency_keeps_order() {
        let mut cfg = SimConfig::new(100);
        cfg.latency = 0.005;
        cfg.transfer = Cost::Fixed(0.001);
        let src = source(2000);
        let r = simulate(&src, &cfg, |seq, a| seq == 7 && a == 1).unwrap();
        assert!(r.verified());
        assert_eq!(r.image, src);
    }
}
