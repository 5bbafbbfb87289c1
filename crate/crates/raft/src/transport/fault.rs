//! Fault injection on the client-to-server byte stream.
//!
//! The wrapper reassembles outgoing frames so it only ever touches chunk
//! payload bytes; magic, type, length and the chunk's sequence number stay
//! intact and corruption is caught by digest verification on the server.

use std::io::{self, Write};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raft_core::wire::{msg_type, FrameHeader, HEADER_LEN};

use super::{Closer, Connection};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LatencyModel {
    pub fixed_ms: f64,
    pub jitter_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultPlan {
    pub seed: u64,
    pub corrupt_chunk_probability: f64,
    pub drop_connection_after_bytes: Option<u64>,
    pub latency: LatencyModel,
    pub bandwidth_limit_bps: Option<u64>,
}

impl FaultPlan {
    pub fn passthrough(seed: u64) -> Self {
        FaultPlan {
            seed,
            corrupt_chunk_probability: 0.0,
            drop_connection_after_bytes: None,
            latency: LatencyModel::default(),
            bandwidth_limit_bps: None,
        }
    }

    pub fn corrupting(seed: u64, probability: f64) -> Self {
        FaultPlan { corrupt_chunk_probability: probability, ..FaultPlan::passthrough(seed) }
    }

    /// Whether transmission `attempt` (1-based) of chunk `seq` is corrupted,
    /// and if so which data byte is flipped and with what mask. Depends only
    /// on the seed, `seq` and `attempt`, so schedules are reproducible
    /// regardless of thread timing.
    pub fn corruption(&self, seq: u64, attempt: u32, data_len: usize) -> Option<(usize, u8)> {
        let p = self.corrupt_chunk_probability.clamp(0.0, 1.0);
        if p == 0.0 || data_len == 0 {
            return None;
        }
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&seq.to_le_bytes());
        key[16..20].copy_from_slice(&attempt.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        if !rng.gen_bool(p) {
            return None;
        }
        Some((rng.gen_range(0..data_len), rng.gen_range(1..=255u8)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultRecord {
    pub seq: u64,
    pub attempt: u32,
    /// Offset within the chunk's data bytes.
    pub offset: usize,
}

#[derive(Debug, Default)]
struct LogState {
    corrupted: Vec<FaultRecord>,
    chunk_frames: Vec<(u64, u32)>,
    frames: u64,
    bytes: u64,
    dropped: bool,
}

/// Shared record of what a fault wrapper did.
#[derive(Debug, Clone, Default)]
pub struct FaultLog(Arc<Mutex<LogState>>);

impl FaultLog {
    fn lock(&self) -> MutexGuard<'_, LogState> {
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn corruptions(&self) -> Vec<FaultRecord> {
        self.lock().corrupted.clone()
    }

    pub fn corruption_count(&self) -> usize {
        self.lock().corrupted.len()
    }

    /// Every CHUNK_DATA frame passed on, as (seq, attempt), in order.
    pub fn chunk_frames(&self) -> Vec<(u64, u32)> {
        self.lock().chunk_frames.clone()
    }

    pub fn frames(&self) -> u64 {
        self.lock().frames
    }

    pub fn bytes(&self) -> u64 {
        self.lock().bytes
    }

    pub fn dropped(&self) -> bool {
        self.lock().dropped
    }
}

struct FaultWriter {
    inner: Box<dyn Write + Send>,
    plan: FaultPlan,
    log: FaultLog,
    closer: Closer,
    pending: Vec<u8>,
    attempts: std::collections::HashMap<u64, u32>,
    jitter: ChaCha8Rng,
    written: u64,
    dead: bool,
}

impl FaultWriter {
    fn lost() -> io::Error {
        io::Error::new(io::ErrorKind::ConnectionAborted, "connection dropped by fault plan")
    }

    fn frame_len(&self) -> Option<usize> {
        if self.pending.len() < HEADER_LEN {
            return None;
        }
        match FrameHeader::parse(&self.pending[..HEADER_LEN]) {
            Ok(h) => Some(HEADER_LEN + h.payload_len as usize),
            // not a frame: forward bytes untouched
            Err(_) => Some(self.pending.len()),
        }
    }

    fn emit(&mut self, mut frame: Vec<u8>) -> io::Result<()> {
        if frame.len() > HEADER_LEN + 8 && frame[5] == msg_type::CHUNK_DATA {
            let seq = u64::from_be_bytes(frame[HEADER_LEN..HEADER_LEN + 8].try_into().expect("8 bytes"));
            let attempt = self.attempts.entry(seq).or_insert(0);
            *attempt += 1;
            let attempt = *attempt;
            let data_start = HEADER_LEN + 8;
            let corruption = self.plan.corruption(seq, attempt, frame.len() - data_start);
            let mut log = self.log.lock();
            log.chunk_frames.push((seq, attempt));
            if let Some((offset, mask)) = corruption {
                frame[data_start + offset] ^= mask;
                log.corrupted.push(FaultRecord { seq, attempt, offset });
            }
        }

        let mut delay = self.plan.latency.fixed_ms.max(0.0) / 1e3;
        if self.plan.latency.jitter_ms > 0.0 {
            delay += self.jitter.gen_range(0.0..self.plan.latency.jitter_ms) / 1e3;
        }
        if let Some(bps) = self.plan.bandwidth_limit_bps.filter(|&b| b > 0) {
            delay += frame.len() as f64 * 8.0 / bps as f64;
        }
        if delay > 0.0 {
            thread::sleep(Duration::from_secs_f64(delay));
        }

        if let Some(limit) = self.plan.drop_connection_after_bytes {
            if self.written + frame.len() as u64 > limit {
                let allowed = (limit - self.written) as usize;
                let _ = self.inner.write_all(&frame[..allowed]);
                let _ = self.inner.flush();
                self.written += allowed as u64;
                self.dead = true;
                {
                    let mut log = self.log.lock();
                    log.dropped = true;
                    log.bytes = self.written;
                }
                self.closer.close();
                return Err(Self::lost());
            }
        }
        self.inner.write_all(&frame)?;
        self.written += frame.len() as u64;
        let mut log = self.log.lock();
        log.frames += 1;
        log.bytes = self.written;
        Ok(())
    }
}

impl Write for FaultWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        if self.dead {
            return Err(Self::lost());
        }
        self.pending.extend_from_slice(data);
        while let Some(len) = self.frame_len() {
            if self.pending.len() < len {
                break;
            }
            let rest = self.pending.split_off(len);
            let frame = std::mem::replace(&mut self.pending, rest);
            self.emit(frame)?;
        }
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if self.dead {
            return Err(Self::lost());
        }
        self.inner.flush()
    }
}

/// Applies `plan` to everything written on `conn`. Reads pass through.
pub fn wrap_with_faults(conn: Connection, plan: FaultPlan) -> (Connection, FaultLog) {
    let log = FaultLog::default();
    let writer = FaultWriter {
        inner: conn.writer,
        jitter: ChaCha8Rng::seed_from_u64(plan.seed),
        plan,
        log: log.clone(),
        closer: conn.closer.clone(),
        pending: Vec::new(),
        attempts: Default::default(),
        written: 0,
        dead: false,
    };
    let conn = Connection { writer: Box::new(writer), ..conn };
    (conn, log)
}
