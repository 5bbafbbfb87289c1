//! Progress events and a replayable broadcast bus.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    DeviceListed { device_id: String, label: String, total_bytes: u64 },
    PrehashStarted,
    PrehashDone { digest: String },
    SessionOpened { session_id: String, resume_from: u64 },
    ChunkSent { seq: u64, attempt: u32 },
    ChunkAcked { seq: u64 },
    ChunkNacked { seq: u64, attempt: u32 },
    JobFinalized { verdict: String },
    Error { detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProgressEvent {
    pub id: u64,
    pub timestamp: String,
    pub job_id: Option<u64>,
    pub device_id: Option<String>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Default)]
struct BusState {
    events: Vec<ProgressEvent>,
    closed: bool,
}

/// Append-only event log that any number of subscribers can follow and
/// replay from an id.
#[derive(Debug, Clone, Default)]
pub struct EventBus {
    inner: Arc<(Mutex<BusState>, Condvar)>,
}

impl EventBus {
    pub fn new() -> Self {
        EventBus::default()
    }

    fn lock(&self) -> MutexGuard<'_, BusState> {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn publish(&self, job_id: Option<u64>, device_id: Option<&str>, kind: EventKind) -> u64 {
        let mut s = self.lock();
        let id = s.events.len() as u64 + 1;
        s.events.push(ProgressEvent {
            id,
            timestamp: crate::store::format_timestamp(crate::store::now()),
            job_id,
            device_id: device_id.map(str::to_string),
            kind,
        });
        self.inner.1.notify_all();
        id
    }

    /// Events with id greater than `after`.
    pub fn since(&self, after: u64) -> Vec<ProgressEvent> {
        let s = self.lock();
        s.events.iter().skip(after as usize).cloned().collect()
    }

    /// Like [`since`](Self::since) but waits up to `timeout` for something new.
    pub fn wait_since(&self, after: u64, timeout: Duration) -> Vec<ProgressEvent> {
        let s = self.lock();
        let (s, _) = self
            .inner
            .1
            .wait_timeout_while(s, timeout, |s| s.events.len() as u64 <= after && !s.closed)
            .unwrap_or_else(|p| p.into_inner());
        s.events.iter().skip(after as usize).cloned().collect()
    }

    pub fn last_id(&self) -> u64 {
        self.lock().events.len() as u64
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.inner.1.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }
}
