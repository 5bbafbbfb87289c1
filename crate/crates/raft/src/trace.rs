//! Wall-clock recorder for acquisition trace events.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use raft_core::timing::{sorted_trace, TraceEvent, TraceKind};

/// Shared, cloneable trace sink. Times are seconds since the recorder was
/// created, so client and server recorders built from one clone share an
/// origin.
#[derive(Debug, Clone)]
pub struct TraceRecorder {
    origin: Instant,
    events: Arc<Mutex<Vec<TraceEvent>>>,
}

impl Default for TraceRecorder {
    fn default() -> Self {
        TraceRecorder::new()
    }
}

impl TraceRecorder {
    pub fn new() -> Self {
        TraceRecorder { origin: Instant::now(), events: Arc::default() }
    }

    pub fn record(&self, kind: TraceKind) {
        let at = self.origin.elapsed().as_secs_f64();
        self.events.lock().unwrap_or_else(|p| p.into_inner()).push(TraceEvent { at, kind });
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        sorted_trace(&self.events.lock().unwrap_or_else(|p| p.into_inner()))
    }
}

pub(crate) fn record(trace: &Option<TraceRecorder>, kind: TraceKind) {
    if let Some(t) = trace {
        t.record(kind);
    }
}
