use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use super::{ChannelProperties, Closer, Connection};

/// Bytes a writer may run ahead of its reader before blocking.
const PIPE_CAPACITY: usize = 1 << 20;

#[derive(Default)]
struct PipeState {
    buf: VecDeque<u8>,
    writer_gone: bool,
    reader_gone: bool,
}

#[derive(Default)]
struct Shared {
    state: Mutex<PipeState>,
    changed: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, PipeState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn close(&self) {
        let mut s = self.lock();
        s.writer_gone = true;
        s.reader_gone = true;
        self.changed.notify_all();
    }
}

/// Write end of an in-process FIFO byte pipe.
pub struct PipeWriter(Arc<Shared>);

/// Read end of an in-process FIFO byte pipe.
pub struct PipeReader(Arc<Shared>);

pub fn pipe() -> (PipeWriter, PipeReader) {
    let shared = Arc::new(Shared::default());
    (PipeWriter(shared.clone()), PipeReader(shared))
}

impl Write for PipeWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        if data.is_empty() {
            return Ok(0);
        }
        let mut s = self.0.lock();
        loop {
            if s.reader_gone || s.writer_gone {
                return Err(io::Error::new(io::ErrorKind::BrokenPipe, "loopback peer closed"));
            }
            if s.buf.len() < PIPE_CAPACITY {
                break;
            }
            s = self.0.changed.wait(s).unwrap_or_else(|p| p.into_inner());
        }
        let n = data.len().min(PIPE_CAPACITY - s.buf.len());
        s.buf.extend(&data[..n]);
        self.0.changed.notify_all();
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for PipeWriter {
    fn drop(&mut self) {
        self.0.lock().writer_gone = true;
        self.0.changed.notify_all();
    }
}

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if out.is_empty() {
            return Ok(0);
        }
        let mut s = self.0.lock();
        while s.buf.is_empty() {
            if s.writer_gone || s.reader_gone {
                return Ok(0);
            }
            s = self.0.changed.wait(s).unwrap_or_else(|p| p.into_inner());
        }
        let (front, back) = s.buf.as_slices();
        let n = out.len().min(front.len() + back.len());
        let from_front = n.min(front.len());
        out[..from_front].copy_from_slice(&front[..from_front]);
        out[from_front..n].copy_from_slice(&back[..n - from_front]);
        s.buf.drain(..n);
        self.0.changed.notify_all();
        Ok(n)
    }
}

impl Drop for PipeReader {
    fn drop(&mut self) {
        self.0.lock().reader_gone = true;
        self.0.changed.notify_all();
    }
}

/// Two connected in-process endpoints with FIFO delivery each way.
pub fn loopback_pair() -> (Connection, Connection) {
    let (a_tx, b_rx) = pipe();
    let (b_tx, a_rx) = pipe();
    let (ab, ba) = (a_tx.0.clone(), b_tx.0.clone());
    let closer = move || {
        ab.close();
        ba.close();
    };
    let closer = Closer::new(closer);
    let end = |reader: PipeReader, writer: PipeWriter, peer: &str| Connection {
        reader: Box::new(reader),
        writer: Box::new(writer),
        closer: closer.clone(),
        properties: ChannelProperties::default(),
        peer: peer.into(),
    };
    (end(a_rx, a_tx, "loopback:server"), end(b_rx, b_tx, "loopback:client"))
}
