//! Byte-stream transports beneath the wire protocol.
//!
//! A [`Connection`] is an ordered, reliable byte stream split into a read half
//! and a write half, plus a closer that tears both down from any thread and
//! the security properties the channel can vouch for.

mod fault;
mod loopback;
mod tcp;

pub use fault::{wrap_with_faults, FaultLog, FaultPlan, FaultRecord, LatencyModel};
pub use loopback::{loopback_pair, pipe, PipeReader, PipeWriter};
pub use tcp::{stream_connect, stream_listen, StreamListener, DEFAULT_PORT};

use std::fmt;
use std::io::{self, Read, Write};
use std::sync::Arc;

use raft_core::wire::{encode_frame, FrameHeader, WireError, WireMessage, HEADER_LEN};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("could not connect to {addr}: {source}")]
    ConnectFailed {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error("could not bind {addr}: {source}")]
    BindFailed {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("frame error: {0}")]
    Wire(#[from] WireError),
    #[error("channel is not confidential, integrity protected and server authenticated")]
    InsecureChannel,
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        use io::ErrorKind::*;
        match e.kind() {
            BrokenPipe | ConnectionReset | ConnectionAborted | UnexpectedEof | NotConnected => {
                TransportError::ConnectionLost(e.to_string())
            }
            _ => TransportError::Io(e),
        }
    }
}

/// What a channel guarantees. Plain transports guarantee nothing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelProperties {
    pub confidential: bool,
    pub integrity_protected: bool,
    pub server_authenticated: bool,
}

impl ChannelProperties {
    pub const SECURE: ChannelProperties =
        ChannelProperties { confidential: true, integrity_protected: true, server_authenticated: true };

    pub fn is_secure(&self) -> bool {
        self.confidential && self.integrity_protected && self.server_authenticated
    }
}

/// Refuses to carry evidence over a channel that is not fully secured unless
/// the operator explicitly allowed it.
pub fn require_secure(properties: ChannelProperties, insecure_ok: bool) -> Result<(), TransportError> {
    if properties.is_secure() || insecure_ok {
        Ok(())
    } else {
        Err(TransportError::InsecureChannel)
    }
}

/// Layers an authenticated-encryption channel over a plain connection.
pub trait SecureChannel: Send + Sync {
    fn secure_client(&self, plain: Connection) -> Result<Connection, TransportError>;
    fn secure_server(&self, plain: Connection) -> Result<Connection, TransportError>;
}

/// Closes both directions of a connection; safe to call repeatedly.
#[derive(Clone)]
pub struct Closer(Arc<dyn Fn() + Send + Sync>);

impl Closer {
    pub fn new(f: impl Fn() + Send + Sync + 'static) -> Self {
        Closer(Arc::new(f))
    }

    pub fn close(&self) {
        (self.0)()
    }
}

impl fmt::Debug for Closer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Closer")
    }
}

pub struct Connection {
    pub reader: Box<dyn Read + Send>,
    pub writer: Box<dyn Write + Send>,
    pub closer: Closer,
    pub properties: ChannelProperties,
    pub peer: String,
}

impl fmt::Debug for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Connection")
            .field("peer", &self.peer)
            .field("properties", &self.properties)
            .finish_non_exhaustive()
    }
}

impl Connection {
    pub fn split(self) -> (MessageReader, MessageWriter, Closer) {
        (MessageReader { inner: self.reader }, MessageWriter { inner: self.writer }, self.closer)
    }
}

pub struct MessageReader {
    inner: Box<dyn Read + Send>,
}

impl MessageReader {
    /// Next message, or `None` on a clean end of stream between frames.
    pub fn recv(&mut self) -> Result<Option<WireMessage>, TransportError> {
        read_message(&mut self.inner)
    }
}

pub struct MessageWriter {
    inner: Box<dyn Write + Send>,
}

impl MessageWriter {
    pub fn send(&mut self, message: &WireMessage) -> Result<(), TransportError> {
        write_message(&mut self.inner, message)
    }
}

pub fn write_message<W: Write + ?Sized>(w: &mut W, message: &WireMessage) -> Result<(), TransportError> {
    let frame = encode_frame(message)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

pub fn read_message<R: Read + ?Sized>(r: &mut R) -> Result<Option<WireMessage>, TransportError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(TransportError::ConnectionLost("end of stream inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let parsed = FrameHeader::parse(&header)?;
    let mut payload = vec![0u8; parsed.payload_len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TransportError::ConnectionLost("end of stream inside a frame".into()),
        _ => e.into(),
    })?;
    Ok(Some(WireMessage::decode_payload(parsed.type_byte, &payload)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framed_messages_cross_a_pipe() {
        let (a, b) = loopback_pair();
        let (_, mut tx, _) = a.split();
        let (mut rx, _, closer) = b.split();
        tx.send(&WireMessage::Ack { seq: 9 }).unwrap();
        tx.send(&WireMessage::JobFinalize).unwrap();
        drop(tx);
        assert_eq!(rx.recv().unwrap(), Some(WireMessage::Ack { seq: 9 }));
        assert_eq!(rx.recv().unwrap(), Some(WireMessage::JobFinalize));
        assert_eq!(rx.recv().unwrap(), None);
        closer.close();
    }

    #[test]
    fn truncated_frame_is_connection_lost() {
        let frame = encode_frame(&WireMessage::Ack { seq: 1 }).unwrap();
        let mut short = &frame[..frame.len() - 2];
        assert!(matches!(read_message(&mut short), Err(TransportError::ConnectionLost(_))));
        let mut half_header = &frame[..5];
        assert!(matches!(read_message(&mut half_header), Err(TransportError::ConnectionLost(_))));
    }

    #[test]
    fn plain_channels_need_override() {
        assert!(matches!(require_secure(ChannelProperties::default(), false), Err(TransportError::InsecureChannel)));
        assert!(require_secure(ChannelProperties::default(), true).is_ok());
        assert!(require_secure(ChannelProperties::SECURE, false).is_ok());
    }
}
