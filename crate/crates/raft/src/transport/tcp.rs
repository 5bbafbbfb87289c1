use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};

use super::{ChannelProperties, Closer, Connection, TransportError};

pub const DEFAULT_PORT: u16 = 8472;

const SOCKET_BUFFER: usize = 256 * 1024;

fn wrap(stream: TcpStream) -> Result<Connection, TransportError> {
    stream.set_nodelay(true)?;
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_else(|_| "unknown".into());
    let reader = stream.try_clone()?;
    let closer = stream.try_clone()?;
    Ok(Connection {
        reader: Box::new(BufReader::with_capacity(SOCKET_BUFFER, reader)),
        writer: Box::new(BufWriter::with_capacity(SOCKET_BUFFER, stream)),
        closer: Closer::new(move || {
            let _ = closer.shutdown(Shutdown::Both);
        }),
        properties: ChannelProperties::default(),
        peer,
    })
}

pub fn stream_connect(host: &str, port: u16) -> Result<Connection, TransportError> {
    let addr = format!("{host}:{port}");
    let failed = |source| TransportError::ConnectFailed { addr: addr.clone(), source };
    let stream = TcpStream::connect(addr.as_str()).map_err(failed)?;
    wrap(stream)
}

#[derive(Debug)]
pub struct StreamListener {
    inner: TcpListener,
}

pub fn stream_listen(bind: impl ToSocketAddrs + std::fmt::Debug) -> Result<StreamListener, TransportError> {
    let addr = format!("{bind:?}");
    let inner = TcpListener::bind(bind).map_err(|source| TransportError::BindFailed { addr, source })?;
    Ok(StreamListener { inner })
}

impl StreamListener {
    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.inner.local_addr()
    }

    pub fn accept(&self) -> Result<Connection, TransportError> {
        let (stream, _) = self.inner.accept()?;
        wrap(stream)
    }

    pub fn set_nonblocking(&self, nonblocking: bool) -> std::io::Result<()> {
        self.inner.set_nonblocking(nonblocking)
    }

    /// Accepts one pending connection if there is one (listener must be nonblocking).
    pub fn try_accept(&self) -> Result<Option<Connection>, TransportError> {
        match self.inner.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                wrap(stream).map(Some)
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}
