//! Streaming digests over readers, hash-window logs and zero-filled fixtures.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use raft_core::digest::{DigestValue, HashAlgorithm, Hasher};
use raft_core::window::{HashLog, HashWindowConfig, WindowHasher};

/// Read buffer for streaming digests. Results never depend on it.
pub const STREAM_BUFFER: usize = 1 << 20;

#[derive(Debug, thiserror::Error)]
#[error("source read failed after {consumed} bytes: {source}")]
pub struct SourceReadError {
    pub consumed: u64,
    #[source]
    pub source: io::Error,
}

/// Digest of everything `source` yields until end of stream.
pub fn digest_stream<R: Read>(mut source: R, algorithm: HashAlgorithm) -> Result<DigestValue, SourceReadError> {
    let mut hasher = Hasher::new(algorithm);
    let consumed = pump(&mut source, |buf| hasher.update(buf))?;
    log::trace!("digested {consumed} bytes with {algorithm}");
    Ok(hasher.finalize())
}

/// Window and whole-stream digests for every configured algorithm, reading
/// each byte once.
pub fn digest_windows<R: Read>(mut source: R, config: HashWindowConfig) -> Result<HashLog, SourceReadError> {
    let mut hasher = WindowHasher::new(config);
    pump(&mut source, |buf| hasher.update(buf))?;
    Ok(hasher.finish())
}

fn pump<R: Read>(source: &mut R, mut sink: impl FnMut(&[u8])) -> Result<u64, SourceReadError> {
    let mut buf = vec![0u8; STREAM_BUFFER];
    let mut consumed = 0u64;
    loop {
        match source.read(&mut buf) {
            Ok(0) => return Ok(consumed),
            Ok(n) => {
                sink(&buf[..n]);
                consumed += n as u64;
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(source) => return Err(SourceReadError { consumed, source }),
        }
    }
}

/// Creates (or truncates) `path` as exactly `size_bytes` zero bytes.
pub fn make_zero_file(path: &Path, size_bytes: u64) -> io::Result<File> {
    let mut file = File::create(path)?;
    let zeros = vec![0u8; STREAM_BUFFER];
    let mut left = size_bytes;
    while left > 0 {
        let n = left.min(zeros.len() as u64) as usize;
        file.write_all(&zeros[..n])?;
        left -= n as u64;
    }
    file.sync_all()?;
    Ok(file)
}

pub fn write_hash_log(path: &Path, log: &HashLog) -> io::Result<()> {
    std::fs::write(path, log.to_text())
}
