//! Read-only evidence sources, whole-image pre-hashing, chunk reads and
//! local split imaging.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use raft_core::digest::{DigestValue, HashAlgorithm, Hasher};
use raft_core::model::{plan_chunks, ChunkSpan, DeviceDescriptor, ModelError};
use raft_core::window::{HashLog, HashWindowConfig, WindowHasher};

use crate::hashing::{digest_stream, SourceReadError, STREAM_BUFFER};

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("source {0} not found")]
    NotFound(PathBuf),
    #[error("permission denied opening {0}")]
    PermissionDenied(PathBuf),
    #[error("descriptor says {expected} bytes but the source has {actual}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("chunk at {offset}+{length} lies outside the {total} byte source")]
    OutOfBounds { offset: u64, length: u64, total: u64 },
    #[error(transparent)]
    Read(#[from] SourceReadError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl ImagingError {
    fn io(context: impl Into<String>, source: io::Error) -> Self {
        ImagingError::Io { context: context.into(), source }
    }
}

/// An evidence source opened for reading only. There is no way to obtain a
/// writable handle from it.
#[derive(Debug)]
pub struct ReadOnlySource {
    descriptor: DeviceDescriptor,
    path: PathBuf,
    file: File,
    cursor: u64,
}

/// Opens `path` read-only and checks it against `descriptor.total_bytes`.
pub fn open_source(descriptor: &DeviceDescriptor, path: &Path) -> Result<ReadOnlySource, ImagingError> {
    let mut file = OpenOptions::new().read(true).open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ImagingError::NotFound(path.to_path_buf()),
        io::ErrorKind::PermissionDenied => ImagingError::PermissionDenied(path.to_path_buf()),
        _ => ImagingError::io(format!("opening {}", path.display()), e),
    })?;
    // Seeking to the end also sizes block devices, whose metadata length is 0.
    let actual = file
        .seek(SeekFrom::End(0))
        .and_then(|n| file.seek(SeekFrom::Start(0)).map(|_| n))
        .map_err(|e| ImagingError::io(format!("sizing {}", path.display()), e))?;
    if actual != descriptor.total_bytes {
        return Err(ImagingError::LengthMismatch { expected: descriptor.total_bytes, actual });
    }
    Ok(ReadOnlySource { descriptor: descriptor.clone(), path: path.to_path_buf(), file, cursor: 0 })
}

/// Length of the file or block device at `path`.
pub fn source_length(path: &Path) -> io::Result<u64> {
    let mut f = File::open(path)?;
    f.seek(SeekFrom::End(0))
}

impl ReadOnlySource {
    pub fn descriptor(&self) -> &DeviceDescriptor {
        &self.descriptor
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn total_bytes(&self) -> u64 {
        self.descriptor.total_bytes
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn rewind(&mut self) -> io::Result<()> {
        self.file.seek(SeekFrom::Start(0))?;
        self.cursor = 0;
        Ok(())
    }

    /// Whole-image digest in one sequential pass; the cursor is back at 0
    /// afterwards.
    pub fn prehash(&mut self, algorithm: HashAlgorithm) -> Result<DigestValue, ImagingError> {
        self.rewind().map_err(|e| ImagingError::io("rewinding source", e))?;
        let digest = digest_stream(&mut *self, algorithm)?;
        self.rewind().map_err(|e| ImagingError::io("rewinding source", e))?;
        Ok(digest)
    }

    /// Reads exactly `span` and digests it in the same pass.
    pub fn read_chunk(&mut self, span: &ChunkSpan, algorithm: HashAlgorithm) -> Result<(Vec<u8>, DigestValue), ImagingError> {
        let total = self.total_bytes();
        if span.length == 0 || span.offset.checked_add(span.length).is_none_or(|end| end > total) {
            return Err(ImagingError::OutOfBounds { offset: span.offset, length: span.length, total });
        }
        self.file
            .seek(SeekFrom::Start(span.offset))
            .map_err(|e| ImagingError::io(format!("seeking to {}", span.offset), e))?;
        self.cursor = span.offset;
        let mut payload = vec![0u8; span.length as usize];
        let mut hasher = Hasher::new(algorithm);
        let mut filled = 0usize;
        while filled < payload.len() {
            let end = (filled + STREAM_BUFFER).min(payload.len());
            match self.file.read(&mut payload[filled..end]) {
                Ok(0) => {
                    let source = io::Error::new(io::ErrorKind::UnexpectedEof, "source shrank during read");
                    return Err(SourceReadError { consumed: filled as u64, source }.into());
                }
                Ok(n) => {
                    hasher.update(&payload[filled..filled + n]);
                    filled += n;
                    self.cursor += n as u64;
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(source) => return Err(SourceReadError { consumed: filled as u64, source }.into()),
            }
        }
        Ok((payload, hasher.finalize()))
    }
}

impl Read for ReadOnlySource {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let left = self.total_bytes().saturating_sub(self.cursor);
        if left == 0 {
            return Ok(0);
        }
        let want = buf.len().min(left.min(usize::MAX as u64) as usize);
        let n = self.file.read(&mut buf[..want])?;
        self.cursor += n as u64;
        Ok(n)
    }
}

/// Output of a local split run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutput {
    pub files: Vec<PathBuf>,
    pub hash_log: HashLog,
    pub hash_log_path: PathBuf,
}

pub const HASH_LOG_NAME: &str = "hashlog.txt";

pub fn chunk_file_name(seq: u64) -> String {
    format!("chunk_{seq:06}")
}

/// Writes `chunk_<seq>` files to `dest` plus a hash log with one window per
/// chunk for every algorithm.
pub fn split_to_files(
    source: &mut ReadOnlySource,
    chunk_size: u64,
    dest: &Path,
    algorithms: &[HashAlgorithm],
) -> Result<SplitOutput, ImagingError> {
    let plan = plan_chunks(source.total_bytes(), chunk_size)?;
    let config = HashWindowConfig::new(chunk_size, algorithms.iter().copied())
        .map_err(|e| ImagingError::io("hash configuration", io::Error::new(io::ErrorKind::InvalidInput, e.to_string())))?;
    std::fs::create_dir_all(dest).map_err(|e| ImagingError::io(format!("creating {}", dest.display()), e))?;
    let mut window = WindowHasher::new(config);
    let mut files = Vec::with_capacity(plan.len());
    for span in &plan {
        let (payload, _) = source.read_chunk(span, algorithms[0])?;
        window.update(&payload);
        let path = dest.join(chunk_file_name(span.seq));
        std::fs::write(&path, &payload).map_err(|e| ImagingError::io(format!("writing {}", path.display()), e))?;
        files.push(path);
    }
    source.rewind().map_err(|e| ImagingError::io("rewinding source", e))?;
    let hash_log = window.finish();
    let hash_log_path = dest.join(HASH_LOG_NAME);
    std::fs::write(&hash_log_path, hash_log.to_text())
        .map_err(|e| ImagingError::io(format!("writing {}", hash_log_path.display()), e))?;
    Ok(SplitOutput { files, hash_log, hash_log_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use raft_core::digest::digest_bytes;
    use raft_core::model::chunk_span;

    fn fixture(bytes: &[u8]) -> (tempfile::TempDir, PathBuf, DeviceDescriptor) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.img");
        std::fs::write(&path, bytes).unwrap();
        let d = DeviceDescriptor::new("dev", "dev.img", bytes.len() as u64);
        (dir, path, d)
    }

    #[test]
    fn open_checks_length_and_presence() {
        let (_dir, path, mut d) = fixture(&[1; 99]);
        assert_eq!(open_source(&d, &path).unwrap().total_bytes(), 99);
        d.total_bytes = 100;
        assert!(matches!(
            open_source(&d, &path),
            Err(ImagingError::LengthMismatch { expected: 100, actual: 99 })
        ));
        assert!(matches!(open_source(&d, &path.with_extension("missing")), Err(ImagingError::NotFound(_))));
    }

    #[test]
    fn reads_past_end_are_end_of_source() {
        let (_dir, path, d) = fixture(b"abc");
        let mut src = open_source(&d, &path).unwrap();
        let mut out = Vec::new();
        src.read_to_end(&mut out).unwrap();
        assert_eq!(out, b"abc");
        assert_eq!(src.read(&mut [0u8; 8]).unwrap(), 0);
    }

    #[test]
    fn prehash_restores_cursor() {
        let (_dir, path, d) = fixture(&vec![0u8; 1 << 20]);
        let mut src = open_source(&d, &path).unwrap();
        let digest = src.prehash(HashAlgorithm::Sha512).unwrap();
        assert_eq!(digest, digest_bytes(HashAlgorithm::Sha512, &vec![0u8; 1 << 20]));
        assert_eq!(src.cursor(), 0);
    }

    #[test]
    fn chunk_reads() {
        let (_dir, path, d) = fixture(&[0, 1, 2, 3]);
        let mut src = open_source(&d, &path).unwrap();
        let (payload, digest) = src.read_chunk(&ChunkSpan { seq: 0, offset: 0, length: 4 }, HashAlgorithm::Sha512).unwrap();
        assert_eq!(payload, [0, 1, 2, 3]);
        assert_eq!(digest, digest_bytes(HashAlgorithm::Sha512, &[0, 1, 2, 3]));
        assert!(matches!(
            src.read_chunk(&ChunkSpan { seq: 1, offset: 2, length: 4 }, HashAlgorithm::Sha512),
            Err(ImagingError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn short_final_chunk() {
        let bytes: Vec<u8> = (0..105).collect();
        let (_dir, path, d) = fixture(&bytes);
        let mut src = open_source(&d, &path).unwrap();
        let last = chunk_span(105, 10, 10).unwrap();
        assert_eq!(src.read_chunk(&last, HashAlgorithm::Md5).unwrap().0, &bytes[100..]);
    }

    #[cfg(target_os = "linux")]
    #[test]
    fn handle_is_opened_read_only() {
        use std::os::fd::AsRawFd;
        let (_dir, path, d) = fixture(b"evidence");
        let src = open_source(&d, &path).unwrap();
        let info = std::fs::read_to_string(format!("/proc/self/fdinfo/{}", src.file.as_raw_fd())).unwrap();
        let flags = info.lines().find_map(|l| l.strip_prefix("flags:")).unwrap().trim();
        let flags = u32::from_str_radix(flags, 8).unwrap();
        assert_eq!(flags & 0o3, 0, "O_RDONLY expected, got {flags:o}");
    }

    #[test]
    fn read_only_fixture_opens() {
        let (_dir, path, d) = fixture(b"evidence");
        let mut perms = std::fs::metadata(&path).unwrap().permissions();
        perms.set_readonly(true);
        std::fs::set_permissions(&path, perms).unwrap();
        let mut src = open_source(&d, &path).unwrap();
        src.prehash(HashAlgorithm::Sha256).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"evidence");
    }

    #[test]
    fn split_ten_bytes_by_four() {
        let (dir, path, d) = fixture(b"0123456789");
        let mut src = open_source(&d, &path).unwrap();
        let out_dir = dir.path().join("out");
        let algs = [HashAlgorithm::Sha256, HashAlgorithm::Sha512];
        let out = split_to_files(&mut src, 4, &out_dir, &algs).unwrap();
        let sizes: Vec<u64> = out.files.iter().map(|p| std::fs::metadata(p).unwrap().len()).collect();
        assert_eq!(sizes, [4, 4, 2]);
        assert_eq!(out.files[0].file_name().unwrap(), "chunk_000000");
        let joined: Vec<u8> = out.files.iter().flat_map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(joined, b"0123456789");
        let first_log = std::fs::read(&out.hash_log_path).unwrap();
        let again = split_to_files(&mut src, 4, &out_dir, &algs).unwrap();
        assert_eq!(again, out);
        assert_eq!(std::fs::read(&out.hash_log_path).unwrap(), first_log);
        assert_eq!(HashLog::parse(std::str::from_utf8(&first_log).unwrap()).unwrap(), out.hash_log);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn chunks_reassemble_to_prehash(len in 1usize..20_000, chunk in 1u64..5000) {
            let bytes: Vec<u8> = (0..len).map(|i| (i * 7 + i / 251) as u8).collect();
            let (_dir, path, d) = fixture(&bytes);
            let mut src = open_source(&d, &path).unwrap();
            let whole = src.prehash(HashAlgorithm::Sha512).unwrap();
            let mut joined = Vec::with_capacity(len);
            for span in plan_chunks(len as u64, chunk).unwrap() {
                let (payload, digest) = src.read_chunk(&span, HashAlgorithm::Sha256).unwrap();
                prop_assert_eq!(digest, digest_stream(&payload[..], HashAlgorithm::Sha256).unwrap());
                joined.extend_from_slice(&payload);
            }
            prop_assert_eq!(&joined, &bytes);
            prop_assert_eq!(digest_bytes(HashAlgorithm::Sha512, &joined), whole);
        }
    }
}
