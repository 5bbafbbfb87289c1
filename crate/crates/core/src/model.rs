//! Shared domain types: devices, chunk plans, manifests and evidence records.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::digest::{DigestError, DigestValue, HashAlgorithm};

/// Default transfer chunk: 100 MiB.
pub const DEFAULT_CHUNK_SIZE: u64 = 100 * 1024 * 1024;

pub const MANIFEST_HEADER: &str = "manifest-version 1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("source has zero bytes; an empty device is not imageable")]
    ZeroSizeSource,
    #[error("chunk size must be greater than zero")]
    InvalidChunkSize,
    #[error("partition {index} ({offset}+{length}) extends past device end {total_bytes}")]
    PartitionOutOfBounds {
        index: usize,
        offset: u64,
        length: u64,
        total_bytes: u64,
    },
    #[error("partitions {first} and {second} overlap")]
    PartitionOverlap { first: usize, second: usize },
    #[error("chunk {seq} does not match the chunk plan: {reason}")]
    ChunkMismatch { seq: u64, reason: &'static str },
    #[error("manifest line {line}: {reason}")]
    ManifestParse { line: usize, reason: String },
    #[error("manifest incomplete: {have} of {expected} chunks")]
    ManifestIncomplete { have: u64, expected: u64 },
    #[error(transparent)]
    Digest(#[from] DigestError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub offset: u64,
    pub length: u64,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    FileBacked,
    BlockDevice,
}

impl SourceKind {
    pub fn name(self) -> &'static str {
        match self {
            SourceKind::FileBacked => "file_backed",
            SourceKind::BlockDevice => "block_device",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "file_backed" => Some(SourceKind::FileBacked),
            "block_device" => Some(SourceKind::BlockDevice),
            _ => None,
        }
    }
}

/// An enumerable evidence source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceDescriptor {
    pub device_id: String,
    pub label: String,
    pub total_bytes: u64,
    pub partitions: Vec<Partition>,
    pub source_kind: SourceKind,
}

impl DeviceDescriptor {
    pub fn new(device_id: impl Into<String>, label: impl Into<String>, total_bytes: u64) -> Self {
        DeviceDescriptor {
            device_id: device_id.into(),
            label: label.into(),
            total_bytes,
            partitions: Vec::new(),
            source_kind: SourceKind::FileBacked,
        }
    }

    /// Partitions must lie inside the device and must not overlap.
    pub fn validate(&self) -> Result<(), ModelError> {
        for (index, p) in self.partitions.iter().enumerate() {
            let end = p.offset.checked_add(p.length);
            if end.is_none_or(|e| e > self.total_bytes) {
                return Err(ModelError::PartitionOutOfBounds {
                    index,
                    offset: p.offset,
                    length: p.length,
                    total_bytes: self.total_bytes,
                });
            }
        }
        let mut order: Vec<usize> = (0..self.partitions.len()).collect();
        order.sort_by_key(|&i| self.partitions[i].offset);
        for pair in order.windows(2) {
            let (a, b) = (&self.partitions[pair[0]], &self.partitions[pair[1]]);
            if a.offset + a.length > b.offset {
                let (first, second) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
                return Err(ModelError::PartitionOverlap { first, second });
            }
        }
        Ok(())
    }
}

/// One planned byte range of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSpan {
    pub seq: u64,
    pub offset: u64,
    pub length: u64,
}

pub fn chunk_count(total_bytes: u64, chunk_size: u64) -> Result<u64, ModelError> {
    if chunk_size == 0 {
        return Err(ModelError::InvalidChunkSize);
    }
    if total_bytes == 0 {
        return Err(ModelError::ZeroSizeSource);
    }
    Ok(total_bytes.div_ceil(chunk_size))
}

/// Span of chunk `seq`, or `None` when `seq` is past the end.
pub fn chunk_span(total_bytes: u64, chunk_size: u64, seq: u64) -> Option<ChunkSpan> {
    let offset = seq.checked_mul(chunk_size)?;
    if chunk_size == 0 || offset >= total_bytes {
        return None;
    }
    Some(ChunkSpan {
        seq,
        offset,
        length: chunk_size.min(total_bytes - offset),
    })
}

/// Contiguous, non-overlapping spans covering `[0, total_bytes)`.
pub fn plan_chunks(total_bytes: u64, chunk_size: u64) -> Result<Vec<ChunkSpan>, ModelError> {
    let count = chunk_count(total_bytes, chunk_size)?;
    Ok((0..count)
        .filter_map(|seq| chunk_span(total_bytes, chunk_size, seq))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkState {
    Pending,
    InFlight,
    NakRequeued,
    Verified,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkRecord {
    pub seq: u64,
    pub offset: u64,
    pub length: u64,
    pub digest: DigestValue,
    pub state: ChunkState,
    pub attempts: u32,
}

/// A parsed `manifest.tsv` row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub seq: u64,
    pub offset: u64,
    pub length: u64,
    pub digest: DigestValue,
}

/// The chunk records for one device image, filled in seq order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkManifest {
    pub device_id: String,
    pub total_bytes: u64,
    pub chunk_size: u64,
    pub whole_image_digest: DigestValue,
    pub chunks: Vec<ChunkRecord>,
}

impl ChunkManifest {
    pub fn new(
        device_id: impl Into<String>,
        total_bytes: u64,
        chunk_size: u64,
        whole_image_digest: DigestValue,
    ) -> Result<Self, ModelError> {
        chunk_count(total_bytes, chunk_size)?;
        Ok(ChunkManifest {
            device_id: device_id.into(),
            total_bytes,
            chunk_size,
            whole_image_digest,
            chunks: Vec::new(),
        })
    }

    pub fn chunk_count(&self) -> u64 {
        self.total_bytes.div_ceil(self.chunk_size)
    }

    pub fn span(&self, seq: u64) -> Option<ChunkSpan> {
        chunk_span(self.total_bytes, self.chunk_size, seq)
    }

    pub fn is_complete(&self) -> bool {
        self.chunks.len() as u64 == self.chunk_count()
    }

    /// Appends the next record. Records must arrive in seq order and match the plan.
    pub fn push(&mut self, record: ChunkRecord) -> Result<(), ModelError> {
        let seq = record.seq;
        if seq != self.chunks.len() as u64 {
            return Err(ModelError::ChunkMismatch {
                seq,
                reason: "out of order",
            });
        }
        let span = self.span(seq).ok_or(ModelError::ChunkMismatch {
            seq,
            reason: "past end of device",
        })?;
        if span.offset != record.offset || span.length != record.length {
            return Err(ModelError::ChunkMismatch {
                seq,
                reason: "offset or length differs from plan",
            });
        }
        if record.state == ChunkState::Verified && record.attempts == 0 {
            return Err(ModelError::ChunkMismatch {
                seq,
                reason: "verified chunk with zero attempts",
            });
        }
        self.chunks.push(record);
        Ok(())
    }

    /// Number of leading chunks in the `Verified` state.
    pub fn verified_prefix(&self) -> u64 {
        self.chunks
            .iter()
            .take_while(|c| c.state == ChunkState::Verified)
            .count() as u64
    }

    /// Checks every structural invariant of a complete manifest.
    pub fn validate_complete(&self) -> Result<(), ModelError> {
        if !self.is_complete() {
            return Err(ModelError::ManifestIncomplete {
                have: self.chunks.len() as u64,
                expected: self.chunk_count(),
            });
        }
        let mut sum = 0u64;
        for (i, c) in self.chunks.iter().enumerate() {
            let span = self.span(i as u64).ok_or(ModelError::ChunkMismatch {
                seq: i as u64,
                reason: "past end of device",
            })?;
            if c.seq != span.seq || c.offset != span.offset || c.length != span.length {
                return Err(ModelError::ChunkMismatch {
                    seq: c.seq,
                    reason: "offset or length differs from plan",
                });
            }
            sum += c.length;
        }
        debug_assert_eq!(sum, self.total_bytes);
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for c in &self.chunks {
            out.push_str(&manifest_line(c.seq, c.offset, c.length, &c.digest));
        }
        out
    }

    /// Rebuilds a manifest from parsed rows; every row is taken as verified.
    pub fn from_rows(
        device_id: impl Into<String>,
        total_bytes: u64,
        chunk_size: u64,
        whole_image_digest: DigestValue,
        rows: Vec<ManifestRow>,
    ) -> Result<Self, ModelError> {
        let mut m = ChunkManifest::new(device_id, total_bytes, chunk_size, whole_image_digest)?;
        for row in rows {
            m.push(ChunkRecord {
                seq: row.seq,
                offset: row.offset,
                length: row.length,
                digest: row.digest,
                state: ChunkState::Verified,
                attempts: 1,
            })?;
        }
        Ok(m)
    }
}

/// One `seq\toffset\tlength\talgorithm\thex` line, LF-terminated.
pub fn manifest_line(seq: u64, offset: u64, length: u64, digest: &DigestValue) -> String {
    format!(
        "{seq}\t{offset}\t{length}\t{}\t{}\n",
        digest.algorithm(),
        digest.to_hex()
    )
}

pub fn parse_manifest_rows(text: &str) -> Result<Vec<ManifestRow>, ModelError> {
    let mut lines = text.split('\n').enumerate();
    match lines.next() {
        Some((_, MANIFEST_HEADER)) => {}
        _ => {
            return Err(ModelError::ManifestParse {
                line: 1,
                reason: "missing `manifest-version 1` header".to_string(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| ModelError::ManifestParse {
            line: i + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad("bad integer"));
        let algorithm: HashAlgorithm = fields[3].parse()?;
        let row = ManifestRow {
            seq: num(fields[0])?,
            offset: num(fields[1])?,
            length: num(fields[2])?,
            digest: DigestValue::from_hex(algorithm, fields[4])?,
        };
        if row.seq != rows.len() as u64 {
            return Err(bad("seq values must be 0.. without gaps"));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalVerdict {
    Pending,
    Verified,
    Failed,
}

impl FinalVerdict {
    pub fn name(self) -> &'static str {
        match self {
            FinalVerdict::Pending => "pending",
            FinalVerdict::Verified => "verified",
            FinalVerdict::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pending" => Some(FinalVerdict::Pending),
            "verified" => Some(FinalVerdict::Verified),
            "failed" => Some(FinalVerdict::Failed),
            _ => None,
        }
    }
}

impl fmt::Display for FinalVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Milliseconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

/// Server-side stored artifact for one acquired device.
///
/// Per-chunk verification times live in the session's transfer log; the
/// record carries job-level timestamps only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceRecord {
    pub case_id: String,
    pub session_id: String,
    pub device: DeviceDescriptor,
    pub manifest: ChunkManifest,
    pub chunk_digest_algorithm: HashAlgorithm,
    pub image_path: String,
    pub metadata: BTreeMap<String, String>,
    pub final_verdict: FinalVerdict,
    pub opened_at: Timestamp,
    pub finalized_at: Option<Timestamp>,
}
