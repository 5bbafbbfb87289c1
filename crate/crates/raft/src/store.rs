//! Server-side evidence store.
//!
//! Layout: `<root>/<case_id>/<session_id>/<device_id>/` holding `image.raw`
//! (pure device bytes), `manifest.tsv`, `metadata.txt` and `transfer.log`.
//! A session whose metadata still says `final_verdict: pending` can be
//! resumed by a later job for the same case, device and whole-image digest.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, SecondsFormat, Utc};
use raft_core::digest::{DigestError, DigestValue, HashAlgorithm};
use raft_core::model::{
    chunk_count, chunk_span, manifest_line, parse_manifest_rows, ChunkManifest, ChunkRecord, ChunkState,
    DeviceDescriptor, EvidenceRecord, FinalVerdict, ModelError, Partition, SourceKind, Timestamp, MANIFEST_HEADER,
};
use raft_core::session::{resume_point, JobSpec, ResumeError};

use crate::hashing::digest_stream;

pub const IMAGE_FILE: &str = "image.raw";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const METADATA_FILE: &str = "metadata.txt";
pub const TRANSFER_LOG: &str = "transfer.log";

/// Metadata key holding per-chunk transmission counts, comma separated.
const ATTEMPTS_KEY: &str = "chunk_attempts";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store root {root} is not writable: {source}")]
    Unwritable {
        root: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{kind} {value:?} cannot be used as a directory name")]
    InvalidName { kind: &'static str, value: String },
    #[error("append of chunk {seq} out of order; next is {expected}")]
    OutOfOrderAppend { seq: u64, expected: u64 },
    #[error("chunk {seq} carries {actual} bytes, planned {expected}")]
    ChunkLength { seq: u64, expected: u64, actual: u64 },
    #[error("image holds {actual} bytes, device has {expected}")]
    ImageLengthMismatch { expected: u64, actual: u64 },
    #[error(transparent)]
    Resume(#[from] ResumeError),
    #[error("metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Digest(#[from] DigestError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> StoreError {
    let context = context.into();
    move |source| StoreError::Io { context, source }
}

pub fn now() -> Timestamp {
    Timestamp(Utc::now().timestamp_millis())
}

/// UTC RFC 3339 with millisecond precision and a trailing `Z`.
pub fn format_timestamp(t: Timestamp) -> String {
    DateTime::<Utc>::from_timestamp_millis(t.0)
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn parse_timestamp(s: &str) -> Option<Timestamp> {
    DateTime::parse_from_rfc3339(s).ok().map(|d| Timestamp(d.timestamp_millis()))
}

/// `<UTC compact timestamp>-<8 hex digits>`.
pub fn new_session_id(at: Timestamp) -> String {
    let ts = DateTime::<Utc>::from_timestamp_millis(at.0).unwrap_or_default();
    format!("{}-{:08x}", ts.format("%Y%m%dT%H%M%S%.3fZ"), rand::random::<u32>())
}

fn check_name(kind: &'static str, value: &str) -> Result<(), StoreError> {
    let ok = !value.is_empty()
        && value != "."
        && value != ".."
        && !value.chars().any(|c| c == '/' || c == '\\' || c == '\0' || c.is_control());
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidName { kind, value: value.into() })
    }
}

fn escape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for c in value.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    let mut chars = value.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Canonical `key: value` lines in sorted key order.
pub fn render_metadata(record: &EvidenceRecord) -> String {
    let mut map: BTreeMap<String, String> = record.metadata.clone();
    let d = &record.device;
    let m = &record.manifest;
    let mut put = |k: &str, v: String| {
        map.insert(k.to_string(), v);
    };
    put("case_id", record.case_id.clone());
    put("session_id", record.session_id.clone());
    put("device_id", d.device_id.clone());
    put("device_label", d.label.clone());
    put("source_kind", d.source_kind.name().into());
    put("total_bytes", d.total_bytes.to_string());
    put("partition_count", d.partitions.len().to_string());
    for (i, p) in d.partitions.iter().enumerate() {
        put(&format!("partition_{i}"), format!("{} {} {}", p.offset, p.length, p.label));
    }
    put("chunk_size", m.chunk_size.to_string());
    put("chunk_count", m.chunk_count().to_string());
    put("chunks_verified", m.chunks.len().to_string());
    put("chunk_digest_algorithm", record.chunk_digest_algorithm.name().into());
    put("whole_image_algorithm", m.whole_image_digest.algorithm().name().into());
    put("whole_image_digest", m.whole_image_digest.to_hex());
    put("final_verdict", record.final_verdict.name().into());
    put("image_path", record.image_path.clone());
    put("opened_at", format_timestamp(record.opened_at));
    put("finalized_at", record.finalized_at.map(format_timestamp).unwrap_or_default());
    let attempts: Vec<String> = m.chunks.iter().map(|c| c.attempts.to_string()).collect();
    put(ATTEMPTS_KEY, attempts.join(","));

    let mut out = String::new();
    for (k, v) in &map {
        out.push_str(k);
        out.push_str(": ");
        out.push_str(&escape(v));
        out.push('\n');
    }
    out
}

pub fn parse_metadata(text: &str) -> Result<BTreeMap<String, String>, StoreError> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(": ")
            .or_else(|| line.strip_suffix(':').map(|k| (k, "")))
            .ok_or_else(|| StoreError::Metadata(format!("line {} is not `key: value`", i + 1)))?;
        map.insert(k.to_string(), unescape(v));
    }
    Ok(map)
}

const STANDARD_KEYS: &[&str] = &[
    "case_id",
    "session_id",
    "device_id",
    "device_label",
    "source_kind",
    "total_bytes",
    "partition_count",
    "chunk_size",
    "chunk_count",
    "chunks_verified",
    "chunk_digest_algorithm",
    "whole_image_algorithm",
    "whole_image_digest",
    "final_verdict",
    "image_path",
    "opened_at",
    "finalized_at",
    ATTEMPTS_KEY,
];

/// Keys written by the store itself; extra metadata may not use them.
pub fn is_reserved_key(key: &str) -> bool {
    STANDARD_KEYS.contains(&key) || key.strip_prefix("partition_").is_some_and(|n| n.parse::<u64>().is_ok())
}

/// Rebuilds a record from `metadata.txt` and `manifest.tsv` contents.
pub fn record_from_text(metadata: &str, manifest: &str) -> Result<EvidenceRecord, StoreError> {
    let mut map = parse_metadata(metadata)?;
    let take = |map: &mut BTreeMap<String, String>, k: &str| {
        map.remove(k).ok_or_else(|| StoreError::Metadata(format!("missing key {k}")))
    };
    let num = |s: String, k: &str| s.parse::<u64>().map_err(|_| StoreError::Metadata(format!("{k} is not a number")));
    let alg = |s: String| s.parse::<HashAlgorithm>();

    let case_id = take(&mut map, "case_id")?;
    let session_id = take(&mut map, "session_id")?;
    let total_bytes = num(take(&mut map, "total_bytes")?, "total_bytes")?;
    let partition_count = num(take(&mut map, "partition_count")?, "partition_count")?;
    let mut partitions = Vec::new();
    for i in 0..partition_count {
        let key = format!("partition_{i}");
        let v = take(&mut map, &key)?;
        let mut parts = v.splitn(3, ' ');
        let (Some(o), Some(l)) = (parts.next(), parts.next()) else {
            return Err(StoreError::Metadata(format!("{key} must be `offset length label`")));
        };
        partitions.push(Partition {
            offset: num(o.into(), &key)?,
            length: num(l.into(), &key)?,
            label: parts.next().unwrap_or("").to_string(),
        });
    }
    let source_kind = SourceKind::parse(&take(&mut map, "source_kind")?)
        .ok_or_else(|| StoreError::Metadata("unknown source_kind".into()))?;
    let device = DeviceDescriptor {
        device_id: take(&mut map, "device_id")?,
        label: take(&mut map, "device_label")?,
        total_bytes,
        partitions,
        source_kind,
    };
    let chunk_size = num(take(&mut map, "chunk_size")?, "chunk_size")?;
    let chunk_digest_algorithm = alg(take(&mut map, "chunk_digest_algorithm")?)?;
    let whole_alg = alg(take(&mut map, "whole_image_algorithm")?)?;
    let whole = DigestValue::from_hex(whole_alg, &take(&mut map, "whole_image_digest")?)?;
    let final_verdict = FinalVerdict::parse(&take(&mut map, "final_verdict")?)
        .ok_or_else(|| StoreError::Metadata("unknown final_verdict".into()))?;
    let opened_at = parse_timestamp(&take(&mut map, "opened_at")?)
        .ok_or_else(|| StoreError::Metadata("opened_at is not RFC 3339".into()))?;
    let finalized_at = match take(&mut map, "finalized_at")?.as_str() {
        "" => None,
        s => Some(parse_timestamp(s).ok_or_else(|| StoreError::Metadata("finalized_at is not RFC 3339".into()))?),
    };
    let attempts: Vec<u32> = take(&mut map, ATTEMPTS_KEY)?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| StoreError::Metadata(format!("bad {ATTEMPTS_KEY}"))))
        .collect::<Result<_, _>>()?;
    let image_path = take(&mut map, "image_path")?;
    for k in ["chunk_count", "chunks_verified"] {
        map.remove(k);
    }

    let mut manifest = ChunkManifest::from_rows(&device.device_id, total_bytes, chunk_size, whole, parse_manifest_rows(manifest)?)?;
    if attempts.len() != manifest.chunks.len() {
        return Err(StoreError::Metadata(format!("{ATTEMPTS_KEY} does not match the manifest")));
    }
    for (c, a) in manifest.chunks.iter_mut().zip(attempts) {
        c.attempts = a;
    }
    Ok(EvidenceRecord {
        case_id,
        session_id,
        device,
        manifest,
        chunk_digest_algorithm,
        image_path,
        metadata: map,
        final_verdict,
        opened_at,
        finalized_at,
    })
}

/// Directory layout and session discovery over a store root.
#[derive(Debug, Clone)]
pub struct EvidenceStore {
    root: PathBuf,
}

impl EvidenceStore {
    /// Creates the root if needed and checks that it accepts writes.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let unwritable = |source| StoreError::Unwritable { root: root.clone(), source };
        fs::create_dir_all(&root).map_err(unwritable)?;
        let probe = root.join(format!(".probe-{:08x}", rand::random::<u32>()));
        File::create(&probe).and_then(|_| fs::remove_file(&probe)).map_err(unwritable)?;
        Ok(EvidenceStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn device_dir(&self, case_id: &str, session_id: &str, device_id: &str) -> PathBuf {
        self.root.join(case_id).join(session_id).join(device_id)
    }

    /// Every stored record, ordered by case, session and device.
    pub fn records(&self) -> Result<Vec<(PathBuf, EvidenceRecord)>, StoreError> {
        let mut out = Vec::new();
        for case in sorted_dirs(&self.root)? {
            for session in sorted_dirs(&case)? {
                for device in sorted_dirs(&session)? {
                    if device.join(METADATA_FILE).is_file() {
                        let record = read_record(&device)?;
                        out.push((device, record));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Most recent pending session for this case and device, if any.
    fn pending_session(&self, case_id: &str, device_id: &str) -> Result<Option<(PathBuf, EvidenceRecord)>, StoreError> {
        let case_dir = self.root.join(case_id);
        if !case_dir.is_dir() {
            return Ok(None);
        }
        for session in sorted_dirs(&case_dir)?.into_iter().rev() {
            let dir = session.join(device_id);
            if !dir.join(METADATA_FILE).is_file() {
                continue;
            }
            match read_record(&dir) {
                Ok(r) if r.final_verdict == FinalVerdict::Pending => return Ok(Some((dir, r))),
                Ok(_) => {}
                Err(e) => log::warn!("ignoring unreadable session {}: {e}", dir.display()),
            }
        }
        Ok(None)
    }

    /// Starts a session for `job`, resuming a compatible pending one. A
    /// pending session with a different whole-image digest refuses the job.
    pub fn open_job(&self, job: &JobSpec, extra: BTreeMap<String, String>) -> Result<SessionWriter, StoreError> {
        check_name("case_id", &job.case_id)?;
        check_name("device_id", &job.device.device_id)?;
        chunk_count(job.device.total_bytes, job.chunk_size)?;

        if let Some((dir, prior)) = self.pending_session(&job.case_id, &job.device.device_id)? {
            resume_point(&job.whole_image_digest, Some(&prior.manifest))?;
            let compatible = prior.manifest.chunk_size == job.chunk_size
                && prior.manifest.total_bytes == job.device.total_bytes
                && prior.chunk_digest_algorithm == job.chunk_digest_algorithm;
            if compatible {
                return SessionWriter::resume(dir, prior, job);
            }
            log::info!("pending session {} uses a different chunk plan; starting afresh", prior.session_id);
        }

        let opened_at = now();
        let session_id = new_session_id(opened_at);
        let dir = self.device_dir(&job.case_id, &session_id, &job.device.device_id);
        fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let manifest = ChunkManifest::new(
            job.device.device_id.clone(),
            job.device.total_bytes,
            job.chunk_size,
            job.whole_image_digest.clone(),
        )?;
        let record = EvidenceRecord {
            case_id: job.case_id.clone(),
            image_path: format!("{}/{}/{}/{IMAGE_FILE}", job.case_id, session_id, job.device.device_id),
            session_id,
            device: job.device.clone(),
            manifest,
            chunk_digest_algorithm: job.chunk_digest_algorithm,
            metadata: extra.into_iter().filter(|(k, _)| !is_reserved_key(k)).collect(),
            final_verdict: FinalVerdict::Pending,
            opened_at,
            finalized_at: None,
        };
        let image = OpenOptions::new()
            .create_new(true)
            .read(true)
            .write(true)
            .open(dir.join(IMAGE_FILE))
            .map_err(io_err("creating image"))?;
        fs::write(dir.join(MANIFEST_FILE), format!("{MANIFEST_HEADER}\n")).map_err(io_err("creating manifest"))?;
        let mut w = SessionWriter::assemble(dir, record, image, 0)?;
        w.write_metadata()?;
        w.log(&format!("job opened session={} device={}", w.record.session_id, job.device.device_id));
        Ok(w)
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(io_err(format!("listing {}", dir.display())))? {
        let entry = entry.map_err(io_err(format!("listing {}", dir.display())))?;
        if entry.file_type().map(|t| t.is_dir()).unwrap_or(false) {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_record(device_dir: &Path) -> Result<EvidenceRecord, StoreError> {
    let md = fs::read_to_string(device_dir.join(METADATA_FILE)).map_err(io_err("reading metadata"))?;
    let mf = fs::read_to_string(device_dir.join(MANIFEST_FILE)).map_err(io_err("reading manifest"))?;
    record_from_text(&md, &mf)
}

/// Result of recomputing the stored image's digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinalCheck {
    pub recomputed: DigestValue,
    pub image_len: u64,
    pub length_ok: bool,
}

/// Open session directory: append-only image, manifest rows, transfer log
/// and metadata.
#[derive(Debug)]
pub struct SessionWriter {
    dir: PathBuf,
    record: EvidenceRecord,
    image: File,
    image_len: u64,
    manifest_file: File,
    log_file: File,
    started: Instant,
    resumed_from: u64,
}

impl SessionWriter {
    fn assemble(dir: PathBuf, record: EvidenceRecord, image: File, resumed_from: u64) -> Result<Self, StoreError> {
        let manifest_file = OpenOptions::new().append(true).open(dir.join(MANIFEST_FILE)).map_err(io_err("opening manifest"))?;
        let log_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(TRANSFER_LOG))
            .map_err(io_err("opening transfer log"))?;
        let image_len = image.metadata().map_err(io_err("sizing image"))?.len();
        Ok(SessionWriter { dir, record, image, image_len, manifest_file, log_file, started: Instant::now(), resumed_from })
    }

    /// Re-verifies the prior session's stored chunks against its manifest and
    /// cuts the image and manifest back to the longest verified prefix.
    fn resume(dir: PathBuf, mut prior: EvidenceRecord, job: &JobSpec) -> Result<Self, StoreError> {
        let mut image = OpenOptions::new()
            .read(true)
            .write(true)
            .open(dir.join(IMAGE_FILE))
            .map_err(io_err("opening image for resume"))?;
        let on_disk = image.metadata().map_err(io_err("sizing image"))?.len();
        let mut good = 0usize;
        let mut buf = Vec::new();
        for c in &prior.manifest.chunks {
            if c.offset + c.length > on_disk {
                break;
            }
            buf.resize(c.length as usize, 0);
            image.seek(SeekFrom::Start(c.offset)).map_err(io_err("seeking image"))?;
            image.read_exact(&mut buf).map_err(io_err("reading image"))?;
            if !raft_core::digest::digest_bytes(c.digest.algorithm(), &buf).ct_eq(&c.digest) {
                log::warn!("stored chunk {} no longer matches its manifest row", c.seq);
                break;
            }
            good += 1;
        }
        prior.manifest.chunks.truncate(good);
        let keep = prior.manifest.chunks.last().map_or(0, |c| c.offset + c.length);
        image.set_len(keep).map_err(io_err("truncating image"))?;
        image.seek(SeekFrom::End(0)).map_err(io_err("seeking image"))?;
        let mut tsv = String::from(MANIFEST_HEADER);
        tsv.push('\n');
        for c in &prior.manifest.chunks {
            tsv.push_str(&manifest_line(c.seq, c.offset, c.length, &c.digest));
        }
        fs::write(dir.join(MANIFEST_FILE), tsv).map_err(io_err("rewriting manifest"))?;
        let resume_from = resume_point(&job.whole_image_digest, Some(&prior.manifest))?;
        prior.device = job.device.clone();
        let mut w = SessionWriter::assemble(dir, prior, image, resume_from)?;
        w.write_metadata()?;
        w.log(&format!("job resumed at chunk {resume_from} ({keep} bytes kept)"));
        Ok(w)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn session_id(&self) -> &str {
        &self.record.session_id
    }

    pub fn record(&self) -> &EvidenceRecord {
        &self.record
    }

    pub fn resumed_from(&self) -> u64 {
        self.resumed_from
    }

    pub fn image_len(&self) -> u64 {
        self.image_len
    }

    /// Appends one transfer-log line; logging failures are reported but never
    /// abort the session.
    pub fn log(&mut self, event: &str) {
        let line = format!(
            "{} +{:.3}ms {}\n",
            format_timestamp(now()),
            self.started.elapsed().as_secs_f64() * 1e3,
            event
        );
        if let Err(e) = self.log_file.write_all(line.as_bytes()) {
            log::error!("transfer log write failed in {}: {e}", self.dir.display());
        }
    }

    /// Appends a verified chunk. `seq` must be the next chunk in order.
    pub fn append_chunk(&mut self, seq: u64, payload: &[u8], digest: &DigestValue, attempts: u32) -> Result<u64, StoreError> {
        let expected = self.record.manifest.chunks.len() as u64;
        if seq != expected {
            return Err(StoreError::OutOfOrderAppend { seq, expected });
        }
        let m = &self.record.manifest;
        let span = chunk_span(m.total_bytes, m.chunk_size, seq).ok_or(StoreError::OutOfOrderAppend { seq, expected })?;
        if span.length != payload.len() as u64 {
            return Err(StoreError::ChunkLength { seq, expected: span.length, actual: payload.len() as u64 });
        }
        self.image.write_all(payload).map_err(io_err(format!("appending chunk {seq}")))?;
        self.image_len += payload.len() as u64;
        self.manifest_file
            .write_all(manifest_line(seq, span.offset, span.length, digest).as_bytes())
            .map_err(io_err("appending manifest row"))?;
        self.record.manifest.push(ChunkRecord {
            seq,
            offset: span.offset,
            length: span.length,
            digest: digest.clone(),
            state: ChunkState::Verified,
            attempts: attempts.max(1),
        })?;
        self.log(&format!("chunk {seq} verified attempts={attempts} appended image_len={}", self.image_len));
        Ok(self.image_len)
    }

    /// Recomputes the whole-image digest of `image.raw`.
    pub fn final_check(&mut self) -> Result<FinalCheck, StoreError> {
        self.image.sync_all().map_err(io_err("syncing image"))?;
        let expected = self.record.device.total_bytes;
        let algorithm = self.record.manifest.whole_image_digest.algorithm();
        let file = File::open(self.dir.join(IMAGE_FILE)).map_err(io_err("reopening image"))?;
        let image_len = file.metadata().map_err(io_err("sizing image"))?.len();
        let recomputed = digest_stream(file, algorithm).map_err(|e| StoreError::Io {
            context: "hashing image".into(),
            source: e.source,
        })?;
        if image_len != expected {
            self.log(&format!("{}", StoreError::ImageLengthMismatch { expected, actual: image_len }));
        }
        Ok(FinalCheck { recomputed, image_len, length_ok: image_len == expected })
    }

    /// Records the verdict and writes final metadata and manifest.
    pub fn record_verdict(&mut self, verdict: FinalVerdict, recomputed: Option<&DigestValue>) -> Result<(), StoreError> {
        self.record.final_verdict = verdict;
        self.record.finalized_at = Some(now());
        if let Some(r) = recomputed {
            self.record.metadata.insert("recomputed_digest".into(), r.to_hex());
        }
        self.manifest_file.sync_all().map_err(io_err("syncing manifest"))?;
        self.write_metadata()?;
        self.log(&format!("finalized verdict={verdict}"));
        let _ = self.log_file.sync_all();
        Ok(())
    }

    /// Adds an extra metadata key. Reserved keys are refused.
    pub fn set_metadata(&mut self, key: &str, value: &str) -> bool {
        if is_reserved_key(key) {
            return false;
        }
        self.record.metadata.insert(key.into(), value.into());
        true
    }

    pub fn write_metadata(&mut self) -> Result<(), StoreError> {
        let path = self.dir.join(METADATA_FILE);
        let tmp = self.dir.join(".metadata.tmp");
        fs::write(&tmp, render_metadata(&self.record)).map_err(io_err("writing metadata"))?;
        fs::rename(&tmp, &path).map_err(io_err("replacing metadata"))
    }

    /// Leaves the session resumable after an interrupted transfer.
    pub fn suspend(&mut self, reason: &str) {
        self.log(&format!("session interrupted: {reason}; resumable from chunk {}", self.record.manifest.chunks.len()));
        if let Err(e) = self.write_metadata() {
            log::error!("could not persist interrupted session {}: {e}", self.dir.display());
        }
        let _ = self.image.sync_all();
    }

    /// Test hook: flips one stored image byte so final verification fails.
    #[doc(hidden)]
    pub fn tamper_image_byte(&mut self, offset: u64) -> io::Result<()> {
        let mut f = OpenOptions::new().read(true).write(true).open(self.dir.join(IMAGE_FILE))?;
        let mut b = [0u8; 1];
        f.seek(SeekFrom::Start(offset))?;
        f.read_exact(&mut b)?;
        f.seek(SeekFrom::Start(offset))?;
        f.write_all(&[b[0] ^ 0x01])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use raft_core::digest::digest_bytes;

    fn job(data: &[u8], chunk: u64) -> JobSpec {
        let mut device = DeviceDescriptor::new("sda", "Disk\nwith newline", data.len() as u64);
        device.partitions.push(Partition { offset: 0, length: 4, label: "boot part".into() });
        JobSpec {
            case_id: "case-1".into(),
            device,
            chunk_size: chunk,
            chunk_digest_algorithm: HashAlgorithm::Sha256,
            whole_image_digest: digest_bytes(HashAlgorithm::Sha512, data),
        }
    }

    fn append_all(w: &mut SessionWriter, data: &[u8], chunk: u64, from: u64) {
        let n = chunk_count(data.len() as u64, chunk).unwrap();
        for seq in from..n {
            let s = chunk_span(data.len() as u64, chunk, seq).unwrap();
            let p = &data[s.offset as usize..(s.offset + s.length) as usize];
            w.append_chunk(seq, p, &digest_bytes(HashAlgorithm::Sha256, p), 1).unwrap();
        }
    }

    #[test]
    fn metadata_round_trip_is_sorted_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let store = EvidenceStore::open(dir.path()).unwrap();
        let data: Vec<u8> = (0..10).collect();
        let mut w = store.open_job(&job(&data, 4), BTreeMap::from([("operator".into(), "j. doe".into())])).unwrap();
        append_all(&mut w, &data, 4, 0);
        let check = w.final_check().unwrap();
        assert!(check.length_ok);
        w.record_verdict(FinalVerdict::Verified, Some(&check.recomputed)).unwrap();
        let text = fs::read_to_string(w.dir().join(METADATA_FILE)).unwrap();
        let keys: Vec<&str> = text.lines().map(|l| l.split(':').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(text.contains("device_label: Disk\\nwith newline\n"));
        assert!(text.contains("partition_0: 0 4 boot part\n"));
        assert_eq!(render_metadata(&read_record(w.dir()).unwrap()), text);
        assert_eq!(&read_record(w.dir()).unwrap(), w.record());
        let opened = text.lines().find_map(|l| l.strip_prefix("opened_at: ")).unwrap();
        assert!(opened.ends_with('Z') && parse_timestamp(opened).is_some());
    }

    #[test]
    fn appends_are_strictly_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let store = EvidenceStore::open(dir.path()).unwrap();
        let data = [7u8; 8];
        let mut w = store.open_job(&job(&data, 4), BTreeMap::new()).unwrap();
        let d = digest_bytes(HashAlgorithm::Sha256, &data[..4]);
        assert!(matches!(w.append_chunk(1, &data[..4], &d, 1), Err(StoreError::OutOfOrderAppend { seq: 1, expected: 0 })));
        assert_eq!(w.append_chunk(0, &data[..4], &d, 1).unwrap(), 4);
        assert_eq!(w.append_chunk(1, &data[4..], &d, 1).unwrap(), 8);
        assert_eq!(fs::read(w.dir().join(IMAGE_FILE)).unwrap(), data);
    }

    #[test]
    fn tampered_image_fails_final_check() {
        let dir = tempfile::tempdir().unwrap();
        let store = EvidenceStore::open(dir.path()).unwrap();
        let data: Vec<u8> = (0..40).collect();
        let j = job(&data, 10);
        let mut w = store.open_job(&j, BTreeMap::new()).unwrap();
        append_all(&mut w, &data, 10, 0);
        w.tamper_image_byte(17).unwrap();
        let check = w.final_check().unwrap();
        assert!(check.length_ok);
        assert_ne!(check.recomputed, j.whole_image_digest);
    }

    #[test]
    fn pending_session_resumes_with_truncated_tail() {
        let dir = tempfile::tempdir().unwrap();
        let store = EvidenceStore::open(dir.path()).unwrap();
        let data: Vec<u8> = (0..100).collect();
        let j = job(&data, 10);
        let first_id;
        {
            let mut w = store.open_job(&j, BTreeMap::new()).unwrap();
            first_id = w.session_id().to_string();
            let n = 4;
            for seq in 0..n {
                let p = &data[seq * 10..seq * 10 + 10];
                w.append_chunk(seq as u64, p, &digest_bytes(HashAlgorithm::Sha256, p), 1).unwrap();
            }
            // a torn write past the last manifest row
            w.image.write_all(&[0xee; 3]).unwrap();
            w.suspend("test");
        }
        let mut w = store.open_job(&j, BTreeMap::new()).unwrap();
        assert_eq!(w.session_id(), first_id);
        assert_eq!(w.resumed_from(), 4);
        assert_eq!(w.image_len(), 40);
        append_all(&mut w, &data, 10, 4);
        assert!(w.final_check().unwrap().recomputed.ct_eq(&j.whole_image_digest));
        assert_eq!(fs::read(w.dir().join(IMAGE_FILE)).unwrap(), data);
    }

    #[test]
    fn digest_change_refuses_resume() {
        let dir = tempfile::tempdir().unwrap();
        let store = EvidenceStore::open(dir.path()).unwrap();
        let data: Vec<u8> = (0..100).collect();
        drop(store.open_job(&job(&data, 10), BTreeMap::new()).unwrap());
        let mut other = job(&data, 10);
        other.whole_image_digest = digest_bytes(HashAlgorithm::Sha512, b"different");
        assert!(matches!(store.open_job(&other, BTreeMap::new()), Err(StoreError::Resume(_))));
    }

    #[test]
    fn finished_sessions_are_not_resumed() {
        let dir = tempfile::tempdir().unwrap();
        let store = EvidenceStore::open(dir.path()).unwrap();
        let data: Vec<u8> = (0..20).collect();
        let j = job(&data, 10);
        let mut w = store.open_job(&j, BTreeMap::new()).unwrap();
        append_all(&mut w, &data, 10, 0);
        w.record_verdict(FinalVerdict::Verified, None).unwrap();
        let first = w.session_id().to_string();
        std::thread::sleep(std::time::Duration::from_millis(2));
        let w2 = store.open_job(&j, BTreeMap::new()).unwrap();
        assert_ne!(w2.session_id(), first);
        assert_eq!(w2.resumed_from(), 0);
        assert_eq!(store.records().unwrap().len(), 2);
    }

    #[test]
    fn names_that_escape_the_store_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let store = EvidenceStore::open(dir.path()).unwrap();
        let mut j = job(&[1; 4], 4);
        j.case_id = "../evil".into();
        assert!(matches!(store.open_job(&j, BTreeMap::new()), Err(StoreError::InvalidName { .. })));
    }

    #[test]
    fn session_ids_are_distinct() {
        let t = now();
        let ids: std::collections::BTreeSet<String> = (0..200).map(|_| new_session_id(t)).collect();
        assert_eq!(ids.len(), 200);
        assert!(ids.iter().next().unwrap().contains('Z'));
    }
}
