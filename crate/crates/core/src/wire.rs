//! Frame format and message codec.
//!
//! ```text
//! +------+---------+------+----------------+---------+
//! | RAFT | version | type | length (u64 BE) | payload |
//! +------+---------+------+----------------+---------+
//!   4B      1B       1B         8B
//! ```
//!
//! Payload fields are in fixed order; integers are big-endian; strings and
//! byte strings carry a 4-byte big-endian length prefix. `CHUNK_DATA` is the
//! exception: its chunk bytes run to the end of the payload.

use alloc::string::String;
use alloc::vec::Vec;

use crate::digest::{DigestError, DigestValue, HashAlgorithm};
use crate::model::{DeviceDescriptor, Partition, SourceKind};

pub const MAGIC: [u8; 4] = *b"RAFT";
pub const FRAME_VERSION: u8 = 0x01;
pub const PROTOCOL_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 14;
/// Largest payload a frame may carry.
pub const MAX_PAYLOAD: u64 = 1 << 32;
pub const NONCE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("payload of {0} bytes exceeds the 2^32 byte frame limit")]
    PayloadTooLarge(u64),
    #[error("need {0} more bytes")]
    NeedMoreBytes(usize),
    #[error("bad frame magic")]
    BadMagic,
    #[error("unsupported frame version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("malformed {message} payload: {reason}")]
    Malformed {
        message: &'static str,
        reason: &'static str,
    },
    #[error(transparent)]
    Digest(#[from] DigestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalStatus {
    Verified,
    Failed,
}

#[derive(Clone, PartialEq, Eq)]
pub enum WireMessage {
    Hello {
        protocol_version: u16,
        nonce: [u8; NONCE_LEN],
    },
    Auth {
        passphrase_proof: Vec<u8>,
    },
    AuthResult {
        ok: bool,
    },
    JobOpen {
        case_id: String,
        device: DeviceDescriptor,
        chunk_size: u64,
        chunk_digest_algorithm: HashAlgorithm,
        whole_image_digest: DigestValue,
    },
    JobAccept {
        session_id: String,
        resume_from_seq: u64,
    },
    ChunkData {
        seq: u64,
        payload: Vec<u8>,
    },
    ChunkDigest {
        seq: u64,
        digest: DigestValue,
    },
    Ack {
        seq: u64,
    },
    Nak {
        seq: u64,
        reason: String,
    },
    JobFinalize,
    FinalResult {
        status: FinalStatus,
        recomputed_digest: DigestValue,
    },
    Abort {
        reason: String,
    },
}

impl core::fmt::Debug for WireMessage {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            WireMessage::ChunkData { seq, payload } => f
                .debug_struct("ChunkData")
                .field("seq", seq)
                .field("len", &payload.len())
                .finish(),
            WireMessage::Auth { .. } => f.write_str("Auth { .. }"),
            WireMessage::Hello { protocol_version, .. } => f
                .debug_struct("Hello")
                .field("protocol_version", protocol_version)
                .finish_non_exhaustive(),
            WireMessage::AuthResult { ok } => f.debug_struct("AuthResult").field("ok", ok).finish(),
            WireMessage::JobOpen { case_id, device, chunk_size, chunk_digest_algorithm, whole_image_digest } => f
                .debug_struct("JobOpen")
                .field("case_id", case_id)
                .field("device", &device.device_id)
                .field("chunk_size", chunk_size)
                .field("chunk_digest_algorithm", chunk_digest_algorithm)
                .field("whole_image_digest", whole_image_digest)
                .finish(),
            WireMessage::JobAccept { session_id, resume_from_seq } => f
                .debug_struct("JobAccept")
                .field("session_id", session_id)
                .field("resume_from_seq", resume_from_seq)
                .finish(),
            WireMessage::ChunkDigest { seq, digest } => f
                .debug_struct("ChunkDigest")
                .field("seq", seq)
                .field("digest", digest)
                .finish(),
            WireMessage::Ack { seq } => f.debug_struct("Ack").field("seq", seq).finish(),
            WireMessage::Nak { seq, reason } => f
                .debug_struct("Nak")
                .field("seq", seq)
                .field("reason", reason)
                .finish(),
            WireMessage::JobFinalize => f.write_str("JobFinalize"),
            WireMessage::FinalResult { status, recomputed_digest } => f
                .debug_struct("FinalResult")
                .field("status", status)
                .field("recomputed_digest", recomputed_digest)
                .finish(),
            WireMessage::Abort { reason } => f.debug_struct("Abort").field("reason", reason).finish(),
        }
    }
}

/// Message type bytes.
pub mod msg_type {
    pub const HELLO: u8 = 0x01;
    pub const AUTH: u8 = 0x02;
    pub const AUTH_RESULT: u8 = 0x03;
    pub const JOB_OPEN: u8 = 0x10;
    pub const JOB_ACCEPT: u8 = 0x11;
    pub const CHUNK_DATA: u8 = 0x20;
    pub const CHUNK_DIGEST: u8 = 0x21;
    pub const ACK: u8 = 0x22;
    pub const NAK: u8 = 0x23;
    pub const JOB_FINALIZE: u8 = 0x30;
    pub const FINAL_RESULT: u8 = 0x31;
    pub const ABORT: u8 = 0x3f;
}

impl WireMessage {
    pub fn type_byte(&self) -> u8 {
        use msg_type::*;
        match self {
            WireMessage::Hello { .. } => HELLO,
            WireMessage::Auth { .. } => AUTH,
            WireMessage::AuthResult { .. } => AUTH_RESULT,
            WireMessage::JobOpen { .. } => JOB_OPEN,
            WireMessage::JobAccept { .. } => JOB_ACCEPT,
            WireMessage::ChunkData { .. } => CHUNK_DATA,
            WireMessage::ChunkDigest { .. } => CHUNK_DIGEST,
            WireMessage::Ack { .. } => ACK,
            WireMessage::Nak { .. } => NAK,
            WireMessage::JobFinalize => JOB_FINALIZE,
            WireMessage::FinalResult { .. } => FINAL_RESULT,
            WireMessage::Abort { .. } => ABORT,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "HELLO",
            WireMessage::Auth { .. } => "AUTH",
            WireMessage::AuthResult { .. } => "AUTH_RESULT",
            WireMessage::JobOpen { .. } => "JOB_OPEN",
            WireMessage::JobAccept { .. } => "JOB_ACCEPT",
            WireMessage::ChunkData { .. } => "CHUNK_DATA",
            WireMessage::ChunkDigest { .. } => "CHUNK_DIGEST",
            WireMessage::Ack { .. } => "ACK",
            WireMessage::Nak { .. } => "NAK",
            WireMessage::JobFinalize => "JOB_FINALIZE",
            WireMessage::FinalResult { .. } => "FINAL_RESULT",
            WireMessage::Abort { .. } => "ABORT",
        }
    }

    /// Encodes the payload (everything after the 14-byte header).
    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            WireMessage::Hello { protocol_version, nonce } => {
                out.extend_from_slice(&protocol_version.to_be_bytes());
                put_bytes(&mut out, nonce);
            }
            WireMessage::Auth { passphrase_proof } => put_bytes(&mut out, passphrase_proof),
            WireMessage::AuthResult { ok } => out.push(*ok as u8),
            WireMessage::JobOpen {
                case_id,
                device,
                chunk_size,
                chunk_digest_algorithm,
                whole_image_digest,
            } => {
                put_bytes(&mut out, case_id.as_bytes());
                put_device(&mut out, device);
                out.extend_from_slice(&chunk_size.to_be_bytes());
                out.push(chunk_digest_algorithm.wire_id());
                put_digest(&mut out, whole_image_digest);
            }
            WireMessage::JobAccept {
                session_id,
                resume_from_seq,
            } => {
                put_bytes(&mut out, session_id.as_bytes());
                out.extend_from_slice(&resume_from_seq.to_be_bytes());
            }
            WireMessage::ChunkData { seq, payload } => {
                out.reserve(8 + payload.len());
                out.extend_from_slice(&seq.to_be_bytes());
                out.extend_from_slice(payload);
            }
            WireMessage::ChunkDigest { seq, digest } => {
                out.extend_from_slice(&seq.to_be_bytes());
                put_digest(&mut out, digest);
            }
            WireMessage::Ack { seq } => out.extend_from_slice(&seq.to_be_bytes()),
            WireMessage::Nak { seq, reason } => {
                out.extend_from_slice(&seq.to_be_bytes());
                put_bytes(&mut out, reason.as_bytes());
            }
            WireMessage::JobFinalize => {}
            WireMessage::FinalResult {
                status,
                recomputed_digest,
            } => {
                out.push(match status {
                    FinalStatus::Verified => 1,
                    FinalStatus::Failed => 0,
                });
                put_digest(&mut out, recomputed_digest);
            }
            WireMessage::Abort { reason } => put_bytes(&mut out, reason.as_bytes()),
        }
        out
    }

    pub fn decode_payload(type_byte: u8, payload: &[u8]) -> Result<WireMessage, WireError> {
        use msg_type::*;
        let mut r = Reader { buf: payload, name: "frame" };
        let msg = match type_byte {
            HELLO => {
                r.name = "HELLO";
                let protocol_version = r.u16()?;
                let nonce: [u8; NONCE_LEN] = r
                    .bytes()?
                    .try_into()
                    .map_err(|_| r.malformed("nonce must be 16 bytes"))?;
                WireMessage::Hello { protocol_version, nonce }
            }
            AUTH => {
                r.name = "AUTH";
                WireMessage::Auth { passphrase_proof: r.bytes()?.to_vec() }
            }
            AUTH_RESULT => {
                r.name = "AUTH_RESULT";
                WireMessage::AuthResult { ok: r.flag()? }
            }
            JOB_OPEN => {
                r.name = "JOB_OPEN";
                WireMessage::JobOpen {
                    case_id: r.string()?,
                    device: r.device()?,
                    chunk_size: r.u64()?,
                    chunk_digest_algorithm: HashAlgorithm::from_wire_id(r.u8()?)?,
                    whole_image_digest: r.digest()?,
                }
            }
            JOB_ACCEPT => {
                r.name = "JOB_ACCEPT";
                WireMessage::JobAccept { session_id: r.string()?, resume_from_seq: r.u64()? }
            }
            CHUNK_DATA => {
                r.name = "CHUNK_DATA";
                let seq = r.u64()?;
                let payload = r.rest().to_vec();
                WireMessage::ChunkData { seq, payload }
            }
            CHUNK_DIGEST => {
                r.name = "CHUNK_DIGEST";
                WireMessage::ChunkDigest { seq: r.u64()?, digest: r.digest()? }
            }
            ACK => {
                r.name = "ACK";
                WireMessage::Ack { seq: r.u64()? }
            }
            NAK => {
                r.name = "NAK";
                WireMessage::Nak { seq: r.u64()?, reason: r.string()? }
            }
            JOB_FINALIZE => WireMessage::JobFinalize,
            FINAL_RESULT => {
                r.name = "FINAL_RESULT";
                let status = if r.flag()? { FinalStatus::Verified } else { FinalStatus::Failed };
                WireMessage::FinalResult { status, recomputed_digest: r.digest()? }
            }
            ABORT => {
                r.name = "ABORT";
                WireMessage::Abort { reason: r.string()? }
            }
            other => return Err(WireError::UnknownType(other)),
        };
        if !r.buf.is_empty() {
            return Err(r.malformed("trailing bytes"));
        }
        Ok(msg)
    }
}

/// Frame header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub type_byte: u8,
    pub payload_len: u64,
}

impl FrameHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..4].copy_from_slice(&MAGIC);
        h[4] = FRAME_VERSION;
        h[5] = self.type_byte;
        h[6..].copy_from_slice(&self.payload_len.to_be_bytes());
        h
    }

    pub fn parse(bytes: &[u8]) -> Result<FrameHeader, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::NeedMoreBytes(HEADER_LEN - bytes.len()));
        }
        if bytes[..4] != MAGIC {
            return Err(WireError::BadMagic);
        }
        if bytes[4] != FRAME_VERSION {
            return Err(WireError::UnsupportedVersion(bytes[4]));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[6..HEADER_LEN]);
        let payload_len = u64::from_be_bytes(len);
        if payload_len > MAX_PAYLOAD {
            return Err(WireError::PayloadTooLarge(payload_len));
        }
        Ok(FrameHeader { type_byte: bytes[5], payload_len })
    }
}

pub fn encode_frame(message: &WireMessage) -> Result<Vec<u8>, WireError> {
    let payload = message.encode_payload();
    if payload.len() as u64 > MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge(payload.len() as u64));
    }
    let header = FrameHeader {
        type_byte: message.type_byte(),
        payload_len: payload.len() as u64,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes one frame from the front of `buf`, returning the message and the
/// number of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(WireMessage, usize), WireError> {
    let header = FrameHeader::parse(buf)?;
    let total = HEADER_LEN as u64 + header.payload_len;
    if (buf.len() as u64) < total {
        return Err(WireError::NeedMoreBytes((total - buf.len() as u64) as usize));
    }
    let msg = WireMessage::decode_payload(header.type_byte, &buf[HEADER_LEN..total as usize])?;
    Ok((msg, total as usize))
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

fn put_digest(out: &mut Vec<u8>, d: &DigestValue) {
    out.push(d.algorithm().wire_id());
    out.extend_from_slice(d.as_bytes());
}

fn put_device(out: &mut Vec<u8>, d: &DeviceDescriptor) {
    put_bytes(out, d.device_id.as_bytes());
    put_bytes(out, d.label.as_bytes());
    out.extend_from_slice(&d.total_bytes.to_be_bytes());
    out.push(match d.source_kind {
        SourceKind::FileBacked => 0,
        SourceKind::BlockDevice => 1,
    });
    out.extend_from_slice(&(d.partitions.len() as u32).to_be_bytes());
    for p in &d.partitions {
        out.extend_from_slice(&p.offset.to_be_bytes());
        out.extend_from_slice(&p.length.to_be_bytes());
        put_bytes(out, p.label.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    name: &'static str,
}

impl<'a> Reader<'a> {
    fn malformed(&self, reason: &'static str) -> WireError {
        WireError::Malformed { message: self.name, reason }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(self.malformed("truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(self.malformed("boolean must be 0 or 1")),
        }
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        let mut a = [0u8; 4];
        a.copy_from_slice(self.take(4)?);
        Ok(u32::from_be_bytes(a))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_be_bytes(a))
    }

    fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, WireError> {
        let b = self.bytes()?;
        core::str::from_utf8(b)
            .map(String::from)
            .map_err(|_| self.malformed("string is not UTF-8"))
    }

    fn digest(&mut self) -> Result<DigestValue, WireError> {
        let alg = HashAlgorithm::from_wire_id(self.u8()?)?;
        let bytes = self.take(alg.digest_len())?;
        Ok(DigestValue::new(alg, bytes.to_vec())?)
    }

    fn device(&mut self) -> Result<DeviceDescriptor, WireError> {
        let device_id = self.string()?;
        let label = self.string()?;
        let total_bytes = self.u64()?;
        let source_kind = match self.u8()? {
            0 => SourceKind::FileBacked,
            1 => SourceKind::BlockDevice,
            _ => return Err(self.malformed("unknown source kind")),
        };
        let count = self.u32()? as usize;
        // each partition needs at least 20 bytes
        if count > self.buf.len() / 20 {
            return Err(self.malformed("partition count exceeds payload"));
        }
        let mut partitions = Vec::with_capacity(count);
        for _ in 0..count {
            partitions.push(Partition {
                offset: self.u64()?,
                length: self.u64()?,
                label: self.string()?,
            });
        }
        Ok(DeviceDescriptor { device_id, label, total_bytes, partitions, source_kind })
    }

    fn rest(&mut self) -> &'a [u8] {
        core::mem::take(&mut self.buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::digest_bytes;
    use alloc::vec;
    use proptest::prelude::*;

    fn sample_device() -> DeviceDescriptor {
        DeviceDescriptor {
            device_id: "sda".into(),
            label: "Evidence disk".into(),
            total_bytes: 1 << 30,
            partitions: vec![Partition { offset: 512, length: 4096, label: "EFI".into() }],
            source_kind: SourceKind::BlockDevice,
        }
    }

    fn all_variants() -> Vec<WireMessage> {
        let d = digest_bytes(HashAlgorithm::Sha512, b"abc");
        vec![
            WireMessage::Hello { protocol_version: 1, nonce: [7; 16] },
            WireMessage::Auth { passphrase_proof: vec![1, 2, 3] },
            WireMessage::AuthResult { ok: true },
            WireMessage::AuthResult { ok: false },
            WireMessage::JobOpen {
                case_id: "case-1".into(),
                device: sample_device(),
                chunk_size: 4 << 20,
                chunk_digest_algorithm: HashAlgorithm::Sha256,
                whole_image_digest: d.clone(),
            },
            WireMessage::JobAccept { session_id: "s".into(), resume_from_seq: 5 },
            WireMessage::ChunkData { seq: 3, payload: vec![0, 1, 2, 3] },
            WireMessage::ChunkDigest { seq: 3, digest: d.clone() },
            WireMessage::Ack { seq: 0 },
            WireMessage::Nak { seq: 9, reason: "digest mismatch".into() },
            WireMessage::JobFinalize,
            WireMessage::FinalResult { status: FinalStatus::Verified, recomputed_digest: d.clone() },
            WireMessage::FinalResult { status: FinalStatus::Failed, recomputed_digest: d },
            WireMessage::Abort { reason: "bye".into() },
        ]
    }

    #[test]
    fn ack_frame_layout() {
        let frame = encode_frame(&WireMessage::Ack { seq: 0 }).unwrap();
        assert_eq!(&frame[..4], &[0x52, 0x41, 0x46, 0x54]);
        assert_eq!(frame[4], 0x01);
        assert_eq!(frame[5], msg_type::ACK);
        assert_eq!(&frame[6..14], &8u64.to_be_bytes());
        assert_eq!(&frame[14..], &[0u8; 8]);
    }

    #[test]
    fn every_variant_round_trips() {
        for m in all_variants() {
            let frame = encode_frame(&m).unwrap();
            let (back, used) = decode_frame(&frame).unwrap();
            assert_eq!(back, m);
            assert_eq!(used, frame.len());
        }
    }

    #[test]
    fn truncated_frames_need_more_bytes() {
        let frame = encode_frame(&WireMessage::Nak { seq: 1, reason: "x".into() }).unwrap();
        for cut in 0..frame.len() {
            assert!(matches!(decode_frame(&frame[..cut]), Err(WireError::NeedMoreBytes(_))), "cut {cut}");
        }
    }

    #[test]
    fn header_rejections() {
        let mut frame = encode_frame(&WireMessage::JobFinalize).unwrap();
        frame[0] = b'X';
        assert_eq!(decode_frame(&frame).unwrap_err(), WireError::BadMagic);
        let mut frame = encode_frame(&WireMessage::JobFinalize).unwrap();
        frame[4] = 2;
        assert_eq!(decode_frame(&frame).unwrap_err(), WireError::UnsupportedVersion(2));
        let mut frame = encode_frame(&WireMessage::JobFinalize).unwrap();
        frame[5] = 0x77;
        assert_eq!(decode_frame(&frame).unwrap_err(), WireError::UnknownType(0x77));
        let mut header = FrameHeader { type_byte: msg_type::CHUNK_DATA, payload_len: MAX_PAYLOAD + 1 }.encode();
        assert_eq!(FrameHeader::parse(&header).unwrap_err(), WireError::PayloadTooLarge(MAX_PAYLOAD + 1));
        header[6..].copy_from_slice(&MAX_PAYLOAD.to_be_bytes());
        assert!(FrameHeader::parse(&header).is_ok());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut frame = encode_frame(&WireMessage::Ack { seq: 1 }).unwrap();
        frame.push(0);
        frame[6..14].copy_from_slice(&9u64.to_be_bytes());
        assert!(matches!(decode_frame(&frame), Err(WireError::Malformed { .. })));
    }

    proptest! {
        #[test]
        fn chunk_frames_round_trip(seq in any::<u64>(), payload in proptest::collection::vec(any::<u8>(), 0..512)) {
            let m = WireMessage::ChunkData { seq, payload };
            let frame = encode_frame(&m).unwrap();
            prop_assert_eq!(decode_frame(&frame).unwrap().0, m);
        }

        #[test]
        fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64), t in any::<u8>()) {
            let _ = WireMessage::decode_payload(t, &bytes);
        }
    }
}
