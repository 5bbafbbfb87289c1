//! Client and server session state machines.
//!
//! Both machines are pure: they own no I/O, and feeding the same event to two
//! equal sessions produces equal outputs and equal successor states. The host
//! runtime performs the side effects they request (sending frames, reading and
//! verifying chunks, appending to the image) and feeds completions back in as
//! events.

mod client;
mod server;

pub use client::{ClientEvent, ClientFailure, ClientOutput, ClientSession, ClientState};
pub use server::{Receiving, ServerCommand, ServerEvent, ServerFailure, ServerSession, ServerState};

use alloc::string::String;

use crate::digest::{digest_bytes, DigestValue, HashAlgorithm};
use crate::model::{ChunkManifest, ChunkState, DeviceDescriptor};
use crate::wire::NONCE_LEN;

/// Per-chunk transmission limit. A chunk NAKed this many times fails the job.
pub const DEFAULT_RETRY_LIMIT: u32 = 5;

/// Unacknowledged chunks allowed at once: one under verification on the
/// server plus one on the wire.
pub const WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("protocol violation in state {state}: {detail}")]
    ProtocolViolation { state: &'static str, detail: String },
    #[error("chunk {seq} is out of order (expected {expected} or a NAKed retransmission)")]
    OutOfOrderChunk { seq: u64, expected: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResumeError {
    #[error("prior session for this device recorded digest {prior}, job offers {offered}")]
    DigestMismatchOnResume {
        prior: DigestValue,
        offered: DigestValue,
    },
}

/// What the client offers when opening a job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSpec {
    pub case_id: String,
    pub device: DeviceDescriptor,
    pub chunk_size: u64,
    pub chunk_digest_algorithm: HashAlgorithm,
    pub whole_image_digest: DigestValue,
}

/// Proof sent in `AUTH`: SHA-512 over the passphrase followed by the server nonce.
pub fn passphrase_proof(passphrase: &[u8], server_nonce: &[u8; NONCE_LEN]) -> DigestValue {
    let mut input = alloc::vec::Vec::with_capacity(passphrase.len() + NONCE_LEN);
    input.extend_from_slice(passphrase);
    input.extend_from_slice(server_nonce);
    digest_bytes(HashAlgorithm::Sha512, &input)
}

/// Lowest chunk not yet verified by a prior partial session, or 0 if there
/// is none. A prior session whose whole-image digest differs is refused.
pub fn resume_point(
    offered_digest: &DigestValue,
    prior: Option<&ChunkManifest>,
) -> Result<u64, ResumeError> {
    let Some(prior) = prior else { return Ok(0) };
    if prior.whole_image_digest != *offered_digest {
        return Err(ResumeError::DigestMismatchOnResume {
            prior: prior.whole_image_digest.clone(),
            offered: offered_digest.clone(),
        });
    }
    Ok((0..prior.chunk_count())
        .find(|&seq| {
            prior
                .chunks
                .get(seq as usize)
                .is_none_or(|c| c.state != ChunkState::Verified)
        })
        .unwrap_or(prior.chunk_count()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ChunkRecord;

    fn manifest(verified: u64) -> ChunkManifest {
        let whole = digest_bytes(HashAlgorithm::Sha512, b"image");
        let mut m = ChunkManifest::new("d", 100, 10, whole).unwrap();
        for seq in 0..verified {
            m.push(ChunkRecord {
                seq,
                offset: seq * 10,
                length: 10,
                digest: digest_bytes(HashAlgorithm::Sha512, &[seq as u8]),
                state: ChunkState::Verified,
                attempts: 1,
            })
            .unwrap();
        }
        m
    }

    #[test]
    fn fresh_job_resumes_at_zero() {
        let d = digest_bytes(HashAlgorithm::Sha512, b"image");
        assert_eq!(resume_point(&d, None), Ok(0));
    }

    #[test]
    fn resumes_after_verified_prefix() {
        let m = manifest(5);
        assert_eq!(resume_point(&m.whole_image_digest.clone(), Some(&m)), Ok(5));
        let full = manifest(10);
        assert_eq!(resume_point(&full.whole_image_digest.clone(), Some(&full)), Ok(10));
    }

    #[test]
    fn digest_change_refuses_resume() {
        let m = manifest(5);
        let other = digest_bytes(HashAlgorithm::Sha512, b"other image");
        assert!(matches!(
            resume_point(&other, Some(&m)),
            Err(ResumeError::DigestMismatchOnResume { .. })
        ));
    }

    #[test]
    fn proof_depends_on_nonce() {
        assert_ne!(passphrase_proof(b"pw", &[0; 16]), passphrase_proof(b"pw", &[1; 16]));
        assert_eq!(passphrase_proof(b"pw", &[0; 16]), passphrase_proof(b"pw", &[0; 16]));
    }
}
