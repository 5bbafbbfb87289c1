//! Acquisition time model, benchmark normalization and overhead attribution.

use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TimingError {
    #[error("{0} must be a positive, finite number")]
    NonPositiveInput(&'static str),
    #[error("trace is incomplete: {0}")]
    IncompleteTrace(&'static str),
}

/// Inputs to the acquisition time estimate. Sizes in bits, rates in bits/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingInputs {
    pub image_bits: f64,
    pub upload_bps: f64,
    pub chunk_bits: f64,
    pub verify_bps: f64,
}

impl TimingInputs {
    pub fn new(image_bits: f64, upload_bps: f64, chunk_bits: f64, verify_bps: f64) -> Result<Self, TimingError> {
        let check = |v: f64, name| {
            if v.is_finite() && v > 0.0 {
                Ok(v)
            } else {
                Err(TimingError::NonPositiveInput(name))
            }
        };
        Ok(TimingInputs {
            image_bits: check(image_bits, "image size")?,
            upload_bps: check(upload_bps, "upload bandwidth")?,
            chunk_bits: check(chunk_bits, "chunk size")?,
            verify_bps: check(verify_bps, "verify speed")?,
        })
    }
}

/// Seconds to acquire the image: the whole image crosses the uplink, and only
/// the last chunk's verification is not hidden behind transfer.
pub fn estimate_total_time(inputs: &TimingInputs) -> f64 {
    inputs.image_bits / inputs.upload_bps + inputs.chunk_bits / inputs.verify_bps
}

/// Extension with expected retransmissions: the transfer term is scaled by
/// `1 + p * retries`, where `p` is the per-chunk corruption probability.
pub fn estimate_with_retransmissions(inputs: &TimingInputs, corrupt_probability: f64, retries: f64) -> f64 {
    let multiplier = 1.0 + corrupt_probability.clamp(0.0, 1.0) * retries.max(0.0);
    inputs.image_bits / inputs.upload_bps * multiplier + inputs.chunk_bits / inputs.verify_bps
}

const GIB: f64 = (1u64 << 30) as f64;

/// Scales a measured time to a per-GiB figure.
pub fn normalize_per_gib(seconds: f64, size_bytes: u64) -> f64 {
    seconds * (GIB / size_bytes as f64)
}

/// Largest relative distance of any value from the mean, as a fraction.
pub fn max_relative_deviation(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    values
        .iter()
        .map(|v| {
            let d = (v - mean) / mean;
            if d < 0.0 {
                -d
            } else {
                d
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    PrehashStart,
    PrehashEnd,
    ChunkSendStart { seq: u64, attempt: u32 },
    ChunkReceived { seq: u64 },
    VerifyStart { seq: u64 },
    VerifyEnd { seq: u64, ok: bool },
    AppendStart { seq: u64 },
    AppendEnd { seq: u64 },
    FinalVerifyStart,
    FinalVerifyEnd { verified: bool },
    SessionEnd { verified: bool },
}

/// One timestamped acquisition event; `at` is seconds from an arbitrary origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    pub at: f64,
    pub kind: TraceKind,
}

/// Wall-time attribution of one acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadBreakdown {
    pub total: f64,
    /// Whole-image digest on the client before transfer (0 if not traced).
    pub prehash: f64,
    /// First chunk send to last chunk received, retransmissions included.
    pub transfer: f64,
    /// Verification of the final chunk not hidden behind transfer.
    pub final_chunk_hash: f64,
    /// Appending the final chunk; every earlier append overlaps transfer.
    pub recombination: f64,
    /// Whole-image re-digest on the server at finalize (0 if not traced).
    pub image_verify: f64,
}

impl OverheadBreakdown {
    /// Verification plus recombination overhead as a percentage of the total.
    pub fn overhead_percent(&self) -> f64 {
        if self.total <= 0.0 {
            return 0.0;
        }
        (self.final_chunk_hash + self.recombination) / self.total * 100.0
    }

    pub fn percent_of_total(&self, part: f64) -> f64 {
        if self.total <= 0.0 {
            0.0
        } else {
            part / self.total * 100.0
        }
    }
}

pub fn measure_overhead(trace: &[TraceEvent]) -> Result<OverheadBreakdown, TimingError> {
    let first = |pred: &dyn Fn(&TraceKind) -> bool| trace.iter().filter(|e| pred(&e.kind)).map(|e| e.at).reduce(f64::min);
    let last = |pred: &dyn Fn(&TraceKind) -> bool| trace.iter().filter(|e| pred(&e.kind)).map(|e| e.at).reduce(f64::max);

    let transfer_start = first(&|k| matches!(k, TraceKind::ChunkSendStart { .. }))
        .ok_or(TimingError::IncompleteTrace("no chunk was sent"))?;
    let transfer_end = last(&|k| matches!(k, TraceKind::ChunkReceived { .. }))
        .ok_or(TimingError::IncompleteTrace("no chunk was received"))?;
    let final_append = trace
        .iter()
        .filter_map(|e| match e.kind {
            TraceKind::AppendEnd { seq } => Some((seq, e.at)),
            _ => None,
        })
        .max_by_key(|&(seq, _)| seq)
        .ok_or(TimingError::IncompleteTrace("no chunk was appended"))?;
    let last_seq = final_append.0;
    let append_start = last(&|k| *k == TraceKind::AppendStart { seq: last_seq })
        .ok_or(TimingError::IncompleteTrace("final append has no start"))?;
    let verify_end = last(&|k| *k == TraceKind::VerifyEnd { seq: last_seq, ok: true })
        .ok_or(TimingError::IncompleteTrace("final chunk was never verified"))?;
    let verify_start = trace
        .iter()
        .filter(|e| e.kind == TraceKind::VerifyStart { seq: last_seq } && e.at <= verify_end)
        .map(|e| e.at)
        .reduce(f64::max)
        .ok_or(TimingError::IncompleteTrace("final chunk verification has no start"))?;

    let span = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) if b >= a => b - a,
        _ => 0.0,
    };
    let prehash = span(first(&|k| *k == TraceKind::PrehashStart), last(&|k| *k == TraceKind::PrehashEnd));
    let image_verify = span(
        first(&|k| *k == TraceKind::FinalVerifyStart),
        last(&|k| matches!(k, TraceKind::FinalVerifyEnd { .. })),
    );
    let start = trace.iter().map(|e| e.at).reduce(f64::min).unwrap_or(transfer_start);
    let end = trace.iter().map(|e| e.at).reduce(f64::max).unwrap_or(transfer_end);

    Ok(OverheadBreakdown {
        total: end - start,
        prehash,
        transfer: transfer_end - transfer_start,
        final_chunk_hash: (verify_end - verify_start.max(transfer_end)).max(0.0),
        recombination: final_append.1 - append_start,
        image_verify,
    })
}

/// Sorted copy of a trace, stable for events at equal times.
pub fn sorted_trace(trace: &[TraceEvent]) -> Vec<TraceEvent> {
    let mut v = trace.to_vec();
    v.sort_by(|a, b| a.at.partial_cmp(&b.at).unwrap_or(core::cmp::Ordering::Equal));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn direct_arithmetic() {
        let t = TimingInputs::new(8e9, 2e9, 1e9, 1e9).unwrap();
        assert_eq!(estimate_total_time(&t), 5.0);
    }

    #[test]
    fn tiny_chunk_approaches_transfer_time() {
        let t = TimingInputs::new(8e9, 2e9, 1e-9, 1e9).unwrap();
        assert!((estimate_total_time(&t) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn residential_gigabyte() {
        // 1 GiB over an 8.14 Mbit/s uplink
        let t = TimingInputs::new(8.589934592e9, 8.14e6, 1.0, 1e12).unwrap();
        let minutes = estimate_total_time(&t) / 60.0;
        assert!((minutes - 17.59).abs() < 0.01, "{minutes}");
        assert!((minutes - 20.0).abs() / 20.0 < 0.2);
    }

    #[test]
    fn rejects_non_positive() {
        assert_eq!(TimingInputs::new(0.0, 1.0, 1.0, 1.0), Err(TimingError::NonPositiveInput("image size")));
        assert_eq!(TimingInputs::new(1.0, -1.0, 1.0, 1.0), Err(TimingError::NonPositiveInput("upload bandwidth")));
        assert!(TimingInputs::new(1.0, 1.0, f64::NAN, 1.0).is_err());
        assert!(TimingInputs::new(1.0, 1.0, 1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn retransmission_extension_reduces_to_base() {
        let t = TimingInputs::new(8e9, 2e9, 1e9, 1e9).unwrap();
        assert_eq!(estimate_with_retransmissions(&t, 0.0, 5.0), estimate_total_time(&t));
        assert_eq!(estimate_with_retransmissions(&t, 0.5, 1.0), 7.0);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_per_gib(1.0, 1 << 29), 2.0);
        assert_eq!(max_relative_deviation(&[1.0, 1.0]), 0.0);
        assert!((max_relative_deviation(&[1.0, 2.0, 3.0]) - 0.5).abs() < 1e-12);
    }

    fn ev(at: f64, kind: TraceKind) -> TraceEvent {
        TraceEvent { at, kind }
    }

    #[test]
    fn overhead_from_pipelined_trace() {
        use TraceKind::*;
        let trace = vec![
            ev(0.0, ChunkSendStart { seq: 0, attempt: 1 }),
            ev(1.0, ChunkReceived { seq: 0 }),
            ev(1.0, VerifyStart { seq: 0 }),
            ev(1.0, ChunkSendStart { seq: 1, attempt: 1 }),
            ev(1.2, VerifyEnd { seq: 0, ok: true }),
            ev(1.2, AppendStart { seq: 0 }),
            ev(1.25, AppendEnd { seq: 0 }),
            ev(2.0, ChunkReceived { seq: 1 }),
            ev(2.0, VerifyStart { seq: 1 }),
            ev(2.2, VerifyEnd { seq: 1, ok: true }),
            ev(2.2, AppendStart { seq: 1 }),
            ev(2.25, AppendEnd { seq: 1 }),
            ev(2.25, SessionEnd { verified: true }),
        ];
        let b = measure_overhead(&trace).unwrap();
        assert!((b.total - 2.25).abs() < 1e-12);
        assert!((b.transfer - 2.0).abs() < 1e-12);
        assert!((b.final_chunk_hash - 0.2).abs() < 1e-12);
        assert!((b.recombination - 0.05).abs() < 1e-12);
        assert!((b.overhead_percent() - 0.25 / 2.25 * 100.0).abs() < 1e-9);
    }

    #[test]
    fn incomplete_trace_rejected() {
        assert_eq!(
            measure_overhead(&[]),
            Err(TimingError::IncompleteTrace("no chunk was sent"))
        );
        let trace = [
            ev(0.0, TraceKind::ChunkSendStart { seq: 0, attempt: 1 }),
            ev(1.0, TraceKind::ChunkReceived { seq: 0 }),
        ];
        assert!(measure_overhead(&trace).is_err());
    }

    fn positive() -> impl Strategy<Value = f64> {
        1e-3f64..1e12
    }

    proptest! {
        #[test]
        fn monotone_in_each_input(h in positive(), b in positive(), c in positive(), v in positive(), k in 1.001f64..10.0) {
            let base = estimate_total_time(&TimingInputs::new(h, b, c, v).unwrap());
            prop_assert!(estimate_total_time(&TimingInputs::new(h * k, b, c, v).unwrap()) > base);
            prop_assert!(estimate_total_time(&TimingInputs::new(h, b * k, c, v).unwrap()) < base);
            prop_assert!(estimate_total_time(&TimingInputs::new(h, b, c * k, v).unwrap()) > base);
            prop_assert!(estimate_total_time(&TimingInputs::new(h, b, c, v * k).unwrap()) < base);
        }
    }
}
