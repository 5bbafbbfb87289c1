mod common;

use std::collections::BTreeSet;
use std::fs;

use common::*;
use raft::client::AcquireError;
use raft::events::EventKind;
use raft::store::IMAGE_FILE;
use raft::transport::FaultPlan;
use raft_core::model::FinalVerdict;

#[test]
fn corrupted_chunks_are_nacked_and_retransmitted() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("disk.img");
    let data = random_file(&src, 4 * MIB, 11);
    let h = Harness::new(&dir.path().join("store"));
    let (result, events) = run(&device("d", 4 * MIB), &src, &options(128 * 1024), &mut h.connector(|_| Some(FaultPlan::corrupting(99, 0.3))));
    let report = result.unwrap();
    let log = h.fault_logs.lock().unwrap()[0].clone();
    assert!(log.corruption_count() > 0);
    assert_eq!(report.naks as usize, log.corruption_count());

    let nacked: Vec<(u64, u32)> = events
        .iter()
        .filter_map(|e| match e {
            EventKind::ChunkNacked { seq, attempt } => Some((*seq, *attempt)),
            _ => None,
        })
        .collect();
    let corrupted: Vec<(u64, u32)> = log.corruptions().iter().map(|c| (c.seq, c.attempt)).collect();
    assert_eq!(nacked.iter().collect::<BTreeSet<_>>(), corrupted.iter().collect::<BTreeSet<_>>());
    for (seq, attempt) in &corrupted {
        assert!(report.transmissions.iter().any(|t| t.seq == *seq && t.attempt == attempt + 1));
    }
    assert_eq!(report.transmissions.len(), 32 + corrupted.len());

    let outcome = &h.join()[0];
    assert_eq!(outcome.verdict, Some(FinalVerdict::Verified));
    assert_eq!(fs::read(outcome.device_dir.as_ref().unwrap().join(IMAGE_FILE)).unwrap(), data);
}

#[test]
fn persistent_corruption_exhausts_the_retry_limit() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("disk.img");
    random_file(&src, 4096, 3);
    let h = Harness::new(&dir.path().join("store"));
    let (result, _) = run(&device("d", 4096), &src, &options(1024), &mut h.connector(|_| Some(FaultPlan::corrupting(5, 1.0))));
    assert!(matches!(result, Err(AcquireError::RetryLimitExceeded { seq: 0, attempts: 5 })), "{result:?}");
    let log = h.fault_logs.lock().unwrap()[0].clone();
    let per_seq = |seq| log.corruptions().iter().filter(|c| c.seq == seq).count();
    assert_eq!(per_seq(0), 5);
    assert!(per_seq(1) <= 5);
    assert_eq!(log.corruption_count(), log.chunk_frames().len());
    let outcome = &h.join()[0];
    assert_ne!(outcome.verdict, Some(FinalVerdict::Verified));
    let image = fs::read(outcome.device_dir.as_ref().unwrap().join(IMAGE_FILE)).unwrap();
    assert!(image.is_empty(), "no unverified byte may reach the image");
}

#[test]
fn identical_seeds_reproduce_the_fault_schedule() {
    let mut schedules = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("disk.img");
        random_file(&src, MIB, 4);
        let h = Harness::new(&dir.path().join("store"));
        run(&device("d", MIB), &src, &options(64 * 1024), &mut h.connector(|_| Some(FaultPlan::corrupting(1234, 0.25))))
            .0
            .unwrap();
        h.join();
        let log = h.fault_logs.lock().unwrap()[0].clone();
        schedules.push(log.corruptions());
    }
    assert_eq!(schedules[0], schedules[1]);
}
