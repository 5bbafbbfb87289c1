mod common;

use std::fs;

use common::*;
use raft::client::AcquireError;
use raft::store::{read_record, IMAGE_FILE};
use raft::transport::FaultPlan;
use raft_core::model::FinalVerdict;

fn dropping(after: u64) -> FaultPlan {
    FaultPlan { drop_connection_after_bytes: Some(after), ..FaultPlan::passthrough(0) }
}

#[test]
fn dropped_connection_resumes_without_resending_verified_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("disk.img");
    let data = random_file(&src, 8 * MIB, 21);
    let h = Harness::new(&dir.path().join("store"));
    let (result, _) = run(
        &device("d", 8 * MIB),
        &src,
        &options(512 * 1024),
        &mut h.connector(|n| (n == 0).then(|| dropping(4 * MIB + 1000))),
    );
    let report = result.unwrap();
    assert_eq!(report.connections(), 2);
    assert_eq!(report.resume_points[0], 0);
    let resume = report.resume_points[1];
    assert!(resume > 0 && resume < 16, "resume point {resume}");
    let resent: Vec<_> = report.transmissions.iter().filter(|t| t.connection == 1 && t.seq < resume).collect();
    assert!(resent.is_empty(), "verified chunks re-sent: {resent:?}");
    let second: Vec<u64> = report.transmissions.iter().filter(|t| t.connection == 1).map(|t| t.seq).collect();
    assert_eq!(second, (resume..16).collect::<Vec<_>>());

    let outcomes = h.join();
    assert_eq!(outcomes.len(), 2);
    assert!(outcomes[0].interrupted.is_some());
    assert_eq!(outcomes[0].session_id, outcomes[1].session_id);
    let out = outcomes[1].device_dir.clone().unwrap();
    assert_eq!(outcomes[1].verdict, Some(FinalVerdict::Verified));
    assert_eq!(fs::read(out.join(IMAGE_FILE)).unwrap(), data);
    assert_eq!(read_record(&out).unwrap().final_verdict, FinalVerdict::Verified);
    assert_eq!(h.server.store().records().unwrap().len(), 1);
}

#[test]
fn interrupted_session_is_persisted_as_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("disk.img");
    random_file(&src, 2 * MIB, 8);
    let h = Harness::new(&dir.path().join("store"));
    let mut o = options(256 * 1024);
    o.max_reconnects = 0;
    let (result, _) = run(&device("d", 2 * MIB), &src, &o, &mut h.connector(|_| Some(dropping(MIB))));
    assert!(matches!(result, Err(AcquireError::ConnectionLost { .. })), "{result:?}");
    let outcome = &h.join()[0];
    let record = read_record(outcome.device_dir.as_ref().unwrap()).unwrap();
    assert_eq!(record.final_verdict, FinalVerdict::Pending);
    let image_len = fs::metadata(outcome.device_dir.as_ref().unwrap().join(IMAGE_FILE)).unwrap().len();
    assert_eq!(image_len, record.manifest.chunks.len() as u64 * 256 * 1024);
    assert!(!record.manifest.chunks.is_empty());
}
