mod common;

use common::{dense_fp, fp_data, knn_data};
use ftmine::checkpoint::FtMode;
use ftmine::dataset::TransactionSpec;
use ftmine::error::Error;
use ftmine::harness::bench::{bench, to_csv, SweepConfig, CSV_HEADER};
use ftmine::harness::verify::{verify, VerifyParams};
use ftmine::harness::{checksum, run_experiment, Algorithm, RunConfig};
use ftmine::recovery::KnnRecovery;
use std::time::Duration;

#[test]
fn same_config_same_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let data = fp_data(dir.path(), "t.bin", TransactionSpec::new(150, 12, 1, 6), 1);
    let cfg = RunConfig::fpgrowth(FtMode::Amft, 4, 0.1, &data.path).with_fault("2@0.5");
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.metrics.output_checksum, b.metrics.output_checksum);
    assert_eq!(a.events, b.events);
    assert_eq!(a.metrics.output_checksum, checksum(&data.expected(0.1)));
}

#[test]
fn checksum_independent_of_mode_and_width() {
    let dir = tempfile::tempdir().unwrap();
    let data = fp_data(dir.path(), "t.bin", TransactionSpec::new(120, 10, 1, 5), 2);
    let want = checksum(&data.expected(0.2));
    for ft in FtMode::ALL {
        for p in [1, 2, 5] {
            for c in [1, 3] {
                let mut cfg = RunConfig::fpgrowth(ft, p, 0.2, &data.path);
                cfg.ckpts = c;
                assert_eq!(run_experiment(&cfg).unwrap().metrics.output_checksum, want, "{ft} p={p} c={c}");
            }
        }
    }
}

#[test]
fn out_file_and_verify_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dense_fp(dir.path(), 300, 4);
    let out = dir.path().join("res/items.txt");
    let mut cfg = RunConfig::fpgrowth(FtMode::Smft, 3, 0.3, &data.path).with_fault("0@0.6");
    cfg.out = Some(out.clone());
    run_experiment(&cfg).unwrap();
    let rep = verify(&out, &data.path, VerifyParams::FpGrowth { theta: 0.3 }).unwrap();
    assert!(rep.passed(), "{rep}");

    let knn = knn_data(dir.path(), "pts", 90, 30, 3, 5);
    let out = dir.path().join("nn.txt");
    let mut cfg = RunConfig::knn(FtMode::Dft, 3, 4, &knn.prefix).with_fault("2@0.5");
    cfg.out = Some(out.clone());
    run_experiment(&cfg).unwrap();
    let rep = verify(&out, &knn.prefix, VerifyParams::Knn { k: 4 }).unwrap();
    assert!(rep.passed(), "{rep}");
    assert_eq!(rep.matched, 30);
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let cfg = RunConfig::fpgrowth(FtMode::None, 2, 0.1, "/nonexistent/t.bin");
    assert!(matches!(run_experiment(&cfg), Err(Error::Usage(_))));
}

#[test]
fn recovery_counters_follow_the_case() {
    let dir = tempfile::tempdir().unwrap();
    let data = dense_fp(dir.path(), 800, 8);
    let mut cfg = RunConfig::fpgrowth(FtMode::Dft, 4, 0.1, &data.path).with_fault("3@0.6");
    cfg.ckpts = 4;
    let r = run_experiment(&cfg).unwrap();
    let e = &r.events[0];
    assert_eq!(e.case, "tree-only");
    // checkpoint at 100 of 200, so the rest comes from disk
    assert_eq!(e.replayed, 100);
    assert_eq!(r.metrics.disk_reads, 100);
    assert_eq!(r.metrics.checkpoint_reads, 1);
    assert!(r.metrics.bytes_checkpointed > 0);
}

#[test]
fn knn_opr_and_ppr_agree() {
    let dir = tempfile::tempdir().unwrap();
    let knn = knn_data(dir.path(), "pts", 120, 40, 2, 6);
    let want = knn.expected(2);
    for ft in [FtMode::Dft, FtMode::Smft, FtMode::Amft] {
        for rec in [KnnRecovery::Opr, KnnRecovery::Ppr] {
            let mut cfg = RunConfig::knn(ft, 4, 2, &knn.prefix).with_fault("1@0.5");
            cfg.knn_recovery = rec;
            let r = run_experiment(&cfg).unwrap();
            assert_eq!(r.output, want, "{ft} {}", rec.name());
            assert_eq!(r.events[0].case, rec.name());
        }
    }
}

#[test]
fn bench_transparency_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let data = fp_data(dir.path(), "t.bin", TransactionSpec::new(100, 10, 1, 5), 3);
    let sweep = SweepConfig {
        algorithm: Algorithm::FpGrowth,
        data: data.path.clone(),
        fts: FtMode::ALL.to_vec(),
        procs: vec![4],
        params: vec![0.1],
        faults: vec![None],
        ckpts: 4,
        seed: 0,
        knn_recovery: KnnRecovery::Opr,
        disk_latency: Duration::ZERO,
    };
    let rows = bench(&sweep);
    assert_eq!(rows.len(), 4);
    let sums: Vec<_> = rows.iter().map(|r| r.metrics.as_ref().unwrap().output_checksum.clone()).collect();
    assert!(sums.iter().all(|s| *s == sums[0]));
    assert_eq!(rows[0].overhead_pct, Some(0.0));
    let csv = to_csv(&rows);
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn bench_faulted_cells_and_error_rows() {
    let dir = tempfile::tempdir().unwrap();
    let knn = knn_data(dir.path(), "pts", 60, 20, 2, 7);
    let sweep = SweepConfig {
        algorithm: Algorithm::Knn,
        data: knn.prefix.clone(),
        fts: vec![FtMode::None, FtMode::Dft, FtMode::Amft],
        procs: vec![1, 3],
        params: vec![2.0],
        faults: vec![None, Some(0.5)],
        ckpts: 2,
        seed: 0,
        knn_recovery: KnnRecovery::Opr,
        disk_latency: Duration::ZERO,
    };
    let rows = bench(&sweep);
    // p=1 has no rank 1 and ft=none takes no faults
    assert_eq!(rows.len(), 3 + 3 + 2);
    assert!(rows.iter().all(|r| r.status == "ok"));
    let dft = rows.iter().find(|r| r.ft == FtMode::Dft && r.fault.is_some()).unwrap();
    assert_eq!(dft.rec_speedup, Some(1.0));

    let broken = SweepConfig {
        data: dir.path().join("missing"),
        fts: vec![FtMode::None],
        procs: vec![2],
        faults: vec![None],
        ..sweep
    };
    let rows = bench(&broken);
    assert_eq!(rows.len(), 1);
    assert!(rows[0].status.starts_with("error"));
    assert!(rows[0].metrics.is_none());
}
