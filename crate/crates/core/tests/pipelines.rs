mod common;

use common::{dense_fp, fp_data, knn_data};
use ftmine::checkpoint::FtMode;
use ftmine::dataset::TransactionSpec;
use ftmine::harness::{run_experiment, RunConfig};
use ftmine::recovery::KnnRecovery;
use proptest::prelude::*;

fn ft_mode() -> impl Strategy<Value = FtMode> {
    prop_oneof![Just(FtMode::Dft), Just(FtMode::Smft), Just(FtMode::Amft)]
}

/// Up to `p - 1` distinct failing ranks with their positions.
fn faults(p: usize) -> impl Strategy<Value = Vec<String>> {
    (proptest::sample::subsequence((0..p).collect::<Vec<_>>(), 0..p), proptest::collection::vec(0.0f64..=1.0, p))
        .prop_map(|(ranks, fracs)| ranks.iter().map(|&r| format!("{r}@{:.2}", fracs[r])).collect())
}

fn fp_case() -> impl Strategy<Value = (usize, Vec<String>, FtMode, u64, usize, f64)> {
    (2usize..=6).prop_flat_map(|p| {
        (
            Just(p),
            faults(p),
            ft_mode(),
            any::<u64>(),
            1usize..=6,
            prop_oneof![Just(0.05), Just(0.1), Just(0.3)],
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, ..ProptestConfig::default() })]

    #[test]
    fn fp_any_fault_schedule_matches_oracle((p, fs, ft, seed, ckpts, theta) in fp_case()) {
        let dir = tempfile::tempdir().unwrap();
        let data = fp_data(dir.path(), "t.bin", TransactionSpec::new(60 + (seed % 140) as usize, 9, 1, 6), seed);
        let mut cfg = RunConfig::fpgrowth(ft, p, theta, &data.path);
        cfg.ckpts = ckpts;
        for f in &fs {
            cfg = cfg.with_fault(f);
        }
        let r = run_experiment(&cfg).unwrap();
        prop_assert_eq!(r.output, data.expected(theta));
        prop_assert_eq!(r.failed.len(), fs.len());
    }

    #[test]
    fn knn_any_fault_schedule_matches_oracle(
        (p, fs, ft, seed, ppr, k) in (2usize..=6).prop_flat_map(|p| (Just(p), faults(p), ft_mode(), any::<u64>(), any::<bool>(), 1usize..=4))
    ) {
        let dir = tempfile::tempdir().unwrap();
        let knn = knn_data(dir.path(), "pts", 30 + (seed % 90) as usize, 5 + (seed % 30) as usize, 1 + (seed % 4) as usize, seed);
        let mut cfg = RunConfig::knn(ft, p, k, &knn.prefix);
        if ppr {
            cfg.knn_recovery = KnnRecovery::Ppr;
        }
        for f in &fs {
            cfg = cfg.with_fault(f);
        }
        let r = run_experiment(&cfg).unwrap();
        prop_assert_eq!(r.output, knn.expected(k));
    }
}

#[test]
fn adjacent_failures_fall_back_to_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = dense_fp(dir.path(), 800, 21);
    for ft in [FtMode::Smft, FtMode::Amft] {
        // rank 2 holds rank 1's replica and fails too. Unless rank 1 noticed
        // in time and re-replicated, its shard is rebuilt from disk.
        let cfg = RunConfig::fpgrowth(ft, 4, 0.1, &data.path).with_fault("1@0.9").with_fault("2@0.9");
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.output, data.expected(0.1), "{ft}");
        assert_eq!(r.failed, vec![1, 2]);
        let e1 = r.events.iter().find(|e| e.failed.0 == 1).unwrap();
        if e1.case == "no-checkpoint" {
            assert_eq!(e1.disk_reads, 200, "{ft}");
            assert_eq!(e1.recovery_rank.0, 3, "{ft}");
        }
    }
}

#[test]
fn smft_transaction_copy_serves_late_faults() {
    let dir = tempfile::tempdir().unwrap();
    let data = dense_fp(dir.path(), 800, 22);
    let r = run_experiment(&RunConfig::fpgrowth(FtMode::Smft, 4, 0.1, &data.path).with_fault("2@0.8")).unwrap();
    assert_eq!(r.events[0].case, "tree+trans");
    assert_eq!(r.metrics.disk_reads, 0);
    assert_eq!(r.output, data.expected(0.1));
}

#[test]
fn fault_after_the_last_transaction() {
    let dir = tempfile::tempdir().unwrap();
    let data = dense_fp(dir.path(), 400, 23);
    for ft in [FtMode::Dft, FtMode::Smft, FtMode::Amft] {
        let r = run_experiment(&RunConfig::fpgrowth(ft, 4, 0.1, &data.path).with_fault("3@1")).unwrap();
        assert_eq!(r.output, data.expected(0.1), "{ft}");
        assert_eq!(r.events[0].replayed, 0, "{ft}");
    }
}

#[test]
fn single_survivor() {
    let dir = tempfile::tempdir().unwrap();
    let data = fp_data(dir.path(), "t.bin", TransactionSpec::new(90, 8, 1, 5), 24);
    let knn = knn_data(dir.path(), "pts", 40, 12, 2, 24);
    for ft in [FtMode::Dft, FtMode::Smft, FtMode::Amft] {
        let cfg = RunConfig::fpgrowth(ft, 3, 0.1, &data.path).with_fault("0@0.2").with_fault("2@0.7");
        assert_eq!(run_experiment(&cfg).unwrap().output, data.expected(0.1), "{ft}");
        let cfg = RunConfig::knn(ft, 3, 3, &knn.prefix).with_fault("1@0.3").with_fault("0@0.9");
        assert_eq!(run_experiment(&cfg).unwrap().output, knn.expected(3), "{ft}");
    }
}
