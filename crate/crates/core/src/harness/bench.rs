//! Parameter sweeps emitting one CSV row per run.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Duration;

use super::{run_experiment, Algorithm, Metrics, RunConfig};
use crate::checkpoint::FtMode;
use crate::fabric::{FaultEvent, RankId, Trigger};
use crate::recovery::KnnRecovery;

pub const CSV_HEADER: &str =
    "algo,ft,p,theta_or_k,fault,total_time,ckpt_time,rec_time,bytes,peak_bytes,checksum,overhead_pct,rec_speedup,status";

/// Rank that fails in faulted cells.
pub const FAULT_RANK: usize = 1;

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub algorithm: Algorithm,
    pub data: PathBuf,
    pub fts: Vec<FtMode>,
    pub procs: Vec<usize>,
    /// Support fractions (fpgrowth) or neighbor counts (knn).
    pub params: Vec<f64>,
    /// Failure positions as progress fractions; `None` is the fault-free cell.
    pub faults: Vec<Option<f64>>,
    pub ckpts: usize,
    pub seed: u64,
    pub knn_recovery: KnnRecovery,
    pub disk_latency: Duration,
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub algo: Algorithm,
    pub ft: FtMode,
    pub p: usize,
    pub param: f64,
    pub fault: Option<f64>,
    pub metrics: Option<Metrics>,
    pub overhead_pct: Option<f64>,
    pub rec_speedup: Option<f64>,
    pub status: String,
}

impl BenchRow {
    fn same_cell(&self, other: &BenchRow) -> bool {
        self.p == other.p && self.param == other.param
    }

    pub fn fault_label(&self) -> String {
        match self.fault {
            None => "none".into(),
            Some(f) => format!("{FAULT_RANK}@{f}"),
        }
    }

    pub fn to_csv(&self) -> String {
        let secs = |d: Duration| format!("{:.6}", d.as_secs_f64());
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
        let mut s = format!("{},{},{},{},{},", self.algo, self.ft, self.p, self.param, self.fault_label());
        match &self.metrics {
            Some(m) => {
                let _ = write!(
                    s,
                    "{},{},{},{},{},{}",
                    secs(m.total_time),
                    secs(m.checkpoint_time),
                    secs(m.recovery_time),
                    m.bytes_checkpointed,
                    m.peak_ckpt_bytes_per_rank,
                    m.output_checksum
                );
            }
            None => s.push_str(",,,,,"),
        }
        let _ = write!(s, ",{},{},{}", opt(self.overhead_pct), opt(self.rec_speedup), self.status.replace(',', ";"));
        s
    }
}

fn cell_config(sweep: &SweepConfig, ft: FtMode, p: usize, param: f64, fault: Option<f64>) -> RunConfig {
    let mut cfg = match sweep.algorithm {
        Algorithm::FpGrowth => RunConfig::fpgrowth(ft, p, param, &sweep.data),
        Algorithm::Knn => RunConfig::knn(ft, p, param as usize, &sweep.data),
    };
    cfg.ckpts = sweep.ckpts;
    cfg.seed = sweep.seed;
    cfg.knn_recovery = sweep.knn_recovery;
    cfg.disk_latency = sweep.disk_latency;
    if let Some(f) = fault {
        cfg.faults.push(FaultEvent {
            rank: RankId(FAULT_RANK),
            trigger: Trigger::AtProgressFraction(f),
        });
    }
    cfg
}

/// Runs every cell in order. Faulted cells are skipped for ft=none and for
/// worlds too small to have the failing rank; failed runs become error rows.
pub fn bench(sweep: &SweepConfig) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    for &p in &sweep.procs {
        for &param in &sweep.params {
            for &fault in &sweep.faults {
                for &ft in &sweep.fts {
                    if fault.is_some() && (ft == FtMode::None || p <= FAULT_RANK) {
                        continue;
                    }
                    let cfg = cell_config(sweep, ft, p, param, fault);
                    let (metrics, status) = match run_experiment(&cfg) {
                        Ok(r) => (Some(r.metrics), "ok".to_string()),
                        Err(e) => (None, format!("error: {e}")),
                    };
                    rows.push(BenchRow {
                        algo: sweep.algorithm,
                        ft,
                        p,
                        param,
                        fault,
                        metrics,
                        overhead_pct: None,
                        rec_speedup: None,
                        status,
                    });
                }
            }
        }
    }
    derive_columns(&mut rows);
    rows
}

/// Overhead against the fault-free ft=none row of the same cell, and DFT
/// recovery time over this row's recovery time for matching faulted cells.
pub fn derive_columns(rows: &mut [BenchRow]) {
    let snapshot = rows.to_vec();
    for row in rows.iter_mut() {
        let Some(m) = &row.metrics else { continue };
        let base = snapshot
            .iter()
            .find(|b| b.ft == FtMode::None && b.fault.is_none() && b.same_cell(row))
            .and_then(|b| b.metrics.as_ref());
        if let Some(b) = base {
            let bt = b.total_time.as_secs_f64();
            if bt > 0.0 {
                row.overhead_pct = Some((m.total_time.as_secs_f64() - bt) / bt * 100.0);
            }
        }
        if row.fault.is_some() {
            let dft = snapshot
                .iter()
                .find(|b| b.ft == FtMode::Dft && b.fault == row.fault && b.same_cell(row))
                .and_then(|b| b.metrics.as_ref());
            if let Some(d) = dft {
                let mine = m.recovery_time.as_secs_f64();
                if mine > 0.0 {
                    row.rec_speedup = Some(d.recovery_time.as_secs_f64() / mine);
                }
            }
        }
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(ft: FtMode, fault: Option<f64>, total_ms: u64, rec_ms: u64) -> BenchRow {
        BenchRow {
            algo: Algorithm::FpGrowth,
            ft,
            p: 4,
            param: 0.1,
            fault,
            metrics: Some(Metrics {
                total_time: Duration::from_millis(total_ms),
                recovery_time: Duration::from_millis(rec_ms),
                output_checksum: "ab".into(),
                ..Default::default()
            }),
            overhead_pct: None,
            rec_speedup: None,
            status: "ok".into(),
        }
    }

    #[test]
    fn derived_columns() {
        let mut rows = vec![
            row(FtMode::None, None, 100, 0),
            row(FtMode::Amft, None, 110, 0),
            row(FtMode::Dft, Some(0.8), 150, 40),
            row(FtMode::Amft, Some(0.8), 130, 10),
        ];
        derive_columns(&mut rows);
        assert_eq!(rows[0].overhead_pct, Some(0.0));
        assert!((rows[1].overhead_pct.unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(rows[2].rec_speedup, Some(1.0));
        assert_eq!(rows[3].rec_speedup, Some(4.0));
        assert_eq!(rows[1].rec_speedup, None);
    }

    #[test]
    fn csv_columns_are_fixed() {
        let n = CSV_HEADER.split(',').count();
        let mut r = row(FtMode::Amft, Some(0.5), 1, 1);
        assert_eq!(r.to_csv().split(',').count(), n);
        assert!(r.to_csv().starts_with("fpgrowth,amft,4,0.1,1@0.5,"));
        r.metrics = None;
        r.status = "error: a, b".into();
        assert_eq!(r.to_csv().split(',').count(), n);
    }
}
