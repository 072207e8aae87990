//! Experiment driver: configuration, one world per run, metrics.

pub mod bench;
pub mod cli;
pub mod verify;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::checkpoint::{amft, CkptStats, FtMode};
use crate::dataset::knn_paths;
use crate::error::{Error, Result};
use crate::fabric::{FaultEvent, FaultSchedule, RankOutcome, RankSet, SpaceSample, TraceEvent, World, MAX_RANKS};
use crate::pipeline::fp::{run_fp, FpJob};
use crate::pipeline::knn::{run_knn_job, KnnJob};
use crate::pipeline::RankReport;
use crate::recovery::{KnnRecovery, RecoveryEvent};

/// Metadata allowance on top of the initial shard in the AMFT space bound.
pub const SPACE_ALLOWANCE: u64 = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    FpGrowth,
    Knn,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FpGrowth => "fpgrowth",
            Algorithm::Knn => "knn",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fpgrowth" | "fp-growth" | "fp" => Ok(Algorithm::FpGrowth),
            "knn" => Ok(Algorithm::Knn),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub ft: FtMode,
    pub p: usize,
    pub theta: Option<f64>,
    pub k: Option<usize>,
    pub ckpts: usize,
    pub faults: Vec<FaultEvent>,
    pub seed: u64,
    /// Transaction file, or the shared prefix of `<prefix>.train`/`<prefix>.test`.
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub knn_recovery: KnnRecovery,
    pub disk_latency: Duration,
    /// Where disk checkpoints go; a fresh temporary directory when unset.
    pub ckpt_dir: Option<PathBuf>,
    pub trace: bool,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, ft: FtMode, p: usize, data: impl Into<PathBuf>) -> Self {
        Self {
            algorithm,
            ft,
            p,
            theta: None,
            k: None,
            ckpts: 4,
            faults: Vec::new(),
            seed: 0,
            data: data.into(),
            out: None,
            knn_recovery: KnnRecovery::Opr,
            disk_latency: Duration::ZERO,
            ckpt_dir: None,
            trace: false,
        }
    }

    pub fn fpgrowth(ft: FtMode, p: usize, theta: f64, data: impl Into<PathBuf>) -> Self {
        Self {
            theta: Some(theta),
            ..Self::new(Algorithm::FpGrowth, ft, p, data)
        }
    }

    pub fn knn(ft: FtMode, p: usize, k: usize, prefix: impl Into<PathBuf>) -> Self {
        Self {
            k: Some(k),
            ..Self::new(Algorithm::Knn, ft, p, prefix)
        }
    }

    pub fn with_fault(mut self, spec: &str) -> Self {
        self.faults.push(spec.parse().expect("fault spec"));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(Error::Usage(m));
        if self.p == 0 || self.p > MAX_RANKS {
            return usage(format!("--procs must be in 1..={MAX_RANKS}, got {}", self.p));
        }
        match self.algorithm {
            Algorithm::FpGrowth => {
                if self.k.is_some() {
                    return usage("--k applies to knn only".into());
                }
                match self.theta {
                    None => return usage("fpgrowth needs --support".into()),
                    Some(t) if !(t > 0.0 && t <= 1.0) => {
                        return usage(format!("--support must be in (0, 1], got {t}"))
                    }
                    _ => {}
                }
            }
            Algorithm::Knn => {
                if self.theta.is_some() {
                    return usage("--support applies to fpgrowth only".into());
                }
                match self.k {
                    None => return usage("knn needs --k".into()),
                    Some(0) => return usage("--k must be at least 1".into()),
                    _ => {}
                }
            }
        }
        if self.ckpts == 0 || self.ckpts > amft::MAX_EPOCHS {
            return usage(format!("--ckpts must be in 1..={}, got {}", amft::MAX_EPOCHS, self.ckpts));
        }
        if !self.faults.is_empty() && self.ft == FtMode::None {
            return usage("--fail needs a fault-tolerance mode other than none".into());
        }
        let mut seen = RankSet::empty();
        for f in &self.faults {
            if f.rank.index() >= self.p {
                return usage(format!("--fail {f}: rank out of range for {} ranks", self.p));
            }
            if seen.contains(f.rank) {
                return usage(format!("--fail {f}: rank scheduled twice"));
            }
            seen.insert(f.rank);
        }
        if !self.faults.is_empty() && self.faults.len() >= self.p {
            return usage("--fail would stop every rank".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub total_time: Duration,
    pub checkpoint_time: Duration,
    pub recovery_time: Duration,
    pub bytes_checkpointed: u64,
    /// Dataset records read from disk during recovery, over all ranks.
    pub disk_reads: u64,
    pub checkpoint_reads: u64,
    pub peak_ckpt_bytes_per_rank: u64,
    pub output_checksum: String,
}

#[derive(Debug)]
pub struct RunResult {
    pub metrics: Metrics,
    pub output: String,
    pub failed: Vec<usize>,
    pub space: Vec<SpaceSample>,
    pub trace: Vec<TraceEvent>,
    pub events: Vec<RecoveryEvent>,
    /// Per finished rank.
    pub ckpt: Vec<CkptStats>,
}

impl RunResult {
    /// Ranks whose (resident checkpoint + unprocessed) peak exceeded the
    /// initial shard plus the metadata allowance.
    pub fn space_violations(&self) -> Vec<(usize, SpaceSample)> {
        self.space
            .iter()
            .enumerate()
            .filter(|(_, s)| s.peak_total > s.initial_shard + SPACE_ALLOWANCE)
            .map(|(r, s)| (r, *s))
            .collect()
    }
}

pub fn checksum(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

static RUN_COUNTER: AtomicU64 = AtomicU64::new(0);

struct ScratchDir(PathBuf);

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn scratch_dir() -> ScratchDir {
    let n = RUN_COUNTER.fetch_add(1, Ordering::Relaxed);
    ScratchDir(std::env::temp_dir().join(format!("ftmine-ckpt-{}-{n}", std::process::id())))
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let schedule = FaultSchedule::new(cfg.faults.clone())?;
    let scratch = cfg.ckpt_dir.is_none().then(scratch_dir);
    let ckpt_dir = cfg
        .ckpt_dir
        .clone()
        .unwrap_or_else(|| scratch.as_ref().unwrap().0.clone());
    let world = World::spawn(cfg.p, schedule, cfg.seed)?.with_trace(cfg.trace);

    let outs = match cfg.algorithm {
        Algorithm::FpGrowth => {
            require_file(&cfg.data)?;
            let job = FpJob {
                data: cfg.data.clone(),
                theta: cfg.theta.unwrap_or(1.0),
                ft: cfg.ft,
                ckpts: cfg.ckpts,
                ckpt_dir,
                disk_latency: cfg.disk_latency,
            };
            world.run(|ctx| run_fp(ctx, &job))
        }
        Algorithm::Knn => {
            let (train, test) = knn_paths(&cfg.data);
            require_file(&train)?;
            require_file(&test)?;
            let job = KnnJob {
                train,
                test,
                k: cfg.k.unwrap_or(1),
                ft: cfg.ft,
                recovery: cfg.knn_recovery,
                ckpt_dir,
                disk_latency: cfg.disk_latency,
            };
            world.run(|ctx| run_knn_job(ctx, &job))
        }
    };

    let mut reports: Vec<RankReport> = Vec::new();
    let mut failed = Vec::new();
    for (r, o) in outs.into_iter().enumerate() {
        match o {
            RankOutcome::Finished(rep) => reports.push(rep),
            RankOutcome::Failed => failed.push(r),
            RankOutcome::Errored(e) => return Err(Error::Run(format!("rank {r}: {e}"))),
            RankOutcome::Panicked(m) => return Err(Error::Run(format!("rank {r} panicked: {m}"))),
        }
    }
    let output = reports
        .first()
        .and_then(|r| r.output.clone())
        .ok_or_else(|| Error::Run("no rank produced a result".into()))?;
    if reports.iter().any(|r| r.output.as_deref() != Some(output.as_str())) {
        return Err(Error::Run("ranks disagree on the result".into()));
    }
    if let Some(out) = &cfg.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(out, &output)?;
    }

    let space = world.space();
    let max = |f: &dyn Fn(&RankReport) -> Duration| reports.iter().map(f).max().unwrap_or_default();
    let metrics = Metrics {
        total_time: max(&|r| r.total),
        checkpoint_time: max(&|r| r.ckpt.time),
        recovery_time: max(&|r| r.recovery.time),
        bytes_checkpointed: reports.iter().map(|r| r.ckpt.bytes).sum(),
        disk_reads: reports.iter().map(|r| r.recovery.disk_reads).sum(),
        checkpoint_reads: reports.iter().map(|r| r.recovery.checkpoint_reads).sum(),
        peak_ckpt_bytes_per_rank: space.iter().map(|s| s.peak_ckpt).max().unwrap_or(0),
        output_checksum: checksum(&output),
    };
    let mut events: Vec<RecoveryEvent> = reports.iter().flat_map(|r| r.recovery.events.clone()).collect();
    events.sort_by_key(|e| e.failed);
    Ok(RunResult {
        metrics,
        output,
        failed,
        space,
        trace: world.trace(),
        events,
        ckpt: reports.into_iter().map(|r| r.ckpt).collect(),
    })
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("dataset `{}` not found", path.display())))
    }
}
