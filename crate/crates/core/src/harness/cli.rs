//! Command-line parsing. Every bad flag combination surfaces as
//! [`Error::Usage`].

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use super::bench::SweepConfig;
use super::verify::VerifyParams;
use super::{Algorithm, RunConfig};
use crate::checkpoint::FtMode;
use crate::error::{Error, Result};
use crate::fabric::FaultEvent;
use crate::recovery::KnnRecovery;

#[derive(Parser, Debug)]
#[command(name = "ftmine", version, about = "Fault-tolerant parallel FP-Growth and KNN on a simulated cluster")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic dataset.
    Gen(GenArgs),
    /// Run one experiment and print its metrics.
    Run(RunArgs),
    /// Compare a result file with brute-force enumeration.
    Verify(VerifyArgs),
    /// Sweep configurations and emit CSV.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    algo: Algorithm,
    /// Transaction file, or prefix for `<out>.train` and `<out>.test`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    transactions: usize,
    #[arg(long, default_value_t = 20)]
    items: usize,
    #[arg(long, default_value_t = 1)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 300)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 8)]
    dims: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    algo: Algorithm,
    #[arg(long, default_value = "none")]
    ft: FtMode,
    #[arg(long, default_value_t = 4)]
    procs: usize,
    #[arg(long)]
    support: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 4)]
    ckpts: usize,
    /// `rank@fraction`; repeatable.
    #[arg(long = "fail")]
    fail: Vec<FaultEvent>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "opr")]
    recovery: KnnRecovery,
    /// Delay per dataset or checkpoint read during recovery.
    #[arg(long, default_value_t = 0)]
    disk_latency_ms: u64,
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    algo: Algorithm,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    support: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    algo: Algorithm,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "none,dft,smft,amft")]
    ft: Vec<FtMode>,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    procs: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    support: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Failure positions for rank 1, or `none` for the fault-free cell.
    #[arg(long, value_delimiter = ',', default_value = "none", value_parser = parse_fault_position)]
    fail: Vec<FaultPosition>,
    #[arg(long, default_value_t = 4)]
    ckpts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "opr")]
    recovery: KnnRecovery,
    #[arg(long, default_value_t = 0)]
    disk_latency_ms: u64,
    /// CSV destination; stdout when unset.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug)]
struct FaultPosition(Option<f64>);

fn parse_fault_position(s: &str) -> std::result::Result<FaultPosition, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(FaultPosition(None));
    }
    let f: f64 = s.parse().map_err(|_| format!("bad fault position `{s}`"))?;
    if !(0.0..=1.0).contains(&f) {
        return Err(format!("fault position {f} outside [0, 1]"));
    }
    Ok(FaultPosition(Some(f)))
}

#[derive(Clone, Debug)]
pub enum GenSpec {
    Transactions {
        n: usize,
        items: usize,
        min_len: usize,
        max_len: usize,
    },
    Points {
        train: usize,
        test: usize,
        dims: usize,
    },
}

#[derive(Clone, Debug)]
pub enum Command {
    Gen { out: PathBuf, seed: u64, spec: GenSpec },
    Run(RunConfig),
    Verify { result: PathBuf, data: PathBuf, params: VerifyParams },
    Bench { sweep: SweepConfig, out: Option<PathBuf> },
    /// `--help` or `--version` text.
    Info(String),
}

fn usage(m: impl Into<String>) -> Error {
    Error::Usage(m.into())
}

pub fn parse_cli<I, T>(argv: I) -> Result<Command>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            return Ok(Command::Info(e.to_string()))
        }
        Err(e) => return Err(usage(e.to_string())),
    };
    match cli.cmd {
        Cmd::Gen(g) => {
            let spec = match g.algo {
                Algorithm::FpGrowth => GenSpec::Transactions {
                    n: g.transactions,
                    items: g.items,
                    min_len: g.min_len,
                    max_len: g.max_len,
                },
                Algorithm::Knn => GenSpec::Points {
                    train: g.train,
                    test: g.test,
                    dims: g.dims,
                },
            };
            Ok(Command::Gen {
                out: g.out,
                seed: g.seed,
                spec,
            })
        }
        Cmd::Run(r) => {
            let cfg = RunConfig {
                algorithm: r.algo,
                ft: r.ft,
                p: r.procs,
                theta: r.support,
                k: r.k,
                ckpts: r.ckpts,
                faults: r.fail,
                seed: r.seed,
                data: r.data,
                out: r.out,
                knn_recovery: r.recovery,
                disk_latency: Duration::from_millis(r.disk_latency_ms),
                ckpt_dir: r.ckpt_dir,
                trace: false,
            };
            cfg.validate()?;
            Ok(Command::Run(cfg))
        }
        Cmd::Verify(v) => {
            let params = match (v.algo, v.support, v.k) {
                (Algorithm::FpGrowth, Some(theta), None) if theta > 0.0 && theta <= 1.0 => {
                    VerifyParams::FpGrowth { theta }
                }
                (Algorithm::FpGrowth, Some(t), None) => return Err(usage(format!("--support must be in (0, 1], got {t}"))),
                (Algorithm::FpGrowth, _, _) => return Err(usage("fpgrowth takes --support and not --k")),
                (Algorithm::Knn, None, Some(k)) if k >= 1 => VerifyParams::Knn { k },
                (Algorithm::Knn, _, _) => return Err(usage("knn takes --k >= 1 and not --support")),
            };
            Ok(Command::Verify {
                result: v.result,
                data: v.data,
                params,
            })
        }
        Cmd::Bench(b) => {
            let params: Vec<f64> = match b.algo {
                Algorithm::FpGrowth if b.k.is_empty() && !b.support.is_empty() => b.support.clone(),
                Algorithm::Knn if b.support.is_empty() && !b.k.is_empty() => b.k.iter().map(|&k| k as f64).collect(),
                Algorithm::FpGrowth => return Err(usage("fpgrowth sweeps need --support and no --k")),
                Algorithm::Knn => return Err(usage("knn sweeps need --k and no --support")),
            };
            let sweep = SweepConfig {
                algorithm: b.algo,
                data: b.data,
                fts: b.ft,
                procs: b.procs,
                params,
                faults: b.fail.iter().map(|f| f.0).collect(),
                ckpts: b.ckpts,
                seed: b.seed,
                knn_recovery: b.recovery,
                disk_latency: Duration::from_millis(b.disk_latency_ms),
            };
            // every cell must be a valid run on its own
            for &p in &sweep.procs {
                for &param in &sweep.params {
                    let mut cfg = match sweep.algorithm {
                        Algorithm::FpGrowth => RunConfig::fpgrowth(FtMode::None, p, param, &sweep.data),
                        Algorithm::Knn => RunConfig::knn(FtMode::None, p, param as usize, &sweep.data),
                    };
                    cfg.ckpts = sweep.ckpts;
                    cfg.validate()?;
                }
            }
            Ok(Command::Bench { sweep, out: b.out })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Command> {
        parse_cli(std::iter::once("ftmine").chain(s.split_whitespace()))
    }

    #[test]
    fn run_contract() {
        let Command::Run(cfg) =
            parse("run --algo fpgrowth --ft amft --procs 4 --support 0.05 --ckpts 4 --fail 1@0.8 --data t.bin").unwrap()
        else {
            panic!("not a run")
        };
        assert_eq!(cfg.ft, FtMode::Amft);
        assert_eq!(cfg.p, 4);
        assert_eq!(cfg.theta, Some(0.05));
        assert_eq!(cfg.faults.len(), 1);
        assert_eq!(cfg.faults[0].to_string(), "1@0.8");
    }

    #[test]
    fn usage_errors() {
        for bad in [
            "run --algo fpgrowth --ft amft --procs 4 --support 0 --data t",
            "run --algo fpgrowth --ft amft --procs 4 --support 0.1 --fail 9@0.5 --data t",
            "run --algo knn --ft amft --procs 4 --k 3 --support 0.1 --data t",
            "run --algo knn --ft amft --procs 4 --k 0 --data t",
            "run --algo fpgrowth --ft none --procs 4 --support 0.1 --fail 1@0.5 --data t",
            "run --algo fpgrowth --ft amft --procs 2 --support 0.1 --fail 0@0.5 --fail 1@0.5 --data t",
            "run --algo fpgrowth --ft amft --procs 4 --support 0.1 --fail 1@0.5 --fail 1@0.6 --data t",
            "run --algo fpgrowth --ft amft --procs 4 --support 0.1 --ckpts 0 --data t",
            "run --algo fpgrowth --ft amft --procs 0 --support 0.1 --data t",
            "run --algo fpgrowth --ft bogus --procs 4 --support 0.1 --data t",
            "run --algo fpgrowth --ft amft --support 0.1 --fail 1@1.5 --data t",
            "verify --algo knn --data t --result r --support 0.1",
            "bench --algo fpgrowth --data t --k 3",
            "frobnicate",
        ] {
            assert!(matches!(parse(bad), Err(Error::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn bench_lists() {
        let Command::Bench { sweep, .. } =
            parse("bench --algo knn --data p --ft none,amft --procs 2,4 --k 1,3 --fail none,0.5").unwrap()
        else {
            panic!("not a bench")
        };
        assert_eq!(sweep.fts, vec![FtMode::None, FtMode::Amft]);
        assert_eq!(sweep.procs, vec![2, 4]);
        assert_eq!(sweep.params, vec![1.0, 3.0]);
        assert_eq!(sweep.faults, vec![None, Some(0.5)]);
    }

    #[test]
    fn help_is_not_an_error() {
        assert!(matches!(parse("--help"), Ok(Command::Info(_))));
    }
}
