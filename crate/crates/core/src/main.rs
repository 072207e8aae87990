use std::fs;
use std::process::ExitCode;

use ftmine::dataset::{generate_points, generate_transactions, knn_paths, TransactionSpec};
use ftmine::error::{Error, Result};
use ftmine::harness::bench::{bench, to_csv};
use ftmine::harness::cli::{parse_cli, Command, GenSpec};
use ftmine::harness::run_experiment;
use ftmine::harness::verify::verify;

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(Error::Usage(m)) => {
            eprintln!("{}", m.trim_end());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch() -> Result<ExitCode> {
    match parse_cli(std::env::args_os())? {
        Command::Info(text) => print!("{text}"),
        Command::Gen { out, seed, spec } => match spec {
            GenSpec::Transactions {
                n,
                items,
                min_len,
                max_len,
            } => {
                let f = generate_transactions(&out, &TransactionSpec::new(n, items, min_len, max_len), seed)?;
                println!("wrote {} transactions over {} items to {}", f.len(), f.width(), out.display());
            }
            GenSpec::Points { train, test, dims } => {
                let (tr, te) = knn_paths(&out);
                generate_points(&tr, train, dims, seed)?;
                generate_points(&te, test, dims, seed.wrapping_add(1))?;
                println!("wrote {train} training and {test} test points ({dims} dims) to {} and {}", tr.display(), te.display());
            }
        },
        Command::Run(cfg) => {
            let r = run_experiment(&cfg)?;
            let m = &r.metrics;
            println!("total_time_s={:.6}", m.total_time.as_secs_f64());
            println!("ckpt_time_s={:.6}", m.checkpoint_time.as_secs_f64());
            println!("rec_time_s={:.6}", m.recovery_time.as_secs_f64());
            println!("bytes_checkpointed={}", m.bytes_checkpointed);
            println!("disk_reads={}", m.disk_reads);
            println!("peak_ckpt_bytes_per_rank={}", m.peak_ckpt_bytes_per_rank);
            println!("checksum={}", m.output_checksum);
            for e in &r.events {
                println!("recovery {e}");
            }
            if cfg.out.is_none() {
                print!("{}", r.output);
            }
        }
        Command::Verify { result, data, params } => {
            let report = verify(&result, &data, params)?;
            print!("{report}");
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Bench { sweep, out } => {
            let rows = bench(&sweep);
            let csv = to_csv(&rows);
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
