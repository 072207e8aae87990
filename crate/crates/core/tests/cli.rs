use std::path::Path;
use std::process::{Command, Output};

fn ftmine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftmine")).args(args).output().expect("spawn ftmine")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_run_verify_fpgrowth() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("t.bin");
    let out = dir.path().join("items.txt");
    let o = ftmine(&["gen", "--algo", "fpgrowth", "--out", p(&data), "--transactions", "200", "--items", "12", "--seed", "4"]);
    assert!(o.status.success(), "{o:?}");

    let run = |ft: &str, fail: Option<&str>| {
        let mut args = vec!["run", "--algo", "fpgrowth", "--ft", ft, "--procs", "4", "--support", "0.05", "--ckpts", "4"];
        if let Some(f) = fail {
            args.extend(["--fail", f]);
        }
        args.extend(["--data", p(&data), "--out", p(&out)]);
        let o = ftmine(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let text = stdout(&o);
        text.lines().find(|l| l.starts_with("checksum=")).unwrap().to_string()
    };
    let base = run("none", None);
    assert_eq!(run("amft", Some("1@0.8")), base);

    let o = ftmine(&["verify", "--algo", "fpgrowth", "--data", p(&data), "--support", "0.05", "--result", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("PASS"));

    // tamper with one support
    let text = std::fs::read_to_string(&out).unwrap();
    let first = text.lines().next().unwrap();
    let (items, sup) = first.split_once('\t').unwrap();
    let bumped = format!("{items}\t{}", sup.parse::<u64>().unwrap() - 1);
    std::fs::write(&out, text.replacen(first, &bumped, 1)).unwrap();
    let o = ftmine(&["verify", "--algo", "fpgrowth", "--data", p(&data), "--support", "0.05", "--result", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains(&format!("{{{items}}}")), "{}", stdout(&o));
}

#[test]
fn gen_run_verify_knn() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("pts");
    let out = dir.path().join("nn.txt");
    let o = ftmine(&["gen", "--algo", "knn", "--out", p(&prefix), "--train", "80", "--test", "20", "--dims", "3"]);
    assert!(o.status.success());
    assert!(dir.path().join("pts.train").is_file() && dir.path().join("pts.test").is_file());
    let o = ftmine(&[
        "run", "--algo", "knn", "--ft", "smft", "--procs", "4", "--k", "3", "--fail", "2@0.5", "--recovery", "ppr", "--data",
        p(&prefix), "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("case=ppr"));
    let o = ftmine(&["verify", "--algo", "knn", "--data", p(&prefix), "--k", "3", "--result", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        vec!["run", "--algo", "fpgrowth", "--support", "0", "--data", "x"],
        vec!["run", "--algo", "fpgrowth", "--ft", "amft", "--procs", "4", "--support", "0.1", "--fail", "9@0.5", "--data", "x"],
        vec!["run", "--algo", "knn", "--k", "2", "--support", "0.1", "--data", "x"],
        vec!["run", "--algo", "fpgrowth", "--support", "0.1", "--data", "/nonexistent/x"],
        vec!["bogus"],
        vec![],
    ] {
        let o = ftmine(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    assert_eq!(ftmine(&["--help"]).status.code(), Some(0));
}

#[test]
fn bench_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("t.bin");
    let csv = dir.path().join("bench.csv");
    assert!(ftmine(&["gen", "--algo", "fpgrowth", "--out", p(&data), "--transactions", "120", "--items", "10"]).status.success());
    let o = ftmine(&[
        "bench", "--algo", "fpgrowth", "--data", p(&data), "--procs", "4", "--support", "0.1", "--fail", "none,0.8", "--out",
        p(&csv),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..11], &[
        "algo", "ft", "p", "theta_or_k", "fault", "total_time", "ckpt_time", "rec_time", "bytes", "peak_bytes", "checksum"
    ]);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // 4 fault-free rows and 3 faulted ones
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.len() == header.len() && r[13] == "ok"));
    assert!(rows.iter().all(|r| r[10] == rows[0][10]));
}
