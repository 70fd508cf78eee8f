use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

fn fedshare(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedshare"))
        .args(args)
        .current_dir(dir)
        .env_remove("SCOTCH_DATA_DIR")
        .output()
        .unwrap()
}

const SMALL: &[&str] = &["run", "--dataset", "synthetic", "--m", "2", "--n", "2", "--iter", "2", "--seed", "7"];

fn run_small(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = SMALL.to_vec();
    args.extend_from_slice(&["--output", out]);
    args.extend_from_slice(extra);
    fedshare(&args, dir)
}

#[test]
fn loopback_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.jsonl", "b.jsonl"] {
        let o = run_small(dir.path(), out, &["--transport", "loopback"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(fs::read(dir.path().join("a.csv")).unwrap(), fs::read(dir.path().join("b.csv")).unwrap());
    assert!(dir.path().join("a.timings.jsonl").exists());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().last().unwrap().contains("\"record\":\"summary\""));
}

#[test]
fn socket_processes_match_loopback_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let l = run_small(dir.path(), "loop.jsonl", &[]);
    assert!(l.status.success(), "{}", String::from_utf8_lossy(&l.stderr));
    let s = run_small(dir.path(), "sock.jsonl", &["--transport", "sockets"]);
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    assert_eq!(
        fs::read_to_string(dir.path().join("loop.jsonl")).unwrap(),
        fs::read_to_string(dir.path().join("sock.jsonl")).unwrap()
    );
    let timings = fs::read_to_string(dir.path().join("sock.timings.jsonl")).unwrap();
    assert_eq!(timings.lines().count(), 2);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("exp.conf"),
        "# small run\ndataset = synthetic\nm = 3\nn = 1\niter = 1\nbatch-size = 4\noutput = from-file.jsonl\n",
    )
    .unwrap();
    let o = fedshare(&["run", "--config", "exp.conf", "--m", "2"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("from-file.jsonl")).unwrap();
    assert!(text.contains("\"m\":2,\"n\":1"));
    assert!(text.contains("\"batch_size\":4"));
}

#[test]
fn failures_use_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = run_small(dir.path(), "x.jsonl", &["--l", "64", "--lf", "32"]);
    assert_eq!(config.status.code(), Some(2));
    let usage = fedshare(&["run", "--m", "many"], dir.path());
    assert_eq!(usage.status.code(), Some(2));
    fs::write(dir.path().join("bad.conf"), "colour = blue\n").unwrap();
    assert_eq!(fedshare(&["run", "--config", "bad.conf"], dir.path()).status.code(), Some(2));

    let missing = fedshare(&["run", "--dataset", "mnist", "--data-dir", "no/such/dir"], dir.path());
    assert_eq!(missing.status.code(), Some(3));
    let unset = fedshare(&["run", "--dataset", "mnist"], dir.path());
    assert_eq!(unset.status.code(), Some(3));

    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let busy = run_small(
        dir.path(),
        "busy.jsonl",
        &["--transport", "sockets", "--listen-base-port", &port, "--timeout-ms", "3000"],
    );
    assert_eq!(busy.status.code(), Some(4), "{}", String::from_utf8_lossy(&busy.stderr));
}

#[test]
fn emit_table_builds_csv() {
    let dir = tempfile::tempdir().unwrap();
    for m in ["1", "2"] {
        let out = format!("m{m}.jsonl");
        let mut args = vec!["run", "--dataset", "synthetic", "--n", "1", "--iter", "1", "--m", m, "--output", &out];
        args.extend_from_slice(&["--seed", "2"]);
        assert!(fedshare(&args, dir.path()).status.success());
    }
    let o = fedshare(&["emit-table", "--layout", "clients", "m1.jsonl", "m2.jsonl"], dir.path());
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "clients,synthetic");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));
    let bad = fedshare(&["emit-table", "--layout", "centralized", "m1.jsonl", "m2.jsonl"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
}
