//! End-to-end tests of the `tinysol` binary against the embedded corpus
//! sources on disk.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../tinysol/corpus")
}

fn tinysol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinysol"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn run_untyped_and_typed() {
    let cp = corpus();
    let lat = cp.join("two.lat");
    let file = cp.join("bank.tsol");
    let tx = cp.join("bank.tx");
    for extra in [&[][..], &["--typed", "--assert-preservation"][..]] {
        let mut args = vec![
            "run",
            file.to_str().unwrap(),
            "--lattice",
            lat.to_str().unwrap(),
            "--tx",
            tx.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let out = tinysol(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("status: terminated"));
    }
}

#[test]
fn typed_run_sticks_on_unsafe_delegate_call() {
    let cp = corpus();
    let out = tinysol(&[
        "run",
        "--typed",
        cp.join("pmw.tsol").to_str().unwrap(),
        "--lattice",
        cp.join("two.lat").to_str().unwrap(),
        "--tx",
        cp.join("pmw.tx").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("r-dcall"));
}

#[test]
fn typecheck_exit_codes() {
    let cp = corpus();
    let ok = tinysol(&[
        "typecheck",
        cp.join("flows.tsol").to_str().unwrap(),
        "--lattice",
        cp.join("two.lat").to_str().unwrap(),
    ]);
    assert!(ok.status.success());
    assert!(stdout(&ok).contains("well-typed"));

    let bad = tinysol(&[
        "typecheck",
        cp.join("flows.tsol").to_str().unwrap(),
        "--lattice",
        cp.join("two.lat").to_str().unwrap(),
        "--stm",
        "this.lo := this.hi",
        "--explain",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("ill-typed:"));
}

#[test]
fn certify_verify_and_ledger_round_trip() {
    let cp = corpus();
    let dir = tempfile::tempdir().unwrap();
    let cert = dir.path().join("proxy.cert.json");
    let store = dir.path().join("ledger.jsonl");
    let proxy = cp.join("proxy.tsol");
    let lat = cp.join("two.lat");

    let out = tinysol(&[
        "certify",
        proxy.to_str().unwrap(),
        "--lattice",
        lat.to_str().unwrap(),
        "--entry",
        "call Proxy.ping()$0",
        "--caller",
        "A",
        "--out",
        cert.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = tinysol(&[
        "verify-cert",
        proxy.to_str().unwrap(),
        "--lattice",
        lat.to_str().unwrap(),
        cert.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("certificate OK"));

    for args in [
        vec!["ledger", "init", "--store", store.to_str().unwrap()],
        vec![
            "ledger",
            "append",
            proxy.to_str().unwrap(),
            "--lattice",
            lat.to_str().unwrap(),
            "--store",
            store.to_str().unwrap(),
            "--cert",
            cert.to_str().unwrap(),
        ],
        vec!["ledger", "verify", "--store", store.to_str().unwrap()],
    ] {
        let out = tinysol(&args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let out = tinysol(&[
        "client-check",
        proxy.to_str().unwrap(),
        "--lattice",
        lat.to_str().unwrap(),
        "--store",
        store.to_str().unwrap(),
        "--stm",
        "call Proxy.ping()$0",
        "--caller",
        "A",
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("accepted"));
}

#[test]
fn ci_reports_divergence_for_takeover_variant() {
    let cp = corpus();
    let out = tinysol(&[
        "ci",
        cp.join("pmw.tsol").to_str().unwrap(),
        "--lattice",
        cp.join("two.lat").to_str().unwrap(),
        "--trusted",
        "Proxy",
        "--tx",
        cp.join("pmw.tx").to_str().unwrap(),
        "--mutations",
        "20",
        "--seed",
        "7",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));
    assert!(stdout(&out).contains("divergence"));
}
