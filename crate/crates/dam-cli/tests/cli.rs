// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! End to end runs of the `dam` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dam"))
        .args(args)
        .output()
        .expect("running the dam binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("the binary was killed by a signal")
}

fn write_program(dir: &Path, name: &str, source: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, source).expect("writing a test program");
    path
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../programs").join(name)
}

#[test]
fn a_lam_file_and_its_compiled_table_run_identically() {
    let dir = tempfile::tempdir().unwrap();
    let lam = write_program(dir.path(), "id.lam", "(fn x. x) (fn x. fn y. x)");
    let table = dir.path().join("id.dam");

    let compiled = dam(&["compile", lam.to_str().unwrap(), "-o", table.to_str().unwrap()]);
    assert_eq!(code(&compiled), 0, "{}", stderr(&compiled));
    assert!(table.exists());

    for machine in ["ces", "cesh"] {
        let from_lam = dam(&["run", lam.to_str().unwrap(), "--machine", machine]);
        let from_dam = dam(&["run", table.to_str().unwrap(), "--machine", machine]);
        assert_eq!(code(&from_lam), 0);
        assert_eq!(stdout(&from_lam), stdout(&from_dam), "machine {}", machine);
        assert!(stdout(&from_lam).contains("steps: 5"));
        assert!(stdout(&from_lam).contains("value: clos code="));
    }
}

#[test]
fn each_outcome_has_its_exit_code() {
    let dir = tempfile::tempdir().unwrap();

    let halts = write_program(dir.path(), "halts.lam", "(fn x. x) 4");
    let o = dam(&["run", halts.to_str().unwrap(), "--machine", "ces"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("value: nat 4"));

    let spins = write_program(dir.path(), "spins.lam", "(fn x. x x) (fn x. x x)");
    let o = dam(&["run", spins.to_str().unwrap(), "--machine", "cesh", "--fuel", "50"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("fuel: exhausted"));

    let stuck = write_program(dir.path(), "stuck.lam", "1 2");
    let o = dam(&["run", stuck.to_str().unwrap(), "--machine", "ces"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("stuck: application of a non-closure"));

    let o = dam(&["run", dir.path().join("absent.lam").to_str().unwrap(), "--machine", "ces"]);
    assert_eq!(code(&o), 4);

    let bad = write_program(dir.path(), "bad.lam", "fn . x");
    let o = dam(&["run", bad.to_str().unwrap(), "--machine", "ces"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("error:"));

    // usage errors share the configuration exit, keeping 2 for fuel alone
    let o = dam(&["run", halts.to_str().unwrap(), "--machine", "bogus"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn traces_follow_the_documented_line_format() {
    let dir = tempfile::tempdir().unwrap();
    let id = write_program(dir.path(), "id.lam", "(fn x. x) (fn x. fn y. x)");

    let o = dam(&["run", id.to_str().unwrap(), "--machine", "ces", "--trace"]);
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().map(str::trim_end).collect();
    assert_eq!(lines[0], "t=1 machine=ces rule=CLOS");
    assert_eq!(lines[4], "t=5 machine=ces rule=RET");

    let remote = write_program(dir.path(), "rid.lam", "((fn x. x) @ B) 4");
    let o = dam(&["run", remote.to_str().unwrap(), "--machine", "dcesh", "--nodes", "A,B", "--trace"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.starts_with("t=1 kind=comm node=A recv=B rule=REMOTE-send/REMOTE-receive msg=REMOTE("));
    assert!(out.contains("kind=silent node=B rule=CLOS"));
    assert!(out.contains("steps: 7"));
    assert!(out.contains("value: nat 4"));

    let o = dam(&[
        "run", remote.to_str().unwrap(), "--machine", "dcesh", "--nodes", "A,B", "--net", "async",
        "--trace",
    ]);
    let out = stdout(&o);
    assert!(out.contains("kind=async-send node=A rule=REMOTE-send"));
    assert!(out.contains("inflight=1"));
    assert!(out.contains("kind=async-recv node=B rule=REMOTE-receive"));
    assert!(out.contains("steps: 11"));
    assert!(out.contains("value: nat 4"));

    // every send is matched, so the counter must end at zero
    let last_comm = out.lines().filter(|l| l.starts_with("t=")).last().unwrap();
    assert!(last_comm.ends_with("inflight=0"));
}

#[test]
fn the_single_node_machine_rejects_placement() {
    let dir = tempfile::tempdir().unwrap();
    let remote = write_program(dir.path(), "rid.lam", "((fn x. x) @ B) 4");
    for machine in ["ces", "cesh", "dcesh1"] {
        let o = dam(&["run", remote.to_str().unwrap(), "--machine", machine]);
        assert_eq!(code(&o), 4, "machine {}", machine);
        assert!(stderr(&o).contains("placement"), "machine {}", machine);
    }
}

#[test]
fn the_network_is_validated_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let remote = write_program(dir.path(), "rid.lam", "((fn x. x) @ B) 4");

    let o = dam(&["run", remote.to_str().unwrap(), "--machine", "dcesh", "--nodes", "A"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("places work on B"));

    let o = dam(&["run", remote.to_str().unwrap(), "--machine", "dcesh", "--nodes", "A,B", "--root", "C"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("root C is not among the nodes"));

    let id = write_program(dir.path(), "id.lam", "(fn x. x) 4");
    let o = dam(&["run", id.to_str().unwrap(), "--machine", "ces", "--net", "sync"]);
    assert_eq!(code(&o), 4);

    let o = dam(&["run", id.to_str().unwrap(), "--machine", "dcesh1", "--net", "sync"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn check_agrees_over_a_seed_range() {
    let o = dam(&["check", "--seeds", "0..10", "--size", "20", "--fuel", "5000"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let agreed = out.lines().filter(|l| l.contains("verdict=all-agree")).count();
    assert_eq!(agreed, 10);
    assert!(out.contains("checked 10 programs: 0 failures"));
}

#[test]
fn check_accepts_a_single_file() {
    let o = dam(&["check", shipped("factorial_remote.lam").to_str().unwrap(), "--fuel", "30000"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("verdict=all-agree"));
    assert!(out.contains("value=nat:120"));
}

#[test]
fn generated_programs_are_deterministic_and_compile() {
    let first = dam(&["gen", "--seed", "5", "--size", "25"]);
    let second = dam(&["gen", "--seed", "5", "--size", "25"]);
    assert_eq!(code(&first), 0);
    assert_eq!(stdout(&first), stdout(&second));

    let dir = tempfile::tempdir().unwrap();
    let path = write_program(dir.path(), "gen.lam", &stdout(&first));
    let o = dam(&["compile", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn the_shipped_factorial_crosses_the_network() {
    let remote = shipped("factorial_remote.lam");
    let o = dam(&[
        "run", remote.to_str().unwrap(), "--machine", "dcesh", "--nodes", "A,B", "--fuel", "30000",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("value: nat 120"));

    let o = dam(&[
        "run", remote.to_str().unwrap(), "--machine", "dcesh", "--nodes", "A,B", "--net", "async",
        "--seed", "11", "--fuel", "30000",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("value: nat 120"));
}
