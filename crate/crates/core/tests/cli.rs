mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use common::*;

fn gasbound(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gasbound")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn bounded_contract_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "counter.asm", &counter_loops()[0].asm);
    let out = gasbound(&["--format", "json", &f]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["schema_version"], 1);
    let func = &v["contracts"][0]["functions"][0];
    assert_eq!(func["opcode"]["class"], "parametric");
    assert_eq!(v["aggregate"]["functions"], 1);
}

#[test]
fn unbounded_contract_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "loop.asm", UNRANKABLE_LOOP);
    let out = gasbound(&["--format", "json", &f]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["contracts"][0]["functions"][0]["opcode"]["class"], "termination_unknown");
}

#[test]
fn input_errors_exit_two() {
    assert_eq!(gasbound(&[]).status.code(), Some(2));
    assert_eq!(gasbound(&["/nonexistent/file.hex"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "bad.hex", "60zz");
    assert_eq!(gasbound(&[&f]).status.code(), Some(2));
}

#[test]
fn empty_directory_reports_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = gasbound(&["--format", "json", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["contracts"].as_array().unwrap().len(), 0);
    assert_eq!(v["aggregate"]["functions"], 0);
}

#[test]
fn no_timings_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.asm", STRAIGHT_LINE[0].1);
    write(dir.path(), "b.asm", &counter_loops()[0].asm);
    write(dir.path(), "c.asm", UNRANKABLE_LOOP);
    let d = dir.path().to_str().unwrap();
    let one = gasbound(&["--format", "json", "--no-timings", "--jobs", "3", d]);
    let two = gasbound(&["--format", "json", "--no-timings", d]);
    assert_eq!(one.stdout, two.stdout);
    let v = json(&one);
    assert_eq!(v["aggregate"]["contracts"], 3);
    let table = gasbound(&["--no-timings", d]);
    assert_eq!(table.status.code(), Some(1));
    assert!(!table.stdout.is_empty());
}

#[test]
fn dump_replaces_report() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "counter.asm", &counter_loops()[0].asm);
    let out = gasbound(&["--dump", "crs", &f]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(" = "), "{text}");
    assert!(!text.contains("schema_version"));
}

#[test]
fn solve_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "f.crs", "f(x) = 5 + f(x') {x' = x - 1, x >= 1}\nf(x) = 2 {x <= 0}\n");
    let out = gasbound(&["solve", &f]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "2 + 5*nat(x)");
    let g = write(dir.path(), "g.crs", "g(x) = 1 + g(x') {x' = x + 1}\ng(x) = 0 {x <= 0}\n");
    assert_eq!(gasbound(&["solve", &g]).status.code(), Some(1));
}

#[test]
fn meter_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "counter.asm", &counter_loops()[0].asm);
    let out = gasbound(&["meter", &f, "--storage", "0=3"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let zero = json(&gasbound(&["meter", &f]));
    assert!(v["gas_used"].as_u64().unwrap() > zero["gas_used"].as_u64().unwrap());
}
