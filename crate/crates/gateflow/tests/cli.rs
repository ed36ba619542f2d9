use std::path::Path;
use std::process::{Command, Output};

use gateflow_core::sim::SimConfig;

fn gateflow(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gateflow"));
    cmd.args(args).env_remove("GATEFLOW_CONFIG").env("RUST_LOG", "warn");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn gateway_toml(listen: &str, segment_port: u16) -> String {
    format!(
        "listen_addr = \"{listen}\"\nschema = [\"v:float\"]\nconnect_retries = 1\n\n\
         [[segments]]\nid = \"s0\"\nport = {segment_port}\n"
    )
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(code(&run(&mut gateflow(&[]))), 1);
    assert_eq!(code(&run(&mut gateflow(&["frobnicate"]))), 1);
    assert_eq!(code(&run(&mut gateflow(&["serve"]))), 1);
    let help = run(&mut gateflow(&["--help"]));
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("serve"));
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&run(&mut gateflow(&["serve", "--config", missing.to_str().unwrap()]))), 1);
    let no_segments = write(dir.path(), "empty.toml", "schema = [\"v:float\"]\nsegments = []\n");
    let out = run(&mut gateflow(&["serve", "--config", &no_segments]));
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("segment"));
}

#[test]
fn unreachable_segment_exits_3_using_env_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gw.toml", &gateway_toml("127.0.0.1:0", free_port()));
    let out = run(gateflow(&["serve"]).env("GATEFLOW_CONFIG", &cfg));
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn busy_listen_address_exits_2() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gw.toml", &gateway_toml("127.0.0.1:1", free_port()));
    let listen = taken.local_addr().unwrap().to_string();
    let out = run(&mut gateflow(&["serve", "--config", &cfg, "--listen", &listen]));
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn segmentd_reports_config_and_bind_failures() {
    let dir = tempfile::tempdir().unwrap();
    let dup = write(
        dir.path(),
        "dup.toml",
        "[[segments]]\nid = \"a\"\nport = 7001\n\n[[segments]]\nid = \"b\"\nport = 7001\n",
    );
    assert_eq!(code(&run(&mut gateflow(&["segmentd", "--config", &dup]))), 1);

    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port();
    let busy = write(dir.path(), "busy.toml", &format!("[[segments]]\nid = \"a\"\nport = {port}\n"));
    assert_eq!(code(&run(&mut gateflow(&["segmentd", "--config", &busy]))), 2);
}

#[test]
fn simulate_then_gantt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::to_string(&SimConfig::steady(100, 50, 150, 10_000, 2000)).unwrap();
    let cfg = write(dir.path(), "sim.json", &cfg);
    let trace = dir.path().join("trace.json");
    let out = run(&mut gateflow(&["simulate", "--config", &cfg, "--out", trace.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = String::from_utf8_lossy(&out.stdout);
    assert!(summary.contains("final_slots=3") && summary.contains("optimal_slots=3"), "{summary}");

    let out = run(&mut gateflow(&["gantt", "--trace", trace.to_str().unwrap(), "--to-ms", "1000"]));
    assert_eq!(code(&out), 0);
    let chart = String::from_utf8_lossy(&out.stdout);
    assert_eq!(chart.lines().filter(|l| l.starts_with("slot")).count(), 3, "{chart}");
    assert!(chart.contains('S') && chart.contains('m'));

    let bad = write(dir.path(), "bad.json", "{\"interval_us\": 0}");
    assert_eq!(code(&run(&mut gateflow(&["simulate", "--config", &bad, "--out", "/dev/null"]))), 1);
}

#[test]
fn bench_rejects_unordered_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(
        dir.path(),
        "bench.toml",
        "nodes = [2, 1]\nrows_per_node = 10\n\n[segment]\ncommit_per_row_us = 1\n",
    );
    let out = run(&mut gateflow(&["bench", "--scenario", &scenario]));
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("increasing"));
}

#[test]
fn small_bench_reports_a_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(
        dir.path(),
        "bench.toml",
        "nodes = [1, 2]\nrows_per_node = 2000\n\n[segment]\ncommit_per_row_us = 20\n",
    );
    let report_path = dir.path().join("report.json");
    let out = run(&mut gateflow(&["bench", "--scenario", &scenario, "--out", report_path.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report_path).unwrap()).unwrap();
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert!(report["scalability"][0]["p"].as_f64().unwrap() > 0.0);
}
