use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn nets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../nets")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilestream"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&out.stderr));
    })
}

fn write_net(dir: &tempfile::TempDir, text: &str) -> String {
    let path = dir.path().join("net.txt");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const SMALL: &str = "split=4 dtype=f64\nconv out=4 k=3 stride=1 bias\nrelu\nmaxpool k=2 stride=2\nconv out=3 k=3\nlinear out=5\n";

#[test]
fn equiv_passes_on_a_tiled_input() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_net(&dir, SMALL);
    let out = run(&["equiv", "--net", &net, "--input", "random:60x60:3", "--tiles", "2x2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    assert_eq!(report["pass"], true);
    assert_eq!(report["tiles"], 4);
    assert!(report["max_abs_forward_diff"].as_f64().unwrap() <= 1e-12);
    assert!(report["max_abs_grad_diff"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn grid_is_an_upper_bound_on_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_net(&dir, SMALL);
    let report = json(&run(&["equiv", "--net", &net, "--input", "random:20x20:1", "--tiles", "9x9"]));
    assert_eq!(report["pass"], true);
    let grid: Vec<u64> = serde_json::from_value(report["grid"].clone()).unwrap();
    assert!(grid.iter().all(|&g| (2..=9).contains(&g)));
}

#[test]
fn single_tile_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_net(&dir, SMALL);
    let out = run(&["equiv", "--net", &net, "--input", "random:40x40:1", "--tiles", "1x1"]);
    let report = json(&out);
    assert_eq!(report["max_abs_forward_diff"], 0.0);
    assert_eq!(report["max_abs_grad_diff"], 0.0);
    assert_eq!(report["max_abs_input_grad_diff"], 0.0);
}

#[test]
fn reduced_overlap_exits_with_equivalence_failure() {
    let out = run(&[
        "equiv", "--net", nets().join("bench3.net").to_str().unwrap(),
        "--input", "random:64x64:2", "--tiles", "2x2", "--reduce-overlap", "2", "--dtype", "f64",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(&out)["pass"], false);
}

#[test]
fn dump_writes_tensor_files() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_net(&dir, SMALL);
    let dump = dir.path().join("dump");
    let out = run(&[
        "equiv", "--net", &net, "--input", "random:48x48:5", "--tiles", "2x1",
        "--dump", dump.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let full: tilestream::Tensor<f64> = tilestream::sten::read(&dump.join("input_grad_full.sten")).unwrap();
    assert_eq!(full.shape(), &[1, 3, 48, 48]);
}

#[test]
fn probe_reports_stride_and_borders() {
    let out = run(&["probe", "--net", nets().join("table2.net").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    assert_eq!(report["output_stride"], serde_json::json!([16, 16]));

    let dir = tempfile::tempdir().unwrap();
    let net = write_net(&dir, "split=2 dtype=f64\nconv out=1 k=3\nconv out=1 k=3\n");
    let report = json(&run(&["probe", "--net", &net, "--rank", "1"]));
    assert_eq!(report["forward_overlap"], serde_json::json!([4]));
}

#[test]
fn saliency_map_matches_input_extent() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_net(&dir, SMALL);
    let map = dir.path().join("map.sten");
    let out = run(&[
        "saliency", "--net", &net, "--input", "random:50x44:7", "--tiles", "2x2", "--class", "2",
        "--out", map.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let t: tilestream::Tensor<f64> = tilestream::sten::read(&map).unwrap();
    assert_eq!(t.shape(), &[50, 44]);
    assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn bench_repeats_report_identical_peaks() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_net(&dir, SMALL);
    let out = run(&["bench", "--net", &net, "--sizes", "64", "--tiles", "64,28", "--repeats", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("input,tile,n_tiles,repeat,forward_ms,backward_ms,peak_bytes,shape_only")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][6], rows[1][6]);
    assert_eq!(rows[2][6], rows[3][6]);
    assert_ne!(rows[0][2], rows[2][2]);
}

#[test]
fn ledger_file_records_events() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_net(&dir, SMALL);
    let ledger = dir.path().join("ledger.json");
    let out = run(&[
        "--ledger", ledger.to_str().unwrap(), "equiv", "--net", &net, "--input", "random:32x32:1",
        "--tiles", "1x2",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&std::fs::read(&ledger).unwrap()).unwrap();
    assert!(v["report"]["peak_bytes"].as_u64().unwrap() > 0);
    assert!(!v["events"].as_array().unwrap().is_empty());
}

#[test]
fn train_demo_prints_epoch_rows() {
    let out = run(&["train-demo", "--epochs", "1", "--samples", "10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("epoch,loss_full,loss_stream"));
}

#[test]
fn malformed_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_net(&dir, "split=1 dtype=f64\nconv out=2 k=three\n");
    assert_eq!(run(&["probe", "--net", &bad]).status.code(), Some(2));

    let net = write_net(&dir, SMALL);
    let wrong_rank = run(&["equiv", "--net", &net, "--input", "random:20x20:1", "--tiles", "2x2x2"]);
    assert_eq!(wrong_rank.status.code(), Some(2));
    let too_small = run(&["equiv", "--net", &net, "--input", "random:4x4:1", "--tiles", "1x1"]);
    assert_eq!(too_small.status.code(), Some(2));

    let missing = run(&["equiv", "--net", &net, "--input", "/nonexistent/x.sten", "--tiles", "1x1"]);
    assert_eq!(missing.status.code(), Some(4));
}
