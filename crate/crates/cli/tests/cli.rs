use std::path::Path;
use std::process::{Command, Output};

use tilefuse::tensor::codt;
use tilefuse::{Matrix, Precision};
use tilefuse_cli::{Report, TrafficRow, REPORT_VERSION, TRAFFIC_HEADER};

fn tilefuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilefuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn report(out: &Output) -> Report {
    Report::from_json(std::str::from_utf8(&out.stdout).unwrap()).expect("report parses")
}

#[test]
fn verify_default_passes_with_json_schema() {
    let out = tilefuse(&["verify", "--json-out", "-"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let r = report(&out);
    assert_eq!(r.version, REPORT_VERSION);
    assert!(r.checks.iter().all(|c| c.pass));
    let names: Vec<&str> = r.checks.iter().map(|c| c.name.as_str()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    for prefix in [
        "oracle/",
        "commutation/",
        "relocation/",
        "gradient/fd/",
        "tile_invariance/",
        "lse/",
        "traffic/",
    ] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "no {prefix} checks");
    }
    let raw: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["version", "seed", "checks", "environment"] {
        assert!(raw.get(key).is_some(), "missing {key}");
    }
    assert!(raw["environment"].get("precision").is_some());
}

#[test]
fn verify_is_deterministic() {
    let a = tilefuse(&["verify", "--seed", "17", "--json-out", "-"]);
    let b = tilefuse(&["verify", "--seed", "17", "--json-out", "-"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&tilefuse(&["verify", "--tile", "0"])), 2);
    assert_eq!(code(&tilefuse(&["verify", "--tile", "4x3"])), 2);
    assert_eq!(code(&tilefuse(&["verify", "--sizes", "2..1"])), 2);
    assert_eq!(code(&tilefuse(&["numerics", "--shape", "16"])), 2);
    assert_eq!(code(&tilefuse(&["traffic", "--reduction-tile", "0"])), 2);
    assert_eq!(code(&tilefuse(&["demo", "--config", "/definitely/missing.json"])), 2);
    assert_eq!(code(&tilefuse(&["frobnicate"])), 2);
}

#[test]
fn numerics_exact_mode_has_no_error() {
    let out = tilefuse(&[
        "numerics",
        "--precision",
        "f64",
        "--trials",
        "3",
        "--shape",
        "8x32",
        "--json-out",
        "-",
    ]);
    assert_eq!(code(&out), 0);
    let r = report(&out);
    assert_eq!(r.environment.precision, Precision::Exact64);
    assert!(r.checks[0].metric <= 1e-12);
}

#[test]
fn numerics_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.json");
    let out = tilefuse(&[
        "numerics",
        "--trials",
        "8",
        "--shape",
        "16x64",
        "--json-out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&path).unwrap();
    let r = Report::from_json(&text).unwrap();
    assert_eq!(r.to_json(), text);
    let details = r.details.unwrap();
    assert_eq!(details["trials"].as_array().unwrap().len(), 8);
    assert!(details["summary"]["median_ratio"].as_f64().unwrap() <= 1.0);
}

#[test]
fn traffic_csv() {
    let empty = tilefuse(&["traffic", "--shape-grid", ""]);
    assert_eq!(code(&empty), 0);
    assert_eq!(
        String::from_utf8(empty.stdout).unwrap().trim(),
        TRAFFIC_HEADER.join(",")
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let out = tilefuse(&[
        "traffic",
        "--shape-grid",
        "1024x256,1024x512x1000",
        "--csv-out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let mut rdr = csv::Reader::from_path(&path).unwrap();
    let rows: Vec<TrafficRow> = rdr.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[7].vocab, 1000);
    for r in &rows {
        assert!(r.fused_bytes < r.canonical_bytes, "{r:?}");
        assert_eq!(r.byte_delta, r.fused_bytes as i128 - r.canonical_bytes as i128);
    }
}

#[test]
fn default_traffic_grid_has_the_large_shapes() {
    let out = tilefuse(&["traffic"]);
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    let rows: Vec<TrafficRow> = rdr.deserialize().collect::<Result<_, _>>().unwrap();
    let ds: Vec<usize> = rows.iter().filter(|r| r.pipeline == "grrg").map(|r| r.d).collect();
    assert_eq!(ds, vec![2048, 4096, 8192]);
    assert!(rows.iter().all(|r| r.tokens == 16384 && r.ratio < 1.0));
}

fn load(dir: &Path, name: &str) -> Matrix {
    codt::load(dir.join(format!("{name}.codt")))
        .unwrap()
        .into_matrix()
        .unwrap()
}

#[test]
fn demo_writes_and_checks_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = tilefuse(&[
        "demo",
        "--check",
        "--tensor-out",
        out_dir.to_str().unwrap(),
        "--json-out",
        "-",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let r = report(&out);
    assert!(r.checks.iter().any(|c| c.name == "gradient/fd/dx" && c.pass));
    for name in [
        "q", "residual", "dx", "dz", "dw_o", "dgamma1", "dw_gu", "dw_dn", "dgamma2", "dw_qkv",
    ] {
        assert!(out_dir.join(format!("{name}.codt")).exists(), "{name} missing");
    }
    assert_eq!(load(&out_dir, "q").shape(), (8, 48));
}

#[test]
fn demo_reads_inputs_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"d": 4, "ffn": 6, "tokens": 3, "tile_shape": {"tile_m": 2, "tile_n": 2}}"#,
    )
    .unwrap();
    let inputs = dir.path().join("in");
    std::fs::create_dir(&inputs).unwrap();
    let x = Matrix::zeros(3, 4, Precision::Exact64);
    codt::save_matrix(inputs.join("x.codt"), &x).unwrap();
    codt::save_matrix(inputs.join("z.codt"), &x).unwrap();
    let out_dir = dir.path().join("out");
    let out = tilefuse(&[
        "demo",
        "--config",
        cfg.to_str().unwrap(),
        "--tensor-in",
        inputs.to_str().unwrap(),
        "--tensor-out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // zero input and zero residual stream leave everything at zero
    assert!(load(&out_dir, "residual").as_slice().iter().all(|&v| v == 0.0));
    assert!(load(&out_dir, "q").as_slice().iter().all(|&v| v == 0.0));

    let bad = dir.path().join("bad");
    std::fs::create_dir(&bad).unwrap();
    codt::save_matrix(bad.join("x.codt"), &Matrix::zeros(2, 2, Precision::Exact64)).unwrap();
    let out = tilefuse(&[
        "demo",
        "--config",
        cfg.to_str().unwrap(),
        "--tensor-in",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}
