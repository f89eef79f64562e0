use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use esck::io::parse_libsvm;

fn esck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esck"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// 40 rows, 6 features, two classes separated by feature 1.
fn toy_dataset(dir: &Path) -> PathBuf {
    let mut text = String::new();
    for i in 0..40 {
        let y = if i % 2 == 0 { 1 } else { -1 };
        let f1 = y as f64 * (1.0 + (i % 5) as f64 * 0.1);
        text.push_str(&format!("{y} 1:{f1} {}:0.{}\n", 2 + i % 5, 1 + i % 9));
    }
    let path = dir.join("toy.svm");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn sketch_writes_matrix_and_consistent_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("three.svm");
    fs::write(&data, "1 1:1 3:2\n-1 2:0.5 4:1\n1 1:3 2:1 4:-2\n").unwrap();
    let out = dir.path().join("sketched.svm");
    let res = esck(&[
        "sketch",
        "--data",
        s(&data),
        "--method",
        "countsketch",
        "--r",
        "2",
        "--seeds",
        "7",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let sketched = parse_libsvm(&out, Some(2)).unwrap();
    assert_eq!((sketched.n(), sketched.d()), (3, 2));
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sketched.svm.json")).unwrap()).unwrap();
    let recorded = sidecar["sparsity_rate"].as_f64().unwrap();
    assert_eq!(recorded, sketched.features.sparsity_rate().unwrap());
    assert_eq!(sidecar["method"], "countsketch");
    assert_eq!(sidecar["seed"], 7);
    assert!(sidecar["config"].as_str().unwrap().contains("countsketch"));
}

#[test]
fn sketch_with_esck_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let out = dir.path().join("e.svm");
    let res = esck(&[
        "sketch",
        "--data",
        s(&data),
        "--method",
        "esck_full",
        "--r",
        "3",
        "--lambda",
        "5",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let sketched = parse_libsvm(&out, Some(3)).unwrap();
    assert_eq!(sketched.n(), 40);
}

#[test]
fn empty_input_is_a_degenerate_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.svm");
    fs::write(&data, "").unwrap();
    let out = dir.path().join("o.svm");
    let res = esck(&[
        "sketch",
        "--data",
        s(&data),
        "--method",
        "countsketch",
        "--r",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("degenerate shape"));
}

#[test]
fn parse_errors_carry_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.svm");
    fs::write(&data, "1 1:1\n1 3:1 2:1\n").unwrap();
    let res = esck(&["bench", "--data", s(&data), "--out", s(&dir.path().join("r.csv"))]);
    assert_eq!(code(&res), 1);
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("bad.svm:2"), "{err}");
}

#[test]
fn bench_single_cell_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let out = dir.path().join("r.csv");
    let before = fs::read(&data).unwrap();
    let res = esck(&[
        "bench",
        "--data",
        s(&data),
        "--method",
        "countsketch",
        "--r",
        "3",
        "--seeds",
        "1",
        "--c-grid",
        "0.1,10",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(
        rows[0],
        "dataset,method,r,acc_mean,acc_std,sparsity,embed_ms,predict_us"
    );
    assert!(rows[1].contains(",countsketch,3,"));
    assert_eq!(fs::read(&data).unwrap(), before);
}

#[test]
fn failing_cells_exit_with_two_and_are_logged() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let out = dir.path().join("r.csv");
    let res = esck(&[
        "bench",
        "--data",
        s(&data),
        "--method",
        "countsketch",
        "--r",
        "3,50",
        "--c-grid",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 2);
    let errors = fs::read_to_string(dir.path().join("r.csv.errors.txt")).unwrap();
    assert!(errors.contains("r=50"), "{errors}");
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 2);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let out = dir.path().join("r.json");
    let config = dir.path().join("exp.toml");
    fs::write(
        &config,
        format!(
            "data = {:?}\nmethods = [\"gaussian\"]\nr = [2]\nc_grid = [1.0]\nformat = \"json\"\nout = {:?}\n",
            s(&data),
            s(&out)
        ),
    )
    .unwrap();
    let res = esck(&["bench", "--config", s(&config), "--r", "4"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let reports = esck::io::read_report_json(&out).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].r, 4);
    assert_eq!(reports[0].method, "gaussian");
}

#[test]
fn lambda_sweep_has_one_row_per_radius_and_method() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let out = dir.path().join("sweep.csv");
    let res = esck(&[
        "sweep",
        "--axis",
        "lambda",
        "--data",
        s(&data),
        "--method",
        "countsketch,esck_full",
        "--r",
        "3",
        "--lambda",
        "10,20,30,40",
        "--c-grid",
        "1",
        "--iters",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 8);
    for method in ["countsketch", "esck_full"] {
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some(method)).count(), 4);
    }
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    assert_eq!(
        code(&esck(&[
            "bench",
            "--data",
            s(&data),
            "--method",
            "pca",
            "--out",
            "x.csv"
        ])),
        1
    );
    assert_eq!(code(&esck(&["bench", "--data", s(&data)])), 1);
    assert_eq!(code(&esck(&["bench", "--out", "x.csv"])), 1);
    assert_eq!(code(&esck(&["frobnicate"])), 1);
    assert_eq!(code(&esck(&["--help"])), 0);
}
