use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lot_core::io::{density_to_lgrd, write_atomic};
use lot_core::{DensityGrid, GridGeometry};

fn lot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lot"))
        .args(args)
        .output()
        .expect("run lot binary")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn blob_file(dir: &Path, name: &str, n: usize, cx: f64, cy: f64, s: f64) -> PathBuf {
    let g = GridGeometry::new(n, n).unwrap();
    let grid = DensityGrid::from_fn(g, |x, y| {
        (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
    })
    .unwrap();
    let path = dir.join(name);
    write_atomic(&path, &density_to_lgrd(&grid).to_bytes()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn warp_writes_outputs_and_is_curl_free() {
    let tmp = tempfile::tempdir().unwrap();
    let a = blob_file(tmp.path(), "a.lgrd", 64, 0.45, 0.5, 0.1);
    let b = blob_file(tmp.path(), "b.lgrd", 64, 0.55, 0.5, 0.1);
    let out = tmp.path().join("warp");
    let o = lot(&["warp", s(&a), s(&b), "--out", s(&out), "--levels", "3", "--sigma", "12,4,1", "--eta", "1,0.1,0.01"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["potential.lgrd", "potential.meta", "warped.lgrd", "metrics.csv", "trace.csv", "config.txt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows[0], ["pair_id", "relative_mse", "mass_transported", "mean_abs_curl"]);
    let rel: f64 = rows[1][1].parse().unwrap();
    let curl: f64 = rows[1][3].parse().unwrap();
    assert!(rel < 0.05, "relative mse {rel}");
    assert!(curl <= 1e-6, "curl {curl}");
}

#[test]
fn warp_to_itself_reports_identical_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = blob_file(tmp.path(), "a.lgrd", 16, 0.5, 0.5, 0.2);
    let o = lot(&["warp", s(&a), s(&a), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("identical inputs"));
}

#[test]
fn bad_config_and_missing_files_exit_with_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "seed=3\nnot_a_key=1\n").unwrap();
    let o = lot(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not_a_key"));
    let o = lot(&["lot", s(&tmp.path().join("missing.lgrd"))]);
    assert_eq!(code(&o), 2);
    let o = lot(&["gradcheck", "--set", "levels=2", "--set", "sigma=1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_fails_a_strict_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    let o = lot(&["gradcheck", "--out", s(&out), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("gradcheck.csv"));
    // 2 sizes x 3 widths x 20 entries, plus the header
    assert_eq!(rows.len(), 121);
    let first = fs::read(out.join("gradcheck.csv")).unwrap();
    let o = lot(&["gradcheck", "--out", s(&out), "--seed", "5"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(out.join("gradcheck.csv")).unwrap(), first);
    let o = lot(&["gradcheck", "--out", s(&out), "--set", "gradcheck_tol=0"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn lot_then_invert_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let img = blob_file(tmp.path(), "img.lgrd", 32, 0.55, 0.45, 0.12);
    let out = tmp.path().join("emb");
    let o = lot(&["lot", s(&img), "--out", s(&out), "--levels", "2", "--sigma", "4,1", "--eta", "0.1,0.01"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let inv = tmp.path().join("inv");
    let o = lot(&[
        "invert",
        s(&out.join("embedding.lgrd")),
        "--potential",
        s(&out.join("potential.lgrd")),
        "--out",
        s(&inv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(inv.join("config.txt").exists());
    let rec = lot_core::io::read_density(&inv.join("reconstructed.lgrd")).unwrap();
    let orig = lot_core::io::read_density(&img)
        .unwrap()
        .normalize_mass(1.0, 1e-3 / 1024.0)
        .unwrap();
    assert!((rec.total_mass() - 1.0).abs() < 1e-9);
    let num: f64 = rec.values().iter().zip(orig.values()).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = orig.values().iter().map(|b| b * b).sum();
    assert!(num / den < 0.05, "round trip error {}", num / den);

    let m = tmp.path().join("m");
    let o = lot(&[
        "metrics",
        s(&img),
        s(&out.join("reference.lgrd")),
        "--potential",
        s(&out.join("potential.lgrd")),
        "--out",
        s(&m),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&m.join("metrics.csv")).len(), 2);
}

#[test]
fn gen_gaussians_is_deterministic_with_a_full_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = lot(&["gen-gaussians", "--out", s(dir), "--seed", "11", "--set", "n_per_class=4", "--set", "size=32"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let rows = csv_rows(&a.join("manifest.csv"));
    assert_eq!(rows.len(), 1 + 3 * 4);
    assert_eq!(rows[0], ["path", "label", "peaks", "seed", "centers"]);
    for row in &rows[1..] {
        assert_eq!(fs::read(a.join(&row[0])).unwrap(), fs::read(b.join(&row[0])).unwrap());
        let peaks: usize = row[2].parse().unwrap();
        assert_eq!(row[4].split(';').count(), peaks);
    }
    assert_eq!(fs::read(a.join("manifest.csv")).unwrap(), fs::read(b.join("manifest.csv")).unwrap());
    let o = lot(&["gen-gaussians", "--out", s(&tmp.path().join("c")), "--seed", "12", "--set", "n_per_class=4", "--set", "size=32"]);
    assert_eq!(code(&o), 0);
    assert_ne!(
        fs::read(a.join("class_2/img_0.lgrd")).unwrap(),
        fs::read(tmp.path().join("c/class_2/img_0.lgrd")).unwrap()
    );
}

#[test]
fn classify_caches_solves_and_keeps_its_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let common = ["--set", "n_per_class=6", "--set", "size=32", "--set", "max_iters=40"];
    let mut args = vec!["gen-gaussians", "--out", s(&data)];
    args.extend(common);
    assert_eq!(code(&lot(&args)), 0);
    let out = tmp.path().join("cls");
    let mut args = vec!["classify", s(&data), "--out", s(&out), "--set", "folds=3", "--workers", "2"];
    args.extend(common);
    let first = lot(&args);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert!(String::from_utf8_lossy(&first.stdout).contains("solved=18 cached=0"));
    let rows = csv_rows(&out.join("results.csv"));
    assert_eq!(rows[0], ["dataset", "feature_kind", "classifier", "mean_acc", "std_acc"]);
    assert_eq!(rows.len(), 1 + 2 * 3);
    let results = fs::read(out.join("results.csv")).unwrap();
    let second = lot(&args);
    assert_eq!(code(&second), 0);
    assert!(String::from_utf8_lossy(&second.stdout).contains("solved=0 cached=18"));
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), results);
    assert!(out.join("plda_scatter_potential.csv").exists());
    assert!(out.join("solves.csv").exists());
}
