use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_blurry-edges"));
    c.env("BE_LOG", "info");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, v: Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

/// Small workload so the depth runs finish in seconds.
fn fast_config(dir: &Path, width: usize, stride: usize) -> PathBuf {
    write_config(
        dir,
        "fast.json",
        json!({
            "seed": 3,
            "dataset": { "count": 1, "width": width, "height": width, "shapes": [1, 1] },
            "fit": { "stride": stride, "restarts": 2, "outer_iterations": 1 }
        }),
    )
}

fn read_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_count_zero_writes_empty_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("ds");
    let o = run(&["synth", "--count", "0", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: Value = serde_json::from_slice(&read_bytes(&out.join("manifest.json"))).unwrap();
    assert_eq!(m["scenes"].as_array().unwrap().len(), 0);
    assert!(out.join("config.json").exists());
}

#[test]
fn zero_photon_level_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "a.json",
        json!({ "dataset": { "alpha_range": [0.0, 0.0] } }),
    );
    let o = run(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("invalid configuration"), "{}", stderr(&o));
}

#[test]
fn equal_powers_are_singular() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "r.json",
        json!({ "optics": { "rho_plus": 10.0, "rho_minus": 10.0 } }),
    );
    let o = run(&[
        "synth",
        "--count",
        "1",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("singular optics"), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "u.json", json!({ "fit": { "stirde": 3 } }));
    let o = run(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stirde"), "{}", stderr(&o));
}

#[test]
fn effective_config_reflects_overrides() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let o = run(&[
        "synth",
        "--count",
        "0",
        "--seed",
        "42",
        "--profile",
        "supervised",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c: Value = serde_json::from_slice(&read_bytes(&out.join("config.json"))).unwrap();
    assert_eq!(c["seed"], 42);
    assert_eq!(c["fit"]["profile"], "supervised");
}

const DEPTH_FILES: [&str; 8] = [
    "boundary.f32",
    "color_plus.f32",
    "color_minus.f32",
    "derivative.f32",
    "depth_sparse.f32",
    "depth_dense.f32",
    "confidence.f32",
    "fit.json",
];

#[test]
fn synth_depth_eval_roundtrip_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = fast_config(tmp.path(), 147, 8);
    let ds = tmp.path().join("ds");
    let o = run(&["synth", "--config", s(&cfg), "--out", s(&ds)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let depth = |out: &Path| {
        let o = run(&[
            "depth",
            "--config",
            s(&cfg),
            "--dataset",
            s(&ds),
            "--threads",
            "1",
            "--out",
            s(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    depth(&a);
    depth(&b);
    for f in DEPTH_FILES
        .iter()
        .chain(&["depth_sparse.png", "boundary.png", "color_plus.png"])
    {
        let (pa, pb) = (a.join("scene_0000").join(f), b.join("scene_0000").join(f));
        assert_eq!(read_bytes(&pa), read_bytes(&pb), "{f} differs between runs");
    }
    assert!(a.join("config.json").exists());

    let ev = tmp.path().join("ev");
    let o = run(&[
        "eval",
        "--config",
        s(&cfg),
        "--pred",
        s(&a),
        "--gt",
        s(&ds),
        "--out",
        s(&ev),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Value = serde_json::from_slice(&read_bytes(&ev.join("metrics.json"))).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["scene"], "all");
    assert!(read_bytes(&ev.join("metrics.csv")).starts_with(b"scene,status"));
}

#[test]
fn synth_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = fast_config(tmp.path(), 64, 8);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["synth", "--config", s(&cfg), "--count", "2", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in [
        "manifest.json",
        "scene_0001/noisy_plus.f32",
        "scene_0001/depth.f32",
        "scene_0000/scene.json",
    ] {
        assert_eq!(read_bytes(&a.join(f)), read_bytes(&b.join(f)), "{f}");
    }
}

#[test]
fn large_input_takes_block_path() {
    let tmp = TempDir::new().unwrap();
    // The block count depends on the patch stride; 2 is the default.
    let cfg = fast_config(tmp.path(), 267, 2);
    let ds = tmp.path().join("ds");
    assert!(run(&["synth", "--config", s(&cfg), "--out", s(&ds)]).status.success());
    let scene = ds.join("scene_0000");
    let out = tmp.path().join("d");
    let o = run(&[
        "depth",
        "--config",
        s(&cfg),
        "--plus",
        s(&scene.join("noisy_plus.f32")),
        "--minus",
        s(&scene.join("noisy_minus.f32")),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("n_b = 2"), "{}", stderr(&o));
    for f in DEPTH_FILES {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

fn write_field(p: &Path, w: usize, h: usize, data: &[f64]) {
    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
    let field = blurry_edges::grid::Field {
        width: w,
        height: h,
        data: data.to_vec(),
    };
    blurry_edges::io::write_field(p, &field).unwrap();
}

#[test]
fn eval_missing_file_names_it() {
    let tmp = TempDir::new().unwrap();
    let gt = tmp.path().join("gt");
    write_field(&gt.join("depth.f32"), 2, 2, &[1.0; 4]);
    let pred = tmp.path().join("nope");
    let o = run(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&gt),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("depth_sparse.f32"), "{}", stderr(&o));
}

#[test]
fn eval_perfect_prediction_and_flagged_scene() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        json!({ "dataset": { "count": 2, "width": 32, "height": 32 } }),
    );
    let gt = tmp.path().join("gt");
    assert!(run(&["synth", "--config", s(&cfg), "--out", s(&gt)]).status.success());
    let pred = tmp.path().join("pred");
    for k in 0..2 {
        let name = format!("scene_{k:04}");
        let truth = blurry_edges::io::read_field(&gt.join(&name).join("depth.f32")).unwrap();
        let z = if k == 0 {
            truth.data.clone()
        } else {
            vec![f64::NAN; 1024]
        };
        write_field(&pred.join(&name).join("depth_sparse.f32"), 32, 32, &z);
        write_field(&pred.join(&name).join("confidence.f32"), 32, 32, &[1.0; 1024]);
    }
    let ev = tmp.path().join("ev");
    let o = run(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&ev)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Value = serde_json::from_slice(&read_bytes(&ev.join("metrics.json"))).unwrap();
    let r0 = &rows[0];
    assert_eq!(r0["status"], "ok");
    assert_eq!(r0["pixels"], 1024);
    assert_eq!(r0["rmse"], 0.0);
    assert_eq!(r0["abs_rel"], 0.0);
    for d in ["delta1", "delta2", "delta3"] {
        assert_eq!(r0[d], 1.0);
    }
    assert_eq!(rows[1]["status"], "no_valid_pixels");
    assert_eq!(rows[2]["status"], "ok");
    assert_eq!(rows[2]["pixels"], 1024);
}

#[test]
fn calibrate_fits_line() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("m.csv");
    std::fs::write(&csv, "predicted,truth\n0.8,0.9\n0.9,1.05\n1.0,1.2\n").unwrap();
    let out = tmp.path().join("c");
    let o = run(&["calibrate", "--input", s(&csv), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c: Value = serde_json::from_slice(&read_bytes(&out.join("calibration.json"))).unwrap();
    assert!((c["omega1"].as_f64().unwrap() - 1.5).abs() < 1e-9);
    assert!((c["omega0"].as_f64().unwrap() + 0.3).abs() < 1e-9);
}

#[test]
fn calibrate_missing_input_fails() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["calibrate", "--input", "/nonexistent/m.csv", "--out", s(tmp.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/m.csv"));
}

#[test]
fn render_writes_images() {
    let tmp = TempDir::new().unwrap();
    let patch = tmp.path().join("p.json");
    let v = json!({
        "wedges": [{ "vertex": [10.0, 10.0], "angles": [0.5, 2.5], "color": [1.0, 0.2, 0.1], "eta": 1.5 }],
        "background": [0.1, 0.1, 0.6],
        "width": 21,
        "height": 21
    });
    std::fs::write(&patch, v.to_string()).unwrap();
    let out = tmp.path().join("r");
    let o = run(&["render", "--patch", s(&patch), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("render.png").exists());
    assert!(out.join("render_boundary.png").exists());
}
