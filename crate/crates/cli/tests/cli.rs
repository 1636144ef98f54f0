use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn dwisim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dwisim")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_config(dir: &Path, extra: serde_json::Value) -> String {
    let mut cfg = json!({
        "snr_list": [3.0],
        "nex_max": 2,
        "train_slices": 2,
        "noise_maps": 3,
        "maps_per_slice": 2,
        "validation_stride": 3,
        "test_slices": 1,
        "residual": {"instances": 3, "snr": 3.0, "profile_row": 80},
        "multicoil": {"enabled": false},
        "training": {
            "max_epochs": 2,
            "patience": 1,
            "architecture": {"n1": 4, "n2": 2, "f1": 3, "f2": 1, "f3": 3}
        }
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn assert_same_tree(a: &Path, b: &Path) {
    let list = |d: &Path| {
        let mut v: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let names = list(a);
    assert_eq!(names, list(b), "{}", a.display());
    for n in names {
        let (pa, pb) = (a.join(&n), b.join(&n));
        if pa.is_dir() {
            assert_same_tree(&pa, &pb);
        } else {
            assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap(), "{}", pa.display());
        }
    }
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&dwisim(&["--help"])), 0);
    assert_eq!(code(&dwisim(&["no-such-command"])), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({"snr_list": [0.0]}));
    let o = dwisim(&["--config", &cfg, "--out", dir.path().join("o").to_str().unwrap(), "dataset-gen"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = tiny_config(dir.path(), json!({"no_such_key": 1}));
    assert_eq!(code(&dwisim(&["--config", &cfg, "simulate"])), 2);
    let cfg = tiny_config(dir.path(), json!({"noise_maps": 1}));
    assert_eq!(code(&dwisim(&["--config", &cfg, "dataset-gen"])), 2);
    assert_eq!(code(&dwisim(&["--config", "/nonexistent/config.json", "simulate"])), 2);
    // evaluate without any model
    let cfg = tiny_config(dir.path(), json!({}));
    assert_eq!(code(&dwisim(&["--config", &cfg, "evaluate"])), 2);
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(code(&dwisim(&["--out", out, "reconstruct", "--kspace", "/nonexistent/k"])), 3);
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "x,y\n1,2\n").unwrap();
    let curve = format!("a={}", csv.display());
    assert_eq!(code(&dwisim(&["--out", out, "plot", "--curve", &curve])), 3);
    assert_eq!(code(&dwisim(&["--out", out, "denoise", "--model", "/nonexistent/m", "--input", "x"])), 3);
}

#[test]
fn numerical_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut training = json!({
        "max_epochs": 2,
        "patience": 1,
        "lr": 1e300,
        "architecture": {"n1": 4, "n2": 2, "f1": 3, "f2": 1, "f3": 3}
    });
    training["init_std"] = json!(1e200);
    let cfg = tiny_config(dir.path(), json!({"training": training}));
    let o = dwisim(&["--config", &cfg, "--out", dir.path().join("o").to_str().unwrap(), "train"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn plot_renders_png() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    fs::write(&csv, "nex,value\n1,10\n2,12\n3,13\n").unwrap();
    let curve = format!("modulus={}", csv.display());
    let out = dir.path().join("o");
    let o = dwisim(&["--out", out.to_str().unwrap(), "plot", "--curve", &curve, "--line", "denoised=12.5", "--title", "T"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read(out.join("plot.png")).unwrap().starts_with(b"\x89PNG"));
}

#[test]
fn simulate_then_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({"noise_std": 0.0}));
    let sim = dir.path().join("sim");
    assert_eq!(code(&dwisim(&["--config", &cfg, "--out", sim.to_str().unwrap(), "simulate"])), 0);
    let k = sim.join("slice0_snr3_kspace");
    let c = sim.join("slice0_snr3_correction");
    let rec = dir.path().join("rec");
    let o = dwisim(&[
        "--config", &cfg, "--out", rec.to_str().unwrap(), "reconstruct",
        "--kspace", k.to_str().unwrap(), "--correction", c.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rec.join("image.json").exists() && rec.join("image.png").exists());
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({"motion": {"enabled": true}}));
    let run = |tag: &str| {
        let base = dir.path().join(tag);
        let ds = base.join("dataset");
        let model = base.join("model");
        let eval = base.join("eval");
        let s = |p: &Path| p.to_str().unwrap().to_string();
        for args in [
            vec!["--config".into(), cfg.clone(), "--out".into(), s(&ds), "dataset-gen".into()],
            vec!["--config".into(), cfg.clone(), "--threads".into(), "1".into(), "--out".into(), s(&model), "train".into(), "--dataset".into(), s(&ds)],
            vec!["--config".into(), cfg.clone(), "--out".into(), s(&eval), "evaluate".into(), "--model".into(), s(&model.join("model"))],
            vec!["--config".into(), cfg.clone(), "--out".into(), s(&base.join("analyze")), "analyze".into(), "--model".into(), s(&model.join("model"))],
            vec!["--config".into(), cfg.clone(), "--out".into(), s(&base.join("den")), "denoise".into(), "--model".into(), s(&model.join("model")), "--input".into(), s(&ds.join("clean_000"))],
        ] {
            let a: Vec<&str> = args.iter().map(String::as_str).collect();
            let o = dwisim(&a);
            assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
        base
    };
    let a = run("a");
    let b = run("b");
    assert_same_tree(&a, &b);
    assert!(a.join("eval/metrics.csv").exists());
    assert!(a.join("eval/summary.json").exists());
    assert!(a.join("analyze/residual_profiles.csv").exists());
    assert!(a.join("den/denoised.json").exists());
}
