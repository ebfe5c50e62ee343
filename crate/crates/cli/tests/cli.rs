use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn geodis(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geodis"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = geodis(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn simulate(dir: &Path) {
    ok(dir, &["simulate", "--preset", "gauss2d", "--n", "1000", "--seed", "7", "--out", "data.csv"]);
}

#[test]
fn simulate_writes_domain_csv_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path());
    let text = fs::read_to_string(tmp.path().join("data.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x0,x1,a,y0,y1"));
    assert_eq!(lines.count(), 1000);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("data.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 7);
    assert_eq!(m["command"], "simulate");
}

#[test]
fn fit_dis_is_deterministic_across_runs_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d);
    fs::write(d.join("cfg.json"), r#"{"grid_points_per_axis": 12, "seed": 3}"#).unwrap();
    ok(d, &["fit-dis", "--data", "data.csv", "--config", "cfg.json", "--out", "a.csv"]);
    ok(d, &["fit-dis", "--data", "data.csv", "--config", "cfg.json", "--out", "b.csv"]);
    ok(d, &["--workers", "4", "fit-dis", "--data", "data.csv", "--config", "cfg.json", "--out", "c.csv"]);
    let a = fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b.csv")).unwrap());
    assert_eq!(a, fs::read(d.join("c.csv")).unwrap());
    assert!(String::from_utf8(a).unwrap().starts_with("y0,y1,value,sigma2,flags"));

    // the manifest is itself a valid config and reproduces the output
    ok(d, &["fit-dis", "--data", "data.csv", "--config", "a.manifest.json", "--out", "e.csv"]);
    assert_eq!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("e.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d);
    let out = geodis(d, &["fit-dis", "--data", "data.csv", "--out", "x.csv", "--set", "kernal=iso"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kernal"));
    let out = geodis(d, &["fit-dis", "--data", "data.csv", "--out", "x.csv", "--set", "kernel=cubic"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kernel"));
    let out = geodis(d, &["fit-dis", "--data", "missing.csv", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let out = geodis(d, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn score_stein_and_band_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d);
    let set = ["--set", "grid_points_per_axis=10"];
    let run = |cmd: &str, out: &str, extra: &[&str]| {
        let mut args = vec![cmd, "--data", "data.csv", "--out", out];
        args.extend_from_slice(&set);
        args.extend_from_slice(extra);
        ok(d, &args);
        fs::read_to_string(d.join(out)).unwrap()
    };
    assert!(run("fit-dss", "dss.csv", &["--set", "kernel=transported"]).starts_with("y0,y1,value0,value1,sigma2_0,sigma2_1,flags"));
    let stein = run("stein", "stein.csv", &[]);
    assert!(stein.starts_with("g_id,value,sigma2"));
    assert_eq!(stein.lines().count(), 1 + 2 + 4);
    let band = run("band", "band.csv", &["--set", "multipliers=200"]);
    assert!(band.starts_with("point_id,center,sigma,radius,lower,upper"));
    assert_eq!(band.lines().count(), 1 + 100);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("band.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["summary"]["B"], 200);
    assert_eq!(m["inputs"][0]["path"], "data.csv");
}

#[test]
fn peakiness_and_drift_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["peakiness", "--out", "peak.csv", "--set", "grid_points_per_axis=12", "--set", "samples=100"]);
    let peak = fs::read_to_string(d.join("peak.csv")).unwrap();
    assert!(peak.starts_with("kernel,h,H,Hs,d_eff"));
    assert_eq!(peak.lines().count(), 1 + 2 * 5);
    assert!(d.join("peak-iso.svg").exists() && d.join("peak.manifest.json").exists());
    ok(d, &["drift", "--out", "drift.csv", "--set", "samples=500"]);
    let drift = fs::read_to_string(d.join("drift.csv")).unwrap();
    assert!(drift.starts_with("h,eps,drift,drift_max"));
    assert_eq!(drift.lines().count(), 1 + 9);
    assert!(d.join("drift.svg").exists());
}

#[test]
fn experiment_golden_bundle_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("main.json"),
        r#"{"name": "tiny", "preset": "gauss2d", "estimators": ["dis:iso", "plugin:iso"],
            "n": [200, 400, 800], "replications": 2, "grid_points_per_axis": 10, "seed": 11,
            "bands": true, "multipliers": 100,
            "peakiness": {"h": [0.2, 0.4], "samples": 50},
            "drift": {"h": [0.3, 0.5], "eps": [0.1, 0.2], "samples": 300}}"#,
    )
    .unwrap();
    ok(d, &["experiment", "--config", "main.json", "--out", "res"]);
    for f in ["manifest.json", "curves.csv", "bands.csv", "peakiness.csv", "drift.csv", "curves.svg", "drift.svg", "peakiness-iso.svg"] {
        assert!(d.join("res").join(f).exists(), "missing {f}");
    }
    let curves = fs::read_to_string(d.join("res/curves.csv")).unwrap();
    assert!(curves.starts_with("estimator,n,h,replications,failed,error_mean,error_se,slope,slope_se,coverage"));
    assert_eq!(curves.lines().count(), 1 + 2 * 3);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("res/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 11);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);

    ok(d, &["--workers", "3", "experiment", "--config", "res/manifest.json", "--out", "again"]);
    for entry in fs::read_dir(d.join("res")).unwrap() {
        let p = entry.unwrap().path();
        let other = d.join("again").join(p.file_name().unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(&other).unwrap(), "{} differs", p.display());
    }
}

#[test]
fn help_documents_every_key() {
    let tmp = tempfile::tempdir().unwrap();
    let fit = String::from_utf8(geodis(tmp.path(), &["fit-dis", "--help"]).stdout).unwrap();
    for key in [
        "kernel", "h ", "cells", "arm", "folds", "clip", "ridge", "nuisance", "preset", "confounding", "geometry",
        "region.lower", "region.upper", "grid_points_per_axis", "margin", "projection", "pca.knn_fraction", "pca.k_nn",
        "pca.ridge", "pca.tangent_share", "pca.normal_var", "diffusion.schedule", "diffusion.time_power",
        "diffusion.steps", "floor", "extra_fields", "target", "alpha", "multipliers", "seed",
    ] {
        assert!(fit.contains(key), "fit-dis --help lacks {key}");
    }
    let exp = String::from_utf8(geodis(tmp.path(), &["experiment", "--help"]).stdout).unwrap();
    for key in [
        "name", "estimators", "replications", "bandwidth.c", "bandwidth.exponent", "bandwidth.cells", "interior", "bands",
        "peakiness", "drift",
    ] {
        assert!(exp.contains(key), "experiment --help lacks {key}");
    }
    let drift = String::from_utf8(geodis(tmp.path(), &["drift", "--help"]).stdout).unwrap();
    for key in ["eps", "probes_per_axis", "mode", "samples"] {
        assert!(drift.contains(key));
    }
}
