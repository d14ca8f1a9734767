//! End-to-end runs of the `tb-defect` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn tb(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tb-defect"));
    cmd.args(args).env_remove("TB_DEFECT_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    tb(&args, &[])
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, doc: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(doc).unwrap()).unwrap();
    path
}

fn nn_chain(command: Value) -> Value {
    json!({
        "crystal": {
            "dim": 1,
            "cell_matrix": [[2.0]],
            "basis": [{"offset": [0.0], "species": "A"}, {"offset": [1.0], "species": "B"}]
        },
        "model": {
            "family": "exp-hop", "t": 0.5, "gamma0": 2.0, "r0": 1.0, "r_cut": 1.5,
            "onsite": {"A": -1.0, "B": 1.0}
        },
        "command": command
    })
}

#[test]
fn bands_match_the_two_site_chain() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bands");
    for (eps, extra) in [
        (1.0, vec![]),
        (
            0.7,
            vec!["--set", "model.onsite.A=-0.7", "--set", "model.onsite.B=0.7"],
        ),
    ] {
        let o = run(&configs().join("bands.json"), &out, &extra);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let s = summary(&out);
        let gap = &s["results"]["gap"];
        let width = gap["upper"].as_f64().unwrap() - gap["lower"].as_f64().unwrap();
        assert!((width - 2.0 * eps).abs() < 1e-10, "gap {width} for eps {eps}");
        assert_eq!(s["gates"]["insulating"], json!(true));
        assert_eq!(s["incomplete"], json!(false));

        // E(k) = +-sqrt(eps^2 + 4 t^2 cos^2 k) with t = 1/2 and unit bond length.
        let text = std::fs::read_to_string(out.join("bands.csv")).unwrap();
        assert!(!text.contains('\r'));
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("k_index,k0,band,energy"));
        let mut rows = 0;
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let k: f64 = f[1].parse().unwrap();
            let e: f64 = f[3].parse().unwrap();
            let exact = (eps * eps + k.cos().powi(2)).sqrt();
            let sign = if f[2] == "0" { -1.0 } else { 1.0 };
            assert!((e - sign * exact).abs() < 1e-12, "k {k}: {e} vs {}", sign * exact);
            rows += 1;
        }
        assert_eq!(rows, 2 * 128);
    }
}

#[test]
fn missing_key_is_reported_with_its_path() {
    let tmp = TempDir::new().unwrap();
    let mut doc = nn_chain(json!({"bands": {}}));
    doc["model"].as_object_mut().unwrap().remove("gamma0");
    let cfg = write_config(tmp.path(), "c.json", &doc);
    let o = run(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model") && err.contains("gamma0"), "{err}");
}

#[test]
fn unknown_keys_and_bad_overrides_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &nn_chain(json!({"bands": {}})));
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &["--set", "model.gama0=2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gama0"));

    let o = run(&cfg, &out, &["--set", "command.relax.cells=[4]"]);
    assert_eq!(o.status.code(), Some(2), "two command blocks");

    let o = run(&cfg, &out, &["--set", "command.bands.n_k=-3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("command.bands.n_k"));

    let mut doc = nn_chain(json!({"bands": {}}));
    doc["crystal"] = json!("missing.json");
    let cfg = write_config(tmp.path(), "d.json", &doc);
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
}

#[test]
fn collision_is_a_numerical_failure() {
    // Four cells sample k = pi/2, where the upper band touches 1.
    let tmp = TempDir::new().unwrap();
    let doc = nn_chain(json!({"site-energies": {"cells": [4], "mu": 1.0, "beta": "inf"}}));
    let cfg = write_config(tmp.path(), "c.json", &doc);
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3));
    let s = summary(&out);
    assert_eq!(s["incomplete"], json!(true));
    assert!(s["error"].as_str().unwrap().contains("collides"));
    assert!(out.join("run.log").exists());
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_are_bit_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("relax.json");
    let args = [
        "--set",
        "command.relax.perturbation=0.05",
        "--set",
        "command.relax.stability=false",
        "--seed",
        "17",
    ];
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    assert!(run(&cfg, &a, &[&args[..], &["--threads", "1"]].concat())
        .status
        .success());
    assert!(run(&cfg, &b, &[&args[..], &["--threads", "3"]].concat())
        .status
        .success());
    let files = csv_files(&a);
    assert_eq!(files.len(), 3);
    assert_eq!(files, csv_files(&b));

    // The echoed configuration alone reproduces the run.
    let mut echoed = summary(&a)["config"].clone();
    echoed["output"] = json!(c.to_str().unwrap());
    echoed.as_object_mut().unwrap().remove("threads");
    let path = write_config(tmp.path(), "echo.json", &echoed);
    let o = tb(&["run", path.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files, csv_files(&c));

    let seeded = tmp.path().join("d");
    assert!(run(&cfg, &seeded, &[&args[..4], &["--seed", "18"]].concat())
        .status
        .success());
    assert_ne!(files, csv_files(&seeded));
}

#[test]
fn empty_series_give_header_only_tables() {
    let tmp = TempDir::new().unwrap();
    let doc =
        nn_chain(json!({"pollution": {"cells": [4, 6, 8, 10], "mu": 0.0, "delta": 1e-6, "policy": "zero"}}));
    let cfg = write_config(tmp.path(), "c.json", &doc);
    let out = tmp.path().join("out");
    assert!(run(&cfg, &out, &[]).status.success());
    assert_eq!(
        std::fs::read_to_string(out.join("out_of_band.csv")).unwrap(),
        "cells,eigenvalue\n"
    );
    let s = summary(&out);
    assert_eq!(s["results"]["counts"], json!([0, 0, 0, 0]));
    assert_eq!(s["gates"]["count_constant"], json!(true));
}

#[test]
fn sweeps_report_rate_gates() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run(
        &configs().join("sweep-beta.json"),
        &out,
        &["--set", "command.sweep-beta.cells=[8]"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    for gate in [
        "complete",
        "displacement_rate",
        "displacement_decreasing",
        "energy_rate",
        "energy_decreasing",
    ] {
        assert!(s["gates"][gate].is_boolean(), "{gate}");
    }
    let text = std::fs::read_to_string(out.join("sweep_beta.csv")).unwrap();
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn threads_fall_back_to_the_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("bands.json");
    let out = tmp.path().join("out");
    let o = tb(
        &["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[("TB_DEFECT_THREADS", "2")],
    );
    assert!(o.status.success());
    assert_eq!(summary(&out)["threads"], json!(2));
    let o = tb(
        &["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[("TB_DEFECT_THREADS", "x")],
    );
    assert_eq!(o.status.code(), Some(2));
}
