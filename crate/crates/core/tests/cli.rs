use std::path::Path;
use std::process::Command;

use emscale::cli::{run_from, RunConfig};
use emscale::persistence::PersistenceProfile;
use emscale::synthgen::LiParams;
use emscale::trace::read_sidecar;

const BIN: &str = env!("CARGO_BIN_EXE_emscale");

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["emscale"];
    full.extend_from_slice(args);
    run_from(full)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 8] = ["--n", "20", "--length", "2048", "--windows", "64,128,256", "--seed", "5"];

#[test]
fn synth_writes_files_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        assert_eq!(run(&["synth", "--scenario", "ro_ht", "--n", "12", "--length", "512", "--seed", "7", "--out", p(dir)]), 0);
    }
    let mut files: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.len(), 13);
    for f in files {
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap());
    }
}

#[test]
fn synth_li_echoes_default_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["synth", "--scenario", "li_ht", "--n", "4", "--length", "256", "--out", p(tmp.path())]), 0);
    let sidecar = read_sidecar(tmp.path()).unwrap();
    assert_eq!(sidecar.scenario.unwrap().li, Some(LiParams::default()));
}

#[test]
fn analyze_then_classify_from_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let traces = tmp.path().join("traces");
    let out = tmp.path().join("out");
    assert_eq!(run(&["synth", "--scenario", "baseline", "--n", "20", "--length", "2048", "--out", p(&traces)]), 0);
    assert_eq!(
        run(&["analyze", "--input", p(&traces), "--windows", "64,128", "--k-max", "8", "--dump", "--out", p(&out)]),
        0
    );
    let text = std::fs::read_to_string(out.join("profile.json")).unwrap();
    let profile = PersistenceProfile::from_json(&text).unwrap();
    assert_eq!(profile.k_max, 8);
    assert_eq!(profile.scale_profiles.len(), 2);
    assert!(profile.scale_profiles.iter().all(|s| s.selected_orders.len() == 2));
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(doc["run"]["input"]["dir"].is_string());
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("dumps/stability_w128_b001.csv").exists());
    assert!(out.join("dumps/spectrogram_w64_exec00000.csv").exists());

    let report_dir = tmp.path().join("report");
    let code = run(&["classify", "--profile", p(&out.join("profile.json")), "--format", "svg,json", "--out", p(&report_dir)]);
    assert_eq!(code, 0);
    let svg = std::fs::read_to_string(report_dir.join("report.svg")).unwrap();
    assert_eq!(roxmltree::Document::parse(&svg).unwrap().descendants().filter(|n| n.attribute("class") == Some("chart")).count(), 3);
    assert!(report_dir.join("report.json").exists());
}

#[test]
fn analyze_is_repeatable_and_echoes_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for tag in ["x", "y"] {
        let out = tmp.path().join(tag);
        let mut args = vec!["analyze", "--scenario", "li_ht", "--out", p(&out)];
        args.extend_from_slice(&SMALL);
        assert_eq!(run(&args), 0);
        outputs.push(std::fs::read(out.join("profile.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let doc: serde_json::Value = serde_json::from_slice(&outputs[0]).unwrap();
    assert_eq!(doc["config"]["master_seed"], 5);
    assert_eq!(doc["run"]["input"]["synth"]["master_seed"], 5);
    assert_eq!(doc["run"]["input"]["synth"]["li"]["n_tones"], LiParams::default().n_tones);
}

#[test]
fn sweep_rows_and_single_bound_consistency() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep = tmp.path().join("sweep");
    let mut args = vec!["sweep", "--scenario", "ro_ht", "--k-max-list", "4,6", "--out", p(&sweep)];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
    let csv = std::fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(sweep.join("report_k4.json").exists() && sweep.join("profile_k6.json").exists());

    let single = tmp.path().join("single");
    let mut args = vec!["sweep", "--scenario", "ro_ht", "--k-max-list", "6", "--out", p(&single)];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
    let direct = tmp.path().join("direct");
    let mut args = vec!["analyze", "--scenario", "ro_ht", "--k-max", "6", "--out", p(&direct)];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args), 0);
    assert_eq!(
        std::fs::read(single.join("profile_k6.json")).unwrap(),
        std::fs::read(direct.join("profile.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(single.join("profile_k6.json")).unwrap(),
        std::fs::read(sweep.join("profile_k6.json")).unwrap()
    );
}

#[test]
fn config_file_drives_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cfg-out");
    let cfg = tmp.path().join("run.toml");
    let text = format!(
        r#"
output_dir = "{}"
threads = 2

[input.synth]
scenario = "baseline"
n_executions = 20
trace_length = 1024

[analysis]
window_sizes = [32, 64]
k_max = 5
master_seed = 3

[analysis.em]
n_init = 1

[emit]
csv = false
"#,
        out.display()
    );
    std::fs::write(&cfg, &text).unwrap();
    RunConfig::from_toml(&text).unwrap();
    assert_eq!(run(&["analyze", "--config", p(&cfg)]), 0);
    let profile = PersistenceProfile::from_json(&std::fs::read_to_string(out.join("profile.json")).unwrap()).unwrap();
    assert_eq!(profile.config.window_sizes, vec![32, 64]);
    assert_eq!(profile.config.em.n_init, 1);
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"schema_version\": 1,").unwrap();
    assert_eq!(run(&["classify", "--profile", p(&bad)]), 2);
    assert_eq!(run(&["classify", "--profile", p(&tmp.path().join("missing.json"))]), 3);

    let cfg = tmp.path().join("typo.toml");
    std::fs::write(&cfg, "[analysis]\nk_maxx = 3\n").unwrap();
    assert_eq!(run(&["analyze", "--config", p(&cfg), "--scenario", "baseline"]), 2);

    let out = p(tmp.path());
    assert_eq!(run(&["analyze", "--scenario", "baseline", "--n", "15", "--length", "1024", "--windows", "64", "--out", out]), 4);
    assert_eq!(run(&["analyze", "--scenario", "baseline", "--n", "20", "--length", "100", "--windows", "128", "--out", out]), 2);
    assert_eq!(run(&["analyze", "--out", out]), 2);
    assert_eq!(run(&["bogus"]), 2);
}

#[test]
fn environment_sets_output_dir_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let env_dir = tmp.path().join("from-env");
    let flag_dir = tmp.path().join("from-flag");
    let status = Command::new(BIN)
        .args(["synth", "--scenario", "baseline", "--n", "3", "--length", "128"])
        .env("EMSCALE_OUTPUT_DIR", &env_dir)
        .env("EMSCALE_THREADS", "2")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(env_dir.join("traceset.json").exists());

    let out = Command::new(BIN)
        .args(["synth", "--scenario", "baseline", "--n", "3", "--length", "128", "--out", p(&flag_dir)])
        .env("EMSCALE_OUTPUT_DIR", tmp.path().join("ignored"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(flag_dir.join("traceset.json").exists());
    assert!(!tmp.path().join("ignored").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("scenario baseline, seed 0"));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "not json").unwrap();
    let out = Command::new(BIN).args(["classify", "--profile", p(&bad)]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("malformed"));
}
