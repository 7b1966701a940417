use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use delaymark::experiment::{RunManifest, RunStatus, MANIFEST_FILE};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn delaymark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delaymark"))
        .args(args)
        .env("DELAYMARK_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn listing(dir: &Path) -> BTreeSet<String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect()
}

fn scalar_config() -> String {
    configs().join("scalar_attack.toml").display().to_string()
}

#[test]
fn reruns_are_byte_identical_and_inventoried() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scalar_config();
    let mut manifests = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = delaymark(&["attack", "--config", &cfg, "--seed", "11", "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        let mut manifest = RunManifest::load(&dir).unwrap();
        assert_eq!(manifest.status, RunStatus::Completed);
        assert_eq!(manifest.seed, 11);
        let mut expected: BTreeSet<String> = manifest.files.iter().cloned().collect();
        expected.insert(MANIFEST_FILE.to_string());
        assert_eq!(listing(&dir), expected);
        manifest.timings.clear();
        manifests.push(manifest);
    }
    assert_eq!(manifests[0], manifests[1]);
    for file in &manifests[0].files {
        let a = std::fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs between reruns");
    }
}

#[test]
fn a_different_seed_changes_the_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scalar_config();
    for seed in ["1", "2"] {
        let dir = tmp.path().join(seed);
        assert!(delaymark(&["simulate", "--config", &cfg, "--seed", seed, "--out", dir.to_str().unwrap()]).status.success());
    }
    let a = std::fs::read(tmp.path().join("1/trace.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("2/trace.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn require_stable_fails_on_an_uncertified_loop() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("scalar_attack.toml"))
        .unwrap()
        .replace("k_tau = { scale = 0.4 }", "k_tau = { scale = 2.0 }");
    let path = tmp.path().join("loud.toml");
    std::fs::write(&path, text).unwrap();
    let cfg = path.to_str().unwrap();
    assert_eq!(delaymark(&["synthesize", "--config", cfg, "--require-stable"]).status.code(), Some(1));
    assert_eq!(delaymark(&["synthesize", "--config", cfg]).status.code(), Some(0));
    assert_eq!(delaymark(&["synthesize", "--require-stable"]).status.code(), Some(0));
}

#[test]
fn malformed_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("scalar_attack.toml"))
        .unwrap()
        .replace("window = 10", "window = \"ten\"");
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let out_dir = tmp.path().join("out");
    let out = delaymark(&["simulate", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("window"), "{}", stderr(&out));
    assert!(!out_dir.join("trace.csv").exists());

    let text = std::fs::read_to_string(configs().join("scalar_attack.toml")).unwrap().replace("tau_max = 2", "tau_max = 0");
    std::fs::write(&path, text).unwrap();
    let out = delaymark(&["synthesize", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("tau"), "{}", stderr(&out));
}

#[test]
fn analyze_refuses_the_large_uplift() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("analyze");
    let out = delaymark(&["analyze", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("400"), "{}", stderr(&out));
    let manifest = RunManifest::load(&dir).unwrap();
    assert_eq!(manifest.status, RunStatus::Failed);
    assert!(manifest.files.is_empty());
    assert_eq!(listing(&dir), BTreeSet::from([MANIFEST_FILE.to_string()]));
}

#[test]
fn small_bench_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("bench");
    let out = delaymark(&["bench", "--config", &scalar_config(), "--runs", "5", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = RunManifest::load(&dir).unwrap();
    assert!(manifest.warnings.iter().any(|w| w.contains("5 runs")), "{:?}", manifest.warnings);
    let rates = std::fs::read_to_string(dir.join("detection_rates.csv")).unwrap();
    assert!(rates.starts_with("t,rate_delay,rate_gaussian,rate_none"));
}
