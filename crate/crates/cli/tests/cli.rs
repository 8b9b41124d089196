use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use percolab::samplers::Snapshot;
use percolab_cli::config::ExperimentConfig;
use percolab_cli::pipeline::{run_pipeline, Failure, Manifest, RunOptions};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&fs::read_to_string(configs().join(name)).unwrap()).unwrap()
}

fn run(cfg: &ExperimentConfig, out: &Path, snapshot: Option<PathBuf>) -> Result<Manifest, Failure> {
    run_pipeline(cfg, &RunOptions { out: out.into(), snapshot, only: None })
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_percolab"))
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn minimal_config_writes_snapshot_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = run(&load("minimal.toml"), dir.path(), None).unwrap();
    assert!(m.complete);
    assert_eq!(m.stages.len(), 1);
    assert_eq!(listing(dir.path()), ["config.toml", "manifest.toml", "sample.csv", "snapshot.bin"]);
    let snap = Snapshot::from_bytes(&fs::read(dir.path().join("snapshot.bin")).unwrap()).unwrap();
    assert_eq!(snap.sites.count(), 64);
    assert_eq!(Manifest::read(dir.path()).unwrap(), m);
    m.verify(dir.path()).unwrap();
}

#[test]
fn pipeline_is_deterministic() {
    let cfg = load("demo.toml");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = run(&cfg, a.path(), None).unwrap();
    let mb = run(&cfg, b.path(), None).unwrap();
    let files: Vec<&String> = ma.stages.iter().flat_map(|s| s.files.iter().map(|f| &f.path)).collect();
    assert!(files.len() >= 10);
    for f in files {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let hashes = |m: &Manifest| m.stages.iter().map(|s| (s.seed.clone(), s.files.clone())).collect::<Vec<_>>();
    assert_eq!(hashes(&ma), hashes(&mb));
    assert_eq!(ma.config_sha256, mb.config_sha256);
}

#[test]
fn walk_without_a_configuration_is_a_dependency_error() {
    let mut cfg = load("demo.toml");
    cfg.stages.sample = None;
    cfg.stages.classify = None;
    cfg.stages.perforate = None;
    cfg.stages.isop = None;
    let dir = tempfile::tempdir().unwrap();
    let err = run(&cfg, dir.path(), None).unwrap_err();
    assert!(matches!(err, Failure::Dependency(_)), "{err}");
    assert_eq!(err.exit_code(), 2);

    let src = tempfile::tempdir().unwrap();
    run(&load("demo.toml"), src.path(), None).unwrap();
    let m = run(&cfg, dir.path(), Some(src.path().join("snapshot.bin"))).unwrap();
    assert_eq!(m.stages.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["cluster", "regularity", "walk"]);
    let walk = "walk_envelope.csv";
    assert_eq!(fs::read(src.path().join(walk)).unwrap(), fs::read(dir.path().join(walk)).unwrap());
}

#[test]
fn missing_prerequisite_stage_is_reported() {
    let mut cfg = load("demo.toml");
    cfg.stages.classify = None;
    let err = run(&cfg, tempfile::tempdir().unwrap().path(), None).unwrap_err();
    assert!(err.to_string().contains("needs stage classify"), "{err}");
}

#[test]
fn snapshot_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    run(&load("demo.toml"), dir.path(), None).unwrap();
    let first = fs::read(dir.path().join("snapshot.bin")).unwrap();
    let snap = Snapshot::read_from(first.as_slice()).unwrap();
    let mut second = Vec::new();
    snap.write_to(&mut second).unwrap();
    assert_eq!(first, second);
}

#[test]
fn stage_failure_leaves_a_partial_manifest() {
    let mut cfg = load("demo.toml");
    cfg.stages.cluster.as_mut().unwrap().level = 1;
    let dir = tempfile::tempdir().unwrap();
    let err = run(&cfg, dir.path(), None).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let m = Manifest::read(dir.path()).unwrap();
    assert!(!m.complete);
    assert_eq!(m.stages.last().unwrap().name, "cluster");
    assert!(m.error.as_ref().unwrap().contains("cluster"));
    m.verify(dir.path()).unwrap();
}

#[test]
fn report_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    run(&load("demo.toml"), dir.path(), None).unwrap();
    let ok = bin().arg("report").arg(dir.path()).output().unwrap();
    assert!(ok.status.success());
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.contains("envelope C1") && text.contains("Harnack ratio"), "{text}");
    assert!(dir.path().join("envelope.svg").exists());

    fs::write(dir.path().join("classify.csv"), "level\n").unwrap();
    let bad = bin().arg("report").arg(dir.path()).output().unwrap();
    assert_eq!(bad.status.code(), Some(4));
    fs::write(dir.path().join("manifest.toml"), "not = [toml").unwrap();
    assert_eq!(bin().arg("report").arg(dir.path()).status().unwrap().code(), Some(4));
}

#[test]
fn validate_reports_eta_and_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(configs().join("ladder_18_2.toml")).unwrap();
    let good = dir.path().join("good.toml");
    fs::write(&good, &base).unwrap();
    let out = bin().arg("validate").arg(&good).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("basic (l_n > 8 r_n, r_n | l_n)           true"), "{text}");
    assert!(text.contains("perforated isoperimetry                  false"), "{text}");

    let bad_eta = dir.path().join("eta.toml");
    fs::write(&bad_eta, base.replace("eta1 = 0.5", "eta1 = 0.3").replace("eta2 = 0.9", "eta2 = 0.7")).unwrap();
    let out = bin().arg("validate").arg(&bad_eta).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("eta"));

    let broken = dir.path().join("broken.toml");
    fs::write(&broken, "seed = 1\n[model]\nkind = 3\n").unwrap();
    let out = bin().arg("validate").arg(&broken).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("line 3"));
}

#[test]
fn output_directory_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["--jobs", "1", "sample", "--config"])
        .arg(configs().join("minimal.toml"))
        .env("PERCOLAB_OUT", dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("snapshot.bin").exists());
    let status = bin().args(["walk", "--config"]).arg(configs().join("minimal.toml")).env("PERCOLAB_OUT", dir.path()).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn example_configs_validate() {
    for name in ["minimal.toml", "demo.toml", "ladder_18_2.toml"] {
        assert!(load(name).validate().is_empty(), "{name}");
        let text = load(name).to_text();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), load(name));
    }
}
