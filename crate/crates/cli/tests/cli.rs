use std::path::Path;
use std::process::{Command, Output};

use shapehier::{vocabulary, Config, Vocabulary};

fn shapehier(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapehier"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_corpus(dir: &Path) {
    let out = shapehier(&[
        "synth",
        "--out",
        path(dir),
        "--classes",
        "1",
        "--train",
        "2",
        "--test",
        "1",
        "--natural",
        "2",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_writes_manifest_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("corpus");
    tiny_corpus(&dir);
    assert!(dir.join("manifest.jsonl").is_file());
    let config = Config::load(dir.join("config.toml")).unwrap();
    assert_eq!(config.seed, 3);
    let pngs = std::fs::read_dir(dir.join("images")).unwrap().count();
    assert!(pngs > 0);
}

#[test]
fn extract_reuses_its_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("corpus");
    tiny_corpus(&dir);
    let manifest = dir.join("manifest.jsonl");
    let cache = tmp.path().join("cache");
    let first = shapehier(&["extract", "--manifest", path(&manifest), "--cache", path(&cache)]);
    assert!(first.status.success());
    let n = std::fs::read_dir(&cache).unwrap().count();
    assert!(stdout(&first).contains(&format!("{n} extracted, 0 cached")), "{}", stdout(&first));
    let second = shapehier(&["extract", "--manifest", path(&manifest), "--cache", path(&cache)]);
    assert!(second.status.success());
    assert!(stdout(&second).contains(&format!("0 extracted, {n} cached")), "{}", stdout(&second));
}

#[test]
fn inspect_empty_vocabulary() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("empty.shv");
    let mut v = Vocabulary::new(&Config::default());
    v.layers.clear();
    vocabulary::save(&v, &file).unwrap();
    let out = shapehier(&["inspect", "--vocab", path(&file), "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let sizes = report["layer_sizes"].as_array().unwrap();
    assert!(sizes.iter().all(|s| s.as_u64() == Some(0)));
    assert_eq!(report["thresholds"].as_u64(), Some(0));
}

#[test]
fn missing_vocabulary_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("corpus");
    tiny_corpus(&dir);
    let out_file = tmp.path().join("dets.jsonl");
    let out = shapehier(&[
        "detect",
        "--vocab",
        path(&tmp.path().join("missing.shv")),
        "--manifest",
        path(&dir.join("manifest.jsonl")),
        "--out",
        path(&out_file),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!out_file.exists());
}

#[test]
fn invalid_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[inference]\ntau = 2.0\n").unwrap();
    let file = tmp.path().join("v.shv");
    vocabulary::save(&Vocabulary::new(&Config::default()), &file).unwrap();
    let out = shapehier(&["--config", path(&cfg), "inspect", "--vocab", path(&file)]);
    assert_eq!(out.status.code(), Some(1));
}
