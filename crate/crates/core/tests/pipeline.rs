use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use regex::Regex;

fn config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/pipeline/qse.toml")
}

fn qse(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qse"))
        .arg("-c")
        .arg(config())
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn pipeline_is_reproducible_apart_from_timestamps() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = qse(dir.path(), &["pipeline"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let fa = files(a.path());
    let fb = files(b.path());
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());

    for expected in [
        "corpus.jsonl",
        "annotations.jsonl",
        "llm_audit.jsonl",
        "agreement.csv",
        "gold.jsonl",
        "lengths/histogram.csv",
        "lengths/percentiles.csv",
        "folds.csv",
        "eval/summary.md",
        "eval/summary.json",
        "eval/predictions.csv",
        "explain/global_summary.csv",
        "frequencies.csv",
    ] {
        assert!(fa.contains_key(Path::new(expected)), "missing {expected}");
    }
    let models = fa.keys().filter(|p| p.ends_with("model.safetensors")).count();
    assert_eq!(models, 5);

    let stamp = Regex::new(r#""(timestamp|ts|created_at)": ?"[^"]*""#).unwrap();
    let mut compared = 0;
    for (path, bytes) in &fa {
        let other = &fb[path];
        if bytes == other {
            compared += 1;
            continue;
        }
        let normal = |b: &[u8]| {
            let text = String::from_utf8_lossy(b);
            let mut lines: Vec<String> = stamp.replace_all(&text, "").lines().map(str::to_string).collect();
            // LLM calls run concurrently, so audit entries land in completion order.
            if path.ends_with("llm_audit.jsonl") {
                lines.sort();
            }
            lines
        };
        assert_eq!(
            normal(bytes),
            normal(other),
            "{} differs beyond timestamps",
            path.display()
        );
    }
    assert!(compared > fa.len() / 2);

    let gold = String::from_utf8_lossy(&fa[Path::new("frequencies.csv")]).into_owned();
    assert!(gold.contains("Tooling,0,7,19.44"), "{gold}");
    assert!(gold.contains("Total,,36,"), "{gold}");
    let agreement = String::from_utf8_lossy(&fa[Path::new("agreement.csv")]).into_owned();
    assert!(agreement.contains("n_items,36\nn_agree,32\n"), "{agreement}");
    assert!(agreement.contains("kappa,0.866667"), "{agreement}");
}

#[test]
fn missing_upstream_artifact_names_the_stage_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (vec!["import-annotations"], "qse ingest"),
        (vec!["analyze-lengths"], "qse export-gold"),
        (vec!["build-folds"], "qse export-gold"),
        (vec!["train"], "qse export-gold"),
        (vec!["report-frequencies"], "qse ingest"),
    ];
    for (args, hint) in cases {
        let out = qse(dir.path(), &args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(hint), "{args:?}: {err}");
    }
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["no-such-command"],
        vec!["train", "--epochs", "many"],
        vec!["report-frequencies", "--rounding", "banker"],
        vec!["ingest", "--input", "x.csv"],
    ] {
        let out = qse(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_qse"))
        .args(["-c", "/nonexistent/qse.toml", "ingest"])
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
}
