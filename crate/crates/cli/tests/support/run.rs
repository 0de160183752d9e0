//! Drives the `gradepipe` binary over a fixture directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gradepipe")
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/quiz57")
}

pub fn gradepipe(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Runs one step and returns its stdout, or a description of the failure.
pub fn step(args: &[&str]) -> Result<String, String> {
    let out = gradepipe(args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`gradepipe {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

/// ingest → transcribe → grade → analyze → message, all under `work`.
pub fn full_pipeline(fixture: &Path, work: &Path) -> Result<(), String> {
    let config = fixture.join("config.json");
    let replay = fixture.join("replay");
    let batch = work.join("batch");
    let results = work.join("results.jsonl");
    step(&[
        "ingest",
        "--manifest",
        s(&fixture.join("manifest.json")),
        "--ta",
        s(&fixture.join("ta.csv")),
        "--exclusions",
        s(&fixture.join("exclusions.json")),
        "--out",
        s(&batch),
    ])?;
    for stage in ["transcribe", "grade"] {
        let mut args = vec![
            "--config",
            s(&config),
            stage,
            "--batch",
            s(&batch),
            "--replay-dir",
            s(&replay),
        ];
        if stage == "grade" {
            args.extend(["--results", s(&results)]);
        }
        step(&args)?;
    }
    step(&[
        "analyze",
        "--results",
        s(&results),
        "--ta",
        s(&fixture.join("ta.csv")),
        "--verdicts",
        s(&fixture.join("verdicts.csv")),
        "--out",
        s(&work.join("report")),
    ])?;
    step(&[
        "--config",
        s(&config),
        "message",
        "--results",
        s(&results),
        "--roster",
        s(&fixture.join("roster.csv")),
        "--out",
        s(&work.join("messages")),
    ])?;
    Ok(())
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn tree(root: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<PathBuf, Vec<u8>>) {
        let Ok(entries) = fs::read_dir(dir) else {
            return;
        };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, fs::read(&path).expect("readable"));
            }
        }
    }
    let mut out = Default::default();
    walk(root, root, &mut out);
    out
}

/// Compares the outputs of two pipeline runs. The call log is excluded
/// because it records latencies.
pub fn compare_runs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut files = 0;
    for part in [
        "results.jsonl",
        "report",
        "messages",
        "batch/batch.json",
        "batch/exclusions.tsv",
    ] {
        let (ta, tb) = if a.join(part).is_dir() {
            (tree(&a.join(part)), tree(&b.join(part)))
        } else {
            let read = |p: &Path| {
                fs::read(p)
                    .map(|bytes| [(PathBuf::new(), bytes)].into_iter().collect())
                    .map_err(|e| format!("{}: {e}", p.display()))
            };
            (read(&a.join(part))?, read(&b.join(part))?)
        };
        if ta.is_empty() {
            return Err(format!("{part}: nothing was written"));
        }
        if ta.keys().ne(tb.keys()) {
            return Err(format!("{part}: file sets differ"));
        }
        for (path, bytes) in &ta {
            if tb[path] != *bytes {
                return Err(format!("{part}/{}: contents differ", path.display()));
            }
        }
        files += ta.len();
    }
    Ok(files)
}
