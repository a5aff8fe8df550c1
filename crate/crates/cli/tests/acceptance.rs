//! Every subcommand, rerun from the manifest it wrote, reproduces its outputs
//! byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> i32 {
    let o = Command::new(env!("CARGO_BIN_EXE_crowdmf"))
        .args(args)
        .env("CROWDMF_DATA_DIR", dir)
        .output()
        .expect("binary runs");
    let code = o.status.code().expect("exit code");
    if code != 0 {
        let _ = std::io::stderr().write_all(&o.stderr);
    }
    code
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "manifest.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn criterion_9_manifest_replay() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let eval = s(&d.join("evaluate/eval_weeks.tsv"));
    let params = s(&d.join("twostage/params.tsv"));
    let stream_ratings = s(&d.join("simulate/ratings.tsv"));
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("simulate", ["simulate", "--stream", "--U", "80", "--N", "80", "--p", "0.4", "--seed", "11", "--set",
            "stream.weeks=10", "--set", "stream.notes_per_week=12"]
            .map(String::from)
            .to_vec()),
        ("fit", vec!["fit".into()]),
        ("twostage", vec!["twostage".into()]),
        ("evaluate", ["evaluate", "--warm-weeks", "3"].map(String::from).to_vec()),
        ("theory", ["theory", "--scenario", "truthful", "--set", "theory.seeds=2", "--set", "theory.truthful_size=80",
            "--set", "theory.truthful_small=40", "--set", "theory.truthful_large=80"]
            .map(String::from)
            .to_vec()),
        ("analyze", vec!["analyze".into(), "--eval".into(), eval, "--params".into(), params, "--ratings".into(),
            stream_ratings, "--set".into(), "analyze.n_perm=200".into()]),
    ];

    let mut failures = Vec::new();
    for (name, args) in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        if run(d, &args) != 0 {
            failures.push(format!("{name}: first run failed"));
            continue;
        }
        let out = d.join(name);
        let first = snapshot(&out);
        let replay_dir = d.join(format!("{name}-replay"));
        let code = run(d, &["replay", &s(&out.join("manifest.json")), "--out", &s(&replay_dir)]);
        if code != 0 {
            failures.push(format!("{name}: replay exited {code}"));
        } else if snapshot(&replay_dir) != first {
            failures.push(format!("{name}: replayed files differ"));
        }
    }

    let ok = failures.is_empty();
    let line = format!(
        "[{}] criterion 9: {} subcommands replayed from their manifests, byte-identical outputs{}\n",
        if ok { "PASS" } else { "FAIL" },
        steps.len(),
        if ok { String::new() } else { format!(" ({})", failures.join("; ")) }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{line}");
}
