use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn crowdmf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdmf"))
        .args(args)
        .env("CROWDMF_DATA_DIR", dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["simulate", "--U", "40", "--N", "40", "--p", "0.5", "--seed", "3"];
    args.extend_from_slice(extra);
    let o = crowdmf(dir, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("simulate").join("ratings.tsv")
}

#[test]
fn full_density_writes_every_pair() {
    let tmp = TempDir::new().unwrap();
    let o = crowdmf(tmp.path(), &["simulate", "--p", "1", "--U", "10", "--N", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("simulate/ratings.tsv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(&header[..4], ["noteId", "raterParticipantId", "createdAtMillis", "helpfulnessLevel"]);
    assert_eq!(lines.count(), 100);
    assert!(tmp.path().join("simulate/manifest.json").exists());
}

#[test]
fn same_seed_same_bytes() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ra = fs::read(simulate(a.path(), &[])).unwrap();
    let rb = fs::read(simulate(b.path(), &[])).unwrap();
    assert_eq!(ra, rb);
    let c = TempDir::new().unwrap();
    let o = crowdmf(c.path(), &["simulate", "--U", "40", "--N", "40", "--p", "0.5", "--seed", "4"]);
    assert_eq!(code(&o), 0);
    assert_ne!(ra, fs::read(c.path().join("simulate/ratings.tsv")).unwrap());
}

#[test]
fn refuses_to_overwrite_without_force() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), &[]);
    let o = crowdmf(tmp.path(), &["simulate", "--U", "40", "--N", "40", "--p", "0.5"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"));
    simulate(tmp.path(), &["--force"]);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = crowdmf(tmp.path(), &["simulate", "--set", "sim.nonsense=1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nonsense"), "{}", stderr(&o));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[fit]\nmax_sweeps = 10\nlambdaa = 0.1\n").unwrap();
    let o = crowdmf(tmp.path(), &["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("lambdaa"), "{}", stderr(&o));
}

#[test]
fn help_lists_every_section() {
    let tmp = TempDir::new().unwrap();
    let o = crowdmf(tmp.path(), &["fit", "--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["run.seed", "sim.U", "stream.weeks", "fit.lambda", "filter.min_ratings_per_note", "eval.warm_weeks",
        "theory.kappa", "suite.scenarios", "analyze.n_perm"]
    {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn bad_subcommand_and_flags_exit_one() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&crowdmf(tmp.path(), &["frobnicate"])), 1);
    assert_eq!(code(&crowdmf(tmp.path(), &["simulate", "--p", "lots"])), 1);
    assert_eq!(code(&crowdmf(tmp.path(), &["simulate", "--p", "1.5"])), 1);
}

#[test]
fn missing_column_is_named() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("r.tsv");
    fs::write(&path, "noteId\traterParticipantId\tcreatedAtMillis\n1\t2\t3\n").unwrap();
    let o = crowdmf(tmp.path(), &["fit", "--ratings", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("helpfulnessLevel"), "{}", stderr(&o));
}

#[test]
fn missing_input_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let o = crowdmf(tmp.path(), &["fit"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn noiseless_twostage_floors_every_weight() {
    let tmp = TempDir::new().unwrap();
    let o = crowdmf(
        tmp.path(),
        &["simulate", "--U", "30", "--N", "30", "--p", "1", "--set", "sim.sigma_eps={kind = \"constant\", sigma = 0.0}"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = crowdmf(
        tmp.path(),
        &["twostage", "--set", "fit.value_source=\"latent\"", "--set", "fit.lambda=1e-9", "--set", "fit.rel_tol=1e-14"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("twostage/weights.tsv")).unwrap();
    let weights: Vec<f64> =
        text.lines().skip(1).map(|l| l.rsplit('\t').next().unwrap().parse().unwrap()).collect();
    assert_eq!(weights.len(), 30);
    assert!(weights.iter().all(|&w| w == 1e4), "{weights:?}");
}

#[test]
fn warm_weeks_must_leave_a_week_to_score() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), &["--stream", "--set", "stream.weeks=6", "--set", "stream.notes_per_week=8"]);
    let o = crowdmf(tmp.path(), &["evaluate", "--warm-weeks", "6"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = crowdmf(tmp.path(), &["evaluate", "--warm-weeks", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let weeks = fs::read_to_string(tmp.path().join("evaluate/eval_weeks.tsv")).unwrap();
    assert!(weeks.lines().count() > 1);
}

#[test]
fn theory_self_test_fails_with_exit_three() {
    let tmp = TempDir::new().unwrap();
    let small = ["--seed", "1", "--set", "theory.seeds=1", "--set", "theory.clamp_size=150", "--set",
        "theory.share_users=150", "--set", "theory.share_notes=150"];
    let mut args = vec!["theory", "--scenario", "known_g"];
    args.extend_from_slice(&small);
    let o = crowdmf(tmp.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let claims = fs::read_to_string(tmp.path().join("theory/theory_claims.tsv")).unwrap();
    assert!(claims.lines().count() > 1);

    args.extend_from_slice(&["--self-test", "--force"]);
    let o = crowdmf(tmp.path(), &args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn analyze_reads_fit_outputs() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), &[]);
    let o = crowdmf(tmp.path(), &["fit"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let params = tmp.path().join("fit/params.tsv");
    let o = crowdmf(tmp.path(), &["analyze", "--params", params.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(tmp.path().join("analyze/analysis.tsv")).unwrap();
    assert!(table.contains("bimodality"), "{table}");
}
