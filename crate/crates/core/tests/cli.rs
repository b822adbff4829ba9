use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn smatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smatch"))
        .args(args)
        .env_remove("SMATCH_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = smatch(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Temp directory holding a generated reference dataset at `data.csv`.
fn workspace(n: usize) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let n = n.to_string();
    ok(&["generate", "--n", &n, "--seed", "3", "--out-dir", s(dir.path())]);
    let data = dir.path().join("data.csv");
    (dir, data)
}

const DATA: [&str; 4] = ["--covariate-cols", "x1,x2", "--response-col", "y"];

fn with_data<'a>(cmd: &'a str, data: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--input", s(data), "--out-dir", s(out)];
    v.extend(DATA);
    v.extend(extra);
    v
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn glm_score_writes_k_minus_one_columns() {
    let (dir, data) = workspace(400);
    let out = dir.path().join("score");
    ok(&with_data("score", &data, &out, &["--model", "glm", "--pivot", "t1"]));
    let csv = read(&out.join("scores.csv"));
    let rows = data_rows(&csv);
    assert_eq!(rows[0], "id,pivot_label,s_log_1,s_log_2");
    assert_eq!(rows.len(), 401);
    assert!(rows[1..].iter().all(|r| r.split(',').nth(1) == Some("t1")));
    assert!(csv.starts_with("# smatch"));
    let json: serde_json::Value = serde_json::from_str(&read(&out.join("scores.json"))).unwrap();
    assert_eq!(json["metadata"]["command"], "score");
}

#[test]
fn unknown_model_is_a_usage_error() {
    let (dir, data) = workspace(100);
    let out = smatch(&with_data("score", &data, dir.path(), &["--model", "foo"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn every_command_is_deterministic() {
    let (dir, data) = workspace(300);
    // Both passes write to the same place: paths are echoed in the metadata.
    let out = dir.path().join("out");
    let run = || -> Vec<(String, String)> {
        ok(&with_data("score", &data, &out, &["--model", "ratio", "--ratio-centers", "40"]));
        ok(&with_data("match", &data, &out, &["--all-pivots", "--select-best", "sup"]));
        let mf = out.join("matches.json");
        ok(&with_data("estimate", &data, &out, &["--match-file", s(&mf)]));
        ok(&with_data("diagnose", &data, &out, &["--match-file", s(&mf)]));
        ok(&["simulate", "--n", "150", "--reps", "3", "--seed", "5", "--out-dir", s(&out)]);
        ok(&["generate", "--n", "50", "--seed", "5", "--out-dir", s(&out)]);
        let mut files: Vec<_> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), read(&p))
            })
            .collect();
        files.sort();
        files
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), 11, "{:?}", a.iter().map(|f| &f.0).collect::<Vec<_>>());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x, y);
    }
}

#[test]
fn all_pivots_names_the_selected_pivot() {
    let (dir, data) = workspace(300);
    let out = ok(&with_data("match", &data, dir.path(), &["--all-pivots", "--select-best", "euclidean"]));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("selected pivot:"), "{stderr}");
    let json: serde_json::Value = serde_json::from_str(&read(&dir.path().join("matches.json"))).unwrap();
    let sel = json["selected_pivot"].as_str().unwrap();
    assert!(["t1", "t2", "t3"].contains(&sel));
    assert!(stderr.contains(&format!("selected pivot: {sel}")));
    assert_eq!(json["pivot_criteria"].as_object().unwrap().len(), 3);
}

#[test]
fn zero_caliper_runs_and_warns() {
    let (dir, data) = workspace(200);
    let out = ok(&with_data("match", &data, dir.path(), &["--caliper", "0"]));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning"), "{stderr}");
    assert!(stderr.contains("unmatched"), "{stderr}");
}

#[test]
fn brute_force_search_writes_identical_matches() {
    let (dir, data) = workspace(500);
    let a = dir.path().join("tree");
    let b = dir.path().join("scan");
    ok(&with_data("match", &data, &a, &["--ratio-k", "2", "--no-replacement"]));
    ok(&with_data("match", &data, &b, &["--ratio-k", "2", "--no-replacement", "--brute-force"]));
    assert_eq!(data_rows(&read(&a.join("matches.csv"))), data_rows(&read(&b.join("matches.csv"))));
}

#[test]
fn missing_match_file_is_an_input_error() {
    let (dir, data) = workspace(100);
    let missing = dir.path().join("nope.json");
    let out = smatch(&with_data("estimate", &data, dir.path(), &["--match-file", s(&missing)]));
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("effects.csv").exists());
}

#[test]
fn malformed_scenario_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"k": 3, "p": 2}"#).unwrap();
    let out = smatch(&["simulate", "--scenario", s(&bad), "--reps", "1", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_replication_smoke() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["simulate", "--n", "200", "--reps", "1", "--out-dir", s(dir.path()), "--format", "json"]);
    let json: serde_json::Value = serde_json::from_str(&read(&dir.path().join("experiment.json"))).unwrap();
    assert_eq!(json["report"]["completed"], 1);
    assert_eq!(json["report"]["pairs"].as_array().unwrap().len(), 3);
    assert!(!dir.path().join("experiment.csv").exists());
}

#[test]
fn estimate_reports_dose_steps() {
    let (dir, data) = workspace(600);
    ok(&with_data("match", &data, dir.path(), &[]));
    let mf = dir.path().join("matches.json");
    ok(&with_data("estimate", &data, dir.path(), &["--match-file", s(&mf), "--dose-order", "t1,t2,t3"]));
    let csv = read(&dir.path().join("effects.csv"));
    assert!(csv.contains("dose_step"));
    assert!(csv.contains("t2-t1"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let (dir, data) = workspace(200);
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# generated\nmodel = glm\nseed = 9\nformat = json\nbrute-force = true\n").unwrap();
    let out = dir.path().join("cfg");
    ok(&[&["--config", s(&cfg)][..], &with_data("match", &data, &out, &["--format", "csv"])].concat());
    let csv = read(&out.join("matches.csv"));
    assert!(csv.contains("# seed: 9"), "{csv}");
    assert!(csv.contains("# brute_force: true"), "{csv}");
    // The command line asked for csv only; the JSON match file is always written.
    assert!(out.join("matches.json").exists());

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "no equals sign\n").unwrap();
    let res = smatch(&[&["--config", s(&bad)][..], &with_data("match", &data, &out, &[])].concat());
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, env: Option<&str>| {
        let out = dir.path().join(sub);
        let mut c = Command::new(env!("CARGO_BIN_EXE_smatch"));
        c.args(["generate", "--n", "30", "--out-dir", s(&out)]);
        match env {
            Some(v) => c.env("SMATCH_SEED", v),
            None => c.env_remove("SMATCH_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        read(&out.join("data.csv"))
    };
    let from_env = run("env", Some("41"));
    assert!(from_env.contains("# seed: 41"));
    let default = run("default", None);
    assert!(default.contains("# seed: 0"));
    assert_ne!(data_rows(&from_env), data_rows(&default));
    ok(&["generate", "--n", "30", "--seed", "41", "--out-dir", s(&dir.path().join("flag"))]);
    assert_eq!(read(&dir.path().join("flag/data.csv")), from_env);
}
