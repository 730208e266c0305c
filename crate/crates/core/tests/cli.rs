use std::path::Path;
use std::process::{Command, Output};

use motab::policy::fixtures;
use motab::policy::stub::StubServer;

fn motab(args: &[&str], envs: &[(&str, &str)]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motab"))
        .args(args)
        .envs(envs.iter().copied())
        .env("MOTAB_LOG", "error")
        .output()
        .expect("run motab")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TAB: [&str; 4] = ["--student", "tabular:delayed-student", "--teacher", "tabular:delayed-teacher"];

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.jsonl");
    assert_eq!(code(&motab(&["synth", "--bogus"], &[])), 2);
    assert_eq!(code(&motab(&["--help"], &[])), 0);

    let mut args = vec!["synth", "--demo-questions", "1", "-o", p(&out), "--gamma0", "1.5"];
    args.extend(TAB);
    assert_eq!(code(&motab(&args, &[])), 2);

    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "gamma0 = 0.2\nteacher_auth_token = sk-should-not-be-here\n").unwrap();
    let mut args = vec!["synth", "--demo-questions", "1", "-o", p(&out), "--config", p(&cfg)];
    args.extend(TAB);
    let o = motab(&args, &[]);
    assert_eq!(code(&o), 2);
    assert!(!stderr(&o).contains("sk-should-not-be-here"));
    assert!(!out.exists());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.jsonl");
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# delayed fixture\ngamma0 = 0.2\nseed = 5\nsamples_per_question = 1\n").unwrap();
    let mut args = vec!["synth", "--demo-questions", "2", "-o", p(&out), "--config", p(&cfg), "--seed", "6"];
    args.extend(TAB);
    let o = motab(&args, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("gamma0 = 0.2") && err.contains("seed = 6"), "{err}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 6);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);
}

#[test]
fn validate_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.jsonl");
    let mut args = vec!["synth", "--demo-questions", "3", "-n", "2", "-o", p(&out)];
    args.extend(TAB);
    assert_eq!(code(&motab(&args, &[])), 0);
    assert_eq!(code(&motab(&["validate", "-i", p(&out)], &[])), 0);

    let stats_dir = dir.path().join("stats");
    let o = motab(&["stats", "-i", p(&out), "--out-dir", p(&stats_dir)], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(stats_dir.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["total"], 6);
    assert!(stats_dir.join("depth.tsv").exists());

    // A revised flag that disagrees with the rest of the record.
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    rec["revised"] = serde_json::Value::Bool(!rec["revised"].as_bool().unwrap());
    lines[0] = rec.to_string();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, lines.join("\n") + "\n").unwrap();
    assert_eq!(code(&motab(&["validate", "-i", p(&bad)], &[])), 1);

    let dup = dir.path().join("dup.jsonl");
    std::fs::write(&dup, format!("{}\n{}\n", text.lines().next().unwrap(), text)).unwrap();
    assert_eq!(code(&motab(&["validate", "-i", p(&dup)], &[])), 1);
}

#[test]
fn skd_baseline_has_no_revisions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("skd.jsonl");
    let mut args = vec!["baseline", "--method", "skd", "--beta", "0.6", "--demo-questions", "3", "-o", p(&out)];
    args.extend(TAB);
    let o = motab(&args, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 15);
    assert!(!text.contains("However,"));
    assert_eq!(code(&motab(&["validate", "-i", p(&out)], &[])), 0);
}

#[test]
fn remote_teacher_through_stub_with_redacted_token() {
    let (_, teacher) = fixtures::delayed_pair();
    let stub = StubServer::with_policy(teacher).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    let url = stub.base_url();
    let args = [
        "synth", "--student", "tabular:delayed-student", "--teacher", "remote", "--teacher-url", &url,
        "--teacher-model", "stub", "--teacher-auth-env", "MOTAB_TEST_TEACHER_TOKEN", "--demo-questions", "1",
        "-n", "1", "--max-retries", "0", "-o", p(&out),
    ];
    let o = motab(&args, &[("MOTAB_TEST_TEACHER_TOKEN", "sk-secret-value")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(!err.contains("sk-secret-value"), "{err}");
    assert!(err.contains("$MOTAB_TEST_TEACHER_TOKEN (set, redacted)"), "{err}");
    let manifest = std::fs::read_to_string(dir.path().join("r.jsonl.manifest.json")).unwrap();
    assert!(!manifest.contains("sk-secret-value"));

    let reqs = stub.requests();
    assert!(!reqs.is_empty());
    assert!(reqs.iter().all(|r| r.header("authorization") == Some("Bearer sk-secret-value")));
    let rec: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(rec["revised"], true, "{rec}");
    assert_eq!(rec["unsafe_step"], 5);
    assert_eq!(rec["backtrack_point"], 3);
}

#[test]
fn unreachable_backend_is_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f.jsonl");
    let args = [
        "synth", "--student", "tabular:delayed-student", "--teacher", "remote", "--teacher-url",
        "http://127.0.0.1:9/v1", "--teacher-model", "m", "--max-retries", "0", "--request-timeout", "2",
        "--demo-questions", "1", "-n", "1", "-o", p(&out),
    ];
    let o = motab(&args, &[]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let failures = std::fs::read_to_string(dir.path().join("f.jsonl.failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 1);
}
