//! End-to-end runs of the `entropo` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use entropo_core::manifest::Manifest;

const FAST: &str = "[training]\nmax_iters = 200\nsft_max_iters = 300\n\n[grad_check]\ninstances = 4\n";

fn entropo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entropo")).args(args).env_remove("ENTROPO_WORKERS").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    s(&p)
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_suite_writes_instances_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&entropo(&["gen-suite", "--out", &s(&a), "--quiet"])), 0);
    assert_eq!(code(&entropo(&["gen-suite", "--out", &s(&b), "--workers", "3"])), 0);
    let m = manifest(&a);
    assert_eq!(m.files.iter().filter(|f| f.name.starts_with("instance_")).count(), 8);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn configuration_errors_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let zero = write_config(tmp.path(), "[suite]\ncount = 0\n");
    let out = entropo(&["gen-suite", "--config", &zero, "--out", &s(&tmp.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("count"));

    let unknown = write_config(tmp.path(), "[loss]\ngamma = 2.0\n");
    assert_eq!(code(&entropo(&["gen-suite", "--config", &unknown, "--out", &s(tmp.path())])), 2);
    assert_eq!(code(&entropo(&["gen-suite"])), 2, "missing --out");
    assert_eq!(code(&entropo(&["no-such-command"])), 2);
    assert_eq!(code(&entropo(&["gen-suite", "--out", &s(tmp.path()), "--workers", "0"])), 2);
}

#[test]
fn io_errors_exit_with_io_code() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    assert_eq!(code(&entropo(&["gen-suite", "--out", &s(&blocker.join("sub"))])), 3);
    assert_eq!(code(&entropo(&["oracle-check", "--suite", &s(&tmp.path().join("missing"))])), 3);
    assert_eq!(code(&entropo(&["gen-suite", "--config", &s(&tmp.path().join("none.toml")), "--out", &s(tmp.path())])), 3);
}

#[test]
fn oracle_check_passes_and_detects_perturbed_partition() {
    let tmp = tempfile::tempdir().unwrap();
    let suite = s(&tmp.path().join("suite"));
    entropo(&["gen-suite", "--out", &suite, "--quiet"]);
    let ok = entropo(&["oracle-check", "--suite", &suite, "--out", &s(&tmp.path().join("report"))]);
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8_lossy(&ok.stdout).contains("all oracle checks passed"));
    assert!(tmp.path().join("report/oracle_000.json").exists());
    let bad = entropo(&["oracle-check", "--suite", &suite, "--inject-fault", "perturb-z"]);
    assert_eq!(code(&bad), 5);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn oracle_check_on_single_turn_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[suite]\nkind = \"bandit\"\ncount = 5\nnum_actions = 6\n");
    let suite = s(&tmp.path().join("suite"));
    assert_eq!(code(&entropo(&["gen-suite", "--config", &cfg, "--out", &suite])), 0);
    let out = entropo(&["oracle-check", "--config", &cfg, "--suite", &suite]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("backward_vs_brute_force") && text.contains("closed_form_vs_simplex"));
}

#[test]
fn grad_check_passes_fails_on_injection_and_honors_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), FAST);
    let run = |seed: &str, dir: &str| {
        let out = tmp.path().join(dir);
        assert_eq!(code(&entropo(&["grad-check", "--config", &cfg, "--seed", seed, "--out", &s(&out), "--quiet"])), 0);
        fs::read(out.join("grad_report.json")).unwrap()
    };
    let (a, b, c) = (run("1", "a"), run("1", "b"), run("2", "c"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(code(&entropo(&["grad-check", "--config", &cfg, "--inject-fault"])), 5);
}

#[test]
fn train_and_compare_two_policies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{FAST}\n[tts]\nn_values = [1, 4, 16]\nsweeps = [\"scaling\"]\n"));
    let suite = s(&tmp.path().join("suite"));
    let run = s(&tmp.path().join("run"));
    entropo(&["gen-suite", "--out", &suite, "--quiet"]);
    let out = entropo(&["train", "--config", &cfg, "--suite", &suite, "--out", &run]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(Path::new(&run));
    for name in ["policy.json", "sft_policy.json", "history.csv", "kto_examples.jsonl", "verifier.json", "config.json"] {
        assert!(m.files.iter().any(|f| f.name == name), "{name} missing");
    }

    let eval = tmp.path().join("eval");
    let out = entropo(&[
        "eval-tts",
        "--config",
        &cfg,
        "--suite",
        &suite,
        "--policy",
        &format!("pref={run}/policy.json"),
        "--policy",
        &format!("{run}/sft_policy.json"),
        "--out",
        &s(&eval),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(eval.join("scaling.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().filter(|r| r.starts_with("pref,")).count() == 3);
    assert!(rows.iter().filter(|r| r.starts_with("sft_policy,")).count() == 3);
    let ns: Vec<&str> = rows[..3].iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(ns, ["1.0", "4.0", "16.0"]);
    assert!(!eval.join("temperature.csv").exists());

    let missing = entropo(&["eval-tts", "--suite", &suite, "--policy", "ghost.json", "--out", &s(&eval)]);
    assert_eq!(code(&missing), 3);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("ghost.json"));
}

#[test]
fn standard_dpo_training_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("{FAST}\n[loss]\nalpha = 0.6\nbeta = 0.6\n").replace("[training]\n", "[training]\nloss_kind = \"dpo_standard\"\n"),
    );
    let suite = s(&tmp.path().join("suite"));
    let run = tmp.path().join("run");
    entropo(&["gen-suite", "--out", &suite, "--quiet"]);
    let out = entropo(&["train", "--config", &cfg, "--suite", &suite, "--out", &s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("preference_pairs.jsonl").exists());
}

#[test]
fn worker_env_var_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_entropo"))
        .args(["gen-suite", "--out", &s(tmp.path()), "--quiet"])
        .env("ENTROPO_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
}

#[test]
fn show_config_round_trips() {
    let out = entropo(&["show-config", "--seed", "9"]);
    assert_eq!(code(&out), 0);
    let parsed = entropo_core::cli::RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(parsed.seed, 9);
}
