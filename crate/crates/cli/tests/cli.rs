//! End-to-end checks of the `peerfed` binary: output files, exit codes,
//! seed overrides.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_peerfed");

const SMALL_SCENARIO: &str = r#"
seed = 7

[topology]
n_potential = 24
edge_probability = 0.35

[keying]
pool_size = 120
ring_size = 30
discovery = "direct"

[protocol]
n_target = 12
rounds = 2
cipher_suite = "plain"

[task]
dim = 3
"#;

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("scenario.toml");
    fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn run_writes_all_output_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SCENARIO);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--output",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("oracle_equal=true"));

    let transcript = fs::read_to_string(out_dir.join("transcript.txt")).unwrap();
    assert!(transcript.contains("forward to"), "transcript should log transfers");
    let rounds = fs::read_to_string(out_dir.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 3, "header + one line per round");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["completed_rounds"], 2);
    assert_eq!(summary["oracle_equal"], true);
    // ring-intersection discovery exchanges no challenge traffic
    assert!(!out_dir.join("challenges.bin").exists());
}

#[test]
fn seed_override_changes_the_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SCENARIO);
    let hash = |seed: &str, sub: &str| {
        let out_dir = dir.path().join(format!("out-{seed}-{sub}"));
        let out = run(&[
            "run",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--output",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap())
                .unwrap();
        summary["transcript_hash"].as_str().unwrap().to_owned()
    };
    let a = hash("41", "a");
    let b = hash("41", "b");
    let c = hash("43", "a");
    assert_eq!(a, b, "same seed must replay bit-identically");
    assert_ne!(a, c, "seed override must change the run");
}

#[test]
fn verify_oracle_exits_zero_on_honest_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SCENARIO);
    let out = run(&["verify-oracle", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("oracle match"));
}

#[test]
fn invalid_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &SMALL_SCENARIO.replace("discovery = \"direct\"", "discovery = \"psychic\""),
    );
    let out = run(&["run", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("psychic"),
        "error should name the offending value"
    );

    let missing = run(&["run", dir.path().join("nope.toml").to_str().unwrap()]);
    assert!(!missing.status.success());
}

#[test]
fn bench_reports_relative_costs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "bench",
        "--dim",
        "256",
        "--repetitions",
        "2",
        "--output",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("operation"));
    for op in ["noise_generation", "encryption", "signature", "verification"] {
        assert!(csv.contains(op), "missing {op} row");
    }
}
