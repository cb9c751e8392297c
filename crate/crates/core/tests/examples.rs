//! Runs every crate example with small arguments and checks a line of its
//! output.

use std::process::Command;

fn run_example(name: &str, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO"))
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .args(["run", "--quiet", "--example", name, "--"])
        .args(args)
        .output()
        .expect("cargo runs");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "{name} failed\n{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

#[test]
fn simulate_kernel() {
    let out = run_example("simulate_kernel", &["2000", "200"]);
    assert!(out.contains("worst deviation"), "{out}");
}

#[test]
fn toy_dataset() {
    let out = run_example("toy_dataset", &["20"]);
    assert!(out.contains("20 utterances"), "{out}");
}

#[test]
fn train_toy() {
    let out = run_example("train_toy", &["16"]);
    assert!(out.contains("resumable state at step 16"), "{out}");
}

#[test]
fn embedding_bank() {
    let out = run_example("embedding_bank", &[]);
    assert!(out.contains("matches a re-average"), "{out}");
}

#[test]
fn reverse_solve() {
    let out = run_example("reverse_solve", &["200", "50"]);
    assert!(out.contains("sqrt: mean") && out.contains("beta: mean"), "{out}");
}

#[test]
fn evaluate_metrics() {
    let out = run_example("evaluate_metrics", &[]);
    assert!(out.contains("| target bin |") && out.contains("Spearman"), "{out}");
}

#[test]
fn mel_round_trip() {
    let out = run_example("mel_round_trip", &[]);
    assert!(out.contains("per-frame correlation"), "{out}");
}

#[test]
fn run_config() {
    let out = run_example("run_config", &["seeds.master=3"]);
    assert!(out.contains("master = 3") && out.contains("rejected typo"), "{out}");
}

#[test]
fn toy_conversion() {
    let out = run_example("toy_conversion", &["20"]);
    assert!(out.contains("per-source spearman"), "{out}");
}
