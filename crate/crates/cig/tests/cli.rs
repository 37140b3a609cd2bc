//! End-to-end CLI behavior: exit codes, output contracts, determinism.

use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cig"))
}

const SMOKE_CONFIG: &str = r#"
method = "cig"
seeds = [3]
budget_steps = 80

[env]
kind = "corridor"
size = 6

[ensemble]
m = 2
width = 4
lr = 0.05

[planner]
horizon = 2
n_candidates = 2
prefill = 40
train_every = 10
updates_per_train = 1
batch_size = 8
buffer_capacity = 256
log_every = 40
"#;

#[test]
fn demo_prints_the_decomposition_story() {
    let out = bin().arg("demo").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Cholesky factor L"));
    // The duplicated step is discounted from the diagonal-only value to the
    // closed form ln(ridge * (2 - ridge / (K_tt + ridge))).
    assert!(text.contains("-0.867501"), "frontier reward missing:\n{text}");
    assert!(text.contains("-1.736190"), "duplicated-step discount missing:\n{text}");
    // The orthogonal step keeps its diagonal value in both columns.
    assert!(text.contains("-1.078810"));
}

#[test]
fn verify_quick_json_is_machine_readable_and_passes() {
    let out = bin().args(["verify", "--quick", "--json", "--seed", "3"]).output().unwrap();
    assert!(out.status.success());
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 7);
    for r in reports {
        assert_eq!(r["pass"], true, "{r}");
        assert!(r["instances"].as_u64().unwrap() > 0);
    }
}

#[test]
fn run_writes_files_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(&config, SMOKE_CONFIG).unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out_dir in [&out_a, &out_b] {
        let out = bin()
            .arg("run")
            .arg(&config)
            .arg("--out")
            .arg(out_dir)
            .args(["--bootstrap", "100"])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "stdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for name in ["cig_corridor6_s3.summary.csv", "cig_corridor6_s3.events.jsonl", "aggregate.csv"]
    {
        let a = fs::read(out_a.join(name)).unwrap();
        let b = fs::read(out_b.join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} not byte-identical across reruns");
    }
    let summary = fs::read_to_string(out_a.join("cig_corridor6_s3.summary.csv")).unwrap();
    assert!(summary.starts_with(
        "run_id,method,env,seed,env_steps,coverage,mean_reward,sigma2,mean_lifelong,\
         mean_prefix_explained,episode_entropy"
    ));
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("broken.toml");
    fs::write(&config, "method = \"cig\"\nseeds = [0]\nbudget_steps = 10\nwat = 1\n").unwrap();
    let out = bin()
        .arg("run")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn help_exits_zero_and_unknown_flag_exits_one() {
    let help = bin().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    let unknown = bin().args(["verify", "--frobnicate"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn reward_replays_a_dumped_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let rollout = dir.path().join("rollout.jsonl");
    // Two members, two steps, one feature dimension: deviations are +/-1 at
    // step 0 and +/-0.5 at step 1, so K = [[1, 0.5], [0.5, 0.25]] and with
    // sigma2 = 0.5 the ridge is 0.5.
    fs::write(
        &rollout,
        "{\"member_predictions\": [[[1.0],[0.5]],[[-1.0],[-0.5]]], \"sigma2\": 0.5}\n",
    )
    .unwrap();
    let out = bin().arg("reward").arg(&rollout).output().unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rewards = line["cig"]["rewards"].as_array().unwrap();
    assert_eq!(rewards.len(), 2);
    // Ridged kernel [[1.5, 0.5], [0.5, 0.75]]: the step-1 Schur complement is
    // 0.75 - 0.5^2 / 1.5 = 7/12.
    assert!((rewards[0].as_f64().unwrap() - 1.5f64.ln()).abs() < 1e-12);
    assert!((rewards[1].as_f64().unwrap() - (7.0 / 12.0f64).ln()).abs() < 1e-12);
    assert_eq!(line["cig"]["ridge"].as_f64().unwrap(), 0.5);
    for variant in ["cig_no_prefix", "cig_lifelong_only", "cig_no_trace"] {
        assert!(line[variant]["rewards"].is_array(), "missing {variant}");
    }

    let broken = dir.path().join("broken.jsonl");
    fs::write(&broken, "{\"member_predictions\": [[[1.0],[0.0]]], \"sigma2\": 0.5}\n").unwrap();
    let out = bin().arg("reward").arg(&broken).output().unwrap();
    // A single member cannot define disagreement: validation failure.
    assert_eq!(out.status.code(), Some(1));
}
