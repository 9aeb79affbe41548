use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecvgpo-lab")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("lab.toml");
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

#[test]
fn train_writes_outputs_then_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nsteps = 5\n[experiment]\ncheckpoint_every = 5\n");
    let out = tmp.path().join("run");
    let out_s = out.display().to_string();
    let first = lab(&["train", "--config", &cfg, "--out", &out_s]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(String::from_utf8_lossy(&first.stdout).starts_with("steps=5 "));
    for f in ["telemetry.csv", "policy_step000000.txt", "policy_step000005.txt", "policy_final.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    let again = lab(&["train", "--config", &cfg, "--out", &out_s]);
    assert_eq!(again.status.code(), Some(1));
    let err = stderr(&again);
    assert!(err.starts_with("error kind=output_exists msg="), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let forced = lab(&["train", "--config", &cfg, "--out", &out_s, "--overwrite"]);
    assert!(forced.status.success(), "{}", stderr(&forced));

    let report = tmp.path().join("report").display().to_string();
    let r = lab(&["report", &out.join("telemetry.csv").display().to_string(), "--out", &report]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(tmp.path().join("report/summary.txt").exists());
}

#[test]
fn config_errors_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nlearnig_rate = 0.1\n");
    let o = lab(&["train", "--config", &cfg, "--out", &tmp.path().join("x").display().to_string()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error kind=invalid_config msg="), "{err}");
    assert!(err.contains("train.learnig_rate"), "{err}");
}

#[test]
fn missing_output_directory_is_a_config_error() {
    let o = lab(&["verify-theorem"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("experiment.out"));
}

#[test]
fn bad_seed_list_is_rejected() {
    let o = lab(&["compare-rewards", "--seeds", "5..2", "--out", "unused"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--seeds"), "{}", stderr(&o));
}

#[test]
fn verify_theorem_prints_decay_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lab(&["verify-theorem", "--out", &tmp.path().display().to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let ratio: f64 = stdout.split("decay_ratio=").nth(1).unwrap().trim().parse().unwrap();
    assert!((3.5..=4.5).contains(&ratio));
    assert!(tmp.path().join("theorem.json").exists());
}
