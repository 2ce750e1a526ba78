//! Exit-code and surface checks against the compiled `diffinv` binary.

use std::path::Path;
use std::process::{Command, Output};

use diffinv_cli::fixtures::write_demo_dataset;

fn diffinv(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffinv"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = diffinv(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    for cmd in ["invert", "generate", "run", "evaluate", "grid", "sample"] {
        assert!(text.contains(cmd), "help is missing `{cmd}`:\n{text}");
    }
    for flag in ["--config", "--seed", "--force", "--backend", "--alpha", "--tokens"] {
        assert!(text.contains(flag), "help is missing `{flag}`:\n{text}");
    }
    let sub = diffinv(&["generate", "--help"], dir.path());
    let sub_text = String::from_utf8_lossy(&sub.stdout).into_owned();
    for flag in ["--lambda-tc", "--lambda-clip", "--reverse"] {
        assert!(sub_text.contains(flag), "generate help is missing `{flag}`:\n{sub_text}");
    }
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[optim]\nlerning_rate = 0.1\n").unwrap();
    let out = diffinv(&["sample", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("configuration error"));
}

#[test]
fn invalid_override_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_demo_dataset(&dir.path().join("data"), &[2], None, 1).unwrap();
    let out = diffinv(
        &["run", "--dataset", manifest.to_str().unwrap(), "--alpha", "1.5"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn missing_dataset_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = diffinv(&["sample"], dir.path());
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("dataset"));
}

#[test]
fn generate_before_invert_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_demo_dataset(&dir.path().join("data"), &[2], None, 2).unwrap();
    let out = diffinv(
        &["generate", "--dataset", manifest.to_str().unwrap(), "--count", "1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("missing artifact"));
}

#[test]
fn recognized_but_unavailable_backend_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_demo_dataset(&dir.path().join("data"), &[2], None, 3).unwrap();
    let out = diffinv(
        &[
            "invert",
            "--dataset",
            manifest.to_str().unwrap(),
            "--count",
            "1",
            "--backend",
            "sd21",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("not available"));
}

#[test]
fn unknown_backend_name_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_demo_dataset(&dir.path().join("data"), &[2], None, 4).unwrap();
    let out = diffinv(
        &[
            "invert",
            "--dataset",
            manifest.to_str().unwrap(),
            "--count",
            "1",
            "--backend",
            "flux",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("unknown backend"));
}

#[test]
fn divergence_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_demo_dataset(&dir.path().join("data"), &[2], None, 5).unwrap();
    std::fs::write(
        dir.path().join("explode.toml"),
        format!(
            "[optim]\niterations = 10\nlearning_rate = 1e200\n\n[eval]\ncount = 1\ndataset = \"{}\"\n",
            manifest.display()
        ),
    )
    .unwrap();
    let out = diffinv(&["run", "--config", "explode.toml"], dir.path());
    assert_eq!(out.status.code(), Some(5), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn successful_run_exits_0_and_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_demo_dataset(&dir.path().join("data"), &[2], None, 6).unwrap();
    std::fs::write(
        dir.path().join("fast.toml"),
        format!(
            "[optim]\niterations = 10\n\n[pipeline]\nsteps = 4\n\n[eval]\ncount = 1\ndataset = \"{}\"\n",
            manifest.display()
        ),
    )
    .unwrap();
    let out = diffinv(&["run", "--config", "fast.toml"], dir.path());
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("triplet_id"), "no score table:\n{text}");
    assert!(text.contains("complete"), "no summary line:\n{text}");
}

#[test]
fn sample_reports_singleton_skips() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_demo_dataset(&dir.path().join("data"), &[2, 1], None, 8).unwrap();
    let out = diffinv(&["sample", "--dataset", manifest.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("1 singleton pair(s) skipped"), "{text}");
}
