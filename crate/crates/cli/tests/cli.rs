use std::path::Path;
use std::process::{Command, Output};

fn arzdelay(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_arzdelay"));
    cmd.args(args).env_remove("ARZDELAY_OUT_DIR");
    if let Some(dir) = env_out {
        cmd.env("ARZDELAY_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SHORT: &str = "[simulation]\nt_final = \"10 s\"\n[output]\nlabel = \"short\"\nmetrics_horizon = \"10 s\"\n";

#[test]
fn run_writes_traces_under_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short.toml", SHORT);
    let out = dir.path().join("results");
    let o = arzdelay(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["snapshots.csv", "norms.csv", "events.csv", "metrics.csv", "manifest.toml"] {
        assert!(out.join("short").join(f).is_file(), "{f}");
    }
    let norms = std::fs::read_to_string(out.join("short/norms.csv")).unwrap();
    assert!(norms.starts_with("t,l2_rho,l2_v,l2_hacc,V0,V1,V2\n"));
}

#[test]
fn environment_selects_the_default_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short.toml", SHORT);
    let env_dir = dir.path().join("from_env");
    let o = arzdelay(&["run", "--config", &cfg], Some(&env_dir));
    assert_eq!(o.status.code(), Some(0));
    assert!(env_dir.join("short/manifest.toml").is_file());
}

#[test]
fn validation_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad_delay = write_config(dir.path(), "delay.toml", "[simulation]\nd_actual = \"4.3 s\"\n");
    let unknown = write_config(dir.path(), "unknown.toml", "[model]\nspeed_limit = 3\n");
    let cfl = write_config(dir.path(), "cfl.toml", "[simulation]\ndt = \"2 s\"\nd_actual = \"4 s\"\n");
    for cfg in [bad_delay, unknown, cfl] {
        let o = arzdelay(&["run", "--config", &cfg, "--out", out], None);
        assert_eq!(o.status.code(), Some(1), "{cfg}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
}

#[test]
fn unreadable_config_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = arzdelay(&["run", "--config", missing.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn runaway_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "runaway.toml",
        "[control]\nmode = \"open-loop\"\n[simulation]\nt_final = \"50 s\"\nrunaway_factor = 1.001\n[output]\nmetrics_horizon = \"0 s\"\n",
    );
    let o = arzdelay(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_with_one_and_help_with_zero() {
    assert_eq!(arzdelay(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(arzdelay(&["run"], None).status.code(), Some(1));
    assert_eq!(arzdelay(&["--help"], None).status.code(), Some(0));
}

#[test]
fn sweep_records_failures_and_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.toml",
        "[simulation]\nt_final = \"5 s\"\n[output]\nlabel = \"sw\"\nmetrics_horizon = \"0 s\"\n",
    );
    let out = dir.path().to_str().unwrap();
    let o = arzdelay(&["sweep", "--config", &cfg, "--axis", "D_actual", "--values", "3,4", "--out", out], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("sw_d_actual_3/norms.csv").is_file());
    assert!(dir.path().join("sw_sweep_summary.csv").is_file());

    let o = arzdelay(&["sweep", "--config", &cfg, "--axis", "d_actual", "--values", "3,4.3", "--out", out], None);
    assert_eq!(o.status.code(), Some(1));
    let summary = std::fs::read_to_string(dir.path().join("sw_sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);

    let o = arzdelay(&["sweep", "--config", &cfg, "--axis", "d_actual", "--values", "", "--out", out], None);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn verify_kernels_passes_on_the_default_profile() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "k.toml", "[output]\nlabel = \"k\"\n");
    let o = arzdelay(&["verify-kernels", "--config", &cfg, "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("k_kernels/kernel_slice.csv").is_file());
}

#[test]
fn verify_transform_exit_code_follows_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.toml", "[output]\nlabel = \"t\"\n[verify]\ntransform_states = 10\n");
    let o = arzdelay(&["verify-transform", "--config", &cfg, "--out", dir.path().to_str().unwrap()], None);
    let report = std::fs::read_to_string(dir.path().join("t_transform/transform_report.csv")).unwrap();
    let all_pass = report.lines().skip(1).all(|l| l.ends_with(",true"));
    assert_eq!(o.status.code(), Some(if all_pass { 0 } else { 1 }));
    assert!(dir.path().join("t_transform/round_trip.csv").is_file());
}
