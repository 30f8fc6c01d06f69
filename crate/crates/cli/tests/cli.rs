use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dlmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlmpc")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn generate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = dlmpc(&["generate", "-s", "seed=3", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("N=16 n=32 p=16"));
    }
    for f in ["model.txt", "spec.txt", "x0.txt"] {
        assert_eq!(read(a.path(), f), read(b.path(), f));
    }
}

#[test]
fn run_from_generated_instance_writes_outputs() {
    let inst = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let common = ["-s", "rows=2", "-s", "cols=3", "-s", "d=1", "-s", "T=4", "-s", "steps=3"];
    let mut args = vec!["generate"];
    args.extend(common);
    args.extend(["--out", inst.path().to_str().unwrap()]);
    assert_eq!(code(&dlmpc(&args)), 0);
    let mut args = vec!["run"];
    args.extend(common);
    args.extend(["--instance", inst.path().to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    let o = dlmpc(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let traj = read(out.path(), "trajectory.csv");
    assert!(traj.starts_with("tau,subsystem,state_index,x,u,w\n"));
    assert_eq!(traj.lines().count(), 1 + 4 * 12);
    assert!(read(out.path(), "telemetry.csv").starts_with("step,k,primal,dual\n"));
}

#[test]
fn single_subsystem_grid_runs() {
    let out = tempfile::tempdir().unwrap();
    let o = dlmpc(&["run", "-s", "rows=1", "-s", "cols=1", "-s", "steps=2", "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(code(&dlmpc(&["check", "-s", "bogus=1"])), 2);
    assert_eq!(code(&dlmpc(&["check", "-s", "d=-1"])), 2);
    assert_eq!(code(&dlmpc(&["check", "-c", "/nonexistent/cfg.txt"])), 2);
    let out = tempfile::tempdir().unwrap();
    let o = dlmpc(&["run", "--instance", "/nonexistent", "--out", out.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn infeasible_instance_exits_with_four() {
    let out = tempfile::tempdir().unwrap();
    let o = dlmpc(&[
        "run",
        "-s",
        "rows=2",
        "-s",
        "cols=2",
        "-s",
        "x0_scale=20",
        "-s",
        "steps=1",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "# small instance\nrows = 2\ncols = 2\nd = 1\nT = 3\n").unwrap();
    let o = dlmpc(&["check", "-c", cfg.to_str().unwrap(), "-s", "seed=4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
