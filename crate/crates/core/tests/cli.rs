use std::path::Path;
use std::process::{Command, Output};

use stmpc::config::BATCH_REACTOR;

fn stmpc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stmpc")).args(args).current_dir(dir).env("STMPC_THREADS", "2").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SCALAR: &str = "\
[plant]
A = 0.5
B = 1
[cost]
Q = 1
R = 1
[network]
g = 1
c = 1
b = 4
[mpc]
N = 2
P = 0
delta_max = 1
[sim]
x0 = [1]
T = 10
";

fn write(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

#[test]
fn synth_then_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "br.cfg", BATCH_REACTOR);
    let out = stmpc(&["synth", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("synth PASS"));
    assert!(dir.path().join("o/ingredients.cfg").exists());
    let out = stmpc(&["verify", "--config", &cfg, "--ingredients", "o/ingredients.cfg"], dir.path());
    assert_eq!(code(&out), 0, "{}", stdout(&out));
}

#[test]
fn synth_reports_infeasible_terminal_design() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", &SCALAR.replace("A = 0.5", "A = 2").replace("B = 1", "B = 0"));
    let out = stmpc(&["synth", "--config", &cfg], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
}

#[test]
fn malformed_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "junk.cfg", "[plant]\nA = [1 2\n");
    assert_eq!(code(&stmpc(&["synth", "--config", &cfg], dir.path())), 1);
    assert_eq!(code(&stmpc(&["synth", "--config", "missing.cfg"], dir.path())), 1);
    let unknown = write(dir.path(), "unknown.cfg", &SCALAR.replace("T = 10", "T = 10\nhorizon = 3"));
    assert_eq!(code(&stmpc(&["synth", "--config", &unknown], dir.path())), 1);
    assert_eq!(code(&stmpc(&["simulate"], dir.path())), 1);
}

#[test]
fn verify_flags_a_halved_terminal_cost() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", SCALAR);
    let ok = write(dir.path(), "ok.cfg", "[ingredients]\nK_f = 0\nP_f = 2\nperiod = 1\nloss_bound = 0\n");
    assert_eq!(code(&stmpc(&["verify", "--config", &cfg, "--ingredients", &ok], dir.path())), 0);
    let half = write(dir.path(), "half.cfg", "[ingredients]\nK_f = 0\nP_f = 1\nperiod = 1\nloss_bound = 0\n");
    let out = stmpc(&["verify", "--config", &cfg, "--ingredients", &half], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stdout(&out).contains("+2.500000e-1"), "{}", stdout(&out));
    let wide = write(dir.path(), "wide.cfg", "[ingredients]\nK_f = [0 0]\nP_f = [1 0; 0 1]\nperiod = 1\nloss_bound = 0\n");
    assert_eq!(code(&stmpc(&["verify", "--config", &cfg, "--ingredients", &wide], dir.path())), 1);
}

#[test]
fn simulate_writes_trace_summary_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", SCALAR);
    let out = stmpc(&["simulate", "--config", &cfg, "--out", "run", "--loss", "script:1"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["robust.csv", "robust_diagnostics.csv", "robust.gp", "robust_summary.txt"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    let summary = std::fs::read_to_string(dir.path().join("run/robust_summary.txt")).unwrap();
    assert!(summary.contains("invariants=PASS"), "{summary}");
    let out = stmpc(&["simulate", "--config", &cfg, "--out", "run", "--nominal"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("run/nominal.csv").exists());
}

#[test]
fn simulate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", SCALAR);
    assert_eq!(code(&stmpc(&["simulate", "--config", &cfg, "--steps", "0"], dir.path())), 1);
    // P = 0 cannot absorb a single loss
    assert_eq!(code(&stmpc(&["simulate", "--config", &cfg, "--loss", "script:10"], dir.path())), 4);
    let boxed = SCALAR.replace("delta_max = 1", "delta_max = 1\nX_H = [1; -1]\nX_h = [1; 1]").replace("x0 = [1]", "x0 = [5]");
    let boxed = write(dir.path(), "boxed.cfg", &boxed);
    let out = stmpc(&["simulate", "--config", &boxed], dir.path());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
