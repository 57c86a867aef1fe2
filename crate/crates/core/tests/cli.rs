//! End-to-end checks of the command-line binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_phasefield-xpinn");

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stdout).unwrap())
}

fn last_line(s: &str) -> &str {
    s.lines().last().unwrap_or("")
}

const SMALL_BAR: &str = r#"
preset = "bar1d"
subdomains = 2

[mesh]
elements = [20, 20]

[optimizer]
warmup_steps = 50
lbfgs_max_iters = 20
"#;

const SMALL_SEN: &str = r#"
preset = "sen_tension"
subdomains = 4

[output]
grid = 11

[mesh]
elements = [2, 2, 2, 2]
interface_points = [8, 8, 8, 8]

[network]
hidden = [4]

[loading]
n_steps = 2

[refinement]
enabled = false

[optimizer]
warmup_steps = 5
lbfgs_max_iters = 5
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config_in.toml");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn validate_config_accepts_committed_configs() {
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let (code, out) = run(&["validate-config", path.to_str().unwrap()]);
        assert_eq!(code, 0, "{}: {out}", path.display());
        assert_eq!(last_line(&out), "status=ok");
    }
}

#[test]
fn unknown_key_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "preset = \"bar1d\"\n[material]\nyoung = 3.0\n");
    let (code, out) = run(&["validate-config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(last_line(&out).starts_with("status=error code="), "{out}");
}

#[test]
fn check_gradients_on_bar_is_tight() {
    let path = configs_dir().join("bar1d_2.toml");
    let (code, out) = run(&["check-gradients", path.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    let worst: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("max relative discrepancy "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(worst < 1e-5, "discrepancy {worst}");
}

#[test]
fn unwritable_output_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_BAR);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let target = blocker.join("out");
    let (code, out) = run(&["run", cfg.to_str().unwrap(), "--output", target.to_str().unwrap()]);
    assert_eq!(code, 2, "{out}");
    assert_eq!(last_line(&out), "status=error code=io");
}

#[test]
fn bar_run_writes_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_BAR);
    let out_dir = dir.path().join("out");
    let (code, out) = run(&["run", cfg.to_str().unwrap(), "--output", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    let fields = fs::read_to_string(out_dir.join("fields_1.csv")).unwrap();
    assert_eq!(fields.lines().next(), Some("x,u,phi"));
    assert_eq!(fields.lines().count(), 2002);
    let errors = fs::read_to_string(out_dir.join("errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 2);
    assert!(out_dir.join("network_0.txt").exists());
    assert!(out_dir.join("config.toml").exists());
}

#[test]
fn load_displacement_increments_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SEN);
    let out_dir = dir.path().join("out");
    let (code, out) = run(&["run", cfg.to_str().unwrap(), "--output", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    let load = fs::read_to_string(out_dir.join("load_disp.csv")).unwrap();
    let rows: Vec<Vec<String>> = load.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 2);
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row[0], (k + 1).to_string());
        let u: f64 = row[1].parse().unwrap();
        assert!((u - (k + 1) as f64 * 1e-3).abs() < 1e-15);
    }
    let fields = fs::read_to_string(out_dir.join("fields_2.csv")).unwrap();
    assert_eq!(fields.lines().count(), 1 + 11 * 11);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SEN);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out_dir = dir.path().join(format!("out{threads}"));
        let (code, out) = run(&[
            "--threads",
            threads,
            "run",
            cfg.to_str().unwrap(),
            "--output",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{out}");
        outputs.push((
            fs::read(out_dir.join("fields_2.csv")).unwrap(),
            fs::read(out_dir.join("loss_2.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn export_exact_writes_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exact.csv");
    let (code, out) = run(&["export-exact", "--output", path.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2002);
    // the middle row sits on the crack: phi = 1 there
    let mid: Vec<f64> = text.lines().nth(1001).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(mid[0], 0.0);
    assert_eq!(mid[2], 1.0);
}
