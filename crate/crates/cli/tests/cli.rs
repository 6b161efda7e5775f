use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_almcmdp"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("almcmdp-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn qualifying_run_exits_zero_and_writes_outputs() {
    let dir = scratch("ok");
    let config = write_config(
        &dir,
        "environment = \"deep-sea-treasure\"\nalgorithms = [\"pqa-alm\"]\n[grid]\nprimal_step = [1.0]\n",
    );
    let out = dir.join("out");
    let status = bin().args(["run", "--config"]).arg(&config).arg("--out").arg(&out).output().unwrap().status;
    assert_eq!(status.code(), Some(0));
    for file in ["summary.csv", "selection.txt", "gap_vs_iter.svg", "violation_vs_grads.svg"] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    assert!(out.join("runs/run_000_pqa-alm.csv").is_file());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn no_qualifying_configuration_exits_two() {
    let dir = scratch("none");
    // One outer iteration with one tiny inner step cannot reach the constraint.
    let config = write_config(
        &dir,
        "environment = \"cliff-world\"\nalgorithms = [\"pqa-alm\"]\nselection_tolerance = 1e-9\n[grid]\nouter_iters = [1]\ninner_iters = [1]\nprimal_step = [0.001]\n",
    );
    let output = bin().args(["run", "--config"]).arg(&config).arg("--out").arg(dir.join("out")).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stdout).contains("no qualifying configuration"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn bad_config_exits_one() {
    let dir = scratch("bad");
    let config = write_config(&dir, "environment = \"cliff-world\"\nalgorithms = [\"pqa-alm\"]\nselection_tolerance = -1.0\n");
    let output = bin().args(["run", "--config"]).arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("selection_tolerance"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn oracle_prints_optimum_and_multiplier() {
    let output = bin().args(["oracle", "--env", "cliff-world"]).output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("V* = 0.4192"));
    assert!(text.contains("lambda* = ") && text.contains("slater margin = "));
}

#[test]
fn export_env_writes_model_and_map() {
    let dir = scratch("export");
    let status = bin().args(["export-env", "deep-sea-treasure", "--out"]).arg(&dir).output().unwrap().status;
    assert!(status.success());
    let model = almcmdp::cmdp::TabularCmdp::load(dir.join("deep-sea-treasure.json")).unwrap();
    assert_eq!(model, almcmdp::envs::deep_sea_treasure().0);
    let map = std::fs::read_to_string(dir.join("deep-sea-treasure.txt")).unwrap();
    assert!(map.starts_with("S....\n"));
    std::fs::remove_dir_all(&dir).unwrap();
}
